import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import cholesky, solve_triangular

from gramsynth import gramian as gm
from gramsynth.errors import GridMismatch, NotBaselineModel, NotInRange
from gramsynth.flow import ControlGrid

from conftest import hopfield_model, make_model, random_hopfield

STEP = 1e-3


@pytest.fixture
def planar_free():
    return make_model(["0", "0"], [["1"], ["0"]], d=2, lambda1=0.0)


@pytest.mark.parametrize("which", [1, 2])
def test_integrator_gramian_is_one(integrator, which):
    rep = gm.zero_reference_gramian(integrator, [0.0], which, STEP, nodes=11)
    np.testing.assert_allclose(rep.matrix, [[1.0]], atol=1e-14)
    assert rep.coercive and rep.coercive_for == pytest.approx(1.0)


def test_scalar_linear_closed_form(scalar_linear):
    rep = gm.zero_reference_gramian(scalar_linear, [0.3], 2, STEP, nodes=2001)
    assert rep.matrix[0, 0] == pytest.approx((math.e**2 - 1) / 2, abs=1e-6)


def test_rank_deficient(planar_free):
    rep = gm.zero_reference_gramian(planar_free, [0, 0], 2, STEP, nodes=11)
    np.testing.assert_allclose(rep.matrix, np.diag([1.0, 0.0]), atol=1e-14)
    assert rep.lambda_min == 0.0 and not rep.coercive and rep.coercive_for is None
    assert rep.rank == 1 and rep.lambda_star_min == pytest.approx(1.0)


def test_report_serializes(planar_free):
    out = gm.zero_reference_gramian(planar_free, [0, 0], 1, STEP, nodes=11).to_dict()
    assert out["which"] == 1 and out["eigenvalues"] == sorted(out["eigenvalues"])
    assert out["quadrature"]["nodes"] == 11


@pytest.mark.parametrize("w21, reachable", [(0.8, True), (0.0, False)])
def test_hopfield_reachability_structure(w21, reachable):
    m = hopfield_model([1.0, 1.0], [[0.5, 0.0], [w21, 0.5]], [["1"], ["0"]])
    rep = gm.zero_reference_gramian(m, [0.2, -0.1], 2, STEP, nodes=201)
    if reachable:
        assert rep.lambda_min > 1e-4
    else:
        assert abs(rep.lambda_min) <= 1e-12 * rep.lambda_max


def test_lyapunov_scalar(scalar_linear):
    assert gm.lyapunov_w2(scalar_linear, [0.0], STEP)[0, 0] == pytest.approx((math.e**2 - 1) / 2, abs=1e-8)


def test_lyapunov_integrator(integrator):
    m = make_model(["0"], [["1"]], lambda1=0.0, t0=0.5, T=2.0)
    assert gm.lyapunov_w2(m, [0.0], STEP)[0, 0] == pytest.approx(1.5, abs=1e-12)


def test_lyapunov_rejects_general():
    m = hopfield_model([1.0], [[1.0]], [["1"]], modulation=[["1 + 0.1*tanh(x1)"]], a_sup=1.1)
    with pytest.raises(NotBaselineModel):
        gm.lyapunov_w2(m, [0.0], STEP)


@settings(max_examples=4)
@given(st.integers(0, 10_000))
def test_lyapunov_matches_quadrature(seed):
    rng = np.random.default_rng(seed)
    m = hopfield_model(*random_hopfield(rng))
    x0 = rng.uniform(-1, 1, 2)
    w_ode = gm.lyapunov_w2(m, x0, STEP)
    errs = [
        np.linalg.norm(w_ode - gm.zero_reference_gramian(m, x0, 2, STEP, nodes=n).matrix) / np.linalg.norm(w_ode)
        for n in (501, 1001)
    ]
    assert errs[1] <= 5e-6
    # O(h^2) quadrature error unless already at round-off
    assert errs[1] <= 1e-10 or errs[0] / errs[1] > 3.5


def test_congruence_trivial(planar_free):
    assert gm.congruence_check(planar_free, [0, 0], STEP, nodes=11) == 0.0


def test_congruence_scalar(scalar_linear):
    assert gm.congruence_check(scalar_linear, [1.0], STEP) <= 1e-6


def test_congruence_hopfield():
    m = hopfield_model(*random_hopfield(np.random.default_rng(3)))
    assert gm.congruence_check(m, [0.5, -0.4], STEP) <= 1e-5


# ---------------------------------------------------------------------------
# operators


def test_apply_L_integrator(integrator):
    data = gm.operator_data(integrator, ControlGrid.zeros(0, 1, 11), [0.0], 2, STEP)
    assert gm.apply_L(data, ControlGrid.constant(0, 1, 11, 1.0))[0] == pytest.approx(1.0, abs=1e-14)


def test_apply_L_planar(planar_free):
    data = gm.operator_data(planar_free, ControlGrid.zeros(0, 1, 11), [0, 0], 1, STEP)
    np.testing.assert_allclose(gm.apply_L(data, ControlGrid.constant(0, 1, 11, 1.0)), [1.0, 0.0], atol=1e-14)


def test_apply_L_grid_mismatch(integrator):
    data = gm.operator_data(integrator, ControlGrid.zeros(0, 1, 11), [0.0], 2, STEP)
    with pytest.raises(GridMismatch):
        gm.apply_L(data, ControlGrid.zeros(0, 1, 12))


@pytest.mark.parametrize("which", [1, 2])
def test_L_Lstar_is_gramian(which):
    m = hopfield_model(*random_hopfield(np.random.default_rng(1)))
    u = ControlGrid.from_function(0, 1, 51, lambda t: [math.sin(4 * t)])
    data = gm.operator_data(m, u, [0.1, 0.3], which, STEP)
    y = np.array([0.7, -1.3])
    np.testing.assert_allclose(gm.apply_L(data, gm.apply_L_adjoint(data, y)), data.gramian() @ y, rtol=1e-12, atol=1e-14)


def test_adjoint_identity():
    m = hopfield_model(*random_hopfield(np.random.default_rng(2)))
    u = ControlGrid.from_function(0, 1, 41, lambda t: [t - 0.5])
    data = gm.operator_data(m, u, [0.0, 0.5], 2, STEP)
    v = ControlGrid.from_function(0, 1, 41, lambda t: [math.cos(7 * t)])
    y = np.array([0.4, 2.0])
    lhs = gm.apply_L(data, v) @ y
    assert lhs == pytest.approx(v.inner(gm.apply_L_adjoint(data, y)), rel=1e-12)


def test_min_norm_integrator(integrator):
    data = gm.operator_data(integrator, ControlGrid.zeros(0, 1, 11), [0.0], 2, STEP)
    v = gm.min_norm_control(data, [1.0])
    np.testing.assert_allclose(v.values, 1.0, atol=1e-13)
    assert v.energy() == pytest.approx(1.0)


def test_min_norm_pseudoinverse_path(planar_free):
    data = gm.operator_data(planar_free, ControlGrid.zeros(0, 1, 11), [0, 0], 2, STEP)
    np.testing.assert_allclose(gm.min_norm_control(data, [1.0, 0.0]).values, 1.0, atol=1e-13)
    with pytest.raises(NotInRange) as info:
        gm.min_norm_control(data, [0.0, 1.0])
    assert info.value.residual == pytest.approx(1.0)


def test_min_norm_dense_oracle():
    # independent route: Cholesky-whitened pseudoinverse of the discretized operator
    m = hopfield_model(*random_hopfield(np.random.default_rng(5)))
    M = 2001
    u = ControlGrid.from_function(0, 1, M, lambda t: [0.3 * math.sin(3 * t)])
    data = gm.operator_data(m, u, [0.2, -0.2], 2, 5e-4)
    y = np.array([0.5, -0.25])
    v = gm.min_norm_control(data, y)
    q = gm.quadrature_matrix(M, data.h)
    r = cholesky(q, lower=True)
    a = data.matrix()
    whitened = solve_triangular(r, a.T, lower=True).T  # A R^{-T}
    w = np.linalg.pinv(whitened) @ y
    dense = solve_triangular(r.T, w, lower=False)
    assert v.l2_distance(u.with_values(dense.reshape(M, 1))) <= 1e-8


def test_hcm_equals_gramian_for_ltv():
    m = make_model(["x2", "-x1 - 0.2*x2"], [["0"], ["1"]], d=2, lambda1=1.5)
    u = ControlGrid.from_function(0, 1, 101, lambda t: [math.sin(2 * t)])
    n2 = gm.assemble_gramian(m, u, [0.1, 0.0], 2, STEP).matrix
    np.testing.assert_allclose(gm.hcm_gramian(m, u, [0.1, 0.0], STEP), n2, atol=1e-10)


def test_hcm_zero_control_is_w2():
    m = hopfield_model(*random_hopfield(np.random.default_rng(8)))
    u = ControlGrid.zeros(0, 1, 201)
    w2 = gm.zero_reference_gramian(m, [0.3, 0.3], 2, STEP, nodes=201).matrix
    np.testing.assert_allclose(gm.hcm_gramian(m, u, [0.3, 0.3], STEP), w2, atol=1e-6)


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_hcm_invertible_when_gramian_is(seed):
    rng = np.random.default_rng(seed)
    m = make_model(["-x1 + 2*tanh(x1)"], [["1"]], lambda1=1.0, lambda2=2 * 0.77)
    c = rng.uniform(-2, 2, 3)
    u = ControlGrid.from_function(0, 1, 51, lambda t: c[0] + c[1] * t + c[2] * t * t)
    n2 = gm.assemble_gramian(m, u, [rng.uniform(-1, 1)], 2, 0.02)
    assert n2.lambda_min > 0
    assert np.linalg.eigvalsh(gm.hcm_gramian(m, u, [0.0], 0.02)).min() > 0


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.sampled_from([1, 2]), st.sampled_from(["pl-exact", "trapezoid"]))
def test_quadratic_form_and_symmetry(seed, which, rule):
    rng = np.random.default_rng(seed)
    m = hopfield_model(*random_hopfield(rng, d=3, scale=1.5))
    c = rng.normal(size=2)
    u = ControlGrid.from_function(0, 1, 31, lambda t: [c[0] * math.sin(3 * t) + c[1]])
    data = gm.operator_data(m, u, rng.uniform(-1, 1, 3), which, 0.01, rule)
    rep = data.report()
    norm = np.linalg.norm(rep.matrix)
    assert rep.asymmetry <= 1e-12 * norm
    assert rep.lambda_min >= -1e-10 * norm
    assert np.all(np.diff(rep.eigenvalues) >= 0)
    y = rng.normal(size=3)
    g = np.einsum("jac,a->jc", data.kernel, y)
    quad = float(np.sum(g * gm.quadrature_apply(g, data.h, rule)))
    assert y @ rep.matrix @ y == pytest.approx(quad, rel=1e-10)


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_fully_actuated_coercivity_bound(seed):
    rng = np.random.default_rng(seed)
    D, W, _ = random_hopfield(rng, fully_actuated=True)
    m = hopfield_model(D, W, [["1", "0"], ["0", "1"]], b_lower="1")
    c = rng.uniform(-3, 3, 2)
    u = ControlGrid.from_function(0, 1, 41, lambda t: c * math.cos(5 * t))
    lam = gm.assemble_gramian(m, u, rng.uniform(-1, 1, 2), rng.integers(1, 3), 0.01).lambda_min
    dt = m.delta_t
    assert lam >= math.exp(-2 * m.bounds.lambda1 * dt) / dt - 1e-10


def test_trapezoid_and_exact_rule_agree_on_refinement(scalar_linear):
    exact = (math.e**2 - 1) / 2
    errs = []
    for rule in ("pl-exact", "trapezoid"):
        rep = gm.zero_reference_gramian(scalar_linear, [0.0], 2, STEP, nodes=401, rule=rule)
        errs.append(abs(rep.matrix[0, 0] - exact))
    assert max(errs) <= 1e-4
