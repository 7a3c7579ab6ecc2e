import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gramsynth.model import build_model

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_model(drift, B, d=1, k=1, t0=0.0, T=1.0, lambda1=1.0, lambda2=0.0, l_b=0.0, b_sup=1.0, **extra):
    bounds = {"lambda1": lambda1, "lambda2": lambda2, "l_b": l_b, "b_sup": b_sup}
    for key in ("a_sup", "b_lower"):
        if key in extra:
            bounds[key] = extra.pop(key)
    block = {"dimension": d, "inputs": k, "t0": t0, "T": T, "drift": drift, "input_matrix": B, "bounds": bounds}
    block.update(extra)
    return build_model({"model": block})


def hopfield_model(D, W, B, T=1.0, modulation=None, params=None, **bounds):
    d = len(D)
    block = {
        "dimension": d,
        "inputs": len(B[0]),
        "t0": 0.0,
        "T": T,
        "hopfield": {"D": list(D), "W": [list(r) for r in W]},
        "input_matrix": B,
        "bounds": {"l_b": 0.0, "b_sup": float(np.linalg.norm(np.array(B, dtype=float), 2)), **bounds},
    }
    if modulation is not None:
        block["modulation"] = modulation
    if params:
        block["params"] = params
    return build_model({"model": block})


def random_hopfield(rng, d=2, fully_actuated=False, scale=1.0):
    D = rng.uniform(0.5, 2.0, d)
    W = rng.uniform(-scale, scale, (d, d))
    if fully_actuated:
        B = [["1" if i == j else "0" for j in range(d)] for i in range(d)]
    else:
        B = [["1"]] + [["0"]] * (d - 1)
        W[1, 0] = np.sign(W[1, 0] or 1.0) * max(abs(W[1, 0]), 0.3)
    return D, W, B


@pytest.fixture
def integrator():
    return make_model(["0"], [["1"]], lambda1=0.0)


@pytest.fixture
def double_integrator():
    return make_model(["x2", "0"], [["0"], ["1"]], d=2)


@pytest.fixture
def scalar_linear():
    return make_model(["x1"], [["1"]])


# acceptance verdict lines, echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def record_criterion(number, title, ok, detail=""):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
