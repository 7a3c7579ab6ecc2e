"""Command-line front end.

Exit codes: 0 ok, 2 configuration error, 3 numeric failure, 4 target not
certified admissible, 5 no convergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import certify as cert_mod
from .errors import ConfigError, GramsynthError, NotAdmissible, NotConverged, SchemaError
from .flow import ControlGrid, integrate_controlled, read_control_csv, write_control_csv, write_trajectory_csv
from .freeze import FreezeOptions, freeze_iterate
from .gramian import assemble_gramian, congruence_check, lyapunov_w2
from .model import build_model
from .synthesis import PicardOptions, picard_synthesize, target_displacement

DEFAULT_NODES = 201
DEFAULT_STEP = 1e-3


# ---------------------------------------------------------------------------
# configuration


def load_schema() -> dict:
    return json.loads(resources.files("gramsynth").joinpath("config.schema.json").read_text())


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read configuration {path}: {err}") from err
    try:
        config = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from err
    validate_config(config)
    return config


def validate_config(config: dict):
    try:
        jsonschema.validate(config, load_schema())
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise SchemaError(f"configuration invalid at {where}: {err.message}") from err


@dataclass(frozen=True)
class RunConfig:
    nodes: int
    step: float
    x0: np.ndarray
    x1: np.ndarray | None
    which: int
    theta: float
    seed: int
    windows: int
    picard: PicardOptions
    freeze: FreezeOptions
    budget: int
    box: tuple

    @classmethod
    def from_config(cls, config: dict, model, args) -> "RunConfig":
        grid = config.get("grid", {})
        run = config.get("run", {})
        nodes = int(grid.get("nodes", DEFAULT_NODES))
        step = float(grid.get("integrator_step", DEFAULT_STEP))
        d = model.dimension
        x0 = np.asarray(run.get("x0", [0.0] * d), dtype=float)
        x1 = run.get("x1")
        if getattr(args, "target", None) is not None:
            x1 = _parse_vector(args.target)
        x1 = None if x1 is None else np.asarray(x1, dtype=float)
        for name, v in (("x0", x0), ("x1", x1)):
            if v is not None and v.shape != (d,):
                raise ConfigError(f"{name} must have {d} entries")
        which = getattr(args, "which", None) or int(run.get("which", 2))
        theta = getattr(args, "theta", None) or float(run.get("theta", 0.5))
        if not 0.0 < theta < 1.0:
            raise ConfigError("theta must lie in (0, 1)")
        seed = getattr(args, "seed", None)
        seed = int(run.get("seed", 0)) if seed is None else seed
        windows = getattr(args, "windows", None) or int(run.get("windows", 1))
        picard = PicardOptions(
            nodes=nodes,
            step=step,
            max_iter=int(run.get("max_iter", 100)),
            tol_fp=float(run.get("tol_fp", 1e-10)),
            tol_endpoint=float(run.get("tol_endpoint", 1e-6)),
        )
        freeze = FreezeOptions(
            max_outer=int(run.get("max_outer", 30)),
            tol_outer=float(run.get("tol_outer", 1e-6)),
            damping=float(run.get("damping", 1.0)),
            picard=picard,
        )
        box = tuple(run.get("coefficient_box", (-1.0, 1.0)))
        return cls(nodes, step, x0, x1, which, theta, seed, windows, picard, freeze, int(run.get("optimizer_budget", 500)), box)


def _parse_vector(text: str) -> list:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError as err:
        raise ConfigError(f"cannot parse vector {text!r}: {err}") from err


def _need_target(rc: RunConfig) -> np.ndarray:
    if rc.x1 is None:
        raise ConfigError("a target is required: set run.x1 or pass --target")
    return rc.x1


# ---------------------------------------------------------------------------
# windowed synthesis


@dataclass(frozen=True, eq=False)
class WindowResult:
    windows: list  # per-window dicts
    controls: list  # per-window ControlGrid
    endpoint: np.ndarray
    endpoint_residual: float
    total_energy: float

    def to_dict(self) -> dict:
        return {
            "windows": self.windows,
            "endpoint": self.endpoint.tolist(),
            "endpoint_residual": self.endpoint_residual,
            "total_energy": self.total_energy,
        }


def windowed_synthesis(model, x0, x1, windows: int, picard: PicardOptions, which: int = 2, theta: float = 0.5, certify: bool = True) -> WindowResult:
    """Concatenate fixed-point controls over ``windows`` equal sub-horizons.

    Window ``w`` starts from the state actually reached by window ``w - 1`` and
    aims at the waypoint ``x0 + (w + 1)/n (x1 - x0)``.  Each window is certified
    with its own zero-reference certificate before synthesis.
    """
    if windows < 1:
        raise ConfigError("windows must be >= 1")
    if (picard.nodes - 1) % windows:
        raise ConfigError(f"grid of {picard.nodes} nodes does not split into {windows} equal windows")
    per = (picard.nodes - 1) // windows + 1
    opts = replace(picard, nodes=per)
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    edges = [model.t0 + w * model.delta_t / windows for w in range(windows)] + [model.T]
    state = x0
    rows, controls, energy = [], [], 0.0
    for w in range(windows):
        sub = model.with_horizon(edges[w], edges[w + 1])
        goal = x0 + (w + 1) / windows * (x1 - x0)
        row = {"window": w, "t0": edges[w], "T": edges[w + 1], "start": state.tolist(), "waypoint": goal.tolist()}
        if certify:
            c = cert_mod.zero_reference_certificate(sub, state, goal, which, theta, opts.step, per)
            row["certificate"] = c.to_dict()
            if not c.admissible:
                raise NotAdmissible(f"window {w}: target displacement {c.target_norm:.4g} exceeds radius {c.radius:.4g}", window=w)
        spec = target_displacement(sub, state, goal, which, opts.step)
        res = picard_synthesize(sub, spec, opts)
        row.update(res.to_dict())
        rows.append(row)
        controls.append(res.control)
        energy += res.energy
        state = res.endpoint
    return WindowResult(rows, controls, state, float(np.linalg.norm(state - x1)), energy)


# ---------------------------------------------------------------------------
# subcommands


def _emit(report: dict, args, name: str):
    text = json.dumps(report, indent=2, sort_keys=True, default=_json_default)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(text + "\n")
    print(text)


def _json_default(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not serializable: {type(v).__name__}")


def _control(args, model, rc: RunConfig, attr: str = "control") -> ControlGrid:
    path = getattr(args, attr, None)
    if path is None:
        return ControlGrid.zeros(model.t0, model.T, rc.nodes, model.inputs)
    u = read_control_csv(path, model.t0, model.T, rc.nodes)
    if u.k != model.inputs:
        raise ConfigError(f"{path}: control has {u.k} inputs, model expects {model.inputs}")
    return u


def _write_csv(args, name, fn, obj):
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fn(out / name, obj)


def cmd_simulate(args, config, model, rc):
    u = _control(args, model, rc)
    traj = integrate_controlled(model, u, rc.x0, rc.step)
    _write_csv(args, "trajectory.csv", write_trajectory_csv, traj)
    _emit({"config_hash": model.config_hash(), "endpoint": traj.final, "sup_norm": traj.sup_norm, "control_energy": u.energy()}, args, "simulate")
    return 0


def cmd_gramian(args, config, model, rc):
    u = _control(args, model, rc)
    rep = assemble_gramian(model, u, rc.x0, rc.which, rc.step)
    out = {"config_hash": model.config_hash(), "gramian": rep.to_dict()}
    if rc.which == 2 and not np.any(u.values) and not model.is_general:
        lyap = lyapunov_w2(model, rc.x0, rc.step)
        out["lyapunov_relative_difference"] = float(np.linalg.norm(lyap - rep.matrix) / max(np.linalg.norm(lyap), 1e-300))
        out["congruence_residual"] = congruence_check(model, rc.x0, rc.step, rc.nodes)
    _emit(out, args, "gramian")
    return 0


def _certificate(args, model, rc, x1=None):
    if getattr(args, "optimize_basis", None):
        if args.optimize_basis != "constant":
            raise ConfigError(f"unknown basis {args.optimize_basis!r} (supported: constant)")
        search = cert_mod.ReferenceSearchSpec(cert_mod.constant_basis(model, rc.nodes), rc.box, rc.budget, rc.seed)
        ref, c = cert_mod.optimize_reference(model, rc.x0, search, rc.which, rc.theta, rc.step)
    elif getattr(args, "reference", None):
        ref = _control(args, model, rc, "reference")
        c = cert_mod.admissible_radius(model, ref, rc.x0, rc.which, rc.theta, rc.step)
    else:
        if x1 is not None:
            return cert_mod.zero_reference_certificate(model, rc.x0, x1, rc.which, rc.theta, rc.step, rc.nodes)
        ref = ControlGrid.zeros(model.t0, model.T, rc.nodes, model.inputs)
        c = cert_mod.admissible_radius(model, ref, rc.x0, rc.which, rc.theta, rc.step)
    if x1 is not None:
        y = target_displacement(model, rc.x0, x1, rc.which, rc.step).y_norm
        c = cert_mod.admissible_radius(model, c.reference, rc.x0, rc.which, rc.theta, rc.step, y)
    return c


def cmd_certify(args, config, model, rc):
    c = _certificate(args, model, rc, rc.x1)
    if c.reference.sup_norm > 0:
        _write_csv(args, "reference.csv", write_control_csv, c.reference)
    _emit({"config_hash": model.config_hash(), "certificate": c.to_dict()}, args, "certify")
    return 0


def cmd_synthesize(args, config, model, rc):
    x1 = _need_target(rc)
    c = _certificate(args, model, rc, x1)
    spec = target_displacement(model, rc.x0, x1, rc.which, rc.step)
    if not c.admissible and not args.force:
        raise NotAdmissible(f"target displacement {spec.y_norm:.4g} exceeds certified radius {c.radius:.4g} (use --force)")
    res = picard_synthesize(model, spec, rc.picard)
    _write_csv(args, "control.csv", write_control_csv, res.control)
    _emit(
        {"config_hash": model.config_hash(), "certified": bool(c.admissible), "certificate": c.to_dict(), "result": res.to_dict()},
        args,
        "synthesize",
    )
    if not res.converged:
        raise NotConverged(f"endpoint residual {res.endpoint_residual:.3e} above tolerance")
    return 0


def cmd_freeze(args, config, model, rc):
    x1 = _need_target(rc)
    res = freeze_iterate(model, rc.x0, x1, rc.freeze)
    _write_csv(args, "control.csv", write_control_csv, res.control)
    _write_csv(args, "trajectory.csv", write_trajectory_csv, res.trajectory)
    _emit({"config_hash": model.config_hash(), "result": res.to_dict()}, args, "freeze")
    if not res.converged:
        raise NotConverged(f"freezing did not meet tolerances (endpoint residual {res.endpoint_residual:.3e})")
    return 0


def cmd_window(args, config, model, rc):
    x1 = _need_target(rc)
    res = windowed_synthesis(model, rc.x0, x1, rc.windows, rc.picard, rc.which, rc.theta)
    for w, u in enumerate(res.controls):
        _write_csv(args, f"control_w{w}.csv", write_control_csv, u)
    _emit({"config_hash": model.config_hash(), "result": res.to_dict()}, args, "window")
    if res.endpoint_residual > rc.picard.tol_endpoint * (1.0 + float(np.linalg.norm(x1))):
        raise NotConverged(f"windowed endpoint residual {res.endpoint_residual:.3e} above tolerance")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "gramian": cmd_gramian,
    "synthesize": cmd_synthesize,
    "certify": cmd_certify,
    "freeze": cmd_freeze,
    "window": cmd_window,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gramsynth", description="Gramian-based steering of control-affine systems.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=None, help="write JSON/CSV artifacts here")
        return p

    def anchored(p):
        p.add_argument("--which", type=int, choices=(1, 2), default=None, help="anchor t0 (1) or T (2); default 2")
        p.add_argument("--theta", type=float, default=None, help="coercivity margin in (0,1); default 0.5")

    p = add("simulate", "integrate the controlled system")
    p.add_argument("--control", help="control CSV (t,u1..uk); default u = 0")
    p = add("gramian", "trajectory-dependent Gramian report")
    anchored(p)
    p.add_argument("--control", help="control CSV; default u = 0")
    p = add("certify", "admissible-radius certificate")
    anchored(p)
    p.add_argument("--target", help="comma-separated x1 (overrides run.x1)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--reference", help="reference control CSV")
    g.add_argument("--optimize-basis", choices=("constant",), help="optimize the reference over a basis")
    p = add("synthesize", "certify then run the Picard synthesis")
    anchored(p)
    p.add_argument("--target", help="comma-separated x1 (overrides run.x1)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--reference", help="reference control CSV")
    g.add_argument("--optimize-basis", choices=("constant",))
    p.add_argument("--force", action="store_true", help="synthesize even if the target is not certified")
    p = add("freeze", "trajectory-freezing synthesis for modulated models")
    p.add_argument("--target", help="comma-separated x1")
    p = add("window", "windowed synthesis along straight-line waypoints")
    anchored(p)
    p.add_argument("--target", help="comma-separated x1")
    p.add_argument("--windows", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        model = build_model(config)
        rc = RunConfig.from_config(config, model, args)
        return COMMANDS[args.command](args, config, model, rc)
    except GramsynthError as err:
        print(f"gramsynth: {type(err).__name__}: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
