"""Endpoint residual of the Picard control versus grid size.

On a scalar tanh system the kernel is not piecewise linear, so the residual
of the discretized problem decays like ``h^2`` (halving ``h`` divides it by 4).
"""

import argparse

import numpy as np

from gramsynth.model import build_model
from gramsynth.synthesis import PicardOptions, picard_synthesize, target_displacement

CONFIG = {
    "model": {
        "dimension": 1, "inputs": 1, "t0": 0.0, "T": 1.0,
        "drift": ["-x1 + tanh(x1)"], "input_matrix": [["1"]],
        "bounds": {"lambda1": 1.0, "lambda2": 0.7698, "l_b": 0.0, "b_sup": 1.0},
    }
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--target", type=float, default=0.3)
    ap.add_argument("--nodes", type=int, nargs="+", default=[11, 21, 41, 81, 161])
    args = ap.parse_args()
    model = build_model(CONFIG)
    spec = target_displacement(model, [0.0], [args.target], 2, 1e-3)
    print(f"{'nodes':>6} {'iters':>5} {'residual':>12} {'energy':>12}")
    prev = None
    for n in args.nodes:
        res = picard_synthesize(model, spec, PicardOptions(nodes=n, step=1e-3, tol_endpoint=1.0))
        rate = "" if prev is None else f"  ratio {prev / max(res.endpoint_residual, 1e-300):.2f}"
        print(f"{n:>6} {res.iterations:>5} {res.endpoint_residual:>12.3e} {res.energy:>12.6f}{rate}")
        prev = res.endpoint_residual


if __name__ == "__main__":
    main()
