"""Outer freezing iteration on a modulated Hopfield network.

Prints the outer residual history for a sweep of modulation strengths.
"""

import argparse

import numpy as np

from gramsynth.errors import NotConverged, SingularGramian
from gramsynth.freeze import FreezeOptions, freeze_iterate
from gramsynth.model import build_model
from gramsynth.synthesis import PicardOptions


def modulated(eps):
    return build_model({
        "model": {
            "dimension": 2, "inputs": 1, "t0": 0.0, "T": 1.0,
            "hopfield": {"D": [1.0, 1.0], "W": [[0.0, 1.0], [0.8, 0.0]]},
            "modulation": [["1 + eps*sin(x1)", "0"], ["0", "1"]],
            "params": {"eps": eps},
            "input_matrix": [["1"], ["0"]],
            "bounds": {"l_b": 0.0, "b_sup": 1.0, "a_sup": 1.0 + eps},
        }
    })


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.0, 0.05, 0.2, 0.5])
    ap.add_argument("--nodes", type=int, default=101)
    args = ap.parse_args()
    x0, x1 = np.array([0.1, 0.0]), np.array([0.2, 0.05])
    opts = FreezeOptions(picard=PicardOptions(nodes=args.nodes, step=1e-2, tol_endpoint=1e-4))
    for eps in args.eps:
        try:
            res = freeze_iterate(modulated(eps), x0, x1, opts)
        except (NotConverged, SingularGramian) as err:
            print(f"eps={eps}: {type(err).__name__}: {err}")
            continue
        hist = " ".join(f"{v:.1e}" for v in res.history)
        print(f"eps={eps}: converged={res.converged} residual={res.endpoint_residual:.2e} outer=[{hist}]")


if __name__ == "__main__":
    main()
