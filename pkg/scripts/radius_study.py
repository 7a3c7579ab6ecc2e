"""Certified radius of the zero reference for random Hopfield networks.

For each network the generic and the Hopfield-specific Lipschitz constants
are compared, together with the target-free self-consistent radius.
"""

import argparse

import numpy as np

from gramsynth.certify import admissible_radius, generic_lipschitz, hopfield_lipschitz
from gramsynth.flow import ControlGrid
from gramsynth.model import build_model


def network(rng, d):
    D = rng.uniform(0.5, 2.0, d)
    W = rng.uniform(-1.0, 1.0, (d, d))
    return build_model({
        "model": {
            "dimension": d, "inputs": d, "t0": 0.0, "T": 1.0,
            "hopfield": {"D": D.tolist(), "W": W.tolist()},
            "input_matrix": [["1" if i == j else "0" for j in range(d)] for i in range(d)],
            "bounds": {"l_b": 0.0, "b_sup": 1.0},
        }
    })


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=8)
    ap.add_argument("--dim", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--theta", type=float, default=0.5)
    ap.add_argument("--nodes", type=int, default=101)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"{'#':>3} {'L generic':>10} {'L hopfield':>10} {'lam_min':>9} {'radius':>10}")
    for i in range(args.count):
        m = network(rng, args.dim)
        u0 = ControlGrid.zeros(m.t0, m.T, args.nodes, m.inputs)
        cert = admissible_radius(m, u0, np.zeros(m.dimension), 2, args.theta, 1e-2)
        print(
            f"{i:>3} {generic_lipschitz(m, 0.0, 2):>10.4f} {hopfield_lipschitz(m.hopfield, m, 2):>10.4f}"
            f" {cert.lambda_min_ref:>9.4f} {cert.radius:>10.3e}"
        )


if __name__ == "__main__":
    main()
