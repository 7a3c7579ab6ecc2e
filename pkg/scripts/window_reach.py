"""Windowed synthesis: how far the certified reach extends with more windows."""

import argparse
import json
from pathlib import Path

import numpy as np

from gramsynth.cli import windowed_synthesis
from gramsynth.errors import NotAdmissible
from gramsynth.model import build_model
from gramsynth.synthesis import PicardOptions

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "hopfield_scalar_windows.json"))
    ap.add_argument("--windows", type=int, nargs="+", default=[1, 2, 4, 8])
    args = ap.parse_args()
    config = json.loads(Path(args.config).read_text())
    model = build_model(config)
    grid = config.get("grid", {})
    run = config.get("run", {})
    opts = PicardOptions(nodes=grid.get("nodes", 401), step=grid.get("integrator_step", 1e-3), tol_endpoint=1e-4)
    x0, x1 = np.array(run["x0"], dtype=float), np.array(run["x1"], dtype=float)
    for n in args.windows:
        try:
            res = windowed_synthesis(model, x0, x1, n, opts)
        except NotAdmissible as err:
            print(f"windows={n}: not admissible ({err})")
            continue
        print(f"windows={n}: endpoint residual {res.endpoint_residual:.3e}, energy {res.total_energy:.6f}")


if __name__ == "__main__":
    main()
