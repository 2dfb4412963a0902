"""Count exactly-zero units after training on the synthetic task at the larger regularization strength."""
import argparse
import json
from pathlib import Path

import numpy as np

from pathprox.harness import ExperimentConfig, select_lr
from pathprox.models import group_v

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "sparsity_synthetic.json"))
    ap.add_argument("--seeds", default="0", help="comma-separated seeds")
    args = ap.parse_args()

    doc = json.loads(Path(args.config).read_text())
    methods = doc.pop("methods")
    base = ExperimentConfig.from_dict(doc)
    for seed in [int(s) for s in args.seeds.split(",")]:
        for m in methods:
            c = base.with_overrides(seed=seed, **{"optimizer.algorithm": m["algorithm"]})
            lr, res = select_lr(c, m["lr_grid"])
            zeros = sum(int(np.sum(np.all(group_v(res.store, g) == 0, axis=1))) for g in res.scheme.groups)
            total = sum(g.n_units for g in res.scheme.groups)
            last = res.records[-1]
            print(f"seed {seed} {m['algorithm']:>9}: lr={lr} zero units {zeros}/{total} "
                  f"L={last.data_loss:.5f} F={last.F:.5f}")


if __name__ == "__main__":
    main()
