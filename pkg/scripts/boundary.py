"""Decision-boundary grids for PathProx and SGD with weight decay on the synthetic task."""
import sys
from pathlib import Path

from pathprox.cli import cli

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    cfg = str(ROOT / "configs" / "boundary_synthetic.json")
    for alg in ("pathprox", "sgd_wd"):
        out = str(ROOT / "runs" / "boundary" / alg)
        rc = cli(["train", "--config", cfg, "--algorithm", alg, "--out", out])
        if rc == 0:
            rc = cli(["boundary", "--config", cfg, "--checkpoint", f"{out}/final.json", "--out", out])
        if rc:
            sys.exit(rc)
        print(f"{alg}: {out}/boundary.csv")
