"""Prune-and-retrain table on the MNIST subset (digits stand-in when no IDX directory is configured)."""
import sys
from pathlib import Path

from pathprox.cli import cli

ROOT = Path(__file__).resolve().parent.parent

if __name__ == "__main__":
    argv = ["prune", "--config", str(ROOT / "configs" / "prune_mnist_subset.json"), *sys.argv[1:]]
    sys.exit(cli(argv))
