"""Command-line entry point: ``pathprox {train,prune,compare,boundary,lipschitz}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from .errors import ConfigError, ContractError, DivergenceError, FormatError
from .models import load_checkpoint

log = logging.getLogger("pathprox")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="JSON experiment config (defaults apply when omitted)")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="regularization strength override")
    p.add_argument("--lr", type=float, default=None, help="initial step size override")
    p.add_argument("--seed", type=int, default=None, help="seed override (init, data split and batch order)")
    p.add_argument("--iters", type=int, default=None, help="total iteration override")
    p.add_argument("--out", type=str, default=None, help="output directory override")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pathprox", description="Path-norm proximal training experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser, metavar="{train,prune,compare,boundary,lipschitz}")
    sub.required = True

    p = sub.add_parser("train", help="train one model and log metrics")
    _common(p)
    p.add_argument("--algorithm", type=str, default=None, help="optimizer override")
    p.add_argument("--resume", type=str, default=None, help="checkpoint to continue from")

    p = sub.add_parser("prune", help="train with pruning, then deactivate and retrain from each checkpoint")
    _common(p)
    p.add_argument("--retrain-iters", type=int, default=None, help="retraining budget per checkpoint")

    p = sub.add_parser("compare", help="run several optimizers from one initialization; aligned F columns")
    _common(p)
    p.add_argument("--methods", type=str, default=None,
                   help="comma-separated algorithms (default pathprox,sgd_pathnorm,sgd_wd)")
    p.add_argument("--lr-grid", type=str, default=None,
                   help="comma-separated step sizes; each method uses its best final F")

    p = sub.add_parser("boundary", help="export class probabilities on a 2D grid")
    _common(p)
    p.add_argument("--checkpoint", type=str, default=None, help="trained weights (trains from config when omitted)")
    p.add_argument("--resolution", type=int, default=100, help="grid points per axis")
    p.add_argument("--bounds", type=str, default="-3,3,-3,3", help="x0,x1,y0,y1")

    p = sub.add_parser("lipschitz", help="per-sample Jacobian spectral norms on test points")
    _common(p)
    p.add_argument("--checkpoint", type=str, default=None, help="trained weights (trains from config when omitted)")
    p.add_argument("--samples", type=int, default=200, help="number of test points")
    return ap


def _load(args) -> tuple[H.ExperimentConfig, dict]:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = dict(doc)
    extras = {k: doc.pop(k) for k in ("methods",) if k in doc}
    cfg = H.ExperimentConfig.from_dict(doc) if doc else H.ExperimentConfig()
    cfg = cfg.with_overrides(**{
        "optimizer.lam": args.lam, "optimizer.lr": args.lr, "seed": args.seed,
        "iterations": args.iters, "output_dir": args.out,
        "optimizer.algorithm": getattr(args, "algorithm", None),
        "retrain_iters": getattr(args, "retrain_iters", None),
    })
    return cfg, extras


def _floats(text: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} numbers, got {len(vals)}")
    return vals


def _model(cfg: H.ExperimentConfig, checkpoint: str | None):
    spec, _, data = H.setup(cfg)
    if checkpoint:
        store, _ = load_checkpoint(checkpoint)
        if store.spec != spec:
            raise ConfigError("checkpoint architecture does not match the config")
        return spec, store, data
    return spec, H.run_training(cfg).store, data


def _compare(cfg: H.ExperimentConfig, extras: dict, args) -> None:
    out = Path(cfg.output_dir)
    if args.methods:
        methods = [{"algorithm": m.strip()} for m in args.methods.split(",") if m.strip()]
    else:
        methods = extras.get("methods") or [{"algorithm": a} for a in ("pathprox", "sgd_pathnorm", "sgd_wd")]
    grid = _floats(args.lr_grid) if args.lr_grid else None
    cfgs = []
    for m in methods:
        if not isinstance(m, dict) or "algorithm" not in m:
            raise ConfigError(f"method entries need an 'algorithm' key, got {m!r}")
        c = cfg.with_overrides(**{"optimizer.algorithm": m["algorithm"], "optimizer.lr": m.get("lr")})
        lrs = m.get("lr_grid", grid)
        if lrs:
            lr, _ = H.select_lr(c, lrs)
            log.info("%s: selected lr=%g from %s", m["algorithm"], lr, list(lrs))
            c = c.with_overrides(**{"optimizer.lr": lr})
        cfgs.append(c)
    H.compare_convergence(cfgs, out / "compare.csv")
    (out / "config.json").write_text(json.dumps([c.to_dict() for c in cfgs], indent=2, sort_keys=True))


def run(args) -> None:
    cfg, extras = _load(args)
    log.info("effective config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    out = Path(cfg.output_dir)
    if args.command == "train":
        res = H.run_training(cfg, resume_from=args.resume)
        last = res.records[-1]
        log.info("done: F=%.6g G=%.6g active=%.1f%% best_iteration=%d", last.F, last.G, last.active_pct,
                 res.best_iteration)
    elif args.command == "prune":
        res = H.prune_retrain(cfg)
        for r in res.rows:
            log.info("checkpoint %d: active=%.1f%% test_acc=%s", r.checkpoint, r.active_pct, r.test_acc)
    elif args.command == "compare":
        _compare(cfg, extras, args)
    elif args.command == "boundary":
        if args.resolution < 2:
            raise ConfigError("resolution must be >= 2")
        spec, store, _ = _model(cfg, args.checkpoint)
        out.mkdir(parents=True, exist_ok=True)
        H.export_decision_boundary(spec, store, tuple(_floats(args.bounds, 4)), args.resolution,
                                   out / "boundary.csv")
    elif args.command == "lipschitz":
        spec, store, data = _model(cfg, args.checkpoint)
        n = min(args.samples, len(data.test))
        out.mkdir(parents=True, exist_ok=True)
        s = H.export_lipschitz_histogram(spec, store, data.test.features[:n], out / "lipschitz.csv")
        log.info("sigma_max over %d samples: mean=%.6g median=%.6g", n, s["mean"], s["median"])


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            run(args)
    except DivergenceError as exc:
        log.error("diverged: %s", exc)
        return 2
    except (ConfigError, ContractError, FormatError, FileNotFoundError) as exc:
        log.error("configuration error: %s", exc)
        return 1
    return 0


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
