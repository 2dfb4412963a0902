"""Experiment configuration, the training loop, and result exports."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .errors import ConfigError, ContractError, DivergenceError
from .models import (
    GroupingScheme,
    NetworkSpec,
    WeightStore,
    build_mlp,
    build_toy_cnn,
    derive_grouping,
    init_store,
    load_checkpoint,
    named_mlp,
    predict,
    save_checkpoint,
)
from .optimizers import OptimizerConfig, Schedule, apply_mask, attach, balance_units, collapse_dead_units, step
from .regularization import jacobian_spectral_norms, objectives, structural_sparsity, unit_norms
from .tensor import softmax

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TaskConfig:
    dataset: str = "synthetic"  # synthetic | mnist
    # synthetic two-class data
    n_train: int = 500
    n_val: int = 100
    n_test: int = 200
    noise: float = 0.3
    outlier_fraction: float = 0.05
    # image data; without data_dir the bundled 28x28 digits stand-in is used
    data_dir: str | None = None
    per_class: int | None = 100
    val_size: int = 200
    test_size: int | None = None
    normalize: bool | None = None  # None: on for images, off for synthetic
    data_seed: int | None = None


@dataclass
class ModelConfig:
    kind: str = "mlp"  # mlp | named | cnn
    depth: int = 2
    width: int = 64
    factorized: bool = True
    name: str | None = None
    channels: tuple[int, ...] = (1, 4, 4)
    kernel_size: int = 3
    pool_after: tuple[int, ...] = (0,)
    padding: str = "valid"
    pool_kind: str = "max"


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        schedule=Schedule("step", 0.1, milestones_frac=(0.5, 0.75))))
    iterations: int = 1000
    eval_interval: int = 50
    batch_size: int = 0  # 0: full batch
    sparsity_threshold: float = 1e-5
    eval_rescaled: str = "auto"  # auto | always | never
    checkpoints: tuple[int, ...] = ()
    retrain_iters: int = 0
    output_dir: str = "out"
    seed: int = 0
    log_wall_clock: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        if self.batch_size < 0:
            raise ConfigError("batch_size must be >= 0")
        if self.eval_rescaled not in ("auto", "always", "never"):
            raise ConfigError(f"eval_rescaled must be auto/always/never, got {self.eval_rescaled!r}")
        self.checkpoints = tuple(int(c) for c in self.checkpoints)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        d = self.to_dict()
        for key, val in kw.items():
            if val is None:
                continue
            node = d
            *path, last = key.split(".")
            for p in path:
                node = node[p]
            node[last] = val
        return ExperimentConfig.from_dict(d)


def _build(cls, d):
    if not isinstance(d, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    nested = {"task": TaskConfig, "model": ModelConfig, "optimizer": OptimizerConfig, "schedule": Schedule}
    kw = {}
    for key, val in d.items():
        if key in nested and isinstance(val, dict):
            val = _build(nested[key], val)
        elif isinstance(val, list):
            val = tuple(val)
        kw[key] = val
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# task setup
# ---------------------------------------------------------------------------


@dataclass
class TaskData:
    train: D.Dataset
    val: D.Dataset
    test: D.Dataset


def prepare_data(cfg: ExperimentConfig) -> TaskData:
    t = cfg.task
    seed = cfg.seed if t.data_seed is None else t.data_seed
    if t.dataset == "synthetic":
        full = D.synthetic_two_class(t.n_train + t.n_val + t.n_test, t.noise, t.outlier_fraction, seed)
        rest, test = D.train_val_split(full, t.n_test, seed + 1) if t.n_test else (full, full.subset([]))
        train, val = D.train_val_split(rest, t.n_val, seed + 2)
        normalize = bool(t.normalize)
    elif t.dataset == "mnist":
        if t.data_dir:
            full_train, test = D.load_mnist(t.data_dir, "train"), D.load_mnist(t.data_dir, "test")
        else:
            full_train, test = D.digits_as_mnist(seed)
        train, val = D.train_val_split(full_train, t.val_size, seed + 1)
        if t.per_class:
            train = D.subsample_per_class(train, t.per_class, seed + 2)
        if t.test_size is not None and t.test_size < len(test):
            test = test.subset(np.sort(np.random.default_rng(seed + 3).permutation(len(test))[:t.test_size]))
        normalize = t.normalize is None or t.normalize
    else:
        raise ConfigError(f"unknown dataset {t.dataset!r}")
    if normalize:
        norm = D.Normalizer.fit(train)
        train, val, test = norm(train), norm(val), norm(test)
    return TaskData(train, val, test)


def build_spec(cfg: ExperimentConfig, sample: D.Dataset) -> NetworkSpec:
    m = cfg.model
    feat_shape = sample.features.shape[1:]
    n_in = int(np.prod(feat_shape))
    K = sample.n_classes
    if m.kind == "mlp":
        return build_mlp(m.depth, m.width, n_in, K, m.factorized)
    if m.kind == "named":
        return named_mlp(m.name or "", n_in, K)
    if m.kind == "cnn":
        hw = feat_shape[-2:] if len(feat_shape) >= 2 else None
        if hw is None:
            raise ConfigError("cnn models need image-shaped inputs")
        return build_toy_cnn(m.channels, m.kernel_size, m.pool_after, K, tuple(hw), m.padding, m.pool_kind)
    raise ConfigError(f"unknown model kind {m.kind!r}")


def shape_inputs(spec: NetworkSpec, ds: D.Dataset) -> D.Dataset:
    return dataclasses.replace(ds, features=ds.features.reshape((len(ds),) + spec.input_shape))


def resolve_schedule(opt: OptimizerConfig, total: int) -> OptimizerConfig:
    """Turn fractional milestones (values in ``(0, 1)``) into iteration counts for a run of ``total`` steps."""
    s = opt.schedule
    if s.kind == "step" and any(0 < m < 1 for m in s.milestones_frac):
        ms = tuple(sorted(set(s.milestones) | {int(f * total) for f in s.milestones_frac}))
        s = dataclasses.replace(s, milestones=ms, milestones_frac=())
    return dataclasses.replace(opt, schedule=s)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    iteration: int
    gamma: float
    data_loss: float
    F: float
    G: float
    R: float
    Rtilde: float
    active_pct: float
    totals: tuple[float, ...]
    train_acc: float
    val_acc: float | None
    test_acc: float | None
    ms: float


def accuracy(spec: NetworkSpec, store: WeightStore, ds: D.Dataset) -> float | None:
    if len(ds) == 0:
        return None
    return float(np.mean(predict(spec, store, ds.features).argmax(axis=1) == ds.labels))


def evaluation_store(store: WeightStore, scheme: GroupingScheme, cfg: ExperimentConfig) -> WeightStore:
    """Representation the objectives are reported on.

    Unit-sphere methods carry their scale in ``v``, so their weight-decay
    objective is reported at the function-identical balanced point.
    """
    mode = cfg.eval_rescaled
    if mode == "always" or (mode == "auto" and cfg.optimizer.algorithm in ("pathprox", "wn_sgd")):
        bal = store.copy()
        balance_units(bal, scheme, cfg.optimizer.include_bias_in_unit)
        collapse_dead_units(bal, scheme)
        return bal
    return store


def evaluate(t: int, gamma: float, store: WeightStore, scheme: GroupingScheme, data: TaskData,
             cfg: ExperimentConfig, elapsed_ms: float) -> MetricsRecord:
    spec = store.spec
    inc = cfg.optimizer.include_bias_in_unit
    ev = evaluation_store(store, scheme, cfg)
    ob = objectives(ev, scheme, data.train.features, data.train.labels, cfg.optimizer.lam, inc)
    return MetricsRecord(
        iteration=t, gamma=gamma, data_loss=ob.data_loss, F=ob.F, G=ob.G, R=ob.R, Rtilde=ob.Rtilde,
        active_pct=100.0 * structural_sparsity(store, scheme, cfg.sparsity_threshold, inc),
        totals=tuple(float(x) for x in ob.totals),
        train_acc=accuracy(spec, store, data.train), val_acc=accuracy(spec, store, data.val),
        test_acc=accuracy(spec, store, data.test), ms=elapsed_ms if cfg.log_wall_clock else 0.0,
    )


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def metrics_csv(records: list[MetricsRecord], n_groups: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "gamma", "data_loss", "F", "G", "R", "Rtilde", "active_pct",
                *[f"T_{j + 1}" for j in range(n_groups)], "train_acc", "val_acc", "test_acc", "ms"])
    for r in records:
        w.writerow([r.iteration, _fmt(r.gamma), _fmt(r.data_loss), _fmt(r.F), _fmt(r.G), _fmt(r.R),
                    _fmt(r.Rtilde), _fmt(r.active_pct), *[_fmt(x) for x in r.totals],
                    _fmt(r.train_acc), _fmt(r.val_acc), _fmt(r.test_acc), _fmt(r.ms)])
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class BatchSchedule:
    """Batch for iteration ``t`` (1-based), a pure function of ``(seed, t)``."""

    def __init__(self, ds: D.Dataset, batch_size: int, seed: int):
        self.ds, self.seed = ds, seed
        n = len(ds)
        self.full = batch_size == 0 or batch_size >= n
        self.batch_size = n if self.full else batch_size
        self.per_epoch = -(-n // self.batch_size)
        self._epoch, self._order = None, None

    def __call__(self, t: int):
        if self.full:
            return self.ds.features, self.ds.labels
        epoch, k = divmod(t - 1, self.per_epoch)
        if epoch != self._epoch:
            self._epoch, self._order = epoch, D.epoch_order(len(self.ds), self.seed, epoch)
        idx = self._order[k * self.batch_size:(k + 1) * self.batch_size]
        return self.ds.features[idx], self.ds.labels[idx]


@dataclass
class TrainResult:
    store: WeightStore
    scheme: GroupingScheme
    records: list[MetricsRecord]
    best_store: WeightStore
    best_iteration: int
    data: TaskData
    mask: list | None = None
    snapshots: dict = field(default_factory=dict)
    pruned: list = field(default_factory=list)  # (iteration, group, unit, path norm) per on-the-fly prune


def train_loop(cfg: ExperimentConfig, store: WeightStore, scheme: GroupingScheme, data: TaskData, *,
               start: int = 0, stop: int | None = None, mask: list | None = None,
               prune_zeroed: bool = False, snapshot_at: tuple[int, ...] = (),
               attach_optimizer: bool = True, best: tuple | None = None) -> TrainResult:
    """Run iterations ``start + 1 .. stop`` in place on ``store``.

    ``mask`` (one boolean array per group, True = active) freezes pruned
    units at zero; with ``prune_zeroed`` any unit whose ``w`` or ``v``
    becomes exactly zero is added to it. ``snapshot_at`` collects copies of
    the store, the mask and the best-so-far ``(store, iteration, score)``
    at the listed iterations; ``best`` seeds that triple when resuming.
    """
    stop = cfg.iterations if stop is None else stop
    opt = resolve_schedule(cfg.optimizer, stop)
    if attach_optimizer and start == 0:
        attach(store, scheme, opt)
    if prune_zeroed and mask is None:
        mask = [np.ones(g.n_units, dtype=bool) for g in scheme.groups]
    apply_mask(store, scheme, mask)
    batches = BatchSchedule(data.train, cfg.batch_size, cfg.seed)
    records: list[MetricsRecord] = []
    best_store, best_it, best_acc = best if best is not None else (store.copy(), start, -np.inf)
    snapshots, pruned = {}, []
    t0 = time.perf_counter()
    for t in range(start + 1, stop + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            loss = step(store, scheme, batches(t), opt, t, mask)
        if not np.isfinite(loss) or not all(np.isfinite(w).all() for w in store.weights):
            raise DivergenceError(f"non-finite loss at iteration {t}", t, records)
        if prune_zeroed:
            norms = unit_norms(store, scheme, opt.include_bias_in_unit)
            for j, (nw, nv) in enumerate(norms):
                newly = mask[j] & ((nw == 0) | (nv == 0))
                pruned += [(t, j, int(i), float(nw[i] * nv[i])) for i in np.flatnonzero(newly)]
                mask[j] &= ~newly
            apply_mask(store, scheme, mask)
        if t % cfg.eval_interval == 0 or t == stop:
            with np.errstate(over="ignore", invalid="ignore"):
                rec = evaluate(t, opt.gamma(t), store, scheme, data, cfg, 1000 * (time.perf_counter() - t0))
            if not all(np.isfinite(x) for x in (rec.data_loss, rec.F, rec.G)):
                raise DivergenceError(f"non-finite objective at iteration {t}", t, records)
            records.append(rec)
            sel = rec.val_acc if rec.val_acc is not None else rec.train_acc
            if sel > best_acc:
                best_acc, best_it, best_store = sel, t, store.copy()
        if t in snapshot_at:
            snapshots[t] = (store.copy(), None if mask is None else [m.copy() for m in mask],
                            (best_store, best_it, best_acc))
    return TrainResult(store, scheme, records, best_store, best_it, data, mask, snapshots, pruned)


def setup(cfg: ExperimentConfig):
    data = prepare_data(cfg)
    spec = build_spec(cfg, data.train)
    data = TaskData(*(shape_inputs(spec, ds) for ds in (data.train, data.val, data.test)))
    return spec, derive_grouping(spec), data


def _config_header(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)


def run_training(cfg: ExperimentConfig, resume_from=None, write: bool = True) -> TrainResult:
    """Train per ``cfg``; writes metrics.csv, config.json, final.json and best.json to ``cfg.output_dir``.

    ``resume_from`` is a checkpoint written by an earlier run with the same
    config; training continues from its recorded iteration.
    """
    log.info("effective config: %s", _config_header(cfg))
    spec, scheme, data = setup(cfg)
    start, prior, best = 0, [], None
    if resume_from is not None:
        store, doc = load_checkpoint(resume_from)
        if store.spec != spec:
            raise ConfigError("checkpoint architecture does not match the config")
        start = int(doc.get("iteration", 0))
        prior = [MetricsRecord(**{**r, "totals": tuple(r["totals"])}) for r in doc.get("records", [])]
        if "best" in doc:
            best_store, _ = load_checkpoint(Path(resume_from).with_name(doc["best"]["file"]))
            best = (best_store, int(doc["best"]["iteration"]), float(doc["best"]["score"]))
    else:
        store = init_store(spec, cfg.seed)
    out = Path(cfg.output_dir)
    try:
        res = train_loop(cfg, store, scheme, data, start=start,
                         snapshot_at=tuple(c for c in cfg.checkpoints if c > start), best=best)
    except DivergenceError as exc:
        if write:
            _write_outputs(out, cfg, scheme, prior + exc.records, store, None, exc.iteration)
        raise
    res.records = prior + res.records
    if write:
        _write_outputs(out, cfg, scheme, res.records, res.store, res.best_store, cfg.iterations)
        for t, (snap, _, (bstore, bit, bscore)) in res.snapshots.items():
            recs = [dataclasses.asdict(r) for r in res.records if r.iteration <= t]
            save_checkpoint(out / f"ckpt_{t}_best.json", bstore, cfg.seed)
            save_checkpoint(out / f"ckpt_{t}.json", snap, cfg.seed, {
                "iteration": t, "records": recs,
                "best": {"file": f"ckpt_{t}_best.json", "iteration": bit, "score": bscore}})
    return res


def _write_outputs(out: Path, cfg, scheme, records, store, best_store, iteration) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    (out / "metrics.csv").write_text(metrics_csv(records, len(scheme.groups)))
    extra = {"iteration": iteration, "records": [dataclasses.asdict(r) for r in records]}
    save_checkpoint(out / "final.json", store, cfg.seed, extra)
    if best_store is not None:
        save_checkpoint(out / "best.json", best_store, cfg.seed)


# ---------------------------------------------------------------------------
# prune and retrain
# ---------------------------------------------------------------------------


@dataclass
class PruneRow:
    checkpoint: int
    n_deactivated: int
    n_inactive: int
    max_deactivated_path_norm: float
    active_pct: float
    test_acc: float | None
    stayed_zero: bool


@dataclass
class PruneResult:
    rows: list[PruneRow]
    main: TrainResult
    deactivations: dict  # checkpoint -> (group, unit, path norm at deactivation), threshold and retraining prunes
    masks: dict  # checkpoint -> mask after retraining


def prune_retrain(cfg: ExperimentConfig, write: bool = True) -> PruneResult:
    """Train with on-the-fly pruning, then threshold-deactivate and retrain from each checkpoint."""
    if not cfg.checkpoints:
        raise ConfigError("prune_retrain needs a non-empty checkpoint schedule")
    if max(cfg.checkpoints) > cfg.iterations:
        raise ConfigError("checkpoint beyond the training budget")
    spec, scheme, data = setup(cfg)
    if not scheme.groups:
        raise ConfigError("prune_retrain needs a grouped model")
    inc = cfg.optimizer.include_bias_in_unit
    store = init_store(spec, cfg.seed)
    main = train_loop(cfg, store, scheme, data, prune_zeroed=True, snapshot_at=cfg.checkpoints)
    rows, deacts, masks = [], {}, {}
    retrain_cfg = dataclasses.replace(cfg, iterations=max(cfg.retrain_iters, 1))
    for ck in sorted(cfg.checkpoints):
        snap, mask, _ = main.snapshots[ck]
        snap = snap.copy()
        mask = [m.copy() for m in mask]
        gone = []
        for j, (nw, nv) in enumerate(unit_norms(snap, scheme, inc)):
            pn = nw * nv
            newly = mask[j] & (pn < cfg.sparsity_threshold)
            gone += [(j, int(i), float(pn[i])) for i in np.flatnonzero(newly)]
            mask[j] &= ~newly
        apply_mask(snap, scheme, mask)
        frozen = [~m for m in mask]
        if cfg.retrain_iters > 0:
            rt = train_loop(retrain_cfg, snap, scheme, data, mask=mask, prune_zeroed=True,
                            attach_optimizer=False)
            snap, mask = rt.store, rt.mask
            gone += [(j, i, pn) for _, j, i, pn in rt.pruned]
        stayed = all(
            np.all(nw[f] == 0) and np.all(nv[f] == 0)
            for f, (nw, nv) in zip(frozen, unit_norms(snap, scheme, inc))
        )
        active = sum(int(m.sum()) for m in mask) / scheme.n_units
        n_inactive = sum(int((~m).sum()) for m in mask)
        rows.append(PruneRow(ck, len(gone), n_inactive, max((g[2] for g in gone), default=0.0), 100.0 * active,
                             accuracy(spec, snap, data.test), stayed))
        deacts[ck], masks[ck] = gone, mask
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        (out / "metrics.csv").write_text(metrics_csv(main.records, len(scheme.groups)))
        (out / "prune.csv").write_text(prune_csv(rows))
    return PruneResult(rows, main, deacts, masks)


def prune_csv(rows: list[PruneRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["checkpoint", "n_deactivated", "n_inactive", "max_deactivated_path_norm", "active_pct", "test_acc", "stayed_zero"])
    for r in rows:
        w.writerow([r.checkpoint, r.n_deactivated, r.n_inactive, _fmt(r.max_deactivated_path_norm), _fmt(r.active_pct),
                    _fmt(r.test_acc), int(r.stayed_zero)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# convergence comparison
# ---------------------------------------------------------------------------


def _task_key(cfg: ExperimentConfig):
    return (dataclasses.asdict(cfg.task), dataclasses.asdict(cfg.model), cfg.optimizer.lam, cfg.seed,
            cfg.iterations, cfg.eval_interval, cfg.batch_size)


def select_lr(cfg: ExperimentConfig, grid) -> tuple[float, TrainResult]:
    """Learning rate from ``grid`` with the lowest final weight-decay objective."""
    best = None
    for lr in grid:
        c = cfg.with_overrides(**{"optimizer.lr": float(lr)})
        try:
            res = run_training(c, write=False)
        except (DivergenceError, ConfigError):
            continue
        if best is None or res.records[-1].F < best[1].records[-1].F:
            best = (float(lr), res)
    if best is None:
        raise DivergenceError("every learning rate in the grid diverged", 0)
    return best


def compare_convergence(cfgs: list[ExperimentConfig], path=None) -> tuple[str, list[TrainResult]]:
    """Run each config from the same initialization and data order; one aligned F column per run."""
    if not cfgs:
        raise ConfigError("compare needs at least one run")
    key = _task_key(cfgs[0])
    for c in cfgs[1:]:
        if _task_key(c) != key:
            raise ConfigError("compared runs must share task, model, lambda, seed and iteration budget")
    results = [run_training(c, write=False) for c in cfgs]
    names, seen = [], {}
    for c in cfgs:
        base = f"F_{c.optimizer.algorithm}"
        seen[base] = seen.get(base, 0) + 1
        names.append(base if seen[base] == 1 else f"{base}_{seen[base]}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", *names])
    for rows in zip(*(r.records for r in results)):
        its = {r.iteration for r in rows}
        if len(its) != 1:
            raise ConfigError("evaluation iterations do not align across runs")
        w.writerow([rows[0].iteration, *[_fmt(r.F) for r in rows]])
    text = buf.getvalue()
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text, results


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


@dataclass
class BoundaryGrid:
    x: np.ndarray
    y: np.ndarray
    p0: np.ndarray
    p1: np.ndarray


def export_decision_boundary(spec: NetworkSpec, store: WeightStore, bounds=(-3.0, 3.0, -3.0, 3.0),
                             resolution: int = 100, path=None) -> BoundaryGrid:
    """Class-0 probability on a ``resolution x resolution`` grid; CSV columns x, y, p0, p1."""
    if spec.input_shape != (2,) or spec.output_dim != 2:
        raise ContractError(f"decision boundary needs a 2-input, 2-class network, got {spec.input_shape} -> {spec.output_dim}")
    x0, x1, y0, y1 = bounds
    xs, ys = np.linspace(x0, x1, resolution), np.linspace(y0, y1, resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    p = softmax(predict(spec, store, pts))
    grid = BoundaryGrid(pts[:, 0], pts[:, 1], p[:, 0], p[:, 1])
    if path is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "p0", "p1"])
        for row in zip(grid.x, grid.y, grid.p0, grid.p1):
            w.writerow([_fmt(v) for v in row])
        Path(path).write_text(buf.getvalue())
    return grid


def level_set_nonempty(grid: BoundaryGrid, resolution: int, level: float = 0.5) -> bool:
    """True if ``p0 - level`` changes sign between some pair of neighbouring grid points."""
    d = (grid.p0 - level).reshape(resolution, resolution)
    if np.any(d == 0):
        return True
    return bool(np.any(d[:, 1:] * d[:, :-1] < 0) or np.any(d[1:, :] * d[:-1, :] < 0))


def export_lipschitz_histogram(spec: NetworkSpec, store: WeightStore, samples, path=None) -> dict:
    """Per-sample Jacobian spectral norms, plus mean and median summary rows."""
    res = jacobian_spectral_norms(spec, store, samples)
    vals = np.array([r.value for r in res])
    summary = {"values": vals, "converged": np.array([r.converged for r in res]),
               "mean": float(vals.mean()), "median": float(np.median(vals))}
    if path is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "sigma_max", "converged"])
        for i, r in enumerate(res):
            w.writerow([i, _fmt(r.value), int(r.converged)])
        w.writerow(["mean", _fmt(summary["mean"]), ""])
        w.writerow(["median", _fmt(summary["median"]), ""])
        Path(path).write_text(buf.getvalue())
    return summary
