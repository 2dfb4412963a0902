"""Training steps for the weight-decay objective and its path-norm equivalent.

All steps evaluate gradients once at the current weights and then update
every block from those gradients. Biases are never regularized unless
``include_bias_in_unit`` is set, in which case the input-layer bias of each
grouped unit is treated as one more coordinate of ``w``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DegenerateInputError
from .models import (
    Group,
    GroupingScheme,
    HomogeneousUnitView,
    WeightStore,
    forward,
    group_v,
    group_w,
    set_group_v,
    set_group_w,
)
from .regularization import group_totals, unit_norms
from .tensor import Tape, backward, softmax_cross_entropy

log = logging.getLogger(__name__)

ZERO_NORM = 1e-12

ALGORITHMS = ("pathprox", "sgd_wd", "sgd_pathnorm", "wn_sgd", "lasso", "group_lasso")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class Schedule:
    """Step-size schedule.

    ``constant``: ``lr``. ``step``: ``lr * factor**k`` where ``k`` counts the
    milestones already passed (or completed ``interval`` blocks).
    ``inv_sqrt``: ``lr / sqrt(t)``. ``inv``: ``lr / t``.
    """

    kind: str = "constant"
    factor: float = 0.1
    interval: int | None = None
    milestones: tuple[int, ...] = ()
    milestones_frac: tuple[float, ...] = ()  # fractions of the run, resolved by the harness

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        self.milestones_frac = tuple(float(f) for f in self.milestones_frac)
        if self.kind not in ("constant", "step", "inv_sqrt", "inv"):
            raise ConfigError(f"unknown schedule {self.kind!r}")
        if self.kind == "step":
            if not 0 < self.factor <= 1:
                raise ConfigError("step decay factor must be in (0, 1]")
            if self.interval is not None and self.interval < 1:
                raise ConfigError("step decay interval must be >= 1")

    def __call__(self, lr: float, t: int) -> float:
        if self.kind == "constant":
            return lr
        if self.kind == "inv_sqrt":
            return lr / np.sqrt(t)
        if self.kind == "inv":
            return lr / t
        k = sum(t > m for m in self.milestones)
        if self.interval:
            k += (t - 1) // self.interval
        return lr * self.factor ** k


@dataclass
class OptimizerConfig:
    algorithm: str = "pathprox"
    lam: float = 1e-4
    lr: float = 0.1
    schedule: Schedule = field(default_factory=Schedule)
    layerwise_balance: bool = True
    include_bias_in_unit: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = Schedule(**self.schedule)
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")

    def gamma(self, t: int) -> float:
        return self.schedule(self.lr, t)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def prox_group_l2(z, t: float) -> np.ndarray:
    """``argmin_x 0.5 ||x - z||^2 + t ||x||_2``: zero below the threshold, radial shrink above."""
    if t < 0:
        raise ValueError("threshold must be non-negative")
    z = np.asarray(z, dtype=np.float64)
    nz = np.linalg.norm(z)
    if nz <= t:
        return np.zeros_like(z)
    return z * (1.0 - t / nz)


def prox_group_l2_rows(Z: np.ndarray, t: float) -> np.ndarray:
    nz = np.linalg.norm(Z, axis=1, keepdims=True)
    keep = nz > t
    factor = np.where(keep, 1.0 - t / np.where(keep, nz, 1.0), 0.0)
    return Z * factor


def project_unit_sphere(y, fallback=None) -> np.ndarray:
    """``y / ||y||``; for ``||y|| <= 1e-12`` returns ``fallback`` (the previous direction)."""
    y = np.asarray(y, dtype=np.float64)
    ny = np.linalg.norm(y)
    if ny <= ZERO_NORM:
        if fallback is None:
            raise DegenerateInputError("cannot project a zero vector without a fallback direction")
        return np.asarray(fallback, dtype=np.float64).copy()
    return y / ny


def project_rows(Y: np.ndarray, previous: np.ndarray) -> np.ndarray:
    ny = np.linalg.norm(Y, axis=1, keepdims=True)
    ok = ny > ZERO_NORM
    return np.where(ok, Y / np.where(ok, ny, 1.0), previous)


def soft_threshold(z, t: float) -> np.ndarray:
    if t < 0:
        raise ValueError("threshold must be non-negative")
    z = np.asarray(z, dtype=np.float64)
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def _unit_dirs(M: np.ndarray) -> np.ndarray:
    """Rows divided by their norms, zero rows left at zero (the subgradient choice at 0)."""
    n = np.linalg.norm(M, axis=1, keepdims=True)
    return np.where(n > 0, M / np.where(n > 0, n, 1.0), 0.0)


# ---------------------------------------------------------------------------
# balancing
# ---------------------------------------------------------------------------


def balance_unit(view: HomogeneousUnitView) -> None:
    """Rescale one unit so ``||w|| = ||v||``; no-op if either norm is zero."""
    nw, nv = np.linalg.norm(view.w), np.linalg.norm(view.v)
    if nw == 0 or nv == 0:
        return
    alpha = np.sqrt(nv / nw)
    view.w = view.w * alpha
    if view.bias is not None:
        view.bias = view.bias * alpha
    view.v = view.v / alpha
    view.write()


def _scale_units(store: WeightStore, group: Group, alpha: np.ndarray) -> None:
    """Function-preserving ``(w, b, v) -> (alpha w, alpha b, v / alpha)`` for every unit of a group."""
    W = store.weights[group.in_layer]
    shape = (-1,) + (1,) * (W.ndim - 1)
    store.weights[group.in_layer] = W * alpha.reshape(shape)
    b = store.biases[group.in_layer]
    if b is not None:
        store.biases[group.in_layer] = b * alpha
    V = store.weights[group.out_layer]
    vshape = (1, -1) + (1,) * (V.ndim - 2)
    store.weights[group.out_layer] = V / alpha.reshape(vshape)
    store.bump()


def balance_units(store: WeightStore, scheme: GroupingScheme, include_bias: bool = False) -> None:
    """:func:`balance_unit` applied to every grouped unit."""
    for g, (nw, nv) in zip(scheme.groups, unit_norms(store, scheme, include_bias)):
        ok = (nw > 0) & (nv > 0)
        alpha = np.ones_like(nw)
        alpha[ok] = np.sqrt(nv[ok] / nw[ok])
        _scale_units(store, g, alpha)


def collapse_dead_units(store: WeightStore, scheme: GroupingScheme) -> None:
    """Zero ``w`` and its bias for every unit whose ``v`` is exactly zero.

    Such a unit contributes nothing downstream, so this preserves the
    function; it is the limit of balancing as ``alpha -> 0``.
    """
    for g, (_, nv) in zip(scheme.groups, unit_norms(store, scheme, False)):
        dead = nv == 0
        if dead.any():
            store.weights[g.in_layer][dead] = 0.0
            if store.biases[g.in_layer] is not None:
                store.biases[g.in_layer][dead] = 0.0
    store.bump()


def normalize_units(store: WeightStore, scheme: GroupingScheme, include_bias: bool = False) -> None:
    """Rescale every nonzero unit to ``||w|| = 1`` without changing the network function."""
    for g, (nw, _) in zip(scheme.groups, unit_norms(store, scheme, include_bias)):
        alpha = np.where(nw > ZERO_NORM, 1.0 / np.where(nw > ZERO_NORM, nw, 1.0), 1.0)
        _scale_units(store, g, alpha)


@dataclass
class BalanceResult:
    scales: np.ndarray
    status: str  # "ok" | "all_zero"
    passes: int = 1


def layerwise_balance(store: WeightStore, scheme: GroupingScheme, include_bias: bool = False,
                      max_passes: int = 50, rtol: float = 1e-13) -> BalanceResult:
    """Equalize the total path norm of all groups while preserving the network function.

    Group ``j``'s output weights are scaled by ``s_j = G / T_j`` (``G`` the
    geometric mean of the nonzero totals) and every bias from that layer on
    by the running product of the ``s``; since ``prod s_j = 1`` the logits are
    unchanged. When biases count towards ``||w||`` the downstream bias
    scaling moves later totals, so the pass is repeated until they agree.
    """
    m = len(scheme.groups)
    cumulative = np.ones(m)
    for p in range(1, max_passes + 1):
        T = group_totals(store, scheme, include_bias)
        live = T > 0
        if not live.any():
            log.warning("layerwise_balance: all group totals are zero; nothing to balance")
            return BalanceResult(np.ones(m), "all_zero", p)
        G = np.exp(np.mean(np.log(T[live])))
        s = np.ones(m)
        s[live] = G / T[live]
        _apply_group_scales(store, scheme, s)
        cumulative *= s
        if not include_bias:
            break
        T = group_totals(store, scheme, include_bias)
        if np.all(np.abs(T[live] - G) <= rtol * G):
            break
    return BalanceResult(cumulative, "ok", p)


def _apply_group_scales(store: WeightStore, scheme: GroupingScheme, s: np.ndarray) -> None:
    bias_scale = np.ones(scheme.n_layers)
    for g, sj in zip(scheme.groups, s):
        store.weights[g.out_layer] = store.weights[g.out_layer] * sj
        bias_scale[g.out_layer:] *= sj
    for k, b in enumerate(store.biases):
        if b is not None and bias_scale[k] != 1.0:
            store.biases[k] = b * bias_scale[k]
    store.bump()


# ---------------------------------------------------------------------------
# gradients and masks
# ---------------------------------------------------------------------------


def compute_gradients(store: WeightStore, x, y) -> tuple[float, WeightStore]:
    """Data loss at the current weights and its gradient, laid out like ``store``."""
    tape = Tape()
    loss, _ = softmax_cross_entropy(forward(store.spec, store, x, tape=tape), y)
    grads = backward(tape, loss)
    gstore = WeightStore(
        store.spec,
        [grads[f"W{k}"] for k in range(len(store.weights))],
        [None if b is None else grads[f"b{k}"] for k, b in enumerate(store.biases)],
    )
    return float(loss.data), gstore


UnitMask = list  # one boolean array per group; True marks an active unit


def apply_mask(store: WeightStore, scheme: GroupingScheme, mask: UnitMask | None) -> None:
    """Zero the input weights, input bias and output weights of every inactive unit."""
    if mask is None:
        return
    for g, active in zip(scheme.groups, mask):
        dead = ~np.asarray(active, dtype=bool)
        if not dead.any():
            continue
        store.weights[g.in_layer][dead] = 0.0
        if store.biases[g.in_layer] is not None:
            store.biases[g.in_layer][dead] = 0.0
        store.weights[g.out_layer][:, dead] = 0.0
    store.bump()


def _commit(store: WeightStore, new: WeightStore) -> None:
    store.weights = new.weights
    store.biases = new.biases
    store.bump()


def _batch(batch):
    x, y = batch
    return np.asarray(x, dtype=np.float64), np.asarray(y)


def _biases_sgd(new: WeightStore, store: WeightStore, grads: WeightStore, gamma: float,
                skip: set[int] = frozenset()) -> None:
    for k, b in enumerate(store.biases):
        if b is not None and k not in skip:
            new.biases[k] = b - gamma * grads.biases[k]


def _regularized_bias_layers(store: WeightStore, scheme: GroupingScheme, include_bias: bool) -> set[int]:
    if not include_bias:
        return set()
    return {g.in_layer for g in scheme.groups if store.biases[g.in_layer] is not None}


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------


def sgd_weight_decay_step(store: WeightStore, scheme: GroupingScheme, batch, cfg: OptimizerConfig,
                          t: int = 1, mask: UnitMask | None = None) -> float:
    """Gradient step on the data loss, then shrink regularized parameters by ``1 - lam * gamma``."""
    gamma = cfg.gamma(t)
    shrink = 1.0 - cfg.lam * gamma
    if shrink <= 0:
        raise ConfigError(f"lambda * gamma = {cfg.lam * gamma} >= 1 would flip weight signs")
    loss, grads = compute_gradients(store, *_batch(batch))
    new = store.copy()
    for k, W in enumerate(store.weights):
        new.weights[k] = (W - gamma * grads.weights[k]) * shrink
    decayed = _regularized_bias_layers(store, scheme, cfg.include_bias_in_unit)
    _biases_sgd(new, store, grads, gamma, skip=decayed)
    for k in decayed:
        new.biases[k] = (store.biases[k] - gamma * grads.biases[k]) * shrink
    _commit(store, new)
    apply_mask(store, scheme, mask)
    return loss


def pathnorm_subgradient(store: WeightStore, scheme: GroupingScheme, lam: float,
                         include_bias: bool = False) -> WeightStore:
    """Subgradient of ``lam * Rtilde``, using ``d||u|| = u / ||u||`` and 0 at ``u = 0``."""
    reg = WeightStore(store.spec, [np.zeros_like(w) for w in store.weights],
                      [None if b is None else np.zeros_like(b) for b in store.biases])
    for g in scheme.groups:
        Wm, Vm = group_w(store, g, include_bias), group_v(store, g)
        nw = np.linalg.norm(Wm, axis=1, keepdims=True)
        nv = np.linalg.norm(Vm, axis=1, keepdims=True)
        set_group_w(reg, g, lam * nv * _unit_dirs(Wm), include_bias)
        set_group_v(reg, g, lam * nw * _unit_dirs(Vm))
    for k in scheme.residual:
        reg.weights[k] = lam * scheme.c * store.weights[k]
    return reg


def sgd_pathnorm_step(store: WeightStore, scheme: GroupingScheme, batch, cfg: OptimizerConfig,
                      t: int = 1, mask: UnitMask | None = None) -> float:
    """Plain subgradient step on ``L + lam * Rtilde``."""
    gamma = cfg.gamma(t)
    loss, grads = compute_gradients(store, *_batch(batch))
    reg = pathnorm_subgradient(store, scheme, cfg.lam, cfg.include_bias_in_unit)
    new = store.copy()
    for k, W in enumerate(store.weights):
        new.weights[k] = W - gamma * (grads.weights[k] + reg.weights[k])
    for k, b in enumerate(store.biases):
        if b is not None:
            new.biases[k] = b - gamma * (grads.biases[k] + reg.biases[k])
    _commit(store, new)
    apply_mask(store, scheme, mask)
    return loss


def _residual_weight_decay(new: WeightStore, store: WeightStore, grads: WeightStore,
                           scheme: GroupingScheme, cfg: OptimizerConfig, gamma: float) -> None:
    shrink = 1.0 - cfg.lam * gamma
    if scheme.residual and shrink <= 0:
        raise ConfigError(f"lambda * gamma = {cfg.lam * gamma} >= 1 would flip weight signs")
    for k in scheme.residual:
        new.weights[k] = (store.weights[k] - gamma * grads.weights[k]) * shrink


def pathprox_step(store: WeightStore, scheme: GroupingScheme, batch, cfg: OptimizerConfig,
                  t: int = 1, mask: UnitMask | None = None) -> float:
    """One proximal-gradient iteration on the path-norm objective.

    Per unit: gradient step on ``w`` then projection to the unit sphere;
    gradient step on ``v`` then group soft-thresholding at ``lam * gamma``.
    Residual (ungrouped) weights get SGD with weight decay, unregularized
    biases plain SGD. Optionally followed by :func:`layerwise_balance`.
    """
    gamma = cfg.gamma(t)
    inc = cfg.include_bias_in_unit
    loss, grads = compute_gradients(store, *_batch(batch))
    new = store.copy()
    _biases_sgd(new, store, grads, gamma, skip=_regularized_bias_layers(store, scheme, inc))
    for j, g in enumerate(scheme.groups):
        Wm = group_w(store, g, inc)
        Y = Wm - gamma * group_w(grads, g, inc)
        Wn = project_rows(Y, Wm)
        Z = group_v(store, g) - gamma * group_v(grads, g)
        Vn = prox_group_l2_rows(Z, cfg.lam * gamma)
        if mask is not None:
            dead = ~np.asarray(mask[j], dtype=bool)
            Wn[dead] = 0.0
            Vn[dead] = 0.0
        set_group_w(new, g, Wn, inc)
        set_group_v(new, g, Vn)
    _residual_weight_decay(new, store, grads, scheme, cfg, gamma)
    _commit(store, new)
    apply_mask(store, scheme, mask)
    if cfg.layerwise_balance:
        layerwise_balance(store, scheme, inc)
    return loss


def weight_norm_sgd_step(store: WeightStore, scheme: GroupingScheme, batch, cfg: OptimizerConfig,
                         t: int = 1, mask: UnitMask | None = None) -> float:
    """SGD with weight decay, then every grouped ``w`` projected back to unit norm."""
    inc = cfg.include_bias_in_unit
    previous = [group_w(store, g, inc) for g in scheme.groups]
    loss = sgd_weight_decay_step(store, scheme, batch, cfg, t, mask=None)
    for j, g in enumerate(scheme.groups):
        Wn = project_rows(group_w(store, g, inc), _unit_dirs(previous[j]))
        set_group_w(store, g, Wn, inc)
    apply_mask(store, scheme, mask)
    return loss


def lasso_sgd_step(store: WeightStore, scheme: GroupingScheme, batch, cfg: OptimizerConfig,
                   t: int = 1, mask: UnitMask | None = None) -> float:
    """Subgradient step on ``L + lam * sum |theta|`` over all regularized weights (sign(0) = 0)."""
    gamma = cfg.gamma(t)
    loss, grads = compute_gradients(store, *_batch(batch))
    new = store.copy()
    for k, W in enumerate(store.weights):
        new.weights[k] = W - gamma * (grads.weights[k] + cfg.lam * np.sign(W))
    decayed = _regularized_bias_layers(store, scheme, cfg.include_bias_in_unit)
    _biases_sgd(new, store, grads, gamma, skip=decayed)
    for k in decayed:
        b = store.biases[k]
        new.biases[k] = b - gamma * (grads.biases[k] + cfg.lam * np.sign(b))
    _commit(store, new)
    apply_mask(store, scheme, mask)
    return loss


def group_lasso_sgd_step(store: WeightStore, scheme: GroupingScheme, batch, cfg: OptimizerConfig,
                         t: int = 1, mask: UnitMask | None = None) -> float:
    """Subgradient step on ``L + lam * sum_i ||v_i||`` over the unit output vectors."""
    gamma = cfg.gamma(t)
    loss, grads = compute_gradients(store, *_batch(batch))
    new = store.copy()
    for k, W in enumerate(store.weights):
        new.weights[k] = W - gamma * grads.weights[k]
    _biases_sgd(new, store, grads, gamma)
    for g in scheme.groups:
        Vm = group_v(store, g)
        set_group_v(new, g, Vm - gamma * (group_v(grads, g) + cfg.lam * _unit_dirs(Vm)))
    _commit(store, new)
    apply_mask(store, scheme, mask)
    return loss


STEPS: dict[str, Callable] = {
    "pathprox": pathprox_step,
    "sgd_wd": sgd_weight_decay_step,
    "sgd_pathnorm": sgd_pathnorm_step,
    "wn_sgd": weight_norm_sgd_step,
    "lasso": lasso_sgd_step,
    "group_lasso": group_lasso_sgd_step,
}


def attach(store: WeightStore, scheme: GroupingScheme, cfg: OptimizerConfig) -> None:
    """Prepare ``store`` for ``cfg.algorithm``.

    The unit-sphere methods need ``||w|| = 1`` before the first step; this
    is reached by function-preserving rescaling rather than a bare projection.
    """
    if cfg.algorithm in ("pathprox", "wn_sgd"):
        normalize_units(store, scheme, cfg.include_bias_in_unit)


def step(store: WeightStore, scheme: GroupingScheme, batch, cfg: OptimizerConfig,
         t: int = 1, mask: UnitMask | None = None) -> float:
    return STEPS[cfg.algorithm](store, scheme, batch, cfg, t, mask)
