"""Objectives and diagnostics: sum of squares, l2 path norm, sparsity, Lipschitz estimates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import (
    GroupingScheme,
    HomogeneousUnitView,
    NetworkSpec,
    WeightStore,
    forward,
    group_v,
    group_w,
)
from .tensor import Tape, backward, column_sum, softmax_cross_entropy


def unit_norms(store: WeightStore, scheme: GroupingScheme, include_bias: bool = False):
    """Per group, the pair ``(||w_i||, ||v_i||)`` as two arrays over units."""
    out = []
    for g in scheme.groups:
        out.append((np.linalg.norm(group_w(store, g, include_bias), axis=1),
                    np.linalg.norm(group_v(store, g), axis=1)))
    return out


def unit_path_norms(store: WeightStore, scheme: GroupingScheme, include_bias: bool = False) -> list[np.ndarray]:
    return [nw * nv for nw, nv in unit_norms(store, scheme, include_bias)]


def group_totals(store: WeightStore, scheme: GroupingScheme, include_bias: bool = False) -> np.ndarray:
    """Total path norm ``T_j = sum_i ||w_i|| ||v_i||`` of each group."""
    return np.array([p.sum() for p in unit_path_norms(store, scheme, include_bias)])


def _residual_sq(store: WeightStore, scheme: GroupingScheme) -> float:
    return float(sum(np.sum(store.weights[k] ** 2) for k in scheme.residual))


def sum_squared_weights(store: WeightStore, scheme: GroupingScheme, include_bias: bool = False) -> float:
    """Sum of squares of every regularized parameter, each counted once."""
    total = 0.0
    for g in scheme.groups:
        total += float(np.sum(group_w(store, g, include_bias) ** 2))
        total += float(np.sum(store.weights[g.out_layer] ** 2))
    return total + scheme.c * _residual_sq(store, scheme)


def path_norm_regularizer(store: WeightStore, scheme: GroupingScheme, include_bias: bool = False) -> float:
    """Sum of unit path norms plus half the residual sum of squares."""
    return float(group_totals(store, scheme, include_bias).sum()) + 0.5 * scheme.c * _residual_sq(store, scheme)


@dataclass
class ObjectiveBreakdown:
    data_loss: float
    R: float
    Rtilde: float
    c_term: float
    F: float
    G: float
    totals: np.ndarray
    lam: float


def objectives(store: WeightStore, scheme: GroupingScheme, x, y, lam: float,
               include_bias: bool = False) -> ObjectiveBreakdown:
    """Weight-decay objective ``F = L + lam/2 R`` and path-norm objective ``G = L + lam Rtilde``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    loss, _ = softmax_cross_entropy(forward(store.spec, store, x), y)
    L = float(loss.data)
    R = sum_squared_weights(store, scheme, include_bias)
    totals = group_totals(store, scheme, include_bias)
    c_term = 0.5 * scheme.c * _residual_sq(store, scheme)
    Rt = float(totals.sum()) + c_term
    return ObjectiveBreakdown(L, R, Rt, c_term, L + 0.5 * lam * R, L + lam * Rt, totals, lam)


def structural_sparsity(store: WeightStore, scheme: GroupingScheme, threshold: float = 1e-5,
                        include_bias: bool = False) -> float:
    """Fraction of grouped units with ``||w|| ||v|| > threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    pn = unit_path_norms(store, scheme, include_bias)
    total = sum(p.size for p in pn)
    if total == 0:
        return 1.0
    return sum(int((p > threshold).sum()) for p in pn) / total


def unit_lipschitz_bound(view: HomogeneousUnitView) -> float:
    """Cauchy-Schwarz bound ``||w|| ||v||`` on the Lipschitz constant of ``x -> v relu(w.x)``."""
    return float(np.linalg.norm(view.w) * np.linalg.norm(view.v))


# ---------------------------------------------------------------------------
# input-output Jacobian
# ---------------------------------------------------------------------------


def input_jacobians(spec: NetworkSpec, store: WeightStore, X) -> np.ndarray:
    """Per-sample Jacobians of logits w.r.t. inputs, shape ``(N, K, input_dim)``.

    Samples do not interact, so backpropagating ``sum_s logits[s, k]`` yields
    row ``k`` of all N Jacobians at once; K passes in total.
    """
    X = np.asarray(X, dtype=np.float64)
    tape = Tape()
    logits = forward(spec, store, X, tape=tape, watch_input=True)
    K = logits.shape[1]
    J = np.empty((X.shape[0], K, spec.input_dim))
    n_recorded = len(tape.entries)
    for k in range(K):
        root = column_sum(logits, k)
        J[:, k, :] = backward(tape, root)["input"].reshape(X.shape[0], -1)
        del tape.entries[n_recorded:]
    return J


@dataclass
class SpectralNorm:
    value: float
    iterations: int
    converged: bool


def spectral_norm_power(J: np.ndarray, tol: float = 1e-9, max_iter: int = 1000, seed: int = 0) -> SpectralNorm:
    """Largest singular value of ``J`` by power iteration on ``J^T J``."""
    J = np.atleast_2d(np.asarray(J, dtype=np.float64))
    u = np.random.default_rng(seed).normal(size=J.shape[1])
    u /= np.linalg.norm(u)
    prev = None
    for it in range(1, max_iter + 1):
        Ju = J @ u
        val = float(Ju @ Ju)  # Rayleigh quotient of J^T J at unit u
        z = J.T @ Ju
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return SpectralNorm(0.0, it, True)
        u = z / nz
        if prev is not None and abs(val - prev) <= tol * max(abs(val), 1e-300):
            return SpectralNorm(float(np.sqrt(val)), it, True)
        prev = val
    return SpectralNorm(float(np.sqrt(prev)), max_iter, False)


def jacobian_spectral_norm(spec: NetworkSpec, store: WeightStore, x,
                           tol: float = 1e-9, max_iter: int = 1000) -> SpectralNorm:
    """Local Lipschitz estimate ``sigma_max(d logits / d x)`` at a single input ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape((1,) + spec.input_shape)
    return spectral_norm_power(input_jacobians(spec, store, x)[0], tol, max_iter)


def jacobian_spectral_norms(spec: NetworkSpec, store: WeightStore, X,
                            tol: float = 1e-9, max_iter: int = 1000) -> list[SpectralNorm]:
    return [spectral_norm_power(J, tol, max_iter) for J in input_jacobians(spec, store, X)]
