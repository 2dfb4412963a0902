"""Dense float64 tensors with a reverse-mode gradient tape.

Only the layer set needed by the models in this package is supported:
affine maps, ReLU, stride-1 2D convolution, 2x2 pooling, flattening and
softmax cross-entropy. Every op works on plain :class:`Tensor` values; if
any operand lives on a :class:`Tape`, the op is recorded there so that
:func:`backward` can replay it in reverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError


class Tensor:
    """A row-major float64 array, optionally attached to a tape."""

    __slots__ = ("data", "tape", "name")

    def __init__(self, data, tape: "Tape | None" = None, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


@dataclass
class TapeEntry:
    output: Tensor
    inputs: tuple[Tensor, ...]
    # maps d(loss)/d(output) to one gradient (or None) per input
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    op: str = ""


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Entries are appended as ops run, so operands always precede the entry
    that consumes them.
    """

    entries: list[TapeEntry] = field(default_factory=list)
    leaves: dict[str, Tensor] = field(default_factory=dict)

    def watch(self, name: str, data) -> Tensor:
        """Register a leaf whose gradient :func:`backward` should report."""
        t = Tensor(data, tape=self, name=name)
        self.leaves[name] = t
        return t

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward, op: str = "") -> Tensor:
        output.tape = self
        self.entries.append(TapeEntry(output, tuple(inputs), backward, op))
        return output

    def __len__(self) -> int:
        return len(self.entries)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor | None) -> Tape | None:
    for t in ts:
        if t is not None and t.tape is not None:
            return t.tape
    return None


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward, op: str) -> Tensor:
    tape = _tape_of(*inputs)
    out = Tensor(data)
    if tape is not None:
        tape.record(out, inputs, backward, op)
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def linear_forward(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``out[s, i] = sum_j W[i, j] x[s, j] + b[i]``."""
    x, W = _as_tensor(x), _as_tensor(W)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not conform to weight {W.shape}")
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (W.shape[0],):
            raise DimensionError(f"linear: bias {b.shape} does not conform to weight {W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ Wd
        gW = g.T @ xd
        if b is None:
            return gx, gW
        return gx, gW, g.sum(axis=0)

    inputs = (x, W) if b is None else (x, W, b)
    return _emit(out, inputs, backward, "linear")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _pad_amounts(k: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        lo = (k - 1) // 2
        return lo, k - 1 - lo
    raise ContractError(f"unknown padding {padding!r}; expected 'valid' or 'same'")


def conv2d_forward(x: Tensor, K: Tensor, b: Tensor | None = None, padding: str = "valid") -> Tensor:
    """Stride-1 sliding-window convolution (cross-correlation, kernel not flipped).

    ``out[n, i, p, q] = sum_{j, a, c} K[i, j, a, c] * xpad[n, j, p + a, q + c] + b[i]``
    """
    x, K = _as_tensor(x), _as_tensor(K)
    if x.ndim != 4 or K.ndim != 4 or x.shape[1] != K.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not conform to kernel {K.shape}")
    c_out, _, kh, kw = K.shape
    ph, pw = _pad_amounts(kh, padding), _pad_amounts(kw, padding)
    H, Wd = x.shape[2] + sum(ph), x.shape[3] + sum(pw)
    if kh > H or kw > Wd:
        raise DimensionError(
            f"conv2d: kernel {K.shape} larger than padded input {(x.shape[0], x.shape[1], H, Wd)}"
        )
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (c_out,):
            raise DimensionError(f"conv2d: bias {b.shape} does not conform to kernel {K.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), ph, pw))
    # windows: (N, C_in, Ho, Wo, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    Kd = K.data
    out = np.einsum("njpqac,ijac->nipq", win, Kd, optimize=True)
    if b is not None:
        out = out + b.data[None, :, None, None]
    Ho, Wo = out.shape[2], out.shape[3]
    in_shape = x.shape

    def backward(g):
        gK = np.einsum("nipq,njpqac->ijac", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        for a in range(kh):
            for c in range(kw):
                gxp[:, :, a:a + Ho, c:c + Wo] += np.einsum("nipq,ij->njpq", g, Kd[:, :, a, c])
        gx = gxp[:, :, ph[0]:ph[0] + in_shape[2], pw[0]:pw[0] + in_shape[3]]
        if b is None:
            return gx, gK
        return gx, gK, g.sum(axis=(0, 2, 3))

    inputs = (x, K) if b is None else (x, K, b)
    return _emit(out, inputs, backward, "conv2d")


def pool2x2(x: Tensor, kind: str = "max") -> Tensor:
    """Channel-wise 2x2 stride-2 pooling; odd trailing rows/columns are dropped."""
    x = _as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise DimensionError(f"pool2x2: need spatial dims >= 2, got {x.shape}")
    if kind not in ("max", "avg"):
        raise ContractError(f"unknown pooling kind {kind!r}")
    n, c, H, W = x.shape
    Ho, Wo = H // 2, W // 2
    blocks = x.data[:, :, :2 * Ho, :2 * Wo].reshape(n, c, Ho, 2, Wo, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, Ho, Wo, 4)
    if kind == "avg":
        out = blocks.mean(axis=-1)
        sel = np.full(blocks.shape, 0.25)
    else:
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        sel = np.zeros(blocks.shape)
        np.put_along_axis(sel, arg[..., None], 1.0, axis=-1)

    def backward(g):
        gb = (sel * g[..., None]).reshape(n, c, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros((n, c, H, W))
        gx[:, :, :2 * Ho, :2 * Wo] = gb.reshape(n, c, 2 * Ho, 2 * Wo)
        return (gx,)

    return _emit(out, (x,), backward, f"{kind}pool")


def flatten(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),), "flatten")


def scale(x: Tensor, alpha: float) -> Tensor:
    x = _as_tensor(x)
    return _emit(alpha * x.data, (x,), lambda g: (alpha * g,), "scale")


def tensor_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def column_sum(x: Tensor, k: int) -> Tensor:
    """Scalar ``sum_s x[s, k]``; one backward pass gives row ``k`` of every per-sample Jacobian."""
    x = _as_tensor(x)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[:, k] = float(g)
        return (gx,)

    return _emit(np.array(x.data[:, k].sum()), (x,), backward, "column_sum")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` and the row-wise softmax probabilities."""
    logits = _as_tensor(logits)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"softmax_cross_entropy: need (batch, K>=2) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, K = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= K):
        raise IndexError(f"label out of range [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    p = np.exp(logp)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (float(g) * d / n,)

    return _emit(np.array(loss), (logits,), backward, "softmax_xent"), p


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a gradient for every watched leaf; leaves that did not influence
    ``loss`` get zeros. Contributions from repeated uses are summed.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or inp.tape is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return {
        name: grads.get(id(leaf), np.zeros_like(leaf.data)).reshape(leaf.shape)
        for name, leaf in tape.leaves.items()
    }


def finite_difference_gradient(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of scalar ``f`` at ``params``, one coordinate at a time."""
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f(work)
            flat[idx] = orig - h
            fm = f(work)
            flat[idx] = orig
            gflat[idx] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out
