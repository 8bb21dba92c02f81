"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every differentiable operation appends a node to a thread-local tape in
execution order.  ``backward(loss)`` walks the tape in exact reverse order,
accumulates vector-Jacobian products, writes the result into ``Tensor.grad``
for every tensor that requires gradients, and clears the tape.  There is no
graph pruning and no operator fusion: the point is a small, auditable core
whose gradients can be checked coordinate-by-coordinate against finite
differences.

Each node's vjp receives a ``needs`` mask saying which inputs actually
require gradients, so expensive partials (convolution weight gradients when
only the input is attacked, for instance) are skipped.  The ``frozen``
context manager flips ``requires_grad`` off for a set of tensors; keep it
active through the matching ``backward`` call.

Broadcasting is deliberately restricted.  ``add`` accepts equal shapes or a
length-F bias against an (N, F) matrix; ``mul`` accepts equal shapes or a
scalar on either side.  Everything else must match exactly and raises
``ShapeError`` naming both shapes otherwise.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "frozen",
    "backward",
    "tape_size",
    "clear_tape",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "relu",
    "sigmoid",
    "reshape",
    "global_avg_pool",
    "scalar_mean",
    "softmax_cross_entropy",
    "binary_cross_entropy",
    "softmax_kl_divergence",
    "margin_loss",
    "channel_affine",
    "per_sample_scale",
    "batch_norm_train",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


def _shape_error(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    """A dense float64 array, optionally tracked by the autodiff tape.

    ``data`` is always a C-contiguous float64 ndarray.  ``grad`` starts as
    None and is filled in (or accumulated into) by ``backward``.  Tensors
    hash by identity, which the tape relies on.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise _shape_error("item", self.shape)
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same buffer, no grad tracking."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class _TapeState(threading.local):
    def __init__(self):
        self.nodes = []
        self.recording = True


_STATE = _TapeState()


def tape_size() -> int:
    return len(_STATE.nodes)


def clear_tape():
    """Drop all recorded nodes without propagating anything."""
    _STATE.nodes.clear()


@contextlib.contextmanager
def no_grad():
    """Suspend tape recording for the duration of the block."""
    prev = _STATE.recording
    _STATE.recording = False
    try:
        yield
    finally:
        _STATE.recording = prev


@contextlib.contextmanager
def frozen(tensors):
    """Temporarily clear ``requires_grad`` on ``tensors``.

    Freezing decides which partials the backward pass computes, so the block
    must stay open through the matching ``backward`` call.
    """
    tensors = list(tensors)
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(tensors, saved):
            t.requires_grad = flag


def _track(out_data, inputs, vjp) -> Tensor:
    out = Tensor(out_data)
    if _STATE.recording and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _STATE.nodes.append(_Node(out, inputs, vjp))
    return out


def backward(loss: Tensor):
    """Propagate d(loss) through the tape, then clear it.

    ``loss`` must be a scalar produced while recording.  Gradients are
    accumulated into ``.grad`` of every reachable tensor with
    ``requires_grad`` set; an existing ``.grad`` is added to, matching the
    usual accumulate-until-zeroed convention.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.shape != ():
        raise _shape_error("backward (loss must be scalar)", loss.shape)
    nodes = _STATE.nodes
    if not nodes:
        raise RuntimeError("backward called with an empty tape")
    try:
        pending = {loss: np.ones((), dtype=np.float64)}
        for node in reversed(nodes):
            g = pending.pop(node.out, None)
            if g is None:
                continue
            # A tensor's upstream contributions are all recorded after its
            # producing node, so g is complete by the time we get here.
            node.out.grad = g if node.out.grad is None else node.out.grad + g
            needs = tuple(t.requires_grad for t in node.inputs)
            if not any(needs):
                continue
            for t, gt in zip(node.inputs, node.vjp(g, needs)):
                if gt is None or not t.requires_grad:
                    continue
                acc = pending.get(t)
                pending[t] = gt if acc is None else acc + gt
        for t, g in pending.items():  # leaves
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
    finally:
        nodes.clear()


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b for equal shapes, or matrix (N, F) + bias (F,)."""
    if a.shape == b.shape:
        return _track(a.data + b.data, (a, b), lambda g, needs: (g, g))
    if a.ndim == 2 and b.shape == (a.shape[1],):
        return _track(a.data + b.data, (a, b), lambda g, needs: (g, g.sum(axis=0)))
    raise _shape_error("add", a.shape, b.shape)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("sub", a.shape, b.shape)
    return _track(a.data - b.data, (a, b), lambda g, needs: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product for equal shapes, or scalar () on either side."""
    if a.shape == b.shape:
        return _track(a.data * b.data, (a, b),
                      lambda g, needs: (g * b.data if needs[0] else None,
                                        g * a.data if needs[1] else None))
    if b.shape == ():
        return _track(a.data * b.data, (a, b),
                      lambda g, needs: (g * b.data if needs[0] else None,
                                        np.asarray((g * a.data).sum()) if needs[1] else None))
    if a.shape == ():
        return _track(a.data * b.data, (a, b),
                      lambda g, needs: (np.asarray((g * b.data).sum()) if needs[0] else None,
                                        g * a.data if needs[1] else None))
    raise _shape_error("mul", a.shape, b.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    return _track(a.data @ b.data, (a, b),
                  lambda g, needs: (g @ b.data.T if needs[0] else None,
                                    a.data.T @ g if needs[1] else None))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0
    return _track(np.where(mask, x.data, 0.0), (x,),
                  lambda g, needs: (np.where(mask, g, 0.0),))


# sigmoid outputs are pinned strictly inside (0, 1) so that downstream logs
# stay finite even for extreme pre-activations.
_SIG_FLOOR = 1e-300
_SIG_CEIL = np.nextafter(1.0, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    np.clip(out, _SIG_FLOOR, _SIG_CEIL, out=out)
    return _track(out, (x,), lambda g, needs: (g * out * (1.0 - out),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise _shape_error(f"reshape to {shape}", x.shape)
    old = x.shape
    return _track(x.data.reshape(shape), (x,), lambda g, needs: (g.reshape(old),))


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.ndim != 4:
        raise _shape_error("global_avg_pool (need NCHW)", x.shape)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g, needs):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)),)

    return _track(out, (x,), vjp)


def scalar_mean(x: Tensor) -> Tensor:
    size = x.size
    shape = x.shape

    def vjp(g, needs):
        return (np.full(shape, float(g) / size),)

    return _track(np.asarray(x.data.mean()), (x,), vjp)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N, C*kh*kw, oh*ow) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _conv_geometry(x_shape, w_shape, stride, padding):
    n, c, h, w = x_shape
    o, cw, kh, kw = w_shape
    if cw != c:
        raise _shape_error("conv2d (channel mismatch)", x_shape, w_shape)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride={stride}, padding={padding} out of range")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise _shape_error(f"conv2d (empty output at stride={stride}, padding={padding})",
                           x_shape, w_shape)
    return n, c, h, w, o, kh, kw, oh, ow


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           method: str = "im2col") -> Tensor:
    """2-D cross-correlation of an (N, C, H, W) batch with (O, C, kh, kw) filters.

    ``method`` selects the forward implementation: "im2col" (patch matrix +
    one BLAS matmul, the default) or "direct" (naive loop over output
    positions, kept as an independent cross-check).  Both produce the same
    values; the backward pass is shared and recomputes the patch matrix
    rather than storing it, trading a little time for a lot of memory.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise _shape_error("conv2d (need NCHW input and OCkk weight)", x.shape, w.shape)
    n, c, h, wd, o, kh, kw, oh, ow = _conv_geometry(x.shape, w.shape, stride, padding)
    if method not in ("im2col", "direct"):
        raise ValueError(f"conv2d: unknown method {method!r}")

    def pad(arr):
        if padding == 0:
            return arr
        return np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    xp = pad(x.data)
    w2 = w.data.reshape(o, c * kh * kw)
    if method == "im2col":
        cols = _im2col(xp, kh, kw, stride, oh, ow)
        out = np.matmul(w2, cols).reshape(n, o, oh, ow)
    else:
        out = np.empty((n, o, oh, ow), dtype=np.float64)
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[:, :, i, j] = np.tensordot(patch, w.data, axes=([1, 2, 3], [1, 2, 3]))

    x_data, w_shape = x.data, w.shape

    def vjp(g, needs):
        g2 = g.reshape(n, o, oh * ow)
        dx = dw = None
        if needs[1]:
            cols_b = _im2col(pad(x_data), kh, kw, stride, oh, ow)
            dw = np.matmul(g2, cols_b.transpose(0, 2, 1)).sum(axis=0).reshape(w_shape)
        if needs[0]:
            dcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, oh, ow)
            dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return (dx, dw)

    return _track(out, (x, w), vjp)


# ---------------------------------------------------------------------------
# losses


def _check_logits_labels(op, logits, labels):
    if logits.ndim != 2:
        raise _shape_error(f"{op} (logits must be 2-D)", logits.shape)
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise _shape_error(f"{op} (labels)", logits.shape, labels.shape)
    if labels.dtype.kind not in "iu":
        raise TypeError(f"{op}: labels must be integers, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"{op}: label out of range for {logits.shape[1]} classes")
    return labels


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer class labels.

    Log-sum-exp stabilized; returns a scalar.
    """
    labels = _check_logits_labels("softmax_cross_entropy", logits, labels)
    n = logits.shape[0]
    lp = _log_softmax(logits.data)
    out = np.asarray(-lp[np.arange(n), labels].mean())
    probs = np.exp(lp)

    def vjp(g, needs):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        d *= float(g) / n
        return (d,)

    return _track(out, (logits,), vjp)


def binary_cross_entropy(p: Tensor, target) -> Tensor:
    """Mean BCE of probabilities ``p`` against a float target (scalar or same shape).

    Probabilities are clamped to [1e-12, 1 - 1e-12] before the logs.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape not in ((), p.shape):
        raise _shape_error("binary_cross_entropy", p.shape, t.shape)
    t = np.broadcast_to(t, p.shape)
    q = np.clip(p.data, 1e-12, 1.0 - 1e-12)
    losses = -(t * np.log(q) + (1.0 - t) * np.log1p(-q))
    size = p.size

    def vjp(g, needs):
        return ((q - t) / (q * (1.0 - q)) * (float(g) / size),)

    return _track(np.asarray(losses.mean()), (p,), vjp)


def softmax_kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Mean over rows of KL(softmax(p_logits) || softmax(q_logits)).

    Differentiable with respect to both logit matrices.
    """
    if p_logits.shape != q_logits.shape or p_logits.ndim != 2:
        raise _shape_error("softmax_kl_divergence", p_logits.shape, q_logits.shape)
    n = p_logits.shape[0]
    lp = _log_softmax(p_logits.data)
    lq = _log_softmax(q_logits.data)
    pp = np.exp(lp)
    qq = np.exp(lq)
    kl_rows = (pp * (lp - lq)).sum(axis=1)

    def vjp(g, needs):
        s = float(g) / n
        dzp = pp * ((lp - lq) - kl_rows[:, None]) * s if needs[0] else None
        dzq = (qq - pp) * s if needs[1] else None
        return (dzp, dzq)

    return _track(np.asarray(kl_rows.mean()), (p_logits, q_logits), vjp)


def margin_loss(logits: Tensor, labels, kappa: float = 0.0) -> Tensor:
    """Mean of max(z_y - max_{j != y} z_j, -kappa) over the batch.

    Ascending this in the input drives the true-class margin up; attacks
    descend its negation.  Ties and the kink at -kappa take subgradient 0,
    mirroring relu.
    """
    labels = _check_logits_labels("margin_loss", logits, labels)
    if logits.shape[1] < 2:
        raise _shape_error("margin_loss (need >= 2 classes)", logits.shape)
    n = logits.shape[0]
    rows = np.arange(n)
    z = logits.data
    masked = z.copy()
    masked[rows, labels] = -np.inf
    runner = masked.argmax(axis=1)
    margins = z[rows, labels] - masked[rows, runner]
    active = margins > -kappa

    def vjp(g, needs):
        d = np.zeros_like(z)
        d[rows[active], labels[active]] += 1.0
        d[rows[active], runner[active]] -= 1.0
        d *= float(g) / n
        return (d,)

    return _track(np.asarray(np.maximum(margins, -kappa).mean()), (logits,), vjp)


# ---------------------------------------------------------------------------
# normalization building blocks


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel y = x * scale + shift on an (N, C, H, W) batch."""
    if x.ndim != 4 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise _shape_error("channel_affine", x.shape, scale.shape, shift.shape)
    s4 = scale.data[None, :, None, None]
    out = x.data * s4 + shift.data[None, :, None, None]
    x_data = x.data

    def vjp(g, needs):
        return (g * s4 if needs[0] else None,
                (g * x_data).sum(axis=(0, 2, 3)) if needs[1] else None,
                g.sum(axis=(0, 2, 3)) if needs[2] else None)

    return _track(out, (x, scale, shift), vjp)


def per_sample_scale(x: Tensor, w: Tensor) -> Tensor:
    """Scale each sample of an (N, C, H, W) batch by its own scalar w[n]."""
    if x.ndim != 4 or w.shape != (x.shape[0],):
        raise _shape_error("per_sample_scale", x.shape, w.shape)
    w4 = w.data[:, None, None, None]
    out = x.data * w4
    x_data = x.data

    def vjp(g, needs):
        return (g * w4 if needs[0] else None,
                (g * x_data).sum(axis=(1, 2, 3)) if needs[1] else None)

    return _track(out, (x, w), vjp)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Batch-statistics normalization of (N, C, H, W) with per-channel affine.

    Normalizes with the biased batch variance, then applies gamma/beta.
    Returns (out, batch_mean, batch_var) where the statistics are plain
    arrays for the caller's running-average bookkeeping.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise _shape_error("batch_norm_train", x.shape, gamma.shape, beta.shape)
    axes = (0, 2, 3)
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)  # biased: divides by N*H*W
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    gamma_data = gamma.data

    def vjp(g, needs):
        dgamma = (g * xhat).sum(axis=axes) if needs[1] else None
        dbeta = g.sum(axis=axes) if needs[2] else None
        dx = None
        if needs[0]:
            gm = g.mean(axis=axes)[None, :, None, None]
            gxm = (g * xhat).mean(axis=axes)[None, :, None, None]
            dx = (gamma_data * inv)[None, :, None, None] * (g - gm - xhat * gxm)
        return (dx, dgamma, dbeta)

    return _track(out, (x, gamma, beta), vjp), mean, var
