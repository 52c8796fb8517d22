"""Dense float32 tensors with a reverse-mode gradient tape.

The tape records operations in execution order; walking it backwards is
reverse-topological by construction, which is all both spatial backprop and
time-unrolled backprop need. Tensors are immutable once produced by an op.
Scalar loss reductions accumulate in float64 before rounding back to float32.
"""

from __future__ import annotations

import zlib

import numpy as np

Array = np.ndarray


class Tensor:
    """N-dimensional float32 array, optionally tracked by the active tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _TapeOp:
    __slots__ = ("inputs", "outputs", "backward")

    def __init__(self, inputs, outputs, backward):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self._ops: list[_TapeOp] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._ops)

    def record(self, inputs, outputs, backward):
        self._ops.append(_TapeOp(tuple(inputs), tuple(outputs), backward))
        self._produced.update(id(t) for t in outputs)

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf."""
        if loss.data.shape != ():
            raise ValueError("backward() needs a scalar loss")
        if not np.isfinite(loss.data):
            raise FloatingPointError("loss is not finite")
        grads: dict[int, Array] = {id(loss): np.ones((), dtype=np.float32)}
        for op in reversed(self._ops):
            out_grads = [grads.get(id(t)) for t in op.outputs]
            if all(g is None for g in out_grads):
                continue
            out_grads = [
                g if g is not None else np.zeros_like(t.data)
                for g, t in zip(out_grads, op.outputs)
            ]
            in_grads = op.backward(*out_grads)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for t, g in zip(op.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        seen: set[int] = set()
        for op in self._ops:
            for t in op.inputs:
                key = id(t)
                if key in seen or key in self._produced:
                    continue
                seen.add(key)
                if t.requires_grad and key in grads:
                    g = grads[key].astype(np.float32, copy=False)
                    t.grad = g if t.grad is None else t.grad + g

    def clear(self):
        self._ops.clear()
        self._produced.clear()


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_grad:
    """Suspend tape recording inside the block (eval-only forward passes)."""

    def __enter__(self):
        self._saved = _TAPE_STACK[:]
        _TAPE_STACK.clear()
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.extend(self._saved)
        return False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _tracked(*tensors) -> bool:
    return active_tape() is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in tensors
    )


def _make_output(data: Array, *inputs) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    ) and active_tape() is not None
    return out


def _unbroadcast(grad: Array, shape) -> Array:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make_output(a.data + b.data, a, b)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        tape.record((a, b), (out,), backward)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make_output(a.data - b.data, a, b)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        tape.record((a, b), (out,), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make_output(a.data * b.data, a, b)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        ad, bd = a.data, b.data

        def backward(g):
            return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

        tape.record((a, b), (out,), backward)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _make_output(a.data * np.float32(c), a)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record((a,), (out,), lambda g: (g * np.float32(c),))
    return out


def mul_const(a: Tensor, c: Array) -> Tensor:
    """Elementwise multiply by an array that is constant w.r.t. the tape."""
    c = np.asarray(c, dtype=np.float32)
    out = _make_output(a.data * c, a)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record((a,), (out,), lambda g: (g * c,))
    return out


def relu(a: Tensor) -> Tensor:
    out = _make_output(np.maximum(a.data, 0.0), a)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        pos = a.data > 0

        def backward(g):
            return (g * pos,)

        tape.record((a,), (out,), backward)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = _make_output(a.data.reshape(shape), a)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        orig = a.data.shape
        tape.record((a,), (out,), lambda g: (g.reshape(orig),))
    return out


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.data.shape[0], -1))


def concat0(parts: list[Tensor]) -> Tensor:
    """Concatenate along axis 0; backward splits the gradient back."""
    out_data = np.concatenate([p.data for p in parts], axis=0)
    out = _make_output(out_data, *parts)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        sizes = [p.data.shape[0] for p in parts]
        bounds = np.cumsum(sizes)[:-1]

        def backward(g):
            return tuple(np.split(g, bounds, axis=0))

        tape.record(tuple(parts), (out,), backward)
    return out


def split0(a: Tensor, n_parts: int) -> list[Tensor]:
    """Split axis 0 into equal parts; backward concatenates."""
    if a.data.shape[0] % n_parts != 0:
        raise ValueError(f"axis 0 ({a.data.shape[0]}) not divisible by {n_parts}")
    pieces = np.split(a.data, n_parts, axis=0)
    outs = [Tensor(np.ascontiguousarray(p)) for p in pieces]
    tape = active_tape()
    if tape is not None and a.requires_grad:
        for o in outs:
            o.requires_grad = True

        def backward(*gs):
            return (np.concatenate(gs, axis=0),)

        tape.record((a,), tuple(outs), backward)
    return outs


def sum_time(a: Tensor, t_steps: int) -> Tensor:
    """Sum a [T*N, ...] time-stacked tensor over the T blocks -> [N, ...]."""
    tn = a.data.shape[0]
    if tn % t_steps != 0:
        raise ValueError("leading dim not divisible by T")
    n = tn // t_steps
    out_data = a.data.reshape((t_steps, n) + a.data.shape[1:]).sum(axis=0)
    out = _make_output(out_data, a)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        def backward(g):
            return (np.tile(g, (t_steps,) + (1,) * (g.ndim - 1)),)

        tape.record((a,), (out,), backward)
    return out


def tsum(a: Tensor) -> Tensor:
    """Full reduction to a scalar (float64 accumulate)."""
    out = _make_output(np.float32(a.data.sum(dtype=np.float64)), a)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        shape = a.data.shape
        tape.record((a,), (out,), lambda g: (np.broadcast_to(g, shape).astype(np.float32),))
    return out


def tmean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out = _make_output(a.data @ b.data, a, b)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        ad, bd = a.data, b.data

        def backward(g):
            return g @ bd.T, ad.T @ g

        tape.record((a, b), (out,), backward)
    return out


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded input {size + 2 * padding}")
    if span % stride != 0:
        raise ValueError(
            f"non-integer conv output: (({size}+2*{padding})-{k})/{stride} not integral"
        )
    return span // stride + 1


def _im2col(x: Array, k: int, stride: int, padding: int):
    n, c, h, w = x.shape
    h_out = _conv_out_size(h, k, stride, padding)
    w_out = _conv_out_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # [N, C, H', W', k, k]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * k * k)
    return np.ascontiguousarray(cols), h_out, w_out


def _col2im(dcols: Array, x_shape, k: int, stride: int, padding: int, h_out: int, w_out: int):
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float32)
    dcols = dcols.reshape(n, h_out, w_out, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for ki in range(k):
        for kj in range(k):
            dx[:, :, ki : ki + stride * h_out : stride, kj : kj + stride * w_out : stride] += dcols[
                :, :, ki, kj
            ]
    if padding:
        dx = dx[:, :, padding : padding + h, padding : padding + w]
    return dx


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding, im2col + matmul fast path."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError("conv2d expects x[N,C,H,W] and weight[F,C,k,k]")
    f, c_w, k, k2 = wd.shape
    if k != k2:
        raise ValueError("only square kernels supported")
    if xd.shape[1] != c_w:
        raise ValueError(f"channel mismatch: input {xd.shape[1]} vs weight {c_w}")
    cols, h_out, w_out = _im2col(xd, k, stride, padding)
    n = xd.shape[0]
    out_data = (cols @ wd.reshape(f, -1).T).reshape(n, h_out, w_out, f).transpose(0, 3, 1, 2)
    out = _make_output(np.ascontiguousarray(out_data), x, weight)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        x_shape = xd.shape

        def backward(g):
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
            dw = (g2.T @ cols).reshape(wd.shape)
            dcols = g2 @ wd.reshape(f, -1)
            dx = _col2im(dcols, x_shape, k, stride, padding, h_out, w_out)
            return dx, dw

        tape.record((x, weight), (out,), backward)
    return out


def avgpool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.data.shape
    if h % k or w % k:
        raise ValueError(f"avgpool window {k} does not divide {h}x{w}")
    out_data = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    out = _make_output(out_data, x)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        inv = np.float32(1.0 / (k * k))

        def backward(g):
            g = (g * inv)[:, :, :, None, :, None]
            return (np.broadcast_to(g, (n, c, h // k, k, w // k, k)).reshape(n, c, h, w),)

        tape.record((x,), (out,), backward)
    return out


# ---------------------------------------------------------------------------
# normalization


def batchnorm(
    x: Tensor,
    phi: Tensor,
    omega: Tensor,
    running_mean: Array,
    running_var: Array,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalization with affine (phi, omega).

    2-D input normalizes over axis 0; 4-D input over (0, 2, 3). Stacking
    timesteps into axis 0 therefore gives batch-and-time pooled statistics
    with the same code path. Batch statistics use float64 accumulation.
    """
    xd = x.data
    if xd.ndim == 2:
        axes = (0,)
        shape_c = (1, -1)
    elif xd.ndim == 4:
        axes = (0, 2, 3)
        shape_c = (1, -1, 1, 1)
    else:
        raise ValueError("batchnorm expects 2-D or 4-D input")
    if train:
        mean = xd.mean(axis=axes, dtype=np.float64)
        var = xd.var(axis=axes, dtype=np.float64)
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean.astype(np.float32)
            running_var *= 1.0 - momentum
            running_var += momentum * var.astype(np.float32)
        mean32 = mean.astype(np.float32)
        var32 = var.astype(np.float32)
    else:
        mean32 = running_mean
        var32 = running_var
    inv_std = 1.0 / np.sqrt(var32 + np.float32(eps))
    xhat = (xd - mean32.reshape(shape_c)) * inv_std.reshape(shape_c)
    out_data = phi.data.reshape(shape_c) * xhat + omega.data.reshape(shape_c)
    out = _make_output(out_data.astype(np.float32), x, phi, omega)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        n_red = xd.size // xd.shape[1] if xd.ndim == 4 else xd.shape[0]
        phi_c = phi.data.reshape(shape_c)
        inv_c = inv_std.reshape(shape_c)

        def backward(g):
            dphi = (g * xhat).sum(axis=axes, dtype=np.float64).astype(np.float32)
            domega = g.sum(axis=axes, dtype=np.float64).astype(np.float32)
            dxhat = g * phi_c
            if train:
                s1 = dxhat.sum(axis=axes, keepdims=True, dtype=np.float64).astype(np.float32)
                s2 = (dxhat * xhat).sum(axis=axes, keepdims=True, dtype=np.float64).astype(
                    np.float32
                )
                dx = (dxhat - s1 / n_red - xhat * (s2 / n_red)) * inv_c
            else:
                dx = dxhat * inv_c
            return dx.astype(np.float32), dphi, domega

        tape.record((x, phi, omega), (out,), backward)
    return out


# ---------------------------------------------------------------------------
# losses (fused, float64 accumulation)


def _log_softmax64(logits: Array) -> Array:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, y: Array) -> Tensor:
    """Mean cross-entropy from raw logits against integer labels."""
    y = np.asarray(y)
    n = logits.data.shape[0]
    logp = _log_softmax64(logits.data)
    if not np.all(np.isfinite(logp)):
        raise FloatingPointError("non-finite softmax in cross_entropy")
    loss = -logp[np.arange(n), y].mean()
    out = _make_output(np.float32(loss), logits)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        probs = np.exp(logp)

        def backward(g):
            d = probs.copy()
            d[np.arange(n), y] -= 1.0
            return ((float(g) / n) * d.astype(np.float32),)

        tape.record((logits,), (out,), backward)
    return out


def kl_divergence(logits_p: Tensor, logits_q: Tensor) -> Tensor:
    """Mean KL(softmax(logits_p) || softmax(logits_q)); grads to both sides."""
    lp = _log_softmax64(logits_p.data)
    lq = _log_softmax64(logits_q.data)
    if not (np.all(np.isfinite(lp)) and np.all(np.isfinite(lq))):
        raise FloatingPointError("non-finite softmax in kl_divergence")
    p = np.exp(lp)
    n = lp.shape[0]
    per_row = (p * (lp - lq)).sum(axis=1)
    out = _make_output(np.float32(per_row.mean()), logits_p, logits_q)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        q = np.exp(lq)

        def backward(g):
            gn = float(g) / n
            dp = gn * (p * ((lp - lq) - per_row[:, None]))
            dq = gn * (q - p)
            return dp.astype(np.float32), dq.astype(np.float32)

        tape.record((logits_p, logits_q), (out,), backward)
    return out


def softmax(logits: Array) -> Array:
    """Plain numpy softmax for eval paths (not taped)."""
    return np.exp(_log_softmax64(logits)).astype(np.float32)


# ---------------------------------------------------------------------------
# verification helpers


def grad_check(f, x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    x.grad = None
    with Tape() as tape:
        loss = f(x)
        if not np.isfinite(loss.data):
            raise FloatingPointError("f returned a non-finite value")
        tape.backward(loss)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            f_plus = float(f(x).data)
        flat[i] = orig - h
        with no_grad():
            f_minus = float(f(x).data)
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * h)
    numeric = numeric.reshape(x.data.shape)
    err = np.abs(analytic.astype(np.float64) - numeric)
    denom = np.maximum(1.0, np.abs(analytic.astype(np.float64)))
    return float((err / denom).max())


def assert_finite(arr: Array, what: str = "tensor"):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} contains non-finite values")


# ---------------------------------------------------------------------------
# deterministic randomness


class Rng:
    """Counter-based (Philox) generator; same seed -> same stream anywhere."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed & (2**64 - 1)))

    def spawn(self, tag: str) -> "Rng":
        """Independent substream derived from (seed, tag)."""
        child = (self.seed * 0x9E3779B1 + zlib.crc32(tag.encode())) & (2**63 - 1)
        return Rng(child)

    def normal(self, shape) -> Array:
        return self._gen.standard_normal(size=shape).astype(np.float32)

    def uniform(self, low: float, high: float, shape) -> Array:
        return self._gen.uniform(low, high, size=shape).astype(np.float32)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)
