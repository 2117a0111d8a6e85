"""Dense tensors with reverse-mode differentiation.

Small by design: row-major arrays, a fixed primitive set, and a tape that
records forward applications so :func:`backward` can replay them in
reverse.  There is no broadcasting except scalar-with-tensor; shape
mismatches raise immediately instead of being silently stretched.

Two precisions are supported.  float64 is the test/oracle mode, where
every operation's output is checked for NaN/Inf; float32 is the training
mode, where the check is opt-in (see :func:`set_finite_checks`).
"""

from __future__ import annotations

import numpy as np

from . import kernels

NORM_EPS = 1e-12
_GN_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes do not conform to the primitive's shape rule."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in an operation's result or gradient."""


# --------------------------------------------------------------------------
# finite-value checking


_FINITE_MODE = "auto"  # auto: check float64 only | always | never


def set_finite_checks(mode):
    """Control NaN/Inf postcondition checks: 'auto', 'always', or 'never'."""
    global _FINITE_MODE
    if mode not in ("auto", "always", "never"):
        raise ValueError(f"invalid finite-check mode {mode!r}")
    _FINITE_MODE = mode


def finite_checks_mode():
    return _FINITE_MODE


def _check_finite(arr, what):
    if _FINITE_MODE == "never":
        return
    if _FINITE_MODE == "auto" and arr.dtype != np.float64:
        return
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


# --------------------------------------------------------------------------
# tensor and tape


class Tensor:
    """A dense n-dimensional array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            if arr.dtype.kind in "iub":
                arr = arr.astype(np.float64)
            else:
                raise TypeError(f"unsupported tensor dtype {arr.dtype}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        _check_finite(self.data, "tensor data")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """A view of the same data that does not take gradients."""
        return Tensor(self.data, requires_grad=False)

    def copy(self):
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")

    # scalar-friendly operator sugar; the named primitives do the real work
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Single-owner: at most one tape is active at a time, entered with
    ``with``.  Execution order is a topological order of the graph, so
    replaying the record in reverse visits every node after all of its
    consumers.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("another tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._nodes)

    def clear(self):
        """Drop all recorded nodes and their saved state."""
        self._nodes.clear()
        self._consumed = False


def is_tracing():
    return _ACTIVE_TAPE is not None


def record_op(out, inputs, backward_fn):
    """Record a custom primitive on the active tape.

    ``backward_fn`` maps the output gradient array to a tuple of input
    gradient arrays (or None for non-differentiable slots).  No-op when no
    tape is active or the output does not require gradients.
    """
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE._nodes.append(_Node(out, tuple(inputs), backward_fn))


def _tracks(*tensors):
    return _ACTIVE_TAPE is not None and any(t.requires_grad for t in tensors)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if isinstance(like, Tensor) else None
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t, g):
    if t.grad is None:
        t.grad = Tensor(np.array(g, copy=True))
    else:
        t.grad.data += g


def backward(loss, tape):
    """Propagate d(loss)/d(tensor) to every requires_grad tensor on the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if len(tape) == 0:
        raise ValueError("backward on an empty tape")
    if tape._consumed:
        raise RuntimeError("tape already replayed; double backward is unsupported")
    tape._consumed = True
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(tape._nodes):
        out_grad = node.out.grad
        if out_grad is None:
            continue
        grads = node.backward_fn(out_grad.data)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            _check_finite(g, "gradient")
            _accumulate(inp, g)


# --------------------------------------------------------------------------
# shape/dtype guards


def _require_same_dtype(a, b, op):
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


def _is_scalar(t):
    return t.size == 1


def _elementwise_shapes(a, b, op):
    """Allow equal shapes or scalar-with-tensor; return the result shape."""
    if a.shape == b.shape:
        return a.shape
    if _is_scalar(a):
        return b.shape
    if _is_scalar(b):
        return a.shape
    raise ShapeError(f"{op}: shape {a.shape} does not match {b.shape}")


def _reduce_to(g, t):
    """Collapse an elementwise gradient onto a scalar operand's shape."""
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


# --------------------------------------------------------------------------
# primitives


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _require_same_dtype(a, b, "add")
    _elementwise_shapes(a, b, "add")
    out = Tensor(a.data + b.data)
    out.requires_grad = _tracks(a, b)

    def backward_fn(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    record_op(out, (a, b), backward_fn)
    return out


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _require_same_dtype(a, b, "mul")
    _elementwise_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)
    out.requires_grad = _tracks(a, b)
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        return _reduce_to(g * b_data, a), _reduce_to(g * a_data, b)

    record_op(out, (a, b), backward_fn)
    return out


def scale(x, s):
    x = _as_tensor(x)
    s = float(s)
    out = Tensor(x.data * x.dtype.type(s))
    out.requires_grad = _tracks(x)

    def backward_fn(g):
        return (g * g.dtype.type(s),)

    record_op(out, (x,), backward_fn)
    return out


def relu(x):
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0))
    out.requires_grad = _tracks(x)
    if out.requires_grad:
        mask = x.data > 0

        def backward_fn(g):
            return (g * mask,)

        record_op(out, (x,), backward_fn)
    return out


def matmul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b)
    _require_same_dtype(a, b, "matmul")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)
    out.requires_grad = _tracks(a, b)
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        return g @ b_data.T, a_data.T @ g

    record_op(out, (a, b), backward_fn)
    return out


def linear(x, w, b):
    """x[B,K] @ w[K,N] + b[N], the bias added to every row."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    _require_same_dtype(x, w, "linear")
    _require_same_dtype(x, b, "linear")
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError(
            f"linear expects x[B,K], w[K,N], b[N]; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(
            f"linear: inconsistent shapes {x.shape}, {w.shape}, {b.shape}")
    out = Tensor(x.data @ w.data + b.data)
    out.requires_grad = _tracks(x, w, b)
    x_data, w_data = x.data, w.data

    def backward_fn(g):
        return g @ w_data.T, x_data.T @ g, g.sum(axis=0)

    record_op(out, (x, w, b), backward_fn)
    return out


def conv2d(x, w, stride=1, padding=1):
    """3x3 cross-correlation of x[B,C,H,W] with w[O,C,3,3]."""
    x, w = _as_tensor(x), _as_tensor(w)
    _require_same_dtype(x, w, "conv2d")
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [B,C,H,W], got {x.shape}")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernel must be [O,C,3,3], got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d: kernel expects {w.shape[1]} input channels, input has {x.shape[1]}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    if padding not in (0, 1):
        raise ValueError(f"conv2d padding must be 0 or 1, got {padding}")
    h, width = x.shape[2], x.shape[3]
    if h < 3 or width < 3:
        raise ShapeError(f"conv2d input spatial size {h}x{width} is below 3x3")
    out = Tensor(kernels.conv2d_forward(x.data, w.data, stride, padding))
    out.requires_grad = _tracks(x, w)
    x_data, w_data = x.data, w.data

    def backward_fn(g):
        gx = None
        if x.requires_grad:
            gx = kernels.conv2d_backward_input(g, w_data, stride, padding, h, width)
        gw = None
        if w.requires_grad:
            gw = kernels.conv2d_backward_kernel(g, x_data, stride, padding)
        return gx, gw

    record_op(out, (x, w), backward_fn)
    return out


def max_pool_2x2(x):
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"max_pool_2x2 input must be [B,C,H,W], got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"max_pool_2x2 needs even spatial size, got {x.shape}")
    out_data, idx = kernels.maxpool2x2_forward(x.data)
    out = Tensor(out_data)
    out.requires_grad = _tracks(x)

    def backward_fn(g):
        return (kernels.maxpool2x2_backward(g, idx),)

    record_op(out, (x,), backward_fn)
    return out


def global_avg_pool(x):
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))
    out.requires_grad = _tracks(x)

    def backward_fn(g):
        gx = np.broadcast_to(g[:, :, None, None] / g.dtype.type(h * w), (b, c, h, w))
        return (np.ascontiguousarray(gx),)

    record_op(out, (x,), backward_fn)
    return out


def flatten(x):
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"flatten expects a batched tensor, got {x.shape}")
    shape = x.shape
    out = Tensor(x.data.reshape(shape[0], -1))
    out.requires_grad = _tracks(x)

    def backward_fn(g):
        return (g.reshape(shape),)

    record_op(out, (x,), backward_fn)
    return out


def l2_normalize(v, eps=NORM_EPS):
    """Normalize each row (or a single vector) to unit Euclidean norm."""
    v = _as_tensor(v)
    if v.ndim not in (1, 2):
        raise ShapeError(f"l2_normalize expects 1-D or 2-D input, got {v.shape}")
    axis = v.ndim - 1
    norms = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if (norms < eps).any():
        raise ValueError(
            f"l2_normalize: degenerate input, row norm below {eps:g}")
    y = v.data / norms
    out = Tensor(y)
    out.requires_grad = _tracks(v)

    def backward_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - y * dot) / norms,)

    record_op(out, (v,), backward_fn)
    return out


def group_norm(x, gamma, beta, groups, eps=_GN_EPS):
    """Group normalization over x[B,C,H,W] with per-channel affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    _require_same_dtype(x, gamma, "group_norm")
    _require_same_dtype(x, beta, "group_norm")
    if x.ndim != 4:
        raise ShapeError(f"group_norm input must be [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"group_norm: affine params must be [{c}], got {gamma.shape}, {beta.shape}")
    # Normalization and affine fold into one scale/bias per (batch,
    # channel), so the big activation tensor is touched once on the
    # forward pass and the normalized values are never materialized.
    cg = c // groups
    n = cg * h * w
    xg = x.data.reshape(b, groups, n)
    mu = xg.mean(axis=2)  # [b, groups]
    inv_std = 1.0 / np.sqrt(xg.var(axis=2) + x.dtype.type(eps))
    gamma2 = gamma.data.reshape(groups, cg)
    scale = (inv_std[:, :, None] * gamma2[None]).reshape(b, c)
    mu_c = np.broadcast_to(mu[:, :, None], (b, groups, cg)).reshape(b, c)
    bias = beta.data[None, :] - mu_c * scale
    out_data = x.data * scale[:, :, None, None]
    out_data += bias[:, :, None, None]
    out = Tensor(out_data)
    out.requires_grad = _tracks(x, gamma, beta)
    x_data = x.data

    def backward_fn(g):
        g5 = g.reshape(b, groups, cg, h * w)
        x5 = x_data.reshape(b, groups, cg, h * w)
        sum_g = g5.sum(axis=3)  # [b, groups, cg]
        sum_gx = np.einsum("bgkn,bgkn->bgk", g5, x5)
        gbeta = sum_g.sum(axis=0).reshape(c)
        centered = sum_gx - mu[:, :, None] * sum_g
        ggamma = (inv_std[:, :, None] * centered).sum(axis=0).reshape(c)
        # gx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
        # expands to A*g + B*x + C with per-(batch, channel) scalars,
        # so the activation-sized work is three fused passes.
        m1 = (gamma2[None] * sum_g).sum(axis=2) / n
        r = inv_std * ((gamma2[None] * sum_gx).sum(axis=2) / n - mu * m1)
        inv_c = np.broadcast_to(inv_std[:, :, None],
                                (b, groups, cg)).reshape(b, c)
        br = np.broadcast_to((inv_std * inv_std * r)[:, :, None],
                             (b, groups, cg)).reshape(b, c)
        m1_c = np.broadcast_to(m1[:, :, None], (b, groups, cg)).reshape(b, c)
        gx = g * (gamma.data[None, :] * inv_c)[:, :, None, None]
        gx += x_data * (-br)[:, :, None, None]
        gx += (mu_c * br - inv_c * m1_c)[:, :, None, None]
        return gx, ggamma, gbeta

    record_op(out, (x, gamma, beta), backward_fn)
    return out


def softmax_cross_entropy(logits, target_index, reduction="mean"):
    """Cross-entropy of softmax(logits) against an integer target index.

    Accepts a single logit vector [N] or a batch [B,N]; ``target_index``
    is one index applied to every row, or a 1-D array of per-row indices.
    """
    logits = _as_tensor(logits)
    if logits.ndim == 1:
        z = logits.data[None, :]
        squeeze = True
    elif logits.ndim == 2:
        z = logits.data
        squeeze = False
    else:
        raise ShapeError(f"softmax_cross_entropy expects 1-D or 2-D logits, got {logits.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"invalid reduction {reduction!r}")
    rows, n = z.shape
    targets = np.asarray(target_index)
    if targets.ndim == 0:
        targets = np.full(rows, int(targets), dtype=np.intp)
    elif targets.shape != (rows,):
        raise ShapeError(
            f"target_index must be scalar or [{rows}], got shape {targets.shape}")
    targets = targets.astype(np.intp)
    if (targets < 0).any() or (targets >= n).any():
        raise ValueError("target_index out of range")
    _check_finite(z, "logits")

    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1)) + zmax[:, 0]
    losses = lse - z[np.arange(rows), targets]
    total = losses.mean() if reduction == "mean" else losses.sum()
    out = Tensor(np.asarray(total, dtype=z.dtype))
    out.requires_grad = _tracks(logits)

    def backward_fn(g):
        p = np.exp(shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True)))
        p[np.arange(rows), targets] -= 1.0
        if reduction == "mean":
            p /= rows
        gz = p * g
        return (gz[0] if squeeze else gz,)

    record_op(out, (logits,), backward_fn)
    return out


def sigmoid_cross_entropy(logits, targets, reduction="mean"):
    """Elementwise logistic loss of logits[B,C] against 0/1 targets[B,C]."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=logits.dtype)
    if logits.shape != targets.shape:
        raise ShapeError(
            f"sigmoid_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"invalid reduction {reduction!r}")
    z = logits.data
    _check_finite(z, "logits")
    # stable form: max(z,0) - z*t + log(1 + exp(-|z|))
    losses = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    total = losses.mean() if reduction == "mean" else losses.sum()
    out = Tensor(np.asarray(total, dtype=z.dtype))
    out.requires_grad = _tracks(logits)

    def backward_fn(g):
        sig = 1.0 / (1.0 + np.exp(-z))
        gz = (sig - targets) * g
        if reduction == "mean":
            gz /= z.size
        return (gz.astype(z.dtype, copy=False),)

    record_op(out, (logits,), backward_fn)
    return out


def sgd_step(params, lr, weight_decay=0.0, momentum=0.0, velocity=None):
    """In-place SGD update p <- p - lr*(grad + weight_decay*p); grads cleared.

    ``momentum`` adds a classical heavy-ball term using ``velocity`` (a
    dict owned by the caller so it can be checkpointed).
    """
    updates = []
    for name, p in params.items():
        if p.grad is None:
            raise RuntimeError(f"sgd_step: parameter {name!r} has no gradient")
        if p.grad.shape != p.shape:
            raise ShapeError(f"sgd_step: gradient shape mismatch on {name!r}")
        updates.append((name, p))
    for name, p in updates:
        g = p.grad.data
        if weight_decay:
            g = g + p.dtype.type(weight_decay) * p.data
        if momentum:
            if velocity is None:
                raise ValueError("momentum > 0 requires a velocity dict")
            v = velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = p.dtype.type(momentum) * v + g
            velocity[name] = v
            g = v
        p.data -= p.dtype.type(lr) * g
        p.grad = None
