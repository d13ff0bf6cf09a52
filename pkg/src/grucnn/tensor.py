"""Dense tensors with reverse-mode automatic differentiation.

Every array the network touches is a :class:`Tensor`: a numpy buffer plus
an optional gradient buffer and, while gradients are enabled, a link back
to the operation that produced it.  ``backward()`` on a scalar loss walks
the recorded graph once in reverse topological order and accumulates
``d loss / d tensor`` into every tracked tensor's ``.grad``.

Convolutions are 3x3, zero-padded by one pixel (same padding) and are
cross-correlations: no kernel flip.  A learned kernel absorbs the flip,
and same padding keeps 2x2 pooling exact (H, W stay powers of two).

Precision is configurable: float32 for training speed, float64 for
gradient checking.  ``set_default_dtype`` switches the creation default.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "no_grad",
    "set_default_dtype",
    "get_default_dtype",
    "add",
    "sub_from_one",
    "hadamard",
    "relu",
    "sigmoid",
    "tanh",
    "elementwise",
    "scale",
    "tsum",
    "tmean",
    "reshape",
    "concat",
    "narrow",
    "conv2d",
    "max_pool_2x2",
    "dense",
    "softmax",
    "cross_entropy",
    "softmax_cross_entropy",
    "dropout",
    "batch_norm",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype):
    """Set the dtype used for tensors created from non-float data."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (forward-only mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A dense n-d array with an optional same-shape gradient buffer.

    ``requires_grad=False`` tensors never allocate ``.grad`` and never
    record graph edges; parameters are created with ``requires_grad=True``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self):
        """A view of the same data with no gradient tracking."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Populate ``.grad`` of every tracked tensor reachable from this scalar.

        Repeated calls without ``zero_grad`` accumulate.  Raises on a
        non-scalar or untracked tensor.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor with no recorded operations")
        order = self._toposort()
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                # An interior node's grad is dead once propagated; freeing it
                # keeps peak memory at the traversal frontier, not the graph.
                node.grad = None

    def _toposort(self):
        # Iterative DFS: unrolled sequence graphs exceed the recursion limit.
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order


def _from_op(data, parents, backward):
    """Wrap an op result; record edges only if tracking is on and needed."""
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    """Elementwise sum of two identically shaped tensors."""
    _check_same_shape("add", a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _from_op(out_data, (a, b), backward)


def hadamard(a, b):
    """Elementwise (Hadamard) product of two identically shaped tensors."""
    _check_same_shape("hadamard", a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _from_op(out_data, (a, b), backward)


def sub_from_one(a):
    """1 - x, elementwise."""
    out_data = 1.0 - a.data

    def backward(g):
        a._accumulate(-g)

    return _from_op(out_data, (a,), backward)


def relu(a):
    out_data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (out_data > 0))

    return _from_op(out_data, (a,), backward)


def sigmoid(a):
    # Stable for large |x|: evaluate via exp of the negative magnitude.
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _from_op(out_data, (a,), backward)


def tanh(a):
    out_data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return _from_op(out_data, (a,), backward)


_ELEMENTWISE_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "sub_from_one": sub_from_one}
_ELEMENTWISE_BINARY = {"hadamard": hadamard, "add": add}


def elementwise(op, a, b=None):
    """Dispatch an elementwise op by name.

    Unary: relu, sigmoid, tanh, sub_from_one.  Binary (identical shapes):
    hadamard, add.
    """
    if op in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"{op} is unary")
        return _ELEMENTWISE_UNARY[op](a)
    if op in _ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"{op} is binary")
        return _ELEMENTWISE_BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def scale(a, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    out_data = a.data * c

    def backward(g):
        a._accumulate(g * c)

    return _from_op(out_data, (a,), backward)


def tsum(a):
    """Sum of all elements, as a scalar tensor."""
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _from_op(out_data, (a,), backward)


def tmean(a):
    """Mean of all elements, as a scalar tensor."""
    n = a.data.size
    out_data = np.asarray(a.data.sum() / n, dtype=a.data.dtype)

    def backward(g):
        a._accumulate(np.broadcast_to(g / n, a.data.shape))

    return _from_op(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _from_op(out_data, (a,), backward)


def concat(tensors, axis):
    """Concatenate tensors along ``axis``; backward splits the gradient."""
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _from_op(out_data, tuple(tensors), backward)


def narrow(a, axis, start, length):
    """Slice ``length`` entries from ``start`` along ``axis``."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = np.ascontiguousarray(a.data[idx])

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        a._accumulate(buf)

    return _from_op(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

# Below this many spatial positions the flat-rows layout (one big GEMM) beats
# the batched layout; above it the batched layout avoids a large transpose.
_FLAT_P_MAX = 128


def _im2col_batched(x, H, W):
    """[B, C, H, W] -> [B, C*9, H*W] patch matrix for a padded 3x3 window."""
    B, C = x.shape[:2]
    xpad = np.zeros((B, C, H + 2, W + 2), dtype=x.dtype)
    xpad[:, :, 1:H + 1, 1:W + 1] = x
    cols = np.empty((B, C, 3, 3, H * W), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, di, dj, :] = xpad[:, :, di:di + H, dj:dj + W].reshape(B, C, H * W)
    return cols.reshape(B, C * 9, H * W)


def _col2im_batched(dcols, B, C, H, W):
    """Adjoint of :func:`_im2col_batched`: scatter-add patches back."""
    dcols = dcols.reshape(B, C, 3, 3, H * W)
    dxpad = np.zeros((B, C, H + 2, W + 2), dtype=dcols.dtype)
    for di in range(3):
        for dj in range(3):
            dxpad[:, :, di:di + H, dj:dj + W] += dcols[:, :, di, dj, :].reshape(B, C, H, W)
    return dxpad[:, :, 1:H + 1, 1:W + 1]


def _im2col_flat(x, H, W):
    """[B, C, H, W] -> [B*H*W, C*9] patch matrix (row per output pixel)."""
    B, C = x.shape[:2]
    xpad = np.zeros((B, C, H + 2, W + 2), dtype=x.dtype)
    xpad[:, :, 1:H + 1, 1:W + 1] = x
    win = np.lib.stride_tricks.sliding_window_view(xpad, (3, 3), axis=(2, 3))
    # [B, C, H, W, 3, 3] -> [B, H, W, C, 3, 3] -> rows
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * 9)


def _col2im_flat(dcols, B, C, H, W):
    dcols = dcols.reshape(B, H, W, C, 3, 3).transpose(0, 3, 4, 5, 1, 2)
    dxpad = np.zeros((B, C, H + 2, W + 2), dtype=dcols.dtype)
    for di in range(3):
        for dj in range(3):
            dxpad[:, :, di:di + H, dj:dj + W] += dcols[:, :, di, dj]
    return dxpad[:, :, 1:H + 1, 1:W + 1]


def conv2d(x, kernel, bias):
    """Same-padded 3x3 cross-correlation.

    x: [B, C_in, H, W]; kernel: [C_out, C_in, 3, 3]; bias: [C_out].
    Output: [B, C_out, H, W].
    """
    B, C, H, W = x.data.shape
    Co, Ck, kh, kw = kernel.data.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d: kernel spatial size must be 3x3, got {kernel.data.shape}")
    if Ck != C:
        raise ShapeError(
            f"conv2d: input channels and kernel channels differ: input {x.data.shape} vs kernel {kernel.data.shape}"
        )
    if bias.data.shape != (Co,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} does not match {Co} output channels")

    P = H * W
    W2 = kernel.data.reshape(Co, C * 9)
    if P > _FLAT_P_MAX:
        cols = _im2col_batched(x.data, H, W)           # [B, C9, P]
        out = np.matmul(W2, cols)                      # [B, Co, P]
        out += bias.data[None, :, None]
        out_data = out.reshape(B, Co, H, W)

        def backward(g):
            gp = g.reshape(B, Co, P)
            if bias.requires_grad:
                bias._accumulate(gp.sum(axis=(0, 2)))
            if kernel.requires_grad:
                c = _im2col_batched(x.data, H, W)
                dW = np.matmul(gp, c.transpose(0, 2, 1)).sum(axis=0)
                kernel._accumulate(dW.reshape(kernel.data.shape))
            if x.requires_grad:
                dcols = np.matmul(W2.T, gp)            # [B, C9, P]
                x._accumulate(_col2im_batched(dcols, B, C, H, W))
    else:
        cols = _im2col_flat(x.data, H, W)              # [B*P, C9]
        out = cols @ W2.T                              # [B*P, Co]
        out += bias.data[None, :]
        out_data = out.reshape(B, H, W, Co).transpose(0, 3, 1, 2)

        def backward(g):
            gf = g.transpose(0, 2, 3, 1).reshape(B * P, Co)
            if bias.requires_grad:
                bias._accumulate(gf.sum(axis=0))
            if kernel.requires_grad:
                c = _im2col_flat(x.data, H, W)
                kernel._accumulate((gf.T @ c).reshape(kernel.data.shape))
            if x.requires_grad:
                dcols = gf @ W2
                x._accumulate(_col2im_flat(dcols, B, C, H, W))

    return _from_op(np.ascontiguousarray(out_data), (x, kernel, bias), backward)


def max_pool_2x2(x):
    """Max over disjoint 2x2 windows; gradient goes to the first max per window."""
    B, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool_2x2: spatial extents must be even, got {x.data.shape}")
    h2, w2 = H // 2, W // 2
    # windows laid out row-major: (0,0), (0,1), (1,0), (1,1)
    win = x.data.reshape(B, C, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, h2, w2, 4)
    amax = win.argmax(axis=-1)  # first occurrence on ties
    out_data = np.take_along_axis(win, amax[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, amax[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(B, C, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        x._accumulate(dx)

    return _from_op(np.ascontiguousarray(out_data), (x,), backward)


# ---------------------------------------------------------------------------
# dense, softmax, losses
# ---------------------------------------------------------------------------

def dense(x, weight, bias):
    """Affine map: x [B, n] @ weight [m, n]^T + bias [m] -> [B, m]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense: expected 2-d operands, got {x.data.shape} and {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(
            f"dense: inner dimensions differ: input {x.data.shape} vs weight {weight.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise ShapeError(f"dense: bias shape {bias.data.shape} does not match weight {weight.data.shape}")
    out_data = x.data @ weight.data.T + bias.data[None, :]

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if x.requires_grad:
            x._accumulate(g @ weight.data)

    return _from_op(out_data, (x, weight, bias), backward)


def _softmax_data(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits):
    """Row softmax with max-subtraction, over [B, K]."""
    p = _softmax_data(logits.data)

    def backward(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        logits._accumulate(p * (g - dot))

    return _from_op(p, (logits,), backward)


def cross_entropy(logits, targets):
    """Mean negative log softmax probability of each row's target class."""
    B, K = logits.data.shape
    targets = np.asarray(targets)
    if targets.shape != (B,):
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} does not match batch {B}")
    if targets.min() < 0 or targets.max() >= K:
        raise ValueError(f"cross_entropy: target out of range [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(B), targets]
    out_data = np.asarray(nll.mean(), dtype=logits.data.dtype)

    def backward(g):
        p = _softmax_data(logits.data)
        p[np.arange(B), targets] -= 1.0
        logits._accumulate(p * (g / B))

    return _from_op(out_data, (logits,), backward)


def softmax_cross_entropy(logits, targets):
    """(probs, loss): row probabilities and mean target NLL for [B, K] logits."""
    return softmax(logits), cross_entropy(logits, targets)


# ---------------------------------------------------------------------------
# regularization / normalization
# ---------------------------------------------------------------------------

def dropout(x, rate, training, rng=None):
    """Inverted dropout: zero with probability ``rate``, scale survivors.

    Evaluation mode is the identity (returns ``x`` unchanged).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.data.shape) >= rate)
    s = 1.0 / (1.0 - rate)
    mask = keep.astype(x.data.dtype) * s
    out_data = x.data * mask

    def backward(g):
        x._accumulate(g * mask)

    return _from_op(out_data, (x,), backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.99, eps=1e-5):
    """Per-channel batch normalization over batch and spatial axes.

    x: [B, C, H, W].  ``running_mean``/``running_var`` are plain numpy
    buffers updated in place during training and used verbatim in eval.
    """
    B, C, H, W = x.data.shape
    if training and B < 2:
        raise ValueError("batch_norm: training mode needs batch >= 2")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data[None, :, None, None]
            if training:
                # statistics depend on x: full normalization backward
                n = B * H * W
                sum_gx = gx.sum(axis=axes)
                sum_gx_xhat = (gx * xhat).sum(axis=axes)
                dx = inv[None, :, None, None] * (
                    gx
                    - (sum_gx / n)[None, :, None, None]
                    - xhat * (sum_gx_xhat / n)[None, :, None, None]
                )
            else:
                dx = gx * inv[None, :, None, None]
            x._accumulate(dx)

    return _from_op(out_data, (x, gamma, beta), backward)
