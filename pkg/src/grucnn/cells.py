"""Recurrent convolutional cells and the plain feedforward conv block.

Five cell kinds share one step shape: (input frame, state) -> new state.
The GRU-gated cell is the centerpiece:

    z_t = sigmoid(W_zh * h_prev + W_zx * x_t + b_z)
    r_t = sigmoid(W_rh * h_prev + W_rx * x_t + b_r)
    hbar = tanh(W_hh * (r_t o h_prev) + W_hx * x_t + b_h)
    h_t  = z_t o h_prev + (1 - z_t) o hbar

where ``*`` is a same-padded 3x3 convolution and ``o`` the Hadamard
product.  The LSTM variant is the standard peephole-free convolutional
LSTM; the Elman cell applies a sigmoid to the recurrent term only and
returns the unsquashed sum; the "recurrent gated" cell drives each of
its two states by complementary (1 - sigmoid) gates.

Gate convolutions that share an input are fused: the hidden state and
frame are concatenated along channels and hit with one stacked kernel,
so a GRU step costs two convolutions instead of six.  Biases are one
per gate, zero-initialized, so the bare equations above describe the
freshly initialized cells exactly.

All cells are pure functions of (input, state, params); hidden state
starts at zero.
"""

from __future__ import annotations

import enum

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError


class CellKind(enum.Enum):
    FEEDFORWARD_CONV = "FeedforwardConv"
    GRU_CONV = "GruConv"
    LSTM_CONV = "LstmConv"
    ELMAN_CONV = "ElmanConv"
    RG_CONV = "RgConv"


class CellState:
    """Per-layer recurrent state: hidden tensor plus an optional cell tensor.

    Only the LSTM and recurrent-gated cells carry the second (``cell``)
    tensor; it always has the hidden tensor's shape.
    """

    __slots__ = ("hidden", "cell")

    def __init__(self, hidden: Tensor, cell: Tensor | None = None):
        if cell is not None and cell.data.shape != hidden.data.shape:
            raise ShapeError(
                f"cell state shape {cell.data.shape} differs from hidden {hidden.data.shape}"
            )
        self.hidden = hidden
        self.cell = cell


def uniform_init(rng, shape, fan_in, dtype):
    """Fan-in-scaled uniform sample in [-sqrt(3/fan_in), +sqrt(3/fan_in)].

    Unit-variance-preserving (weight variance 1/fan_in), used for every
    kernel and weight matrix, input and recurrent alike; initial logits
    stay small enough that a fresh classifier predicts near-uniformly.
    """
    limit = np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, dtype=dtype)


def _kernel(rng, out_ch, in_ch, dtype):
    return uniform_init(rng, (out_ch, in_ch, 3, 3), in_ch * 9, dtype)


def _bias(out_ch, dtype):
    return Tensor(np.zeros(out_ch), requires_grad=True, dtype=dtype)


class _ParamBag:
    """Base for parameter containers: named, ordered learnable tensors."""

    _names: tuple[str, ...] = ()

    def parameters(self):
        return [(n, getattr(self, n)) for n in self._names]


class FeedforwardConvParams(_ParamBag):
    _names = ("W", "b")

    def __init__(self, in_ch, out_ch, rng, dtype=None):
        dtype = dtype or T.get_default_dtype()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.W = _kernel(rng, out_ch, in_ch, dtype)
        self.b = _bias(out_ch, dtype)


class GruConvParams(_ParamBag):
    _names = ("W_zh", "W_zx", "b_z", "W_rh", "W_rx", "b_r", "W_hh", "W_hx", "b_h")

    def __init__(self, in_ch, out_ch, rng, dtype=None):
        dtype = dtype or T.get_default_dtype()
        self.in_ch, self.out_ch = in_ch, out_ch
        for gate in ("z", "r", "h"):
            setattr(self, f"W_{gate}h", _kernel(rng, out_ch, out_ch, dtype))
            setattr(self, f"W_{gate}x", _kernel(rng, out_ch, in_ch, dtype))
            setattr(self, f"b_{gate}", _bias(out_ch, dtype))


class LstmConvParams(_ParamBag):
    _names = ("W_ih", "W_ix", "b_i", "W_fh", "W_fx", "b_f",
              "W_gh", "W_gx", "b_g", "W_oh", "W_ox", "b_o")

    def __init__(self, in_ch, out_ch, rng, dtype=None):
        dtype = dtype or T.get_default_dtype()
        self.in_ch, self.out_ch = in_ch, out_ch
        for gate in ("i", "f", "g", "o"):
            setattr(self, f"W_{gate}h", _kernel(rng, out_ch, out_ch, dtype))
            setattr(self, f"W_{gate}x", _kernel(rng, out_ch, in_ch, dtype))
            setattr(self, f"b_{gate}", _bias(out_ch, dtype))


class ElmanConvParams(_ParamBag):
    _names = ("W_h", "b_h", "W_x")

    def __init__(self, in_ch, out_ch, rng, dtype=None):
        dtype = dtype or T.get_default_dtype()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.W_h = _kernel(rng, out_ch, out_ch, dtype)
        self.b_h = _bias(out_ch, dtype)
        self.W_x = _kernel(rng, out_ch, in_ch, dtype)
        # the input drive sits outside the sigmoid and carries no bias
        self._zero = Tensor(np.zeros(out_ch), dtype=dtype)


class RgConvParams(_ParamBag):
    # gates (inside sigmoids, biased) and drives (bare convolutions, unbiased)
    _names = ("W_ch", "b_ch", "W_hh", "b_hh", "W_hc", "b_hc", "W_cc", "b_cc",
              "W_xh", "W_xc", "W_h", "W_c")

    def __init__(self, in_ch, out_ch, rng, dtype=None):
        dtype = dtype or T.get_default_dtype()
        self.in_ch, self.out_ch = in_ch, out_ch
        for gate in ("ch", "hh", "hc", "cc"):
            setattr(self, f"W_{gate}", _kernel(rng, out_ch, out_ch, dtype))
            setattr(self, f"b_{gate}", _bias(out_ch, dtype))
        self.W_xh = _kernel(rng, out_ch, in_ch, dtype)
        self.W_xc = _kernel(rng, out_ch, in_ch, dtype)
        self.W_h = _kernel(rng, out_ch, out_ch, dtype)
        self.W_c = _kernel(rng, out_ch, out_ch, dtype)
        self._zero = Tensor(np.zeros(out_ch), dtype=dtype)


class GruDenseParams(_ParamBag):
    """GRU over flat vectors: the conv maps replaced by full matrices."""

    _names = ("W_zh", "W_zx", "b_z", "W_rh", "W_rx", "b_r", "W_hh", "W_hx", "b_h")

    def __init__(self, in_units, out_units, rng, dtype=None):
        dtype = dtype or T.get_default_dtype()
        self.in_units, self.out_units = in_units, out_units
        for gate in ("z", "r", "h"):
            setattr(self, f"W_{gate}h", uniform_init(rng, (out_units, out_units), out_units, dtype))
            setattr(self, f"W_{gate}x", uniform_init(rng, (out_units, in_units), in_units, dtype))
            setattr(self, f"b_{gate}", _bias(out_units, dtype))


def _check_step_shapes(x_t, h_prev):
    xs, hs = x_t.data.shape, h_prev.data.shape
    if xs[0] != hs[0] or xs[2:] != hs[2:]:
        raise ShapeError(f"frame shape {xs} incompatible with state shape {hs}")


# ---------------------------------------------------------------------------
# step functions
# ---------------------------------------------------------------------------

def feedforward_conv_step(x_t, params):
    """relu(conv(x)): stateless, so repeated frames give repeated outputs."""
    return T.relu(T.conv2d(x_t, params.W, params.b))


def gru_conv_step(x_t, h_prev, params):
    """One GRU-gated convolution step; returns the new hidden state."""
    _check_step_shapes(x_t, h_prev)
    co = params.out_ch
    hx = T.concat([h_prev, x_t], axis=1)
    k_zr = T.concat([T.concat([params.W_zh, params.W_zx], axis=1),
                     T.concat([params.W_rh, params.W_rx], axis=1)], axis=0)
    b_zr = T.concat([params.b_z, params.b_r], axis=0)
    zr = T.conv2d(hx, k_zr, b_zr)
    z = T.sigmoid(T.narrow(zr, 1, 0, co))
    r = T.sigmoid(T.narrow(zr, 1, co, co))
    gated = T.concat([T.hadamard(r, h_prev), x_t], axis=1)
    hbar = T.tanh(T.conv2d(gated, T.concat([params.W_hh, params.W_hx], axis=1), params.b_h))
    return T.add(T.hadamard(z, h_prev), T.hadamard(T.sub_from_one(z), hbar))


def lstm_conv_step(x_t, state, params):
    """One convolutional LSTM step (input/forget/candidate/output gating)."""
    h_prev, c_prev = state.hidden, state.cell
    _check_step_shapes(x_t, h_prev)
    co = params.out_ch
    hx = T.concat([h_prev, x_t], axis=1)
    k = T.concat([T.concat([getattr(params, f"W_{g}h"), getattr(params, f"W_{g}x")], axis=1)
                  for g in ("i", "f", "g", "o")], axis=0)
    b = T.concat([params.b_i, params.b_f, params.b_g, params.b_o], axis=0)
    pre = T.conv2d(hx, k, b)
    i = T.sigmoid(T.narrow(pre, 1, 0, co))
    f = T.sigmoid(T.narrow(pre, 1, co, co))
    g = T.tanh(T.narrow(pre, 1, 2 * co, co))
    o = T.sigmoid(T.narrow(pre, 1, 3 * co, co))
    c_t = T.add(T.hadamard(f, c_prev), T.hadamard(i, g))
    h_t = T.hadamard(o, T.tanh(c_t))
    return CellState(h_t, c_t)


def elman_conv_step(x_t, h_prev, params):
    """h_t = sigmoid(W_h * h_prev + b_h) + W_x * x_t, returned unsquashed."""
    _check_step_shapes(x_t, h_prev)
    rec = T.sigmoid(T.conv2d(h_prev, params.W_h, params.b_h))
    return T.add(rec, T.conv2d(x_t, params.W_x, params._zero))


def rg_conv_step(x_t, state, params):
    """Recurrent-gated step: complementary (1 - sigmoid) gates on two states.

    h_t = (1 - s(W_ch*c)) o (W_xh*x) + (1 - s(W_hh*h)) o (W_h*h)
    c_t = (1 - s(W_hc*h)) o (W_xc*x) + (1 - s(W_cc*c)) o (W_c*c)
    """
    h_prev, c_prev = state.hidden, state.cell
    _check_step_shapes(x_t, h_prev)
    co = params.out_ch
    # fuse by source: one convolution each for h_prev, c_prev, and x_t
    from_h = T.conv2d(h_prev,
                      T.concat([params.W_hh, params.W_hc, params.W_h], axis=0),
                      T.concat([params.b_hh, params.b_hc, params._zero], axis=0))
    from_c = T.conv2d(c_prev,
                      T.concat([params.W_ch, params.W_cc, params.W_c], axis=0),
                      T.concat([params.b_ch, params.b_cc, params._zero], axis=0))
    from_x = T.conv2d(x_t,
                      T.concat([params.W_xh, params.W_xc], axis=0),
                      T.concat([params._zero, params._zero], axis=0))
    gate_hh = T.sub_from_one(T.sigmoid(T.narrow(from_h, 1, 0, co)))
    gate_hc = T.sub_from_one(T.sigmoid(T.narrow(from_h, 1, co, co)))
    drive_h = T.narrow(from_h, 1, 2 * co, co)
    gate_ch = T.sub_from_one(T.sigmoid(T.narrow(from_c, 1, 0, co)))
    gate_cc = T.sub_from_one(T.sigmoid(T.narrow(from_c, 1, co, co)))
    drive_c = T.narrow(from_c, 1, 2 * co, co)
    drive_xh = T.narrow(from_x, 1, 0, co)
    drive_xc = T.narrow(from_x, 1, co, co)
    h_t = T.add(T.hadamard(gate_ch, drive_xh), T.hadamard(gate_hh, drive_h))
    c_t = T.add(T.hadamard(gate_hc, drive_xc), T.hadamard(gate_cc, drive_c))
    return CellState(h_t, c_t)


def gru_dense_step(x_t, h_prev, params):
    """GRU step over flat [batch, units] vectors (ablation architectures)."""
    if x_t.data.shape[0] != h_prev.data.shape[0]:
        raise ShapeError(f"batch mismatch: {x_t.data.shape} vs {h_prev.data.shape}")
    if x_t.data.shape[1] != params.in_units or h_prev.data.shape[1] != params.out_units:
        raise ShapeError(
            f"width mismatch: frame {x_t.data.shape}, state {h_prev.data.shape}, "
            f"cell maps {params.in_units} -> {params.out_units}"
        )
    m = params.out_units
    hx = T.concat([h_prev, x_t], axis=1)
    W_zr = T.concat([T.concat([params.W_zh, params.W_zx], axis=1),
                     T.concat([params.W_rh, params.W_rx], axis=1)], axis=0)
    zr = T.dense(hx, W_zr, T.concat([params.b_z, params.b_r], axis=0))
    z = T.sigmoid(T.narrow(zr, 1, 0, m))
    r = T.sigmoid(T.narrow(zr, 1, m, m))
    gated = T.concat([T.hadamard(r, h_prev), x_t], axis=1)
    hbar = T.tanh(T.dense(gated, T.concat([params.W_hh, params.W_hx], axis=1), params.b_h))
    return T.add(T.hadamard(z, h_prev), T.hadamard(T.sub_from_one(z), hbar))


def zero_state(kind, batch, ch, height, width, dtype=None):
    """Fresh all-zero state for a cell kind (hidden + cell where applicable)."""
    dtype = dtype or T.get_default_dtype()
    if kind == CellKind.FEEDFORWARD_CONV:
        return None
    hidden = Tensor(np.zeros((batch, ch, height, width)), dtype=dtype)
    if kind in (CellKind.LSTM_CONV, CellKind.RG_CONV):
        return CellState(hidden, Tensor(np.zeros((batch, ch, height, width)), dtype=dtype))
    return CellState(hidden)
