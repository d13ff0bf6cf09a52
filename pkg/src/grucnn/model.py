"""Declarative model specs and the sequence-classifier forward pass.

A :class:`ModelSpec` is an ordered layer list.  The two defaults follow
the reference architecture table: a feedforward stack (conv 96, 96,
pool, dropout .25, batch norm, conv 192, 192, pool, dropout .25,
flatten, dense 1536, dropout .5, softmax head) and a recurrent stack of
the same shape with GRU-gated convolutions of widths 32, 32, 64, 64 and
a 512-unit dense layer.  Variants swap the recurrent cell kind, restrict
recurrency to the early or late conv pair, or make the dense stage a GRU
over flat vectors.

Stateless layers are time distributed: the same layer, weights and all,
is applied to each frame.  Recurrent layers carry their hidden state
across frames, starting from zero.  The head emits one probability
vector per frame.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from . import cells, tensor as T
from .cells import CellKind
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

# layer kinds a spec may name
CELL_KINDS = {
    "conv": CellKind.FEEDFORWARD_CONV,
    "gru_conv": CellKind.GRU_CONV,
    "lstm_conv": CellKind.LSTM_CONV,
    "elman_conv": CellKind.ELMAN_CONV,
    "rg_conv": CellKind.RG_CONV,
}
STATIC_KINDS = ("max_pool", "dropout", "batch_norm", "flatten", "dense",
                "gru_dense", "softmax_head")


@dataclasses.dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int | None = None       # channels or units, where applicable
    rate: float | None = None      # dropout probability
    in_features: int | None = None  # optional declared width check (dense)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.width is not None:
            d["width"] = self.width
        if self.rate is not None:
            d["rate"] = self.rate
        if self.in_features is not None:
            d["in_features"] = self.in_features
        return d


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_channels: int = 3
    input_size: int = 16

    def to_dict(self):
        return {
            "name": self.name,
            "input_channels": self.input_channels,
            "input_size": self.input_size,
            "layers": [l.to_dict() for l in self.layers],
        }

    @staticmethod
    def from_dict(d):
        return ModelSpec(
            name=d["name"],
            layers=tuple(LayerSpec(**l) for l in d["layers"]),
            input_channels=d.get("input_channels", 3),
            input_size=d.get("input_size", 16),
        )


def _conv_stack(kinds, widths, dense, dense_kind="dense"):
    k1, k2 = kinds
    w1, w2 = widths
    return (
        LayerSpec(k1, w1),
        LayerSpec(k1, w1),
        LayerSpec("max_pool"),
        LayerSpec("dropout", rate=0.25),
        LayerSpec("batch_norm"),
        LayerSpec(k2, w2),
        LayerSpec(k2, w2),
        LayerSpec("max_pool"),
        LayerSpec("dropout", rate=0.25),
        LayerSpec("flatten"),
        LayerSpec(dense_kind, dense),
        LayerSpec("dropout", rate=0.5),
        LayerSpec("softmax_head", 10),
    )


def preset(name, input_size=16, input_channels=3):
    """A named architecture; see PRESETS for the catalogue."""
    recurrent_cell = {"grucnn": "gru_conv", "lstmcnn": "lstm_conv",
                      "elmancnn": "elman_conv", "rgcnn": "rg_conv"}
    if name == "ccnn":
        layers = _conv_stack(("conv", "conv"), (96, 192), 1536)
    elif name in recurrent_cell:
        cell = recurrent_cell[name]
        layers = _conv_stack((cell, cell), (32, 64), 512)
    elif name == "grucnn-early":
        layers = _conv_stack(("gru_conv", "conv"), (32, 192), 512)
    elif name == "grucnn-late":
        layers = _conv_stack(("conv", "gru_conv"), (96, 64), 512)
    elif name == "ccnn-grufc":
        layers = _conv_stack(("conv", "conv"), (96, 192), 512, dense_kind="gru_dense")
    elif name == "grucnn-grufc":
        layers = _conv_stack(("gru_conv", "gru_conv"), (32, 64), 512, dense_kind="gru_dense")
    else:
        raise ValueError(f"unknown model preset {name!r}")
    return ModelSpec(name=name, layers=layers, input_channels=input_channels,
                     input_size=input_size)


PRESETS = ("ccnn", "grucnn", "lstmcnn", "elmancnn", "rgcnn",
           "grucnn-early", "grucnn-late", "ccnn-grufc", "grucnn-grufc")


# ---------------------------------------------------------------------------
# built layers
# ---------------------------------------------------------------------------

class _Layer:
    """One built layer: parameters plus a per-frame step."""

    def __init__(self, index, spec):
        self.index = index
        self.spec = spec

    def parameters(self):
        return []

    def buffers(self):
        return []


class _CellLayer(_Layer):
    _steps = {
        CellKind.FEEDFORWARD_CONV: None,
        CellKind.GRU_CONV: cells.gru_conv_step,
        CellKind.LSTM_CONV: cells.lstm_conv_step,
        CellKind.ELMAN_CONV: cells.elman_conv_step,
        CellKind.RG_CONV: cells.rg_conv_step,
    }
    _params = {
        CellKind.FEEDFORWARD_CONV: cells.FeedforwardConvParams,
        CellKind.GRU_CONV: cells.GruConvParams,
        CellKind.LSTM_CONV: cells.LstmConvParams,
        CellKind.ELMAN_CONV: cells.ElmanConvParams,
        CellKind.RG_CONV: cells.RgConvParams,
    }

    def __init__(self, index, spec, kind, in_ch, rng, dtype):
        super().__init__(index, spec)
        self.kind = kind
        self.params = self._params[kind](in_ch, spec.width, rng, dtype)
        self.state = None  # CellState during a sequence pass

    def parameters(self):
        return self.params.parameters()

    def reset(self, batch, height, width, dtype):
        self.state = cells.zero_state(self.kind, batch, self.spec.width, height, width, dtype)

    def step(self, x, training, rng):
        if self.kind == CellKind.FEEDFORWARD_CONV:
            return cells.feedforward_conv_step(x, self.params)
        if self.kind == CellKind.GRU_CONV:
            h = cells.gru_conv_step(x, self.state.hidden, self.params)
            self.state = cells.CellState(h)
            return h
        if self.kind == CellKind.ELMAN_CONV:
            h = cells.elman_conv_step(x, self.state.hidden, self.params)
            self.state = cells.CellState(h)
            return h
        self.state = self._steps[self.kind](x, self.state, self.params)
        return self.state.hidden


class _MaxPoolLayer(_Layer):
    def step(self, x, training, rng):
        return T.max_pool_2x2(x)


class _DropoutLayer(_Layer):
    def step(self, x, training, rng):
        return T.dropout(x, self.spec.rate, training, rng)


class _BatchNormLayer(_Layer):
    def __init__(self, index, spec, channels, dtype):
        super().__init__(index, spec)
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def step(self, x, training, rng):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, training)


class _FlattenLayer(_Layer):
    def step(self, x, training, rng):
        b = x.data.shape[0]
        return T.reshape(x, (b, x.data.size // b))


class _DenseLayer(_Layer):
    def __init__(self, index, spec, in_features, rng, dtype, relu):
        super().__init__(index, spec)
        self.weight = cells.uniform_init(rng, (spec.width, in_features), in_features, dtype)
        self.bias = Tensor(np.zeros(spec.width), requires_grad=True, dtype=dtype)
        self.relu = relu

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def step(self, x, training, rng):
        out = T.dense(x, self.weight, self.bias)
        return T.relu(out) if self.relu else out


class _GruDenseLayer(_Layer):
    def __init__(self, index, spec, in_features, rng, dtype):
        super().__init__(index, spec)
        self.params = cells.GruDenseParams(in_features, spec.width, rng, dtype)
        self.state = None

    def parameters(self):
        return self.params.parameters()

    def reset(self, batch, dtype):
        self.state = cells.CellState(Tensor(np.zeros((batch, self.spec.width)), dtype=dtype))

    def step(self, x, training, rng):
        h = cells.gru_dense_step(x, self.state.hidden, self.params)
        self.state = cells.CellState(h)
        return h


class Model:
    """A built layer stack with one set of parameters."""

    def __init__(self, spec, layers, dtype):
        self.spec = spec
        self.layers = layers
        self.dtype = dtype

    def parameters(self):
        """Ordered (name, tensor) pairs, names stable across rebuilds."""
        out = []
        for layer in self.layers:
            prefix = f"L{layer.index:02d}.{layer.spec.kind}"
            out.extend((f"{prefix}.{n}", t) for n, t in layer.parameters())
        return out

    def buffers(self):
        out = []
        for layer in self.layers:
            prefix = f"L{layer.index:02d}.{layer.spec.kind}"
            out.extend((f"{prefix}.{n}", b) for n, b in layer.buffers())
        return out

    def param_count(self):
        return sum(t.data.size for _, t in self.parameters())

    def conv_stage_param_count(self):
        """Parameters in the convolutional stage only (everything pre-flatten)."""
        n = 0
        for layer in self.layers:
            if layer.spec.kind == "flatten":
                break
            n += sum(t.data.size for _, t in layer.parameters())
        return n

    def zero_grads(self):
        for _, t in self.parameters():
            t.zero_grad()


def build_model(spec, rng, dtype=None):
    """Instantiate a spec: allocate parameters, validate widths.

    Raises ShapeError when pooling meets an odd extent or a dense layer's
    declared input width disagrees with the flattened feature count.
    """
    dtype = dtype or T.get_default_dtype()
    ch, h, w = spec.input_channels, spec.input_size, spec.input_size
    features = None  # set once flattened
    layers = []
    for i, ls in enumerate(spec.layers):
        if ls.kind in CELL_KINDS:
            if features is not None:
                raise ShapeError(f"layer {i}: conv layer after flatten")
            layers.append(_CellLayer(i, ls, CELL_KINDS[ls.kind], ch, rng, dtype))
            ch = ls.width
        elif ls.kind == "max_pool":
            if features is not None:
                raise ShapeError(f"layer {i}: pool layer after flatten")
            if h % 2 or w % 2:
                raise ShapeError(f"layer {i}: cannot 2x2-pool odd extent {h}x{w}")
            h, w = h // 2, w // 2
            layers.append(_MaxPoolLayer(i, ls))
        elif ls.kind == "dropout":
            layers.append(_DropoutLayer(i, ls))
        elif ls.kind == "batch_norm":
            if features is not None:
                raise ShapeError(f"layer {i}: batch_norm after flatten unsupported")
            layers.append(_BatchNormLayer(i, ls, ch, dtype))
        elif ls.kind == "flatten":
            features = ch * h * w
            layers.append(_FlattenLayer(i, ls))
        elif ls.kind in ("dense", "gru_dense", "softmax_head"):
            if features is None:
                raise ShapeError(f"layer {i}: {ls.kind} before flatten")
            if ls.in_features is not None and ls.in_features != features:
                raise ShapeError(
                    f"layer {i}: declared input width {ls.in_features} does not match "
                    f"flattened width {features}"
                )
            if ls.kind == "gru_dense":
                layers.append(_GruDenseLayer(i, ls, features, rng, dtype))
            else:
                relu = ls.kind == "dense"
                if ls.kind == "softmax_head" and ls.width != 10:
                    raise ShapeError(f"layer {i}: head must have 10 outputs, got {ls.width}")
                layers.append(_DenseLayer(i, ls, features, rng, dtype, relu))
            features = ls.width
        else:
            raise ValueError(f"layer {i}: unknown kind {ls.kind!r}")
    if spec.layers[-1].kind != "softmax_head":
        raise ValueError(f"{spec.name}: last layer must be softmax_head")
    model = Model(spec, layers, dtype)
    log.info("built %s: %d parameters (%d in conv stage)", spec.name,
             model.param_count(), model.conv_stage_param_count())
    return model


def _reset_states(model, batch):
    h = w = model.spec.input_size
    for layer in model.layers:
        if isinstance(layer, _CellLayer):
            layer.reset(batch, h, w, model.dtype)
        elif isinstance(layer, _MaxPoolLayer):
            h, w = h // 2, w // 2
        elif isinstance(layer, _GruDenseLayer):
            layer.reset(batch, model.dtype)


def _check_frames(model, frames):
    expect = (model.spec.input_channels, model.spec.input_size, model.spec.input_size)
    if frames.shape[2:] != expect:
        raise ShapeError(f"frames have shape {frames.shape[2:]} per item, spec wants {expect}")


def sequence_logits(model, frames, training=False, rng=None):
    """Per-frame logits for [batch, T, C, H, W] input; states reset at t=0."""
    _check_frames(model, frames)
    batch, n_frames = frames.shape[:2]
    _reset_states(model, batch)
    logits = []
    for t in range(n_frames):
        x = Tensor(np.ascontiguousarray(frames[:, t]), dtype=model.dtype)
        for layer in model.layers:
            x = layer.step(x, training, rng)
        logits.append(x)
    return logits


def forward_sequence(model, batch, training=False, rng=None):
    """Per-frame class probabilities, [batch, T, 10]."""
    frames = batch.frames if hasattr(batch, "frames") else batch
    logits = sequence_logits(model, frames, training, rng)
    probs = [T.reshape(T.softmax(l), (l.data.shape[0], 1, 10)) for l in logits]
    return T.concat(probs, axis=1)


def sequence_loss(model, batch, training=True, rng=None):
    """Cross-entropy averaged over all frames (and items of the batch)."""
    logits = sequence_logits(model, batch.frames, training, rng)
    total = T.cross_entropy(logits[0], batch.labels)
    for l in logits[1:]:
        total = T.add(total, T.cross_entropy(l, batch.labels))
    return T.scale(total, 1.0 / len(logits))
