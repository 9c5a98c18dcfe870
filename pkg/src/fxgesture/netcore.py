"""Forward/backward passes for the CNN-LSTM and accelerometer LSTM networks.

A network is a per-frame stack (conv2d / relu / maxpool2d), one LSTM layer
running over the frame features, a dense output layer and a softmax read at
the last frame of each sequence.  Everything is float64 numpy.

Parameters live in a flat dict keyed ``"<group>/<name>"``; one weight group
(``"In-C1"``, ``"L1"``, ...) shares one quantizer.  In quantized mode every
group with an attached :class:`~fxgesture.quantizer.QuantSpec` is quantized
in the forward pass and the backward pass treats quantizers as identity
(straight-through).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .quantizer import (SIGNAL_BOUNDED_SYM, SIGNAL_BOUNDED_UNIT, SIGNAL_SYM,
                        SIGNAL_UNBOUNDED, QuantSpec, fixed_step_size, quantize)

FRAME_KINDS = ("conv2d", "maxpool2d", "relu")
LAYER_KINDS = FRAME_KINDS + ("lstm", "dense", "softmax")
GATES = ("i", "f", "o", "g")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int = 0          # conv: output maps, lstm: N, dense: outputs
    inputs: int = 0         # conv: input maps, lstm: M, dense: inputs
    kernel: int = 0         # conv kernel / pool window
    weight_group: str | None = None
    recurrent_group: str | None = None
    signal_group: str | None = None


@dataclass(frozen=True)
class NetworkGraph:
    name: str
    input_shape: tuple
    layers: tuple
    output_classes: int
    input_group: str | None = "In"
    input_kind: str = SIGNAL_BOUNDED_UNIT

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self._validate()

    def _validate(self):
        kinds = [l.kind for l in self.layers]
        for k in kinds:
            if k not in LAYER_KINDS:
                raise ValueError(f"unknown layer kind {k!r}")
        if kinds.count("lstm") != 1:
            raise ValueError("graph needs exactly one lstm layer")
        lstm_at = kinds.index("lstm")
        if any(k not in FRAME_KINDS for k in kinds[:lstm_at]):
            raise ValueError("only conv/pool/relu layers may precede the lstm")
        if kinds[lstm_at + 1:] != ["dense", "softmax"]:
            raise ValueError("lstm must be followed by exactly dense then softmax")
        wg = [g for l in self.layers for g in (l.weight_group, l.recurrent_group) if g]
        if len(wg) != len(set(wg)):
            raise ValueError(f"duplicate weight group in {wg}")
        sg = self.signal_groups()
        if len(sg) != len(set(sg)):
            raise ValueError(f"duplicate signal group in {sg}")
        self.shapes()
        if self.layers[-2].units != self.output_classes:
            raise ValueError("dense layer width must equal output_classes")

    # shape bookkeeping

    def shapes(self):
        """Output shape of each layer (per frame, then per sequence step)."""
        shape = self.input_shape
        out = []
        for layer in self.layers:
            if layer.kind == "conv2d":
                c, h, w = shape
                k = layer.kernel
                if c != layer.inputs:
                    raise ValueError(f"conv expects {layer.inputs} maps, got {c}")
                if h < k or w < k:
                    raise ValueError(f"conv kernel {k} larger than map {h}x{w}")
                shape = (layer.units, h - k + 1, w - k + 1)
            elif layer.kind == "maxpool2d":
                c, h, w = shape
                sh, sw = min(layer.kernel, h), min(layer.kernel, w)
                shape = (c, h // sh, w // sw)
            elif layer.kind == "lstm":
                m = int(np.prod(shape))
                if m != layer.inputs:
                    raise ValueError(f"lstm expects {layer.inputs} inputs, got {m}")
                shape = (layer.units,)
            elif layer.kind == "dense":
                if shape != (layer.inputs,):
                    raise ValueError(f"dense expects {layer.inputs} inputs, got {shape}")
                shape = (layer.units,)
            out.append(shape)
        return out

    @property
    def lstm(self):
        return next(l for l in self.layers if l.kind == "lstm")

    @property
    def frame_layers(self):
        return [l for l in self.layers if l.kind in FRAME_KINDS]

    @property
    def dense(self):
        return next(l for l in self.layers if l.kind == "dense")

    def param_shapes(self):
        shapes = {}
        for layer in self.layers:
            if layer.kind == "conv2d":
                g, k = layer.weight_group, layer.kernel
                shapes[f"{g}/W"] = (layer.units, layer.inputs, k, k)
                shapes[f"{g}/b"] = (layer.units,)
            elif layer.kind == "lstm":
                n, m = layer.units, layer.inputs
                shapes[f"{layer.weight_group}/Wx"] = (4 * n, m)
                r = layer.recurrent_group
                shapes[f"{r}/Wh"] = (4 * n, n)
                shapes[f"{r}/b"] = (4 * n,)
                shapes[f"{r}/peep"] = (3, n)
            elif layer.kind == "dense":
                g = layer.weight_group
                shapes[f"{g}/W"] = (layer.units, layer.inputs)
                shapes[f"{g}/b"] = (layer.units,)
        return shapes

    def weight_groups(self):
        groups = []
        for layer in self.layers:
            for g in (layer.weight_group, layer.recurrent_group):
                if g:
                    groups.append(g)
        return groups

    def group_param_keys(self, group):
        keys = [k for k in self.param_shapes() if k.split("/")[0] == group]
        if not keys:
            raise KeyError(f"unknown weight group {group!r}")
        return keys

    def group_size(self, group):
        shapes = self.param_shapes()
        return sum(int(np.prod(shapes[k])) for k in self.group_param_keys(group))

    def param_count(self):
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def signal_groups(self):
        """Ordered ``{name: kind}`` of every quantizable signal group."""
        out = {}
        if self.input_group:
            out[self.input_group] = self.input_kind
        for layer in self.layers:
            if not layer.signal_group:
                continue
            if layer.kind in ("relu", "maxpool2d"):
                kind = SIGNAL_UNBOUNDED
            elif layer.kind == "lstm":
                kind = SIGNAL_BOUNDED_SYM
            else:
                raise ValueError(f"signal groups are not supported on {layer.kind}")
            if layer.signal_group in out:
                raise ValueError(f"duplicate signal group {layer.signal_group!r}")
            out[layer.signal_group] = kind
        return out

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "output_classes": self.output_classes,
            "input_group": self.input_group,
            "input_kind": self.input_kind,
            "layers": [
                {k: v for k, v in vars(l).items() if v not in (None, 0)}
                for l in self.layers
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            layers=tuple(LayerSpec(**l) for l in d["layers"]),
            output_classes=d["output_classes"],
            input_group=d.get("input_group"),
            input_kind=d.get("input_kind", SIGNAL_BOUNDED_UNIT),
        )


def lstm_param_count(units, inputs):
    """4N^2 + 4NM + 7N: four gate blocks, four biases, three peepholes."""
    if units < 1 or inputs < 0:
        raise ValueError("need units >= 1 and inputs >= 0")
    return 4 * units * units + 4 * units * inputs + 7 * units


# presets

def cnn_lstm_graph(name="cambridge-cnn-lstm", image_size=32, channels=3,
                   maps=(32, 32, 64), kernel=5, pool=2, units=128, classes=9):
    layers = []
    prev = channels
    for i, m in enumerate(maps, start=1):
        src = "In" if i == 1 else f"S{i - 1}"
        layers += [
            LayerSpec("conv2d", units=m, inputs=prev, kernel=kernel,
                      weight_group=f"{src}-C{i}"),
            LayerSpec("relu", signal_group=f"C{i}"),
            LayerSpec("maxpool2d", kernel=pool, signal_group=f"S{i}"),
        ]
        prev = m
    c, h, w = channels, image_size, image_size
    for l in layers:
        if l.kind == "conv2d":
            c, h, w = l.units, h - l.kernel + 1, w - l.kernel + 1
        elif l.kind == "maxpool2d":
            h, w = h // min(l.kernel, h), w // min(l.kernel, w)
    n_last = len(maps)
    layers += [
        LayerSpec("lstm", units=units, inputs=c * h * w,
                  weight_group=f"S{n_last}-L1", recurrent_group="L1",
                  signal_group="L1"),
        LayerSpec("dense", units=classes, inputs=units, weight_group="L1-Out"),
        LayerSpec("softmax"),
    ]
    return NetworkGraph(name, (channels, image_size, image_size), tuple(layers),
                        classes, input_group="In", input_kind=SIGNAL_BOUNDED_UNIT)


def accel_lstm_graph(units=128, classes=8, name=None):
    name = name or f"smartwatch-lstm-{units}"
    layers = (
        LayerSpec("lstm", units=units, inputs=3, weight_group="In-L1",
                  recurrent_group="L1", signal_group="L1"),
        LayerSpec("dense", units=classes, inputs=units, weight_group="L1-Out"),
        LayerSpec("softmax"),
    )
    return NetworkGraph(name, (3,), layers, classes, input_group="In",
                        input_kind=SIGNAL_SYM)


PRESETS = {
    "cambridge-cnn-lstm": cnn_lstm_graph,
    "smartwatch-lstm-32": lambda: accel_lstm_graph(32),
    "smartwatch-lstm-64": lambda: accel_lstm_graph(64),
    "smartwatch-lstm-128": lambda: accel_lstm_graph(128),
    "smartwatch-lstm-256": lambda: accel_lstm_graph(256),
}


def preset(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# model

@dataclass
class MasterModel:
    graph: NetworkGraph
    params: dict
    weight_specs: dict = field(default_factory=dict)
    signal_specs: dict = field(default_factory=dict)
    rng_seed: int = 0

    @classmethod
    def initialize(cls, graph, seed=0, scale=0.1):
        rng = np.random.default_rng(seed)
        params = {k: rng.uniform(-scale, scale, size=s)
                  for k, s in graph.param_shapes().items()}
        return cls(graph, params, rng_seed=seed)

    def copy(self):
        return MasterModel(self.graph, {k: v.copy() for k, v in self.params.items()},
                           dict(self.weight_specs), dict(self.signal_specs),
                           self.rng_seed)

    def group_values(self, group):
        return np.concatenate([self.params[k].ravel()
                               for k in self.graph.group_param_keys(group)])

    def effective_params(self, mode="float"):
        if mode == "float" or not self.weight_specs:
            return self.params
        out = dict(self.params)
        for group, spec in self.weight_specs.items():
            for k in self.graph.group_param_keys(group):
                out[k] = quantize(self.params[k], spec)
        return out

    def check(self):
        shapes = self.graph.param_shapes()
        if set(shapes) != set(self.params):
            raise ValueError("parameter keys do not match graph")
        for k, s in shapes.items():
            if self.params[k].shape != s:
                raise ValueError(f"{k}: shape {self.params[k].shape} != {s}")
            if not np.all(np.isfinite(self.params[k])):
                raise ValueError(f"{k}: non-finite weights")
        for g in self.weight_specs:
            self.graph.group_param_keys(g)
        sig = self.graph.signal_groups()
        for g in self.signal_specs:
            if g not in sig:
                raise KeyError(f"unknown signal group {g!r}")


# primitive layers

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _im2col(x, k):
    f, c, h, w = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # f c ho wo k k
    ho, wo = h - k + 1, w - k + 1
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(f * ho * wo, c * k * k), ho, wo


def conv2d_forward(x, W, b):
    """Valid, stride-1 cross-correlation.  ``x`` is (C,H,W) or (F,C,H,W)."""
    single = x.ndim == 3
    if single:
        x = x[None]
    out_maps, in_maps, k, _ = W.shape
    if x.shape[1] != in_maps:
        raise ValueError(f"conv expects {in_maps} input maps, got {x.shape[1]}")
    if x.shape[2] < k or x.shape[3] < k:
        raise ValueError("input smaller than kernel")
    cols, ho, wo = _im2col(x, k)
    y = cols @ W.reshape(out_maps, -1).T + b
    y = y.reshape(x.shape[0], ho, wo, out_maps).transpose(0, 3, 1, 2)
    return y[0] if single else y


def conv2d_backward(dy, x, W, need_dx=True):
    f, c, h, w = x.shape
    out_maps, _, k, _ = W.shape
    cols, ho, wo = _im2col(x, k)
    d2 = dy.transpose(0, 2, 3, 1).reshape(-1, out_maps)
    dW = (d2.T @ cols).reshape(W.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dW, db
    dcols = (d2 @ W.reshape(out_maps, -1)).reshape(f, ho, wo, c, k, k)
    dx = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + ho, j:j + wo] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dx, dW, db


def _pool_windows(x, size):
    f, c, h, w = x.shape
    sh, sw = min(size, h), min(size, w)
    ho, wo = h // sh, w // sw
    xw = x[:, :, :ho * sh, :wo * sw].reshape(f, c, ho, sh, wo, sw)
    return xw.transpose(0, 1, 2, 4, 3, 5).reshape(f, c, ho, wo, sh * sw), (sh, sw)


def maxpool2d_forward(x, size=2):
    """Non-overlapping max pooling; trailing odd rows/columns are dropped and a
    window larger than the map shrinks to the map."""
    single = x.ndim == 3
    if single:
        x = x[None]
    win, _ = _pool_windows(x, size)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return (y[0], arg[0]) if single else (y, arg)


def maxpool2d_backward(dy, arg, x_shape, size=2):
    f, c, h, w = x_shape
    sh, sw = min(size, h), min(size, w)
    ho, wo = h // sh, w // sw
    onehot = np.zeros((f, c, ho, wo, sh * sw))
    np.put_along_axis(onehot, arg[..., None], dy[..., None], axis=-1)
    dx = np.zeros(x_shape)
    dx[:, :, :ho * sh, :wo * sw] = (
        onehot.reshape(f, c, ho, wo, sh, sw).transpose(0, 1, 2, 4, 3, 5)
        .reshape(f, c, ho * sh, wo * sw))
    return dx


@dataclass
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray

    @classmethod
    def zeros(cls, units, batch=None):
        shape = (units,) if batch is None else (batch, units)
        return cls(np.zeros(shape), np.zeros(shape))


def _identity(x):
    return x


def lstm_step(x, state, Wx, Wh, b, peep, q_unit=_identity, q_sym=_identity):
    """One peephole-LSTM step; returns ``(h, new_state, cache)``.

    Gate order in the stacked weights is input, forget, output, candidate.
    ``q_unit`` quantizes sigmoid outputs, ``q_sym`` the candidate and h.
    """
    if not (np.all(np.isfinite(state.hidden)) and np.all(np.isfinite(state.cell))):
        raise ValueError("non-finite LSTM state")
    n = Wh.shape[1]
    h, c = state.hidden, state.cell
    a = x @ Wx.T + h @ Wh.T + b
    ai = a[..., :n] + peep[0] * c
    af = a[..., n:2 * n] + peep[1] * c
    ag = a[..., 3 * n:]
    i_raw, f_raw, g_raw = sigmoid(ai), sigmoid(af), np.tanh(ag)
    i, f, g = q_unit(i_raw), q_unit(f_raw), q_sym(g_raw)
    c_new = f * c + i * g
    o_raw = sigmoid(a[..., 2 * n:3 * n] + peep[2] * c_new)
    o = q_unit(o_raw)
    tc = np.tanh(c_new)
    h_new = q_sym(o * tc)
    cache = dict(x=x, h=h, c=c, i_raw=i_raw, f_raw=f_raw, g_raw=g_raw,
                 o_raw=o_raw, i=i, f=f, g=g, o=o, c_new=c_new, tc=tc)
    return h_new, LstmState(h_new, c_new), cache


def lstm_step_backward(dh, dc, cache, Wx, Wh, peep, grads):
    """Backprop one step.  Accumulates into ``grads`` (keys Wx, Wh, b, peep)
    and returns ``(dx, dh_prev, dc_prev)``."""
    k = cache
    do = dh * k["tc"]
    dc_new = dc + dh * k["o"] * (1.0 - k["tc"] ** 2)
    dao = do * k["o_raw"] * (1.0 - k["o_raw"])
    dc_new = dc_new + dao * peep[2]
    di = dc_new * k["g"]
    dg = dc_new * k["i"]
    df = dc_new * k["c"]
    dc_prev = dc_new * k["f"]
    dai = di * k["i_raw"] * (1.0 - k["i_raw"])
    daf = df * k["f_raw"] * (1.0 - k["f_raw"])
    dag = dg * (1.0 - k["g_raw"] ** 2)
    dc_prev = dc_prev + dai * peep[0] + daf * peep[1]
    da = np.concatenate([dai, daf, dao, dag], axis=-1)
    grads["peep"][0] += np.sum(dai * k["c"], axis=0)
    grads["peep"][1] += np.sum(daf * k["c"], axis=0)
    grads["peep"][2] += np.sum(dao * k["c_new"], axis=0)
    grads["Wx"] += da.T @ k["x"]
    grads["Wh"] += da.T @ k["h"]
    grads["b"] += da.sum(axis=0)
    return da @ Wx, da @ Wh, dc_prev


# sequence-level passes

def _frames_of(sample):
    frames = getattr(sample, "frames", sample)
    return np.asarray(frames, dtype=np.float64)


class _SignalQuantizers:
    def __init__(self, model, mode, strict):
        self.specs = {}
        if mode == "quantized":
            kinds = model.graph.signal_groups()
            if strict:
                missing = [g for g in kinds if g not in model.signal_specs]
                missing += [g for g in model.graph.weight_groups()
                            if g not in model.weight_specs]
                if missing:
                    raise KeyError(f"no QuantSpec for groups {missing}")
            self.specs = dict(model.signal_specs)
        elif mode != "float":
            raise ValueError(f"mode must be 'float' or 'quantized', not {mode!r}")

    def fn(self, group):
        spec = self.specs.get(group) if group else None
        if spec is None:
            return _identity
        return lambda x: quantize(x, spec)

    def lstm_fns(self, group):
        spec = self.specs.get(group) if group else None
        if spec is None:
            return _identity, _identity
        unit = fixed_step_size(SIGNAL_BOUNDED_UNIT, spec.bits, group)
        return (lambda x: quantize(x, unit)), (lambda x: quantize(x, spec))


def forward_batch(model, samples, mode="float", strict=False, keep=False,
                  all_steps=False, hooks=None):
    """Run a batch of sequences; returns ``(posteriors[B, K], cache)``.

    ``hooks`` maps signal-group names to callables receiving the float
    signal (used to collect activation statistics).
    """
    g = model.graph
    seqs = [_frames_of(s) for s in samples]
    lengths = np.array([s.shape[0] for s in seqs])
    if np.any(lengths < 1):
        raise ValueError("every sequence needs at least one frame")
    for s in seqs:
        if s.shape[1:] != g.input_shape:
            raise ValueError(f"frame shape {s.shape[1:]} != graph input {g.input_shape}")
    sq = _SignalQuantizers(model, mode, strict)
    p = model.effective_params(mode)
    hooks = hooks or {}
    B, T = len(seqs), int(lengths.max())
    lstm, dense = g.lstm, g.dense

    x = np.concatenate(seqs, axis=0)
    if g.input_group in hooks:
        hooks[g.input_group](x)
    x = sq.fn(g.input_group)(x)

    frame_cache = []
    for layer in g.frame_layers:
        if layer.kind == "conv2d":
            W, b = p[f"{layer.weight_group}/W"], p[f"{layer.weight_group}/b"]
            frame_cache.append((layer, x, None))
            x = conv2d_forward(x, W, b)
        elif layer.kind == "relu":
            frame_cache.append((layer, x, None))
            x = np.maximum(x, 0.0)
        else:
            frame_cache.append((layer, x, None))
            x, arg = maxpool2d_forward(x, layer.kernel)
            frame_cache[-1] = (layer, frame_cache[-1][1], arg)
        if layer.signal_group:
            if layer.signal_group in hooks:
                hooks[layer.signal_group](x)
            x = sq.fn(layer.signal_group)(x)
    feat_shape = x.shape[1:]
    feats = x.reshape(x.shape[0], -1)

    starts = np.concatenate(([0], np.cumsum(lengths)[:-1]))
    X = np.zeros((T, B, lstm.inputs))
    for bi, (s0, n) in enumerate(zip(starts, lengths)):
        X[:n, bi] = feats[s0:s0 + n]

    Wx = p[f"{lstm.weight_group}/Wx"]
    Wh = p[f"{lstm.recurrent_group}/Wh"]
    bl = p[f"{lstm.recurrent_group}/b"]
    peep = p[f"{lstm.recurrent_group}/peep"]
    q_unit, q_sym = sq.lstm_fns(lstm.signal_group)
    state = LstmState.zeros(lstm.units, B)
    H = np.zeros((T, B, lstm.units))
    steps = []
    for t in range(T):
        h, state, cache = lstm_step(X[t], state, Wx, Wh, bl, peep, q_unit, q_sym)
        if lstm.signal_group in hooks:
            hooks[lstm.signal_group](cache)
        H[t] = h
        if keep:
            steps.append(cache)

    Wo, bo = p[f"{dense.weight_group}/W"], p[f"{dense.weight_group}/b"]
    h_last = H[lengths - 1, np.arange(B)]
    post = softmax(h_last @ Wo.T + bo)
    cache = dict(lengths=lengths, h_last=h_last, posteriors=post, mode=mode)
    if all_steps:
        cache["step_posteriors"] = softmax(H @ Wo.T + bo)
    if keep:
        cache.update(frame_cache=frame_cache, steps=steps, feat_shape=feat_shape,
                     starts=starts, params=p)
    return post, cache


def forward_sequence(model, sample, mode="float", strict=False):
    post, _ = forward_batch(model, [sample], mode, strict)
    return post[0]


def backward_batch(model, cache, labels, sample_weights=None, bptt_steps=None):
    """Gradients of mean cross-entropy (final frame) w.r.t. every parameter.

    Returns ``(grads, loss)``.  Quantizers are straight-through.  With
    ``bptt_steps`` the recurrence is truncated that many steps back from
    each sequence's final frame.
    """
    g = model.graph
    p = cache["params"]
    lengths = cache["lengths"]
    post = cache["posteriors"]
    B = len(lengths)
    labels = np.asarray(labels, dtype=np.int64)
    w = np.ones(B) if sample_weights is None else np.asarray(sample_weights, float)
    lstm, dense = g.lstm, g.dense
    grads = {k: np.zeros_like(v) for k, v in p.items()}

    idx = np.arange(B)
    loss = float(np.sum(-w * np.log(np.maximum(post[idx, labels], 1e-300))) / B)
    dz = post.copy()
    dz[idx, labels] -= 1.0
    dz *= (w / B)[:, None]
    Wo = p[f"{dense.weight_group}/W"]
    grads[f"{dense.weight_group}/W"] += dz.T @ cache["h_last"]
    grads[f"{dense.weight_group}/b"] += dz.sum(axis=0)
    dh_last = dz @ Wo

    T = len(cache["steps"])
    Wx = p[f"{lstm.weight_group}/Wx"]
    Wh = p[f"{lstm.recurrent_group}/Wh"]
    peep = p[f"{lstm.recurrent_group}/peep"]
    lg = {"Wx": grads[f"{lstm.weight_group}/Wx"],
          "Wh": grads[f"{lstm.recurrent_group}/Wh"],
          "b": grads[f"{lstm.recurrent_group}/b"],
          "peep": grads[f"{lstm.recurrent_group}/peep"]}
    first = np.zeros(B, dtype=np.int64)
    if bptt_steps:
        first = np.maximum(lengths - bptt_steps, 0)
    need_dx = bool(g.frame_layers)
    dX = np.zeros((T, B, lstm.inputs)) if need_dx else None
    dh = np.zeros((B, lstm.units))
    dc = np.zeros((B, lstm.units))
    for t in range(T - 1, -1, -1):
        hit = lengths - 1 == t
        dh[hit] += dh_last[hit]
        live = (t >= first)[:, None]
        dh = dh * live
        dc = dc * live
        dx, dh, dc = lstm_step_backward(dh, dc, cache["steps"][t], Wx, Wh, peep, lg)
        if need_dx:
            dX[t] = dx

    if need_dx:
        feats = np.concatenate([dX[:n, bi] for bi, n in enumerate(lengths)])
        d = feats.reshape((-1,) + cache["feat_shape"])
        layers = cache["frame_cache"]
        for pos in range(len(layers) - 1, -1, -1):
            layer, x_in, arg = layers[pos]
            if layer.kind == "relu":
                d = d * (x_in > 0)
            elif layer.kind == "maxpool2d":
                d = maxpool2d_backward(d, arg, x_in.shape, layer.kernel)
            else:
                wg = layer.weight_group
                d, dW, db = conv2d_backward(d, x_in, p[f"{wg}/W"], need_dx=pos > 0)
                grads[f"{wg}/W"] += dW
                grads[f"{wg}/b"] += db
    return grads, loss


def backward_sequence(model, cache, label, weight=1.0, bptt_steps=None):
    grads, _ = backward_batch(model, cache, [label], [weight], bptt_steps)
    return grads


def forward_backward(model, samples, labels, mode="float", bptt_steps=None,
                     sample_weights=None):
    post, cache = forward_batch(model, samples, mode, keep=True)
    return backward_batch(model, cache, labels, sample_weights, bptt_steps)
