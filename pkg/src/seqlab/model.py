"""Recurrent cells, output layer and full sequence forward passes.

Two cell types are supported. The vanilla cell is ``h = tanh(W_x x + W_h h_prev + b)``.
The LSTM cell has forget gates and diagonal peephole connections; its
parameters use the names below (``*_x`` input weights, ``*_m`` recurrent
weights, ``*_c`` peephole vectors, ``*_b`` biases)::

    cand    = tanh(cand_x x + cand_m m_prev + cand_b)
    in      = sigmoid(in_x x + in_m m_prev + in_c * c_prev + in_b)
    forget  = sigmoid(forget_x x + forget_m m_prev + forget_c * c_prev + forget_b)
    c       = in * cand + forget * c_prev
    out     = sigmoid(out_x x + out_m m_prev + out_c * c + out_b)
    m       = out * tanh(c)

The output gate peeks at the *new* cell value. Peephole weights are stored
as vectors, so the diagonal restriction cannot be broken.

A full model is a flat ``dict`` of arrays keyed ``layer{l}.{fwd|bwd}.{name}``
plus ``output.W`` / ``output.b``. Batched passes take inputs of shape
``(B, T, n_x)`` with per-sequence ``lengths``; frames past a sequence's
length are padding and never influence its real frames.
"""

from collections import OrderedDict, namedtuple
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .numeric import Rng, init_uniform, sigmoid, softmax

CELLS = ("lstm", "vanilla")
MODES = ("forward", "bidirectional")

LSTM_MATRICES = ("cand", "in", "forget", "out")
PEEPHOLES = ("in_c", "forget_c", "out_c")

LstmState = namedtuple("LstmState", ["c", "m"])


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a sequence labeller."""

    n_x: int
    n_y: int
    hidden: int
    cell: str = "lstm"
    mode: str = "forward"
    layers: int = 1

    def __post_init__(self):
        if self.cell not in CELLS:
            raise ContractError(f"unknown cell type {self.cell!r}")
        if self.mode not in MODES:
            raise ContractError(f"unknown direction mode {self.mode!r}")
        if self.hidden < 1:
            raise ContractError(f"hidden must be >= 1, got {self.hidden}")
        if self.layers not in (1, 2):
            raise ContractError(f"only 1 or 2 layers are supported, got {self.layers}")
        if self.n_x < 1 or self.n_y < 1:
            raise ContractError(f"n_x and n_y must be positive, got {self.n_x}, {self.n_y}")

    @property
    def directions(self):
        return ("fwd", "bwd") if self.mode == "bidirectional" else ("fwd",)

    @property
    def d_m(self):
        """Width of the representation fed to the output layer."""
        return self.hidden * len(self.directions)


def cell_shapes(cell, n_in, hidden):
    shapes = OrderedDict()
    if cell == "vanilla":
        shapes["W_x"] = (hidden, n_in)
        shapes["W_h"] = (hidden, hidden)
        shapes["b"] = (hidden,)
        return shapes
    for gate in LSTM_MATRICES:
        shapes[f"{gate}_x"] = (hidden, n_in)
        shapes[f"{gate}_m"] = (hidden, hidden)
        if gate != "cand":
            shapes[f"{gate}_c"] = (hidden,)
        shapes[f"{gate}_b"] = (hidden,)
    return shapes


def param_shapes(spec):
    """Ordered mapping of every parameter name to its shape."""
    shapes = OrderedDict()
    n_in = spec.n_x
    for layer in range(spec.layers):
        for d in spec.directions:
            for name, shape in cell_shapes(spec.cell, n_in, spec.hidden).items():
                shapes[f"layer{layer}.{d}.{name}"] = shape
        n_in = spec.d_m
    shapes["output.W"] = (spec.n_y, spec.d_m)
    shapes["output.b"] = (spec.n_y,)
    return shapes


def count_params(spec):
    return sum(int(np.prod(s)) for s in param_shapes(spec).values())


def init_params(spec, rng, scale=0.08, forget_bias=1.0):
    """Uniform(-scale, scale) weights and peepholes; zero biases except the
    forget-gate bias, which starts at ``forget_bias``."""
    params = OrderedDict()
    for name, shape in param_shapes(spec).items():
        short = name.rsplit(".", 1)[1]
        if short == "b" or short.endswith("_b"):
            value = np.full(shape, forget_bias if short == "forget_b" else 0.0)
        elif len(shape) == 1:
            value = init_uniform(rng, 1, shape[0], scale)[0]
        else:
            value = init_uniform(rng, shape[0], shape[1], scale)
        params[name] = value
    return params


def zeros_like_params(params):
    return OrderedDict((k, np.zeros_like(v)) for k, v in params.items())


def check_params(spec, params):
    expected = param_shapes(spec)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ContractError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ContractError(f"{name}: expected shape {shape}, got {params[name].shape}")


def cell_params(params, layer, direction):
    prefix = f"layer{layer}.{direction}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# single-step reference operations


def _expect(vec, n, what):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (n,):
        raise ContractError(f"{what}: expected length {n}, got shape {vec.shape}")
    return vec


def vanilla_step(p, h_prev, x):
    hidden, n_x = p["W_x"].shape
    if p["W_h"].shape != (hidden, hidden) or p["b"].shape != (hidden,):
        raise ContractError("vanilla parameters have inconsistent shapes")
    h_prev = _expect(h_prev, hidden, "h_prev")
    x = _expect(x, n_x, "x")
    return np.tanh(p["W_x"] @ x + p["W_h"] @ h_prev + p["b"])


def lstm_step(p, s_prev, x):
    """One LSTM update, returning the new ``LstmState(c, m)``."""
    hidden, n_x = p["cand_x"].shape
    for name, shape in cell_shapes("lstm", n_x, hidden).items():
        if p[name].shape != shape:
            raise ContractError(f"{name}: expected shape {shape}, got {p[name].shape}")
    c_prev = _expect(s_prev.c, hidden, "c_prev")
    m_prev = _expect(s_prev.m, hidden, "m_prev")
    x = _expect(x, n_x, "x")

    cand = np.tanh(p["cand_x"] @ x + p["cand_m"] @ m_prev + p["cand_b"])
    i = sigmoid(p["in_x"] @ x + p["in_m"] @ m_prev + p["in_c"] * c_prev + p["in_b"])
    f = sigmoid(p["forget_x"] @ x + p["forget_m"] @ m_prev + p["forget_c"] * c_prev + p["forget_b"])
    c = i * cand + f * c_prev
    o = sigmoid(p["out_x"] @ x + p["out_m"] @ m_prev + p["out_c"] * c + p["out_b"])
    return LstmState(c=c, m=o * np.tanh(c))


def output_step(p, m):
    W, b = p["W"], p["b"]
    m = _expect(m, W.shape[1], "m")
    if b.shape != (W.shape[0],):
        raise ContractError(f"output bias shape {b.shape} does not match W {W.shape}")
    return softmax(W @ m + b)


def dropout_mask(rng, length, p_drop):
    """Inverted-dropout mask: 0 with probability p_drop, else 1/(1-p_drop)."""
    if not 0.0 <= p_drop < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p_drop}")
    if p_drop == 0.0:
        return np.ones(length)
    keep = rng.uniform(length) >= p_drop
    return keep / (1.0 - p_drop)


# ---------------------------------------------------------------------------
# batched layers


def reverse_index(lengths, T):
    """Index array that reverses each row within its own length.

    The mapping is an involution; padding positions map to themselves.
    """
    t = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)


def _take_time(x, idx):
    return x[np.arange(x.shape[0])[:, None], idx]


def lstm_layer_forward(p, x):
    """Run an LSTM over ``x`` of shape (B, T, D); returns (m, cache)."""
    B, T, _ = x.shape
    H = p["cand_b"].shape[0]
    Wx = np.concatenate([p[f"{g}_x"] for g in LSTM_MATRICES])
    Wm = np.concatenate([p[f"{g}_m"] for g in LSTM_MATRICES])
    b = np.concatenate([p[f"{g}_b"] for g in LSTM_MATRICES])
    w_ic, w_fc, w_oc = p["in_c"], p["forget_c"], p["out_c"]

    ax = x @ Wx.T + b
    gates = np.empty((B, T, 4 * H))
    cells = np.empty((B, T + 1, H))
    tanh_c = np.empty((B, T, H))
    ms = np.empty((B, T + 1, H))
    cells[:, 0] = 0.0
    ms[:, 0] = 0.0
    for t in range(T):
        c_prev = cells[:, t]
        a = ax[:, t] + ms[:, t] @ Wm.T
        g = gates[:, t]
        g[:, :H] = np.tanh(a[:, :H])
        g[:, H:2 * H] = sigmoid(a[:, H:2 * H] + w_ic * c_prev)
        g[:, 2 * H:3 * H] = sigmoid(a[:, 2 * H:3 * H] + w_fc * c_prev)
        c = g[:, H:2 * H] * g[:, :H] + g[:, 2 * H:3 * H] * c_prev
        g[:, 3 * H:] = sigmoid(a[:, 3 * H:] + w_oc * c)
        cells[:, t + 1] = c
        tanh_c[:, t] = np.tanh(c)
        ms[:, t + 1] = g[:, 3 * H:] * tanh_c[:, t]
    cache = dict(x=x, Wx=Wx, Wm=Wm, gates=gates, cells=cells, tanh_c=tanh_c, ms=ms)
    return ms[:, 1:], cache


def lstm_layer_backward(p, cache, dm):
    """Backpropagate ``dm`` (B, T, H) through the layer; returns (grads, dx)."""
    x, Wx, Wm = cache["x"], cache["Wx"], cache["Wm"]
    gates, cells, tanh_c, ms = cache["gates"], cache["cells"], cache["tanh_c"], cache["ms"]
    B, T, _ = x.shape
    H = Wm.shape[1]
    w_ic, w_fc, w_oc = p["in_c"], p["forget_c"], p["out_c"]

    da = np.empty((B, T, 4 * H))
    d_ic = np.zeros(H)
    d_fc = np.zeros(H)
    d_oc = np.zeros(H)
    dm_rec = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        g = gates[:, t]
        cand, i, f, o = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        c_prev, c, tc = cells[:, t], cells[:, t + 1], tanh_c[:, t]
        dmt = dm[:, t] + dm_rec
        da_o = dmt * tc * o * (1.0 - o)
        dc = dc_next + dmt * o * (1.0 - tc * tc) + da_o * w_oc
        da_i = dc * cand * i * (1.0 - i)
        da_f = dc * c_prev * f * (1.0 - f)
        da_g = dc * i * (1.0 - cand * cand)
        dc_next = dc * f + da_i * w_ic + da_f * w_fc
        d_ic += (da_i * c_prev).sum(axis=0)
        d_fc += (da_f * c_prev).sum(axis=0)
        d_oc += (da_o * c).sum(axis=0)
        dat = da[:, t]
        dat[:, :H] = da_g
        dat[:, H:2 * H] = da_i
        dat[:, 2 * H:3 * H] = da_f
        dat[:, 3 * H:] = da_o
        dm_rec = dat @ Wm

    da2 = da.reshape(B * T, 4 * H)
    dWx = da2.T @ x.reshape(B * T, -1)
    dWm = da2.T @ ms[:, :-1].reshape(B * T, H)
    db = da2.sum(axis=0)
    dx = da @ Wx
    grads = {"in_c": d_ic, "forget_c": d_fc, "out_c": d_oc}
    for k, gate in enumerate(LSTM_MATRICES):
        rows = slice(k * H, (k + 1) * H)
        grads[f"{gate}_x"] = dWx[rows]
        grads[f"{gate}_m"] = dWm[rows]
        grads[f"{gate}_b"] = db[rows]
    return grads, dx


def vanilla_layer_forward(p, x):
    B, T, _ = x.shape
    H = p["b"].shape[0]
    ax = x @ p["W_x"].T + p["b"]
    hs = np.empty((B, T + 1, H))
    hs[:, 0] = 0.0
    Wh_T = p["W_h"].T
    for t in range(T):
        hs[:, t + 1] = np.tanh(ax[:, t] + hs[:, t] @ Wh_T)
    return hs[:, 1:], dict(x=x, hs=hs)


def vanilla_layer_backward(p, cache, dh):
    x, hs = cache["x"], cache["hs"]
    B, T, _ = x.shape
    H = hs.shape[2]
    da = np.empty((B, T, H))
    dh_rec = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        h = hs[:, t + 1]
        da[:, t] = (dh[:, t] + dh_rec) * (1.0 - h * h)
        dh_rec = da[:, t] @ p["W_h"]
    da2 = da.reshape(B * T, H)
    grads = {
        "W_x": da2.T @ x.reshape(B * T, -1),
        "W_h": da2.T @ hs[:, :-1].reshape(B * T, H),
        "b": da2.sum(axis=0),
    }
    return grads, da @ p["W_x"]


_LAYER_FWD = {"lstm": lstm_layer_forward, "vanilla": vanilla_layer_forward}
_LAYER_BWD = {"lstm": lstm_layer_backward, "vanilla": vanilla_layer_backward}


def sample_dropout(spec, rng, batch, p_drop):
    """One mask per sequence, per layer and direction: list of (B, d_m) arrays."""
    masks = []
    for _ in range(spec.layers):
        parts = [
            np.stack([dropout_mask(rng, spec.hidden, p_drop) for _ in range(batch)])
            for _ in spec.directions
        ]
        masks.append(np.concatenate(parts, axis=1))
    return masks


def forward_batch(spec, params, X, lengths=None, dropout=None):
    """Batched forward pass.

    ``dropout`` is None (evaluation) or the per-layer masks from
    :func:`sample_dropout`. Returns ``(probs, cache)`` with probs of shape
    (B, T, n_y).
    """
    X = np.asarray(X, dtype=np.float64)
    B, T, n_x = X.shape
    if T == 0:
        raise ContractError("cannot run a model on an empty sequence")
    if n_x != spec.n_x:
        raise ContractError(f"input width {n_x} does not match model n_x={spec.n_x}")
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    rev = reverse_index(lengths, T) if spec.mode == "bidirectional" else None
    layer_fwd = _LAYER_FWD[spec.cell]

    inp = X
    layer_caches = []
    for layer in range(spec.layers):
        outs, caches = [], []
        for d in spec.directions:
            p = cell_params(params, layer, d)
            x_in = inp if d == "fwd" else _take_time(inp, rev)
            out, cache = layer_fwd(p, x_in)
            if d == "bwd":
                out = _take_time(out, rev)
            outs.append(out)
            caches.append(cache)
        h = outs[0] if len(outs) == 1 else np.concatenate(outs, axis=2)
        if dropout is not None:
            h = h * dropout[layer][:, None, :]
        layer_caches.append(caches)
        inp = h

    logits = inp @ params["output.W"].T + params["output.b"]
    probs = softmax(logits)
    cache = dict(X=X, lengths=lengths, rev=rev, layers=layer_caches, top=inp, dropout=dropout)
    return probs, cache


def backward_batch(spec, params, cache, dlogits):
    """Gradients of a scalar loss given its gradient w.r.t. the logits."""
    grads = OrderedDict()
    grads["output.W"] = dlogits.reshape(-1, spec.n_y).T @ cache["top"].reshape(-1, spec.d_m)
    grads["output.b"] = dlogits.reshape(-1, spec.n_y).sum(axis=0)
    dh = dlogits @ params["output.W"]
    rev = cache["rev"]
    layer_bwd = _LAYER_BWD[spec.cell]
    H = spec.hidden
    for layer in range(spec.layers - 1, -1, -1):
        if cache["dropout"] is not None:
            dh = dh * cache["dropout"][layer][:, None, :]
        dinp = None
        for k, d in enumerate(spec.directions):
            p = cell_params(params, layer, d)
            dout = dh[:, :, k * H:(k + 1) * H]
            if d == "bwd":
                dout = _take_time(dout, rev)
            g, dx = layer_bwd(p, cache["layers"][layer][k], dout)
            if d == "bwd":
                dx = _take_time(dx, rev)
            for name, value in g.items():
                grads[f"layer{layer}.{d}.{name}"] = value
            dinp = dx if dinp is None else dinp + dx
        dh = dinp
    return OrderedDict((name, grads[name]) for name in param_shapes(spec))


# ---------------------------------------------------------------------------
# single-sequence API


@dataclass
class Prediction:
    probs: np.ndarray
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        # np.argmax returns the first maximal index: ties go to the lowest class
        self.labels = np.argmax(self.probs, axis=1)


def forward_sequence(spec, params, xs, train_mode=False, rng=None, p_drop=0.5):
    """Per-frame class probabilities for one (T, n_x) sequence."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ContractError(f"expected a nonempty (T, n_x) sequence, got shape {xs.shape}")
    dropout = None
    if train_mode:
        dropout = sample_dropout(spec, rng if rng is not None else Rng(0), 1, p_drop)
    probs, _ = forward_batch(spec, params, xs[None], dropout=dropout)
    return Prediction(probs[0])


@dataclass
class Model:
    """A parameter set bound to its architecture."""

    spec: ModelSpec
    params: dict

    @classmethod
    def create(cls, spec, seed=0, scale=0.08):
        return cls(spec, init_params(spec, Rng(seed), scale=scale))

    def predict(self, xs):
        return forward_sequence(self.spec, self.params, xs)
