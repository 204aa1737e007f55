"""M-STGAT and the three one-dimensional baselines on top of :mod:`mstgat.autodiff`.

Every forward function takes a ``params`` mapping of name -> Tensor. Bind the
arrays to a :class:`~mstgat.autodiff.Tape` for training, or wrap them as plain
Tensors for evaluation.

LSTM gate blocks are packed along the last axis in the order input, forget,
output, candidate.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

KINDS = ("m-stgat", "stgat", "gat", "lstm")
LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "m-stgat"
    hidden: int = 64
    heads: int = 4
    head_dim: int = 16
    kernel: int = 3
    conv_channels: int = 32
    history: int = 12
    horizon: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if min(self.hidden, self.heads, self.head_dim, self.kernel, self.conv_channels,
               self.history, self.horizon) < 1:
            raise ValueError("model dimensions must be >= 1")
        if self.kind in ("m-stgat", "stgat") and self.kernel > self.history:
            raise ValueError(f"kernel width {self.kernel} exceeds history {self.history}")

    @property
    def n_features(self) -> int:
        return 4 if self.kind == "m-stgat" else 1

    @property
    def gat_dim(self) -> int:
        return self.heads * self.head_dim

    def to_json(self) -> dict:
        return asdict(self)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config
    shapes: dict[str, tuple[int, ...]] = {}

    def lstm(prefix, d_in):
        shapes[f"{prefix}.w_x"] = (d_in, 4 * c.hidden)
        shapes[f"{prefix}.w_h"] = (c.hidden, 4 * c.hidden)
        shapes[f"{prefix}.b"] = (4 * c.hidden,)

    if c.kind in ("m-stgat", "stgat", "lstm"):
        lstm("lstm0", c.n_features)
        lstm("lstm1", c.hidden)
    if c.kind in ("m-stgat", "stgat"):
        shapes["gat.w"] = (c.hidden, c.gat_dim)
        shapes["gat.a"] = (c.heads, 2 * c.head_dim)
        shapes["conv.k"] = (c.kernel, c.gat_dim, c.conv_channels)
        shapes["conv.b"] = (c.conv_channels,)
        shapes["out.w"] = ((c.history - c.kernel + 1) * c.conv_channels, c.horizon)
    elif c.kind == "gat":
        shapes["gat.w"] = (c.history * c.n_features, c.gat_dim)
        shapes["gat.a"] = (c.heads, 2 * c.head_dim)
        shapes["out.w"] = (c.gat_dim, c.horizon)
    else:
        shapes["out.w"] = (c.hidden, c.horizon)
    shapes["out.b"] = (c.horizon,)
    return shapes


def glorot_limit(name: str, shape: tuple[int, ...]) -> float:
    if name == "gat.a":
        fan_in, fan_out = shape[1], 1
    elif len(shape) == 3:
        fan_in, fan_out = shape[0] * shape[1], shape[0] * shape[2]
    else:
        fan_in, fan_out = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(config: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, forget-gate bias 1."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            p = np.zeros(shape)
            if name.endswith(".b") and name.startswith("lstm"):
                h = config.hidden
                p[h:2 * h] = 1.0  # forget gate block
        else:
            lim = glorot_limit(name, shape)
            p = rng.uniform(-lim, lim, size=shape)
        params[name] = p
    return params


def n_params(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


# ---------------------------------------------------------------- blocks

def _cell_update(gates: Tensor, c: Tensor, hidden: int):
    sig = ad.sigmoid(ad.slice_(gates, (Ellipsis, slice(0, 3 * hidden))))
    i = ad.slice_(sig, (Ellipsis, slice(0, hidden)))
    f = ad.slice_(sig, (Ellipsis, slice(hidden, 2 * hidden)))
    o = ad.slice_(sig, (Ellipsis, slice(2 * hidden, 3 * hidden)))
    g = ad.tanh(ad.slice_(gates, (Ellipsis, slice(3 * hidden, 4 * hidden))))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def lstm_cell_step(x, h, c, w_x, w_h, b):
    """One forget-gate LSTM step. ``x`` is ``[..., F]``; ``h`` and ``c`` are ``[..., d_h]``."""
    x, h, c, w_x, w_h = (ad.as_tensor(t) for t in (x, h, c, w_x, w_h))
    hidden = h.shape[-1]
    if w_x.shape != (x.shape[-1], 4 * hidden) or w_h.shape != (hidden, 4 * hidden) or c.shape != h.shape:
        raise ValueError(f"lstm_cell_step shape mismatch: x{x.shape} h{h.shape} c{c.shape} "
                         f"w_x{w_x.shape} w_h{w_h.shape}")
    x2 = ad.reshape(x, (-1, x.shape[-1]))
    h2 = ad.reshape(h, (-1, hidden))
    gates = ad.add(ad.add(ad.matmul(x2, w_x), ad.matmul(h2, w_h)), b)
    h_new, c_new = _cell_update(gates, ad.reshape(c, (-1, hidden)), hidden)
    return ad.reshape(h_new, h.shape), ad.reshape(c_new, c.shape)


def _lstm_layer(steps: list[Tensor], params, prefix: str, hidden: int) -> list[Tensor]:
    """Run one layer over per-step inputs ``[R, d_in]`` from a zero state."""
    w_x, w_h, b = params[f"{prefix}.w_x"], params[f"{prefix}.w_h"], params[f"{prefix}.b"]
    R = steps[0].shape[0]
    h = None
    c = Tensor(np.zeros((R, hidden)), tape=steps[0].tape)
    outs = []
    for x in steps:
        gates = ad.add(ad.matmul(x, w_x), b)
        if h is not None:
            gates = ad.add(gates, ad.matmul(h, w_h))
        h, c = _cell_update(gates, c, hidden)
        outs.append(h)
    return outs


def temporal_encode(inputs, params, hidden: int) -> Tensor:
    """Two stacked LSTM layers along the history axis of ``[B, N, H, F]``, weights shared across nodes."""
    inputs = ad.as_tensor(inputs)
    B, N, H, F = inputs.shape
    steps = [ad.reshape(ad.slice_(inputs, (Ellipsis, slice(t, t + 1), slice(None))), (B * N, F)) for t in range(H)]
    steps = _lstm_layer(steps, params, "lstm0", hidden)
    steps = _lstm_layer(steps, params, "lstm1", hidden)
    seq = ad.concat([ad.reshape(h, (B * N, 1, hidden)) for h in steps], axis=1)
    return ad.reshape(seq, (B, N, H, hidden))


def gat_layer_forward(features, mask: np.ndarray, w, a, heads: int) -> Tensor:
    """Multi-head graph attention over ``[B, S, N, d_in]`` node features.

    ``mask[i, j]`` marks j as attendable from i. Scores are
    ``LeakyReLU(a . [W f_i ; W f_j])``; heads are concatenated.
    """
    features, w, a = ad.as_tensor(features), ad.as_tensor(w), ad.as_tensor(a)
    B, S, N, _ = features.shape
    d = w.shape[1] // heads
    proj = ad.matmul(features, w)                                            # [B,S,N,K*d]
    proj = ad.transpose(ad.reshape(proj, (B, S, N, heads, d)), (0, 1, 3, 2, 4))  # [B,S,K,N,d]
    a_src = ad.reshape(ad.slice_(a, (slice(None), slice(0, d))), (heads, d, 1))
    a_dst = ad.reshape(ad.slice_(a, (slice(None), slice(d, 2 * d))), (heads, d, 1))
    ones = np.ones((1, N))
    s_src = ad.matmul(ad.matmul(proj, a_src), ones)                          # [B,S,K,N,N] row i: src_i
    s_dst = ad.transpose(ad.matmul(ad.matmul(proj, a_dst), ones), (0, 1, 2, 4, 3))  # col j: dst_j
    scores = ad.leaky_relu(ad.add(s_src, s_dst), LEAKY_SLOPE)
    alpha = ad.masked_softmax(scores, mask)
    out = ad.matmul(alpha, proj)                                             # [B,S,K,N,d]
    out = ad.transpose(out, (0, 1, 3, 2, 4))
    return ad.reshape(out, (B, S, N, heads * d))


def gat_attention(features, mask, w, a, heads: int) -> np.ndarray:
    """Attention weights ``[B, S, K, N, N]`` of :func:`gat_layer_forward` (inspection only)."""
    f = np.asarray(ad.as_tensor(features).data)
    w, a = ad.as_tensor(w).data, ad.as_tensor(a).data
    B, S, N, _ = f.shape
    d = w.shape[1] // heads
    proj = np.transpose((f @ w).reshape(B, S, N, heads, d), (0, 1, 3, 2, 4))
    src = np.einsum("bsknd,kd->bskn", proj, a[:, :d])
    dst = np.einsum("bsknd,kd->bskn", proj, a[:, d:])
    e = src[..., :, None] + dst[..., None, :]
    e = np.where(e > 0, e, LEAKY_SLOPE * e)
    return ad.masked_softmax(e, mask).data


def cnn_head(features, kernel, conv_bias, out_w, out_b) -> Tensor:
    """Valid temporal conv per node, ReLU, flatten, linear map to the horizon.

    ``features`` is ``[B, H, N, d]``; the result is ``[B, N, T]``.
    """
    features, kernel = ad.as_tensor(features), ad.as_tensor(kernel)
    B, H, N, _ = features.shape
    if kernel.shape[0] > H:
        raise ValueError(f"kernel width {kernel.shape[0]} exceeds history {H}")
    x = ad.transpose(features, (0, 2, 1, 3))                                 # [B,N,H,d]
    x = ad.relu(ad.add(ad.conv1d(x, kernel), conv_bias))                     # [B,N,L',C]
    L, C = x.shape[2], x.shape[3]
    x = ad.reshape(x, (B, N, L * C))
    return ad.add(ad.matmul(x, out_w), out_b)


# ---------------------------------------------------------------- full models

def model_forward(config: ModelConfig, params, inputs, mask: np.ndarray) -> Tensor:
    """Predictions ``[B, N, T]`` in normalized speed units."""
    inputs = ad.as_tensor(inputs)
    if inputs.data.ndim != 4:
        raise ValueError(f"inputs must be [B, N, H, F], got {inputs.shape}")
    B, N, H, F = inputs.shape
    if F != config.n_features:
        raise ValueError(f"{config.kind} expects {config.n_features} input channels, got {F}")
    if H != config.history:
        raise ValueError(f"{config.kind} configured for history {config.history}, got {H}")
    if np.shape(mask) != (N, N):
        raise ValueError(f"attention mask shape {np.shape(mask)} does not match {N} nodes")
    c = config
    if c.kind in ("m-stgat", "stgat"):
        hseq = ad.relu(temporal_encode(inputs, params, c.hidden))           # [B,N,H,h]
        hseq = ad.transpose(hseq, (0, 2, 1, 3))                              # [B,H,N,h]
        g = ad.relu(gat_layer_forward(hseq, mask, params["gat.w"], params["gat.a"], c.heads))
        return cnn_head(g, params["conv.k"], params["conv.b"], params["out.w"], params["out.b"])
    if c.kind == "gat":
        flat = ad.reshape(inputs, (B, 1, N, H * F))
        g = ad.relu(gat_layer_forward(flat, mask, params["gat.w"], params["gat.a"], c.heads))
        g = ad.reshape(g, (B, N, c.gat_dim))
        return ad.add(ad.matmul(g, params["out.w"]), params["out.b"])
    hseq = temporal_encode(inputs, params, c.hidden)
    last = ad.reshape(ad.slice_(hseq, (slice(None), slice(None), slice(H - 1, H), slice(None))), (B, N, c.hidden))
    return ad.add(ad.matmul(last, params["out.w"]), params["out.b"])


def predict(config: ModelConfig, params: dict[str, np.ndarray], inputs: np.ndarray, mask) -> np.ndarray:
    """Tape-free forward returning a plain array."""
    bound = {k: Tensor(v) for k, v in params.items()}
    return model_forward(config, bound, Tensor(inputs), mask).data


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, config: ModelConfig, params: dict[str, np.ndarray], extra: dict | None = None) -> Path:
    """Little-endian float64 blocks in manifest order plus a JSON manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors, offset = [], 0
    with open(path / "params.bin", "wb") as fh:
        for name in sorted(params):
            buf = np.ascontiguousarray(params[name], dtype="<f8").tobytes()
            fh.write(buf)
            tensors.append({"name": name, "shape": list(params[name].shape), "offset": offset})
            offset += len(buf)
    manifest = {"config": config.to_json(), "seed": config.seed, "dtype": "<f8", "tensors": tensors}
    manifest.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    config = ModelConfig(**manifest["config"])
    raw = (path / "params.bin").read_bytes()
    params = {}
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"]))
        params[t["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=t["offset"]).reshape(t["shape"]).astype(np.float64)
    expected = param_shapes(config)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise ValueError(f"{path}: checkpoint tensors do not match config {config.kind}")
    return config, params, manifest
