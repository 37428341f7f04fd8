"""Minimal numpy neural toolkit with hand-written backward passes.

Covers exactly what the relevance scorer and the reformulation policy
need: an embedding table, a 1-D CNN encoder with average pooling, a
bag-of-words encoder, a two-layer sigmoid head, and SGD/Adam.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/Inf."""

    def __init__(self, name: str):
        super().__init__(f"non-finite value in {name!r}")
        self.name = name


class ModelParams:
    """Named float64 parameters, each paired with a gradient buffer."""

    def __init__(self, values: Optional[Dict[str, np.ndarray]] = None):
        self.values: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        for k, v in (values or {}).items():
            self.add(k, v)

    def add(self, name: str, value: np.ndarray) -> None:
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> List[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for k, v in self.values.items():
            out.values[k] = v.copy()
            out.grads[k] = self.grads[k].copy()
        return out

    def check_finite(self, grads: bool = True) -> None:
        for k, v in self.values.items():
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(k)
            if grads and not np.all(np.isfinite(self.grads[k])):
                raise NonFiniteError(k)

    def n_params(self) -> int:
        return sum(v.size for v in self.values.values())


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x):
    return np.maximum(x, 0.0)


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def log_softmax(x):
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x)
    if not np.isfinite(m):
        raise NonFiniteError("logits")
    return x - m - np.log(np.sum(np.exp(x - m)))


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


# --- encoders -----------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    embed_dim: int = 32
    cnn_layers: Tuple[Tuple[int, int], ...] = ((9, 32), (3, 64))
    output_dim: int = 64
    shared_embeddings: bool = True

    def __post_init__(self):
        if min(self.vocab_size, self.embed_dim, self.output_dim) < 1:
            raise ValueError("encoder sizes must be >= 1")
        if not self.cnn_layers or any(w < 1 or k < 1 for w, k in self.cnn_layers):
            raise ValueError("each CNN layer needs width >= 1 and kernels >= 1")

    @classmethod
    def full_scale(cls, vocab_size: int, embed_dim: int = 300) -> "EncoderConfig":
        """Two conv layers of widths 9 and 3 with 128 and 256 kernels, D = 512."""
        return cls(vocab_size, embed_dim, ((9, 128), (3, 256)), 512)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator,
                        params: Optional[ModelParams] = None) -> ModelParams:
    p = params if params is not None else ModelParams()
    p.add("emb", rng.normal(0.0, 0.1, size=(cfg.vocab_size, cfg.embed_dim)))
    if not cfg.shared_embeddings:
        p.add("bow_emb", rng.normal(0.0, 0.1, size=(cfg.vocab_size, cfg.embed_dim)))
    c_in = cfg.embed_dim
    for i, (w, k) in enumerate(cfg.cnn_layers):
        p.add(f"conv{i}_w", xavier(rng, w * c_in, k, (w, c_in, k)))
        p.add(f"conv{i}_b", np.zeros(k))
        c_in = k
    p.add("cnn_proj_w", xavier(rng, c_in, cfg.output_dim, (c_in, cfg.output_dim)))
    p.add("cnn_proj_b", np.zeros(cfg.output_dim))
    p.add("bow_proj_w", xavier(rng, cfg.embed_dim, cfg.output_dim, (cfg.embed_dim, cfg.output_dim)))
    p.add("bow_proj_b", np.zeros(cfg.output_dim))
    return p


def _check_tokens(tokens, vocab_size: int) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty input")
    if ids.min() < 0 or ids.max() >= vocab_size:
        raise ValueError("token id out of vocabulary")
    return ids


def cnn_forward(tokens, params: ModelParams, cfg: EncoderConfig):
    """Return the D-dim encoding and a cache for :func:`cnn_backward`."""
    ids = _check_tokens(tokens, cfg.vocab_size)
    out, cache = cnn_forward_batch(ids[None, :], params, cfg)
    return out[0], cache


def cnn_backward(dout: np.ndarray, cache, params: ModelParams, cfg: EncoderConfig) -> None:
    """Accumulate gradients of the CNN encoder into ``params.grads``."""
    cnn_backward_batch(np.asarray(dout)[None, :], cache, params, cfg)


def cnn_forward_batch(ids: np.ndarray, params: ModelParams, cfg: EncoderConfig):
    """Encode B equal-length token sequences ``ids`` (B, n) at once; returns (B, D)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ValueError("expected a (B, n) id matrix with n >= 1")
    _check_tokens(ids, cfg.vocab_size)
    b, n = ids.shape
    x = params["emb"][ids]                                   # (B, n, C)
    layers = []
    for i, (w, _) in enumerate(cfg.cnn_layers):
        left = (w - 1) // 2
        xp = np.pad(x, ((0, 0), (left, w - 1 - left), (0, 0)))
        cols = sliding_window_view(xp, w, axis=1)             # (B, n, C, w)
        cols = cols.transpose(0, 1, 3, 2).reshape(b * n, -1)  # window-major rows
        wmat = params[f"conv{i}_w"].reshape(-1, params[f"conv{i}_w"].shape[2])
        pre = cols @ wmat + params[f"conv{i}_b"]
        x = relu(pre).reshape(b, n, -1)
        layers.append((cols, pre, w, left))
    pooled = x.mean(axis=1)
    out = pooled @ params["cnn_proj_w"] + params["cnn_proj_b"]
    return out, {"ids": ids, "layers": layers, "pooled": pooled}


def cnn_backward_batch(dout: np.ndarray, cache, params: ModelParams, cfg: EncoderConfig) -> None:
    g = params.grads
    ids = cache["ids"]
    b, n = ids.shape
    g["cnn_proj_w"] += cache["pooled"].T @ dout
    g["cnn_proj_b"] += dout.sum(axis=0)
    dpool = dout @ params["cnn_proj_w"].T / n                 # (B, k)
    dx = np.repeat(dpool, n, axis=0)                          # rows in (b, position) order
    for i in reversed(range(len(cfg.cnn_layers))):
        cols, pre, w, left = cache["layers"][i]
        wt = params[f"conv{i}_w"]
        c_in, k = wt.shape[1], wt.shape[2]
        dpre = dx * (pre > 0)
        g[f"conv{i}_w"] += (cols.T @ dpre).reshape(w, c_in, k)
        g[f"conv{i}_b"] += dpre.sum(axis=0)
        dcols = (dpre @ wt.reshape(-1, k).T).reshape(b, n, w * c_in)
        dxp = np.zeros((b, n + w - 1, c_in))
        for j in range(w):
            dxp[:, j:j + n] += dcols[:, :, j * c_in:(j + 1) * c_in]
        dx = dxp[:, left:left + n].reshape(b * n, c_in)
    np.add.at(g["emb"], ids.reshape(-1), dx)


def cnn_encode(tokens, params: ModelParams, cfg: EncoderConfig) -> np.ndarray:
    return cnn_forward(tokens, params, cfg)[0]


def bow_matrix(token_lists: Sequence[Sequence[int]], vocab_size: int):
    """Row-normalised sparse count matrix: row i averages the embeddings of list i."""
    from scipy import sparse

    rows, cols = [], []
    for i, toks in enumerate(token_lists):
        if len(toks) == 0:
            raise ValueError("empty input")
        rows.extend([i] * len(toks))
        cols.extend(toks)
    cols_a = np.asarray(cols, dtype=np.int64)
    if cols_a.size and (cols_a.min() < 0 or cols_a.max() >= vocab_size):
        raise ValueError("token id out of vocabulary")
    lens = np.array([len(t) for t in token_lists], dtype=np.float64)
    data = 1.0 / lens[np.asarray(rows, dtype=np.int64)]
    m = sparse.csr_matrix((data, (rows, cols_a)), shape=(len(token_lists), vocab_size))
    m.sum_duplicates()
    return m


def _bow_table(params: ModelParams) -> str:
    return "bow_emb" if "bow_emb" in params else "emb"


def bow_forward(mat, params: ModelParams):
    """Encode the rows of a :func:`bow_matrix`; returns (n, D) and the mean embeddings."""
    mean = np.asarray(mat @ params[_bow_table(params)])
    return mean @ params["bow_proj_w"] + params["bow_proj_b"], mean


def bow_backward(dout: np.ndarray, mat, mean: np.ndarray, params: ModelParams) -> None:
    g = params.grads
    g["bow_proj_w"] += mean.T @ dout
    g["bow_proj_b"] += dout.sum(axis=0)
    dmean = dout @ params["bow_proj_w"].T
    g[_bow_table(params)] += mat.T @ dmean


def bow_encode(tokens, params: ModelParams) -> np.ndarray:
    ids = _check_tokens(tokens, params[_bow_table(params)].shape[0])
    mean = params[_bow_table(params)][ids].mean(axis=0)
    return mean @ params["bow_proj_w"] + params["bow_proj_b"]


# --- scoring head -------------------------------------------------------------

def init_head_params(in_dim: int, hidden: int, rng: np.random.Generator,
                     params: Optional[ModelParams] = None) -> ModelParams:
    p = params if params is not None else ModelParams()
    p.add("W1", xavier(rng, in_dim, hidden, (in_dim, hidden)))
    p.add("b1", np.zeros(hidden))
    p.add("W2", xavier(rng, hidden, 1, (hidden, 1)))
    p.add("b2", np.zeros(1))
    return p


def head_forward(z: np.ndarray, params: ModelParams):
    """Logits of sigma(W2 . ReLU(W1 z + b1) + b2) for the rows of ``z``."""
    z = np.atleast_2d(z)
    if z.shape[1] != params["W1"].shape[0]:
        raise ValueError(f"head expects input dim {params['W1'].shape[0]}, got {z.shape[1]}")
    pre = z @ params["W1"] + params["b1"]
    h = relu(pre)
    logit = (h @ params["W2"])[:, 0] + params["b2"][0]
    return logit, (z, pre, h)


def head_backward(dlogit: np.ndarray, cache, params: ModelParams) -> np.ndarray:
    z, pre, h = cache
    g = params.grads
    g["W2"] += h.T @ dlogit[:, None]
    g["b2"] += dlogit.sum(keepdims=True)
    dpre = (dlogit[:, None] * params["W2"][:, 0]) * (pre > 0)
    g["W1"] += z.T @ dpre
    g["b1"] += dpre.sum(axis=0)
    return dpre @ params["W1"].T


def mlp_sigmoid_head(z, params: ModelParams) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("expected a single vector")
    return float(sigmoid(head_forward(z, params)[0])[0])


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Summed binary cross-entropy on logits and its gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    loss = float(np.sum(labels * softplus(-logits) + (1.0 - labels) * softplus(logits)))
    return loss, sigmoid(logits) - labels


# --- optimisers -----------------------------------------------------------------

class SGD:
    def __init__(self, lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be > 0")
        self.lr = lr

    def step(self, params: ModelParams) -> None:
        for k, v in params.values.items():
            v -= self.lr * params.grads[k]
        params.zero_grad()


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be > 0")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: ModelParams) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.values.items():
            g = params.grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        params.zero_grad()


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")


def optimizer_step(params: ModelParams, opt, lr: Optional[float] = None) -> ModelParams:
    """Apply one update with ``opt`` (an :class:`SGD`/:class:`Adam` or their name)."""
    if isinstance(opt, str):
        if lr is None:
            raise ValueError("lr required when naming the optimizer")
        opt = make_optimizer(opt, lr)
    elif lr is not None:
        if lr <= 0:
            raise ValueError("learning rate must be > 0")
        opt.lr = lr
    opt.step(params)
    return params


# --- checkpoints ------------------------------------------------------------------
#
# layout (all little-endian):
#   b"QRFP"  u32 version  u32 n_params
#   per param: u16 name_len, name bytes (utf-8), u8 ndim, ndim x u32 dims
#   then every parameter's values as float64, in header order, row-major

MAGIC = b"QRFP"
VERSION = 1


def save_params(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params.values)))
        for name, v in params.values.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", v.ndim))
            fh.write(struct.pack(f"<{v.ndim}I", *v.shape))
        for v in params.values.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError("not a parameter checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    header = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        header.append((name, shape))
    out = ModelParams()
    for name, shape in header:
        n = int(np.prod(shape)) if shape else 1
        v = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        out.add(name, v.astype(np.float64))
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return out
