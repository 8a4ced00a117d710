"""Transformer-encoder classifier over behavior sequences, with exact gradients.

Architecture::

    tokens ─ E[tok] + P[pos] ─ encoder block × b ─ masked mean-pool ─┐
                                                                      ├ concat ─ affine ─ softmax
    nonseq ─ affine ─ SELU ─ affine ─ SELU ──────────────────────────┘

Each encoder block is

    S = LayerNorm(X + Dropout(MultiHead(X)))
    Y = LayerNorm(S + Dropout(FFN(S)))          FFN(S) = SELU(S W1 + b1) W2 + b2

Attention scores are scaled by ``sqrt(d / h)``.  Everything is batched
over a leading sample axis and computed in float64; parameters live in a
plain ``dict`` of arrays keyed by name (see :func:`param_shapes`).
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .numerics import (
    NumericError,
    ShapeError,
    layer_norm_backward,
    layer_norm_forward,
    selu,
    selu_grad,
    softmax_rows,
    xavier_init,
)

CHECKPOINT_VERSION = 1

Params = dict[str, np.ndarray]

POSITION_INITS = ("sinusoid", "xavier", "zero")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_features: int
    d: int = 128
    heads: int = 8
    blocks: int = 1
    d_ff: int = 512
    l_max: int = 20
    n_classes: int = 24
    dropout_rate: float = 0.1
    tower_dims: tuple[int, int] = (64, 32)
    use_sequence: bool = True
    position_init: str = "sinusoid"

    def __post_init__(self):
        object.__setattr__(self, "tower_dims", tuple(self.tower_dims))
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.blocks < 1:
            raise ValueError("need at least one encoder block")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.vocab_size < 2 or self.l_max < 1 or self.n_features < 0:
            raise ValueError("vocab_size >= 2, l_max >= 1 and n_features >= 0 required")
        if len(self.tower_dims) != 2:
            raise ValueError("tower_dims must hold two hidden sizes")
        if self.position_init not in POSITION_INITS:
            raise ValueError(f"position_init must be one of {POSITION_INITS}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def nonseq_dims(self) -> tuple[int, int, int]:
        return (self.n_features, *self.tower_dims)

    @property
    def concat_dim(self) -> int:
        return (self.d if self.use_sequence else 0) + self.tower_dims[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tower_dims"] = list(self.tower_dims)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config
    shapes: dict[str, tuple[int, ...]] = {}
    if c.use_sequence:
        shapes["E"] = (c.vocab_size, c.d)
        shapes["P"] = (c.l_max, c.d)
        for b in range(c.blocks):
            p = f"block{b}."
            shapes.update({
                p + "Wq": (c.d, c.d), p + "Wk": (c.d, c.d), p + "Wv": (c.d, c.d),
                p + "Wo": (c.d, c.d),
                p + "ln1_g": (c.d,), p + "ln1_b": (c.d,),
                p + "W1": (c.d, c.d_ff), p + "b1": (c.d_ff,),
                p + "W2": (c.d_ff, c.d), p + "b2": (c.d,),
                p + "ln2_g": (c.d,), p + "ln2_b": (c.d,),
            })
    n0, n1, n2 = c.nonseq_dims
    shapes.update({
        "tower.W1": (n0, n1), "tower.b1": (n1,),
        "tower.W2": (n1, n2), "tower.b2": (n2,),
        "out.W": (c.concat_dim, c.n_classes), "out.b": (c.n_classes,),
    })
    return shapes


def sinusoid_table(rows: int, d: int, base: float = 10000.0) -> np.ndarray:
    """Interleaved sine/cosine rows; row ``p`` holds ``sin(p/base^(2i/d)), cos(...)``."""
    pos = np.arange(rows, dtype=np.float64)[:, None]
    freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = pos * freq[None, :]
    table = np.empty((rows, d))
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang[:, : d // 2])
    return table


def init_params(config: ModelConfig, rng: np.random.Generator, *, zero_output: bool = False) -> Params:
    """Xavier-uniform weights, zero biases, unit layer-norm gains.

    Query/key/value projections are drawn per head (``d × d/h`` each) and
    stored side by side as one ``d × d`` matrix.  The position table is
    still a free parameter; ``config.position_init`` only picks its
    starting point (a sinusoid table by default, which gives the
    attention a usable sense of order from the first step).
    """
    params: Params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.split(".")[-1]
        if leaf in ("Wq", "Wk", "Wv"):
            dh = config.head_dim
            params[name] = np.concatenate(
                [xavier_init(config.d, dh, rng) for _ in range(config.heads)], axis=1
            )
        elif leaf.endswith("_g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        elif name == "P" and config.position_init != "xavier":
            params[name] = (sinusoid_table(*shape) if config.position_init == "sinusoid"
                            else np.zeros(shape))
        elif name == "out.W" and zero_output:
            params[name] = np.zeros(shape)
        elif 0 in shape:
            params[name] = np.zeros(shape)
        else:
            params[name] = xavier_init(*shape, rng)
    return params


def check_params(params: Mapping[str, np.ndarray], config: ModelConfig):
    expected = param_shapes(config)
    if set(params) != set(expected):
        raise ShapeError(f"parameter names differ from config: {sorted(set(params) ^ set(expected))}")
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise ShapeError(f"{k}: expected shape {shape}, got {params[k].shape}")


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, l) int
    position_ids: np.ndarray  # (B, l) int
    mask: np.ndarray  # (B, l) bool
    nonseq: np.ndarray  # (B, n_features)
    labels: np.ndarray | None = None  # (B,) int

    def __len__(self):
        return self.token_ids.shape[0]


def make_batch(samples) -> Batch:
    """Stack a list of :class:`~etusb.journey.Sample` objects."""
    labels = [s.label for s in samples]
    return Batch(
        np.stack([s.token_ids for s in samples]),
        np.stack([s.position_ids for s in samples]),
        np.stack([s.mask for s in samples]).astype(bool),
        np.stack([np.asarray(s.nonseq, dtype=np.float64) for s in samples]),
        None if any(y is None for y in labels) else np.asarray(labels, dtype=np.int64),
    )


def batch_of(data, idx=None) -> Batch:
    """Slice a dataset-like object (anything with the Batch array attributes)."""
    if idx is None:
        idx = slice(None)
    labels = getattr(data, "labels", None)
    return Batch(
        data.token_ids[idx],
        data.position_ids[idx],
        data.mask[idx].astype(bool),
        data.nonseq[idx],
        None if labels is None else labels[idx],
    )


def _validate_batch(batch: Batch, config: ModelConfig):
    if batch.nonseq.shape[1] != config.n_features:
        raise ShapeError(f"nonseq width {batch.nonseq.shape[1]} != n_features {config.n_features}")
    if not config.use_sequence:
        return
    if batch.token_ids.shape[1] > config.l_max:
        raise ShapeError(f"sequence length {batch.token_ids.shape[1]} exceeds l_max {config.l_max}")
    tok = batch.token_ids[batch.mask]
    pos = batch.position_ids[batch.mask]
    if tok.size and (tok.min() < 0 or tok.max() >= config.vocab_size):
        raise IndexError("token id out of vocabulary range")
    if pos.size and (pos.min() < 0 or pos.max() >= config.l_max):
        raise IndexError("position id out of range")


# ---------------------------------------------------------------------------
# primitive layers


def _dropout(x, rate, train, rng):
    if not train or rate == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def _attention(q, k, v, mask, scale):
    """Batched masked attention; q, k, v are (..., l, dh), mask is (..., l)."""
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    key_ok = mask[..., None, :]
    query_ok = mask[..., :, None]
    if (mask & ~mask.any(axis=-1, keepdims=True)).any():
        raise NumericError("a real query position has no unmasked key")
    # all-padding rows get finite scores so softmax stays defined; they are zeroed below
    scores = np.where(key_ok, scores, np.where(query_ok, -np.inf, 0.0))
    a = softmax_rows(scores) * query_ok
    return a @ v, a


def scaled_dot_attention(Q, K, V, mask=None):
    """Single-head attention on ``l × d_h`` matrices.

    Returns ``(output, A)``.  Masked (padding) keys get zero weight and
    masked query rows produce zero output and a zero row in ``A``.
    """
    Q, K, V = (np.asarray(m, dtype=np.float64) for m in (Q, K, V))
    if Q.shape != K.shape or K.shape[0] != V.shape[0]:
        raise ShapeError(f"attention shapes disagree: Q{Q.shape} K{K.shape} V{V.shape}")
    mask = np.ones(Q.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return _attention(Q, K, V, mask, 1.0 / np.sqrt(Q.shape[1]))


def _split_heads(x, heads):
    B, l, d = x.shape
    return x.reshape(B, l, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, h, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, l, h * dh)


def _linear(x, W, b=None):
    y = (x.reshape(-1, x.shape[-1]) @ W).reshape(x.shape[:-1] + (W.shape[1],))
    return y if b is None else y + b


def _wgrad(x, dy):
    return x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


def _multi_head_forward(x, params, prefix, mask, heads):
    dh = x.shape[-1] // heads
    q = _split_heads(_linear(x, params[prefix + "Wq"]), heads)
    k = _split_heads(_linear(x, params[prefix + "Wk"]), heads)
    v = _split_heads(_linear(x, params[prefix + "Wv"]), heads)
    o, a = _attention(q, k, v, mask[:, None, :], 1.0 / np.sqrt(dh))
    oc = _merge_heads(o)
    return _linear(oc, params[prefix + "Wo"]), dict(x=x, q=q, k=k, v=v, a=a, oc=oc)


def multi_head(I, params: Mapping[str, np.ndarray], mask=None, *, heads: int, block: int = 0):
    """``Concat(head_1..head_h) · W^O`` for one ``l × d`` input."""
    I = np.asarray(I, dtype=np.float64)
    mask = np.ones(I.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    out, _ = _multi_head_forward(I[None], params, f"block{block}.", mask[None], heads)
    return out[0]


def ffn(X, W1, b1, W2, b2):
    """Position-wise ``SELU(X W1 + b1) W2 + b2``."""
    return selu(np.asarray(X, dtype=np.float64) @ W1 + b1) @ W2 + b2


def nonseq_tower(x, params: Mapping[str, np.ndarray]):
    """Two affine+SELU layers over the nonsequential feature vector(s)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params["tower.W1"].shape[0]:
        raise ShapeError(f"nonseq input has {x.shape[-1]} features, tower expects {params['tower.W1'].shape[0]}")
    h1 = selu(x @ params["tower.W1"] + params["tower.b1"])
    return selu(h1 @ params["tower.W2"] + params["tower.b2"])


def _embed(params, token_ids, position_ids, mask):
    x = params["E"][token_ids] + params["P"][position_ids]
    return np.where(mask[..., None], x, 0.0)


def embed(sample, params: Mapping[str, np.ndarray]) -> np.ndarray:
    """``E[token] + P[position]`` per real position, zero rows for padding."""
    mask = np.asarray(sample.mask, dtype=bool)
    tok = np.asarray(sample.token_ids)
    pos = np.asarray(sample.position_ids)
    V, L = params["E"].shape[0], params["P"].shape[0]
    if tok[mask].size and (tok[mask].max() >= V or tok[mask].min() < 0):
        raise IndexError("token id out of vocabulary range")
    if pos[mask].size and (pos[mask].max() >= L or pos[mask].min() < 0):
        raise IndexError("position id out of range")
    return _embed(params, tok, pos, mask)


def _block_forward(x, params, b, mask, config, train, rng):
    p = f"block{b}."
    mh, mc = _multi_head_forward(x, params, p, mask, config.heads)
    mh_d, keep1 = _dropout(mh, config.dropout_rate, train, rng)
    s1, ln1 = layer_norm_forward(x + mh_d, params[p + "ln1_g"], params[p + "ln1_b"])
    hpre = _linear(s1, params[p + "W1"], params[p + "b1"])
    g = selu(hpre)
    f = _linear(g, params[p + "W2"], params[p + "b2"])
    f_d, keep2 = _dropout(f, config.dropout_rate, train, rng)
    out, ln2 = layer_norm_forward(s1 + f_d, params[p + "ln2_g"], params[p + "ln2_b"])
    cache = dict(mc, keep1=keep1, ln1=ln1, s1=s1, hpre=hpre, g=g, keep2=keep2, ln2=ln2)
    return out, cache


def encoder_block(L_prev, params, mask=None, *, config: ModelConfig, block: int = 0,
                  train: bool = False, rng=None):
    """One encoder block on a single ``l × d`` input; returns ``(output, A)``.

    ``A`` has shape ``(heads, l, l)``.
    """
    L_prev = np.asarray(L_prev, dtype=np.float64)
    mask = np.ones(L_prev.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    out, cache = _block_forward(L_prev[None], params, block, mask[None], config, train, rng)
    return out[0], cache["a"][0]


# ---------------------------------------------------------------------------
# full model


@dataclass
class ForwardTrace:
    logits: np.ndarray
    probs: np.ndarray
    attention: list[np.ndarray] = field(default_factory=list)  # per block, (B, h, l, l)
    cache: dict = field(default_factory=dict)


def forward_batch(batch: Batch, params: Mapping[str, np.ndarray], config: ModelConfig,
                  *, train: bool = False, rng: np.random.Generator | None = None) -> ForwardTrace:
    """Logits and class probabilities for a batch.

    ``train=True`` applies inverted dropout with masks drawn from ``rng``;
    with ``dropout_rate == 0`` both modes are bitwise identical.
    """
    _validate_batch(batch, config)
    if train and config.dropout_rate > 0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")
    mask = batch.mask
    cache: dict = {}
    attention = []
    parts = []
    if config.use_sequence:
        x = _embed(params, batch.token_ids, batch.position_ids, mask)
        blocks = []
        for b in range(config.blocks):
            x, bc = _block_forward(x, params, b, mask, config, train, rng)
            blocks.append(bc)
            attention.append(bc["a"])
        counts = mask.sum(axis=1, keepdims=True).astype(np.float64)
        if (counts == 0).any():
            raise NumericError("sample without any real token")
        pooled = (x * mask[..., None]).sum(axis=1) / counts
        cache.update(blocks=blocks, counts=counts)
        parts.append(pooled)
    t1pre = batch.nonseq @ params["tower.W1"] + params["tower.b1"]
    t1 = selu(t1pre)
    t2pre = t1 @ params["tower.W2"] + params["tower.b2"]
    t2 = selu(t2pre)
    parts.append(t2)
    z = np.concatenate(parts, axis=1)
    logits = z @ params["out.W"] + params["out.b"]
    probs = softmax_rows(logits)
    cache.update(t1pre=t1pre, t1=t1, t2pre=t2pre, z=z)
    return ForwardTrace(logits, probs, attention, cache)


@dataclass
class ForwardResult:
    logits: np.ndarray
    probs: np.ndarray
    trace: ForwardTrace
    attention: list[np.ndarray]  # per block, (h, l, l)


def forward(sample, params, config: ModelConfig, *, train: bool = False, rng=None) -> ForwardResult:
    tr = forward_batch(make_batch([sample]), params, config, train=train, rng=rng)
    return ForwardResult(tr.logits[0], tr.probs[0], tr, [a[0] for a in tr.attention])


def predict_proba(data, params, config: ModelConfig, batch_size: int = 512) -> np.ndarray:
    """Eval-mode class probabilities for every row of a dataset-like object."""
    n = data.token_ids.shape[0]
    out = np.empty((n, config.n_classes))
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = forward_batch(batch_of(data, sl), params, config).probs
    return out


def _block_backward(dout, params, b, mask, config, c):
    p = f"block{b}."
    g: dict[str, np.ndarray] = {}
    dsum2, g[p + "ln2_g"], g[p + "ln2_b"] = layer_norm_backward(dout, params[p + "ln2_g"], c["ln2"])
    ds1 = dsum2.copy()
    df = dsum2 if c["keep2"] is None else dsum2 * c["keep2"]
    g[p + "W2"] = _wgrad(c["g"], df)
    g[p + "b2"] = df.sum(axis=(0, 1))
    dhpre = _linear(df, params[p + "W2"].T) * selu_grad(c["hpre"])
    g[p + "W1"] = _wgrad(c["s1"], dhpre)
    g[p + "b1"] = dhpre.sum(axis=(0, 1))
    ds1 += _linear(dhpre, params[p + "W1"].T)
    dsum1, g[p + "ln1_g"], g[p + "ln1_b"] = layer_norm_backward(ds1, params[p + "ln1_g"], c["ln1"])
    dx = dsum1.copy()
    dmh = dsum1 if c["keep1"] is None else dsum1 * c["keep1"]
    g[p + "Wo"] = _wgrad(c["oc"], dmh)
    do = _split_heads(_linear(dmh, params[p + "Wo"].T), config.heads)
    a, q, k, v = c["a"], c["q"], c["k"], c["v"]
    da = (do @ np.swapaxes(v, -1, -2)) * mask[:, None, :, None]
    dv = np.swapaxes(a, -1, -2) @ do
    dscores = a * (da - (da * a).sum(axis=-1, keepdims=True)) / np.sqrt(config.head_dim)
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    x = c["x"]
    for name, dproj in (("Wq", dq), ("Wk", dk), ("Wv", dv)):
        dm = _merge_heads(dproj)
        g[p + name] = _wgrad(x, dm)
        dx += _linear(dm, params[p + name].T)
    return dx, g


def backward_from_trace(trace: ForwardTrace, batch: Batch, params, config: ModelConfig,
                        dlogits: np.ndarray) -> Params:
    """Parameter gradients given the gradient of the objective w.r.t. the logits."""
    c = trace.cache
    grads: Params = {}
    grads["out.W"] = c["z"].T @ dlogits
    grads["out.b"] = dlogits.sum(axis=0)
    dz = dlogits @ params["out.W"].T
    dt2 = dz[:, -config.tower_dims[1]:]
    dt2pre = dt2 * selu_grad(c["t2pre"])
    grads["tower.W2"] = c["t1"].T @ dt2pre
    grads["tower.b2"] = dt2pre.sum(axis=0)
    dt1pre = (dt2pre @ params["tower.W2"].T) * selu_grad(c["t1pre"])
    grads["tower.W1"] = batch.nonseq.T @ dt1pre
    grads["tower.b1"] = dt1pre.sum(axis=0)
    if config.use_sequence:
        mask = batch.mask
        dpooled = dz[:, : config.d]
        dx = (dpooled / c["counts"])[:, None, :] * mask[..., None]
        for b in reversed(range(config.blocks)):
            dx, gb = _block_backward(dx, params, b, mask, config, c["blocks"][b])
            grads.update(gb)
        dx = dx * mask[..., None]
        dE = np.zeros_like(params["E"])
        dP = np.zeros_like(params["P"])
        np.add.at(dE, batch.token_ids[mask], dx[mask])
        np.add.at(dP, batch.position_ids[mask], dx[mask])
        grads["E"] = dE
        grads["P"] = dP
    return grads


def mean_cross_entropy(probs: np.ndarray, labels: np.ndarray, floor: float = 1e-12) -> float:
    p = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(p, floor)).mean())


def loss_and_grads(batch: Batch, params, config: ModelConfig, *, train: bool = True,
                   rng: np.random.Generator | None = None) -> tuple[float, Params]:
    """Mean categorical cross-entropy over the batch and its exact gradient."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.labels is None:
        raise ValueError("batch has no labels")
    trace = forward_batch(batch, params, config, train=train, rng=rng)
    labels = batch.labels
    p = trace.probs[np.arange(len(labels)), labels]
    per_sample = -np.log(np.maximum(p, 1e-12))
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise NumericError(f"non-finite loss for sample {bad[0]}")
    dlogits = trace.probs.copy()
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dlogits /= len(labels)
    return float(per_sample.mean()), backward_from_trace(trace, batch, params, config, dlogits)


# ---------------------------------------------------------------------------
# attention export


@dataclass
class AttentionMap:
    """Row-stochastic ``(heads, n, n)`` scores over the real positions of one sample."""

    scores: np.ndarray
    labels: tuple[str, ...]
    block: int = 0

    @property
    def heads(self) -> int:
        return self.scores.shape[0]


def export_attention(sample, params, config: ModelConfig, labels=None) -> list[AttentionMap]:
    """Eval-mode attention maps of every block, cropped to the real positions.

    Axis labels default to the sample's behavior tokens (chronological).
    """
    if not config.use_sequence:
        raise ValueError("model has no sequence branch")
    n = int(np.asarray(sample.mask).sum())
    if n == 0:
        raise ValueError("cannot export attention for an empty sample")
    res = forward(sample, params, config)
    if labels is None:
        labels = tuple(getattr(sample, "tokens", ()) or (str(t) for t in sample.token_ids[:n]))
    real = np.flatnonzero(sample.mask)
    return [
        AttentionMap(a[:, real][:, :, real].copy(), tuple(labels), b)
        for b, a in enumerate(res.attention)
    ]


# ---------------------------------------------------------------------------
# checkpoints

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, params: Mapping[str, np.ndarray], config: ModelConfig, extra: Mapping | None = None):
    """Write a zip of ``config.json`` plus one little-endian float64 ``.npy`` per tensor.

    Entries carry a fixed timestamp so identical inputs give identical bytes.
    The file can be read with ``numpy.load`` as well.
    """
    meta = {"format_version": CHECKPOINT_VERSION, "config": config.to_dict(), "extra": dict(extra or {})}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("config.json", date_time=_ZIP_DATE)
        zf.writestr(info, json.dumps(meta, indent=2, sort_keys=True))
        for name in sorted(params):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(params[name], dtype="<f8"), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_DATE), buf.getvalue())


def load_checkpoint(path) -> tuple[Params, ModelConfig, dict]:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("config.json"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')!r}")
        config = ModelConfig.from_dict(meta["config"])
        params = {}
        for name in zf.namelist():
            if name.endswith(".npy"):
                arr = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
                params[name[:-4]] = arr.astype(np.float64, copy=False)
    check_params(params, config)
    return params, config, meta.get("extra", {})
