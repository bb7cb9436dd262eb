"""Transformer encoder used for both the auxiliary and the main model.

Architecture knobs: Post-/Pre-LayerNorm, a T5-style relative position bias
(one table shared by all layers), a learned per-head reset of the [CLS]
row/column of that bias, absolute position embeddings added at the input,
depth-scaled initialization of residual output projections, and tied LM
heads with optional per-model bias.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

PAD_ID, CLS_ID, SEP_ID, MASK_ID = 0, 1, 2, 3
SPECIAL_IDS = (PAD_ID, CLS_ID, SEP_ID, MASK_ID)

# finite stand-in for -inf on padded keys
PAD_BIAS = -1e9


@dataclass
class ModelConfig:
    hidden_size: int
    ffn_width: int
    depth_main: int
    depth_aux: int
    attention_heads: int
    vocab_size: int = 260
    max_seq_len: int = 512
    relpos_bins: int = 64
    relpos_max_distance: int = 128
    layernorm_placement: str = "post"
    tupe_reset_cls: bool = True
    share_word_embeddings: bool = True
    share_position_embeddings: bool = False
    share_lm_bias: bool = False
    dropout_main: float = 0.1
    dropout_aux: float = 0.0
    init_std: float = 0.02
    scaled_init: bool = True
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.hidden_size <= 0 or self.attention_heads <= 0:
            raise ConfigError("hidden_size and attention_heads must be positive", "model.hidden_size")
        if self.hidden_size % self.attention_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by attention_heads {self.attention_heads}",
                "model.attention_heads",
            )
        if not 1 <= self.depth_aux <= self.depth_main:
            raise ConfigError(
                f"need 1 <= depth_aux ({self.depth_aux}) <= depth_main ({self.depth_main})", "model.depth_aux"
            )
        for name in ("dropout_main", "dropout_aux"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {p}", f"model.{name}")
        if self.layernorm_placement not in ("post", "pre"):
            raise ConfigError("layernorm_placement must be 'post' or 'pre'", "model.layernorm_placement")
        if self.relpos_bins <= 0 or self.relpos_bins % 2:
            raise ConfigError("relpos_bins must be a positive even number", "model.relpos_bins")
        if self.relpos_max_distance <= 0:
            raise ConfigError("relpos_max_distance must be positive", "model.relpos_max_distance")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be > 0", "model.layer_norm_eps")
        if self.vocab_size <= len(SPECIAL_IDS):
            raise ConfigError("vocab_size must exceed the reserved ids", "model.vocab_size")

    def depth(self, role):
        return self.depth_main if role == "main" else self.depth_aux

    def dropout(self, role):
        return self.dropout_main if role == "main" else self.dropout_aux

    @property
    def head_dim(self):
        return self.hidden_size // self.attention_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# relative position buckets ---------------------------------------------------------


def relpos_bucket(query_pos: int, key_pos: int, bins: int, max_distance: int) -> int:
    """Bidirectional T5 bucket of ``key_pos - query_pos``.

    Half the bins per direction (keys to the right take the upper half);
    distances below a quarter of ``bins`` get their own bucket, larger ones
    are spaced logarithmically up to ``max_distance`` and clamped beyond.
    """
    half = bins // 2
    delta = key_pos - query_pos
    bucket = half if delta > 0 else 0
    n = abs(delta)
    exact = half // 2
    if n < exact:
        return bucket + n
    large = exact + int(math.log(n / exact) / math.log(max_distance / exact) * (half - exact))
    return bucket + min(large, half - 1)


def bucket_table(seq_len: int, bins: int, max_distance: int) -> np.ndarray:
    """[seq_len x seq_len] bucket ids; entry (i, j) is ``relpos_bucket(i, j)``."""
    by_delta = {d: relpos_bucket(0, d, bins, max_distance) for d in range(-seq_len + 1, seq_len)}
    pos = np.arange(seq_len)
    delta = pos[None, :] - pos[:, None]
    lut = np.array([by_delta[d] for d in range(-seq_len + 1, seq_len)], dtype=np.int64)
    return lut[delta + seq_len - 1]


# weights ----------------------------------------------------------------------------


class EncoderWeights:
    """Named parameters of one encoder. Shared tensors are the same object in both models."""

    def __init__(self, role: str, depth: int, params: dict[str, Tensor]):
        self.role = role
        self.depth = depth
        self.params = params

    def __getitem__(self, name):
        return self.params[name]

    def __setitem__(self, name, value):
        self.params[name] = value

    def __contains__(self, name):
        return name in self.params

    def items(self):
        return self.params.items()


_SHARED_WORD = "embed.word"
_SHARED_POS = "embed.position"
_SHARED_LM_BIAS = "lm_head.bias"


def _normal(seed, role, name, shape, std, dtype):
    g = rngmod.generator(seed, "init", rngmod.stream_id(f"{role}/{name}"))
    return (g.standard_normal(shape) * std).astype(dtype)


def residual_init_std(config: ModelConfig, layer: int) -> float:
    """Target std of Wo / W2 in ``layer`` (0-based)."""
    if config.scaled_init:
        return config.init_std / math.sqrt(2.0 * (layer + 1))
    return config.init_std


def init_weights(config: ModelConfig, seed: int, role: str = "main", dtype=np.float32) -> EncoderWeights:
    """Fresh weights for one encoder.

    Everything is N(0, init_std^2) except LayerNorm (gamma=1, beta=0), biases
    (0), and the attention / FFN output projections of layer ``l``, whose std
    is divided by sqrt(2 * (l + 1)) when ``scaled_init`` is on.
    """
    d, f, v, h = config.hidden_size, config.ffn_width, config.vocab_size, config.attention_heads
    std = config.init_std
    depth = config.depth(role)
    p: dict[str, np.ndarray] = {}

    def normal(name, shape, s=std):
        p[name] = _normal(seed, role, name, shape, s, dtype)

    normal(_SHARED_WORD, (v, d))
    normal(_SHARED_POS, (config.max_seq_len, d))
    p["embed.ln.gamma"] = np.ones(d, dtype)
    p["embed.ln.beta"] = np.zeros(d, dtype)
    normal("relpos.table", (h, config.relpos_bins))
    if config.tupe_reset_cls:
        normal("cls.as_query", (h,))
        normal("cls.as_key", (h,))
    for layer in range(depth):
        pre = f"layer{layer}."
        out_std = residual_init_std(config, layer)
        for w in ("wq", "wk", "wv"):
            normal(pre + "attn." + w, (d, d))
        normal(pre + "attn.wo", (d, d), out_std)
        p[pre + "ln1.gamma"] = np.ones(d, dtype)
        p[pre + "ln1.beta"] = np.zeros(d, dtype)
        normal(pre + "ffn.w1", (d, f))
        p[pre + "ffn.b1"] = np.zeros(f, dtype)
        normal(pre + "ffn.w2", (f, d), out_std)
        p[pre + "ffn.b2"] = np.zeros(d, dtype)
        p[pre + "ln2.gamma"] = np.ones(d, dtype)
        p[pre + "ln2.beta"] = np.zeros(d, dtype)
    if config.layernorm_placement == "pre":
        p["final_ln.gamma"] = np.ones(d, dtype)
        p["final_ln.beta"] = np.zeros(d, dtype)
    p[_SHARED_LM_BIAS] = np.zeros(v, dtype)
    if role == "main":
        normal("rtd_head.weight", (d, 1))
        p["rtd_head.bias"] = np.zeros(1, dtype)
    params = {k: Tensor(a, requires_grad=True, name=k) for k, a in p.items()}
    return EncoderWeights(role, depth, params)


def shared_names(config: ModelConfig) -> list[str]:
    names = []
    if config.share_word_embeddings:
        names.append(_SHARED_WORD)
    if config.share_position_embeddings:
        names.append(_SHARED_POS)
    if config.share_lm_bias:
        names.append(_SHARED_LM_BIAS)
    return names


class ModelPair:
    """Auxiliary + main encoders with the configured embedding sharing."""

    def __init__(self, config: ModelConfig, aux: EncoderWeights, main: EncoderWeights):
        self.config = config
        self.aux = aux
        self.main = main

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=np.float32) -> ModelPair:
        main = init_weights(config, seed, "main", dtype)
        aux = init_weights(config, seed, "aux", dtype)
        for name in shared_names(config):
            aux[name] = main[name]
        return cls(config, aux, main)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Every distinct parameter once; shared tensors are listed under ``shared.``."""
        shared = set(shared_names(self.config))
        out = [(f"shared.{n}", self.main[n]) for n in sorted(shared)]
        for prefix, w in (("aux", self.aux), ("main", self.main)):
            out.extend((f"{prefix}.{n}", t) for n, t in w.items() if n not in shared)
        return out

    def parameter_counts(self) -> dict[str, int]:
        counts = {"aux": 0, "main": 0, "shared": 0}
        for name, t in self.named_parameters():
            counts[name.split(".", 1)[0]] += t.size
        counts["total"] = sum(counts.values())
        return counts

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, t in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name}")
            if arrays[name].shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {t.shape}")
            t.data = arrays[name].astype(t.dtype, copy=True)


# forward ----------------------------------------------------------------------------


def _reset_cls(rel: Tensor, as_query: Tensor, as_key: Tensor) -> Tensor:
    """Overwrite row 0 with ``as_query[h]`` and column 0 (below the corner) with ``as_key[h]``."""
    data = rel.data.copy()
    data[:, 0, :] = as_query.data[:, None]
    data[:, 1:, 0] = as_key.data[:, None]

    def backward(g):
        g_rel = g.copy()
        g_rel[:, 0, :] = 0
        g_rel[:, 1:, 0] = 0
        return g_rel, g[:, 0, :].sum(axis=-1), g[:, 1:, 0].sum(axis=-1)

    return Tensor.from_op(data, (rel, as_query, as_key), backward)


def attention_bias(config: ModelConfig, weights: EncoderWeights, seq_len: int) -> Tensor:
    """Additive attention bias of shape [heads x seq_len x seq_len]."""
    if seq_len > config.max_seq_len:
        raise ShapeError(f"sequence length {seq_len} exceeds max_seq_len {config.max_seq_len}")
    buckets = bucket_table(seq_len, config.relpos_bins, config.relpos_max_distance)
    rel = T.embedding(T.transpose(weights["relpos.table"]), buckets)  # [L, L, H]
    rel = T.transpose(rel, (2, 0, 1))
    if config.tupe_reset_cls:
        rel = _reset_cls(rel, weights["cls.as_query"], weights["cls.as_key"])
    return rel


@dataclass
class EncoderOutput:
    hidden: Tensor
    mlm_logits: Tensor | None
    rtd_logits: Tensor | None


def gather_rows(x: Tensor, rows) -> Tensor:
    """Rows ``x[rows]`` of a 2-D tensor (rows may repeat)."""
    rows = np.asarray(rows, dtype=np.int64)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, rows, g)
        return (out,)

    return Tensor.from_op(x.data[rows], (x,), backward)


def _ln(x, weights, prefix, eps):
    return T.layer_norm(x, weights[prefix + ".gamma"], weights[prefix + ".beta"], eps)


def _self_attention(x, weights, prefix, config, bias, key_mask, drop):
    b, l, d = x.shape
    h, dh = config.attention_heads, config.head_dim

    def heads(w):
        return T.transpose(T.reshape(T.matmul(x, weights[prefix + w]), (b, l, h, dh)), (0, 2, 1, 3))

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    scores = T.add(T.add(scores, bias), key_mask)
    probs = drop(T.softmax(scores, axis=-1))
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, l, d))
    return T.matmul(ctx, weights[prefix + "wo"])


def _ffn(x, weights, prefix):
    hid = T.gelu(T.add(T.matmul(x, weights[prefix + "w1"]), weights[prefix + "b1"]))
    return T.add(T.matmul(hid, weights[prefix + "w2"]), weights[prefix + "b2"])


def embed(config: ModelConfig, weights: EncoderWeights, token_ids: np.ndarray) -> Tensor:
    """Word + absolute position embeddings, before the embedding LayerNorm."""
    token_ids = np.asarray(token_ids)
    l = token_ids.shape[1]
    if l > config.max_seq_len:
        raise ShapeError(f"sequence length {l} exceeds max_seq_len {config.max_seq_len}")
    if token_ids.min() < 0 or token_ids.max() >= config.vocab_size:
        raise ShapeError(f"token ids must lie in [0, {config.vocab_size})")
    pos = T.embedding(weights["embed.position"], np.arange(l))
    return T.add(T.embedding(weights["embed.word"], token_ids), pos)


def forward(
    config: ModelConfig,
    weights: EncoderWeights,
    token_ids,
    train_mode: bool = False,
    pad_mask=None,
    dropout_stream: rngmod.DropoutStream | None = None,
    embed_delta=None,
    heads: tuple[str, ...] = ("mlm", "rtd"),
    mlm_positions=None,
) -> EncoderOutput:
    """Run one encoder over ``token_ids`` [B x L].

    ``pad_mask`` (bool [B x L], True at padding) defaults to ``token_ids == PAD``.
    ``embed_delta`` is an optional constant added to the input embeddings
    (used by perturbation-based fine-tuning). Dropout is active only when
    ``train_mode`` and the role's dropout rate is positive.

    By default ``mlm_logits`` is [B x L x V]. With ``mlm_positions`` (flat
    indices into B*L) only those rows are projected, giving [n x V].
    """
    token_ids = np.asarray(token_ids)
    if token_ids.ndim != 2:
        raise ShapeError(f"token_ids must be [B x L], got shape {token_ids.shape}")
    b, l = token_ids.shape
    if pad_mask is None:
        pad_mask = token_ids == PAD_ID
    eps = config.layer_norm_eps
    p_drop = config.dropout(weights.role) if train_mode else 0.0
    if p_drop > 0 and dropout_stream is None:
        raise ValueError("train_mode with dropout > 0 needs a dropout_stream")

    def drop(t):
        if p_drop == 0.0:
            return t
        return T.dropout(t, p_drop, dropout_stream.next())

    x = embed(config, weights, token_ids)
    if embed_delta is not None:
        x = T.add(x, embed_delta) if isinstance(embed_delta, Tensor) else T.add(x, np.asarray(embed_delta))
    x = drop(_ln(x, weights, "embed.ln", eps))
    bias = attention_bias(config, weights, l)
    key_mask = np.where(np.asarray(pad_mask), PAD_BIAS, 0.0).astype(x.dtype)[:, None, None, :]
    post = config.layernorm_placement == "post"
    for layer in range(weights.depth):
        pre = f"layer{layer}."
        if post:
            a = _self_attention(x, weights, pre + "attn.", config, bias, key_mask, drop)
            x = _ln(T.add(x, drop(a)), weights, pre + "ln1", eps)
            f = _ffn(x, weights, pre + "ffn.")
            x = _ln(T.add(x, drop(f)), weights, pre + "ln2", eps)
        else:
            a = _self_attention(_ln(x, weights, pre + "ln1", eps), weights, pre + "attn.", config, bias, key_mask, drop)
            x = T.add(x, drop(a))
            f = _ffn(_ln(x, weights, pre + "ln2", eps), weights, pre + "ffn.")
            x = T.add(x, drop(f))
    if not post:
        x = _ln(x, weights, "final_ln", eps)
    mlm = rtd = None
    if "mlm" in heads:
        src = x
        if mlm_positions is not None:
            src = gather_rows(T.reshape(x, (b * l, x.shape[-1])), mlm_positions)
        mlm = T.add(T.matmul(src, T.transpose(weights["embed.word"])), weights["lm_head.bias"])
    if "rtd" in heads and "rtd_head.weight" in weights:
        rtd = T.reshape(T.add(T.matmul(x, weights["rtd_head.weight"]), weights["rtd_head.bias"]), (b, l))
    return EncoderOutput(x, mlm, rtd)
