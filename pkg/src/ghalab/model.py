"""Pre-norm transformer with per-head feature-map capture and head masking.

Attention layers are enumerated in a fixed order used everywhere else
(masks, hidden units, vote ledgers, reports)::

    enc0.self, enc1.self, ..., dec0.self, dec0.cross, dec1.self, dec1.cross, ...

A decoder-only model has just the ``decN.self`` entries.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

PAD, BOS, EOS = 0, 1, 2
NEG_INF = -1e9


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    arch: str = "encoder-decoder"
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 32
    tie_embeddings: bool = True
    dropout: float = 0.1
    attn_dropout: float = 0.0
    max_len: int = 256
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def validate(self):
        if self.arch not in ("encoder-decoder", "decoder-only"):
            raise ConfigError(f"model.arch: unknown architecture {self.arch!r}")
        for key in ("n_layers", "n_heads", "d_model", "d_ff", "vocab_size", "max_len"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"model.{key}: must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"model.d_model: {self.d_model} not divisible by n_heads={self.n_heads}")
        if not (0.0 <= self.dropout < 1.0 and 0.0 <= self.attn_dropout < 1.0):
            raise ConfigError("model.dropout: must be in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"model.dtype: {self.dtype!r} not in (float32, float64)")


PRESETS = {
    "tiny": dict(n_layers=2, d_model=64, n_heads=4, d_ff=256),
    "small": dict(n_layers=4, d_model=128, n_heads=8, d_ff=512),
    # accounting only; shared source/target vocabulary of about 40K tokens
    "paper-base": dict(n_layers=6, d_model=512, n_heads=8, d_ff=2048, vocab_size=40000,
                       dropout=0.3),
}


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


# --------------------------------------------------------------------------
# Parameter containers
# --------------------------------------------------------------------------


class Module:
    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def _param(arr, dtype):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def _xavier(rng, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return _param(rng.uniform(-bound, bound, size=(fan_in, fan_out)), dtype)


class LayerNorm(Module):
    def __init__(self, d, dtype):
        self.gain = _param(np.ones(d), dtype)
        self.bias = _param(np.zeros(d), dtype)

    def __call__(self, x):
        return nx.layer_norm(x, self.gain, self.bias, eps=1e-5)


class FeedForward(Module):
    def __init__(self, d_model, d_ff, rng, dtype):
        self.w1 = _xavier(rng, d_model, d_ff, dtype)
        self.b1 = _param(np.zeros(d_ff), dtype)
        self.w2 = _xavier(rng, d_ff, d_model, dtype)
        self.b2 = _param(np.zeros(d_model), dtype)

    def __call__(self, x, drop):
        h = nx.relu(nx.linear(x, self.w1, self.b1))
        return nx.linear(drop(h), self.w2, self.b2)


@dataclass
class LayerFeatureMaps:
    """Per-head intermediates of one attention layer.

    ``value`` (B, h, Tk, dk), ``attention`` (B, h, Tq, Tk), ``output`` (B, h, Tq, dk).
    ``query_valid`` (B, Tq) and ``key_valid`` (B, Tk) flag non-pad positions.
    """

    name: str
    value: Tensor
    attention: Tensor
    output: Tensor
    query_valid: np.ndarray
    key_valid: np.ndarray

    def get(self, kind):
        return {"v": self.value, "a": self.attention, "o": self.output}[kind]

    @property
    def n_heads(self):
        return self.value.shape[1]

    def frozen(self):
        """Detached deep copies, safe to keep after further training steps."""
        return LayerFeatureMaps(
            self.name,
            Tensor(self.value.data.copy()),
            Tensor(self.attention.data.copy()),
            Tensor(self.output.data.copy()),
            self.query_valid.copy(),
            self.key_valid.copy(),
        )


class MultiHeadAttention(Module):
    """Multi-head attention: concatenated head outputs projected by one shared ``wo``.

    ``head_dim`` is kept separately from ``n_heads`` so that a pruned layer keeps
    the original per-head width and scaling.
    """

    def __init__(self, d_model, n_heads, head_dim, rng, dtype, head_ids=None):
        inner = n_heads * head_dim
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.d_model = d_model
        self._head_ids = list(range(n_heads)) if head_ids is None else list(head_ids)
        self._mask = None
        if rng is None:
            return
        self.wq = _xavier(rng, d_model, inner, dtype)
        self.bq = _param(np.zeros(inner), dtype)
        self.wk = _xavier(rng, d_model, inner, dtype)
        self.bk = _param(np.zeros(inner), dtype)
        self.wv = _xavier(rng, d_model, inner, dtype)
        self.bv = _param(np.zeros(inner), dtype)
        self.wo = _xavier(rng, inner, d_model, dtype)
        self.bo = _param(np.zeros(d_model), dtype)

    @property
    def head_ids(self):
        return list(self._head_ids)

    @property
    def mask(self):
        return self._mask

    def set_mask(self, mask):
        if mask is None:
            self._mask = None
            return
        mask = np.asarray(mask)
        if mask.shape != (self.n_heads,):
            raise ShapeError(f"head mask length {mask.shape} != number of heads {self.n_heads}")
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("head mask entries must be 0 or 1")
        self._mask = mask.astype(np.int8)

    def _split(self, x, w, b):
        B, T, _ = x.shape
        y = nx.linear(x, w, b).reshape(B, T, self.n_heads, self.head_dim)
        return y.transpose(0, 2, 1, 3)

    def __call__(self, xq, xkv, key_valid, query_valid=None, causal=False, drop=None,
                 head_mask=None, name=""):
        if xq.shape[0] != xkv.shape[0]:
            raise ShapeError(f"query batch {xq.shape[0]} != key batch {xkv.shape[0]}")
        if xq.shape[-1] != self.d_model or xkv.shape[-1] != self.d_model:
            raise ShapeError(f"attention inputs {xq.shape}/{xkv.shape} do not match d_model={self.d_model}")
        B, Tq, _ = xq.shape
        Tk = xkv.shape[1]
        q = self._split(xq, self.wq, self.bq)
        k = self._split(xkv, self.wk, self.bk)
        v = self._split(xkv, self.wv, self.bv)

        bias = np.where(key_valid[:, None, None, :], 0.0, NEG_INF)
        if causal:
            future = np.triu(np.ones((Tq, Tk), dtype=bool), k=1)
            bias = np.where(future[None, None], NEG_INF, bias)
        scores = nx.matmul(q, nx.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(self.head_dim))
        scores = scores + bias.astype(scores.dtype)
        attn = nx.softmax(scores, axis=-1)
        o = nx.matmul(drop(attn) if drop is not None else attn, v)

        mask = self._mask if head_mask is None else np.asarray(head_mask)
        if mask is not None:
            if mask.shape != (self.n_heads,):
                raise ShapeError(f"head mask length {mask.shape} != number of heads {self.n_heads}")
            o_used = o * mask.astype(o.dtype)[None, :, None, None]
        else:
            o_used = o
        concat = o_used.transpose(0, 2, 1, 3).reshape(B, Tq, self.n_heads * self.head_dim)
        out = nx.linear(concat, self.wo, self.bo)
        if query_valid is None:
            query_valid = np.ones((B, Tq), dtype=bool)
        fms = LayerFeatureMaps(name, v, attn, o, query_valid, key_valid)
        return out, fms


class EncoderLayer(Module):
    def __init__(self, cfg, rng, dtype):
        self.ln1 = LayerNorm(cfg.d_model, dtype)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.head_dim, rng, dtype)
        self.ln2 = LayerNorm(cfg.d_model, dtype)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, dtype)


class DecoderLayer(Module):
    def __init__(self, cfg, rng, dtype, cross=True):
        self.ln1 = LayerNorm(cfg.d_model, dtype)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.head_dim, rng, dtype)
        if cross:
            self.ln_cross = LayerNorm(cfg.d_model, dtype)
            self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.head_dim, rng, dtype)
        self.ln2 = LayerNorm(cfg.d_model, dtype)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, dtype)


def sinusoidal_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : (d - d // 2)])
    return pe


class TransformerModel(Module):
    def __init__(self, config: ModelConfig, seed=0):
        config.validate()
        self._config = config
        dtype = np.dtype(config.dtype)
        self._dtype = dtype
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.training = True
        self._dropout_rng = np.random.default_rng([seed, 1])
        self._pe = sinusoidal_positions(config.max_len, d).astype(dtype)

        emb_std = d ** -0.5
        if config.arch == "encoder-decoder":
            self.src_embed = _param(rng.normal(0, emb_std, (config.vocab_size, d)), dtype)
            self.encoder = [EncoderLayer(config, rng, dtype) for _ in range(config.n_layers)]
            self.enc_ln = LayerNorm(d, dtype)
        self.tgt_embed = _param(rng.normal(0, emb_std, (config.vocab_size, d)), dtype)
        cross = config.arch == "encoder-decoder"
        self.decoder = [DecoderLayer(config, rng, dtype, cross=cross) for _ in range(config.n_layers)]
        self.dec_ln = LayerNorm(d, dtype)
        if not config.tie_embeddings:
            self.out_proj = _param(rng.normal(0, emb_std, (d, config.vocab_size)), dtype)

    # ------------------------------------------------------------ structure
    @property
    def config(self):
        return self._config

    def attention_layers(self):
        """``[(name, MultiHeadAttention), ...]`` in the canonical layer order."""
        out = []
        for i, layer in enumerate(getattr(self, "encoder", [])):
            out.append((f"enc{i}.self", layer.self_attn))
        for i, layer in enumerate(self.decoder):
            out.append((f"dec{i}.self", layer.self_attn))
            if hasattr(layer, "cross_attn"):
                out.append((f"dec{i}.cross", layer.cross_attn))
        return out

    def embedding_parameter_names(self):
        names = ["tgt_embed"]
        if hasattr(self, "src_embed"):
            names.append("src_embed")
        return names

    def state_dict(self):
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in params.items():
            if state[n].shape != p.shape:
                raise ShapeError(f"{n}: checkpoint shape {state[n].shape} != model {p.shape}")
            p.data = np.array(state[n], dtype=p.dtype, copy=True)

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    @property
    def head_mask(self):
        layers = [attn.mask for _, attn in self.attention_layers()]
        if all(m is None for m in layers):
            return None
        return HeadMask([np.ones(attn.n_heads, np.int8) if m is None else m
                         for m, (_, attn) in zip(layers, self.attention_layers())])

    def dropout_state(self):
        return self._dropout_rng.bit_generator.state

    def set_dropout_state(self, state):
        self._dropout_rng.bit_generator.state = state

    # -------------------------------------------------------------- forward
    def _drop(self, p):
        rng = self._dropout_rng
        training = self.training
        return lambda x: nx.dropout(x, p, rng, training)

    def _embed(self, table, ids):
        cfg = self._config
        if ids.shape[1] > cfg.max_len:
            raise ShapeError(f"sequence length {ids.shape[1]} exceeds max_len={cfg.max_len}")
        x = nx.embedding(table, ids) * math.sqrt(cfg.d_model)
        return x + self._pe[: ids.shape[1]]

    def encode(self, src, fms):
        cfg = self._config
        drop = self._drop(cfg.dropout)
        attn_drop = self._drop(cfg.attn_dropout)
        valid = src != PAD
        x = drop(self._embed(self.src_embed, src))
        for i, layer in enumerate(self.encoder):
            h = layer.ln1(x)
            a, fm = layer.self_attn(h, h, valid, valid, drop=attn_drop, name=f"enc{i}.self")
            fms.append(fm)
            x = x + drop(a)
            x = x + drop(layer.ffn(layer.ln2(x), drop))
        return self.enc_ln(x), valid

    def forward(self, src, tgt):
        """Return ``(logits, [LayerFeatureMaps, ...])``.

        ``src`` is ignored (may be None) for decoder-only models. Feature maps
        are graph tensors; call :meth:`LayerFeatureMaps.frozen` to keep copies.
        """
        cfg = self._config
        tgt = np.asarray(tgt)
        if tgt.size and (tgt.min() < 0 or tgt.max() >= cfg.vocab_size):
            raise IndexError(f"target id out of range [0, {cfg.vocab_size})")
        fms = []
        memory = mem_valid = None
        if cfg.arch == "encoder-decoder":
            src = np.asarray(src)
            if src.size and (src.min() < 0 or src.max() >= cfg.vocab_size):
                raise IndexError(f"source id out of range [0, {cfg.vocab_size})")
            memory, mem_valid = self.encode(src, fms)
        drop = self._drop(cfg.dropout)
        attn_drop = self._drop(cfg.attn_dropout)
        valid = tgt != PAD
        x = drop(self._embed(self.tgt_embed, tgt))
        for i, layer in enumerate(self.decoder):
            h = layer.ln1(x)
            a, fm = layer.self_attn(h, h, valid, valid, causal=True, drop=attn_drop,
                                    name=f"dec{i}.self")
            fms.append(fm)
            x = x + drop(a)
            if memory is not None:
                h = layer.ln_cross(x)
                a, fm = layer.cross_attn(h, memory, mem_valid, valid, drop=attn_drop,
                                         name=f"dec{i}.cross")
                fms.append(fm)
                x = x + drop(a)
            x = x + drop(layer.ffn(layer.ln2(x), drop))
        x = self.dec_ln(x)
        head = nx.transpose(self.tgt_embed, None) if cfg.tie_embeddings else self.out_proj
        logits = nx.linear(x, head)
        return logits, fms

    __call__ = forward


def transformer_forward(model, src, tgt):
    return model.forward(src, tgt)


# --------------------------------------------------------------------------
# Head masks and structural pruning
# --------------------------------------------------------------------------


@dataclass
class HeadMask:
    """One 0/1 vector per attention layer, in canonical layer order."""

    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.layers = [np.asarray(m, dtype=np.int8) for m in self.layers]
        for m in self.layers:
            if not np.isin(m, (0, 1)).all():
                raise ValueError("head mask entries must be 0 or 1")

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def sums(self):
        return [int(m.sum()) for m in self.layers]

    def is_complete(self, n_groups=None):
        """Every voted layer keeps exactly ``n_groups`` heads.

        All-ones layers count as not voted on (their type was excluded from
        grouping) and are accepted as they are.
        """
        if not self.layers:
            return False
        voted = [int(m.sum()) for m in self.layers if not m.all()]
        if not voted:
            return n_groups is None or all(len(m) == n_groups for m in self.layers)
        target = voted[0] if n_groups is None else n_groups
        return target >= 1 and all(x == target for x in voted)

    @classmethod
    def ones(cls, model):
        return cls([np.ones(attn.n_heads, np.int8) for _, attn in model.attention_layers()])

    def to_list(self):
        return [m.tolist() for m in self.layers]


def apply_head_mask(model, mask):
    """Install ``mask``; later forwards zero masked heads' outputs before ``wo``."""
    layers = model.attention_layers()
    if mask is None:
        for _, attn in layers:
            attn.set_mask(None)
        return model
    if not isinstance(mask, HeadMask):
        mask = HeadMask(list(mask))
    if len(mask) != len(layers):
        raise ShapeError(f"mask has {len(mask)} layers, model has {len(layers)} attention layers")
    for m, (_, attn) in zip(mask.layers, layers):
        attn.set_mask(m)
    return model


def _prune_attention(attn, keep):
    new = MultiHeadAttention(attn.d_model, len(keep), attn.head_dim, None, None,
                             head_ids=[attn.head_ids[i] for i in keep])
    dk = attn.head_dim
    cols = np.concatenate([np.arange(i * dk, (i + 1) * dk) for i in keep]) if keep else np.arange(0)
    for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv")):
        setattr(new, w, _param(getattr(attn, w).data[:, cols], getattr(attn, w).dtype))
        setattr(new, b, _param(getattr(attn, b).data[cols], getattr(attn, b).dtype))
    new.wo = _param(attn.wo.data[cols, :], attn.wo.dtype)
    new.bo = _param(attn.bo.data, attn.bo.dtype)
    return new


def structural_prune(model, mask, n_groups=None):
    """Return a new model whose attention layers physically drop masked heads.

    The per-head column blocks of ``wq/wk/wv`` (and biases) and the matching row
    blocks of ``wo`` are deleted; ``bo`` is shared by all heads and kept.
    """
    if not isinstance(mask, HeadMask):
        mask = HeadMask(list(mask))
    layers = model.attention_layers()
    if len(mask) != len(layers):
        raise ShapeError(f"mask has {len(mask)} layers, model has {len(layers)} attention layers")
    if not mask.is_complete(n_groups):
        raise ValueError(f"mask is not voting-complete: per-layer sums {mask.sums()}"
                         + (f", expected {n_groups}" if n_groups is not None else ""))
    new = copy.deepcopy(model)
    for m, (name, _) in zip(mask.layers, layers):
        owner, attr = _locate(new, name)
        keep = [int(i) for i in np.flatnonzero(m)]
        pruned = _prune_attention(getattr(owner, attr), keep)
        setattr(owner, attr, pruned)
    return new


def _locate(model, name):
    stack, idx_kind = name.split(".")
    idx = int(stack[3:])
    container = model.encoder if stack.startswith("enc") else model.decoder
    return container[idx], "self_attn" if idx_kind == "self" else "cross_attn"


def config_dict(cfg):
    return asdict(cfg)
