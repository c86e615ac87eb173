"""Configurable-depth Transformer encoder-decoder with tied embeddings.

Parameters live in one flat ``name -> Tensor`` dict. The shared table
``embed`` is the source embedding, the target embedding and the output
classifier at once. Forward passes return a ``ForwardTrace`` that keeps
every layer output and every attention matrix, which is what the probes
read.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .numerics import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3
LN_EPS = 1e-6

SKIP_MODES = ("none", "self_attention", "cross_attention")


class ConfigError(ValueError):
    pass


class LengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoder_depth: int = 6
    decoder_depth: int = 6
    d_model: int = 64
    heads: int = 4
    d_ff: int = 128
    vocab_size: int = 68
    dropout: float = 0.1
    max_len: int = 64
    norm_placement: str = "pre"
    seed: int = 0

    def __post_init__(self):
        if self.encoder_depth < 0:
            raise ConfigError("encoder_depth must be >= 0")
        for name in ("decoder_depth", "d_model", "heads", "d_ff", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.norm_placement not in ("pre", "post"):
            raise ConfigError(f"norm_placement must be 'pre' or 'post', got {self.norm_placement!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class BypassSpec:
    """Skip one sub-layer of decoder layer ``layer_index`` (1-based)."""

    layer_index: int = 0
    skip: str = "none"

    def __post_init__(self):
        if self.skip not in SKIP_MODES:
            raise ConfigError(f"unknown skip mode {self.skip!r}")

    def check(self, config: ModelConfig) -> None:
        if self.skip != "none" and not 1 <= self.layer_index <= config.decoder_depth:
            raise ConfigError(
                f"bypass layer {self.layer_index} outside [1, {config.decoder_depth}]")

    def skips(self, layer: int, mode: str) -> bool:
        return self.skip == mode and self.layer_index == layer


NO_BYPASS = BypassSpec()


@dataclass
class ForwardTrace:
    """Layer outputs and attention weights captured by one forward pass.

    Index 0 of each output list is the embedding layer. The last encoder
    (decoder) entry is what the decoder (classifier) actually consumes, so
    in the pre-norm layout it includes the final layer norm.
    Attention arrays have shape ``[B, heads, queries, keys]``.
    """

    src_mask: np.ndarray | None = None
    tgt_mask: np.ndarray | None = None
    encoder_layer_outputs: list[Tensor] = field(default_factory=list)
    encoder_attention: list[np.ndarray] = field(default_factory=list)
    decoder_layer_outputs: list[Tensor] = field(default_factory=list)
    self_attention: list[np.ndarray | None] = field(default_factory=list)
    cross_attention: list[np.ndarray | None] = field(default_factory=list)

    @property
    def memory(self) -> Tensor:
        return self.encoder_layer_outputs[-1]

    def alignment_stack(self) -> np.ndarray:
        """All decoder cross-attention heads, layer-major: ``[d*k, B, T, S]``."""
        if any(a is None for a in self.cross_attention):
            raise ConfigError("a cross-attention sub-layer was bypassed; no full alignment stack")
        stacked = np.stack(self.cross_attention, axis=0)  # [d, B, k, T, S]
        d, B, k, T, S = stacked.shape
        return np.ascontiguousarray(stacked.transpose(0, 2, 1, 3, 4)).reshape(d * k, B, T, S)


# ---------------------------------------------------------------- parameters

def _attention_shapes(prefix: str, d: int):
    for proj in ("q", "k", "v", "o"):
        yield f"{prefix}.{proj}.weight", (d, d)
        yield f"{prefix}.{proj}.bias", (d,)


def _norm_shapes(prefix: str, d: int):
    yield f"{prefix}.gain", (d,)
    yield f"{prefix}.bias", (d,)


def _ffn_shapes(prefix: str, d: int, d_ff: int):
    yield f"{prefix}.w1", (d, d_ff)
    yield f"{prefix}.b1", (d_ff,)
    yield f"{prefix}.w2", (d_ff, d)
    yield f"{prefix}.b2", (d,)


def encoder_param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, out = config.d_model, []
    for i in range(config.encoder_depth):
        out += _attention_shapes(f"enc.{i}.self_attn", d)
        out += _norm_shapes(f"enc.{i}.ln1", d)
        out += _ffn_shapes(f"enc.{i}.ffn", d, config.d_ff)
        out += _norm_shapes(f"enc.{i}.ln2", d)
    if config.norm_placement == "pre" and config.encoder_depth > 0:
        out += _norm_shapes("enc.final_ln", d)
    return out


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter tensor in initialisation order."""
    d = config.d_model
    out = [("embed", (config.vocab_size, d))]
    out += encoder_param_shapes(config)
    for j in range(config.decoder_depth):
        out += _attention_shapes(f"dec.{j}.self_attn", d)
        out += _norm_shapes(f"dec.{j}.ln1", d)
        out += _attention_shapes(f"dec.{j}.cross_attn", d)
        out += _norm_shapes(f"dec.{j}.ln2", d)
        out += _ffn_shapes(f"dec.{j}.ffn", d, config.d_ff)
        out += _norm_shapes(f"dec.{j}.ln3", d)
    if config.norm_placement == "pre":
        out += _norm_shapes("dec.final_ln", d)
    return out


def parameter_census(config: ModelConfig) -> int:
    """Scalar parameter count implied by ``config`` without allocating it."""
    return sum(int(np.prod(shape)) for _, shape in param_shapes(config))


def _init_tensor(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape, dtype=np.float32)
    if len(shape) == 1:
        return np.zeros(shape, dtype=np.float32)
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_params(shapes, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    return {name: Tensor(_init_tensor(name, shape, rng)) for name, shape in shapes}


def sinusoid_table(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((max_len, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe.astype(np.float32)


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.positional = sinusoid_table(config.max_len, config.d_model)
        self._frozen = False
        self.unfreeze()

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "TransformerModel":
        self._frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "TransformerModel":
        self._frozen = False
        for p in self.params.values():
            p.requires_grad = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ConfigError(f"state is missing tensors: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(arrays[k], dtype=np.float32)
            if arr.shape != p.shape:
                raise ConfigError(f"tensor {k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def embedding(self) -> Tensor:
        return self.params["embed"]


def build_model(config: ModelConfig) -> TransformerModel:
    return TransformerModel(config, init_params(param_shapes(config), config.seed))


def count_parameters(model: TransformerModel) -> int:
    # the tied table is a single dict entry, so it is counted once
    return sum(p.data.size for p in model.params.values())


# ---------------------------------------------------------------- forward pieces

def _linear(x: Tensor, p: dict, name: str) -> Tensor:
    return nx.add(nx.matmul(x, p[name + ".weight"]), p[name + ".bias"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, T, d = x.shape
    return nx.transpose(nx.reshape(x, (B, T, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, T, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (B, T, h * dh))


def _attention(p: dict, prefix: str, xq: Tensor, xkv: Tensor, mask, heads: int):
    q = _split_heads(_linear(xq, p, prefix + ".q"), heads)
    k = _split_heads(_linear(xkv, p, prefix + ".k"), heads)
    v = _split_heads(_linear(xkv, p, prefix + ".v"), heads)
    scores = nx.mul(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    attn = nx.softmax_rows(scores, mask)
    out = _linear(_merge_heads(nx.matmul(attn, v)), p, prefix + ".o")
    return out, attn.data


def _ffn(p: dict, prefix: str, x: Tensor) -> Tensor:
    h = nx.relu(nx.add(nx.matmul(x, p[prefix + ".w1"]), p[prefix + ".b1"]))
    return nx.add(nx.matmul(h, p[prefix + ".w2"]), p[prefix + ".b2"])


def _norm(p: dict, prefix: str, x: Tensor) -> Tensor:
    return nx.layer_norm(x, p[prefix + ".gain"], p[prefix + ".bias"], LN_EPS)


def _residual(model, x, fn, norm_prefix, rng, train):
    """One residual sub-layer in the configured norm placement."""
    cfg, p = model.config, model.params
    if cfg.norm_placement == "pre":
        y, extra = fn(_norm(p, norm_prefix, x))
        return nx.add(x, nx.dropout(y, cfg.dropout, rng, train)), extra
    y, extra = fn(x)
    return _norm(p, norm_prefix, nx.add(x, nx.dropout(y, cfg.dropout, rng, train))), extra


def _embed(model, table: Tensor, ids: np.ndarray, rng, train) -> Tensor:
    cfg = model.config
    if ids.shape[1] > cfg.max_len:
        raise LengthError(f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    if ids.size and ids.max() >= cfg.vocab_size:
        raise ConfigError(f"token id {ids.max()} outside vocabulary of size {cfg.vocab_size}")
    x = nx.mul(nx.take_rows(table, ids), math.sqrt(cfg.d_model))
    x = nx.add(x, model.positional[: ids.shape[1]])
    return nx.dropout(x, cfg.dropout, rng, train)


def _as_ids(tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    return ids[None, :] if ids.ndim == 1 else ids


def encode(model: TransformerModel, src, src_mask=None, train: bool = False,
           rng: np.random.Generator | None = None) -> ForwardTrace:
    cfg, p = model.config, model.params
    src = _as_ids(src)
    src_mask = (src != PAD) if src_mask is None else np.asarray(src_mask, dtype=bool)
    table = p.get("src_embed", p["embed"])
    x = _embed(model, table, src, rng, train)
    trace = ForwardTrace(src_mask=src_mask, encoder_layer_outputs=[x])
    key_mask = src_mask[:, None, None, :]
    for i in range(cfg.encoder_depth):
        x, attn = _residual(
            model, x,
            lambda h, i=i: _attention(p, f"enc.{i}.self_attn", h, h, key_mask, cfg.heads),
            f"enc.{i}.ln1", rng, train)
        x, _ = _residual(model, x, lambda h, i=i: (_ffn(p, f"enc.{i}.ffn", h), None),
                         f"enc.{i}.ln2", rng, train)
        trace.encoder_attention.append(attn)
        trace.encoder_layer_outputs.append(x)
    if cfg.norm_placement == "pre" and cfg.encoder_depth > 0:
        trace.encoder_layer_outputs[-1] = _norm(p, "enc.final_ln", x)
    return trace


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def decode_teacher_forced(model: TransformerModel, memory, tgt_in, src_mask,
                          tgt_mask=None, bypass: BypassSpec = NO_BYPASS,
                          train: bool = False,
                          rng: np.random.Generator | None = None) -> ForwardTrace:
    """Run the decoder over a whole shifted target sequence at once.

    ``memory`` is the encoder output (a Tensor or an encoder trace).
    """
    cfg, p = model.config, model.params
    bypass.check(cfg)
    if isinstance(memory, ForwardTrace):
        memory = memory.memory
    tgt_in = _as_ids(tgt_in)
    src_mask = np.asarray(src_mask, dtype=bool)
    tgt_mask = (tgt_in != PAD) if tgt_mask is None else np.asarray(tgt_mask, dtype=bool)
    T = tgt_in.shape[1]
    self_mask = causal_mask(T)[None, None, :, :]
    cross_mask = src_mask[:, None, None, :]

    y = _embed(model, p["embed"], tgt_in, rng, train)
    trace = ForwardTrace(src_mask=src_mask, tgt_mask=tgt_mask, decoder_layer_outputs=[y])
    for j in range(cfg.decoder_depth):
        layer = j + 1
        self_attn = cross_attn = None
        if not bypass.skips(layer, "self_attention"):
            y, self_attn = _residual(
                model, y,
                lambda h, j=j: _attention(p, f"dec.{j}.self_attn", h, h, self_mask, cfg.heads),
                f"dec.{j}.ln1", rng, train)
        if not bypass.skips(layer, "cross_attention"):
            y, cross_attn = _residual(
                model, y,
                lambda h, j=j: _attention(p, f"dec.{j}.cross_attn", h, memory, cross_mask, cfg.heads),
                f"dec.{j}.ln2", rng, train)
        y, _ = _residual(model, y, lambda h, j=j: (_ffn(p, f"dec.{j}.ffn", h), None),
                         f"dec.{j}.ln3", rng, train)
        trace.self_attention.append(self_attn)
        trace.cross_attention.append(cross_attn)
        trace.decoder_layer_outputs.append(y)
    if cfg.norm_placement == "pre":
        trace.decoder_layer_outputs[-1] = _norm(p, "dec.final_ln", y)
    return trace


def forward(model: TransformerModel, src, tgt_in, src_mask=None, tgt_mask=None,
            bypass: BypassSpec = NO_BYPASS, train: bool = False,
            rng: np.random.Generator | None = None) -> ForwardTrace:
    """Encoder plus teacher-forced decoder; returns one merged trace."""
    enc = encode(model, src, src_mask, train, rng)
    dec = decode_teacher_forced(model, enc.memory, tgt_in, enc.src_mask, tgt_mask,
                                bypass, train, rng)
    dec.encoder_layer_outputs = enc.encoder_layer_outputs
    dec.encoder_attention = enc.encoder_attention
    return dec


def logits(model: TransformerModel, hidden: Tensor) -> Tensor:
    """Tied-weight classifier: ``hidden @ embed.T`` with no bias."""
    if hidden.shape[-1] != model.config.d_model:
        raise nx.DimensionError(
            f"representation width {hidden.shape[-1]} != d_model {model.config.d_model}")
    return nx.matmul(hidden, nx.transpose(model.embedding))


# ---------------------------------------------------------------- incremental decoding

def _np_ln(x, p, prefix):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + LN_EPS) * p[prefix + ".gain"].data + p[prefix + ".bias"].data


def _np_linear(x, p, name):
    return x @ p[name + ".weight"].data + p[name + ".bias"].data


def _np_heads(x, heads):
    n, t, d = x.shape
    return x.reshape(n, t, heads, d // heads).transpose(0, 2, 1, 3)


def _np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class IncrementalDecoder:
    """Token-by-token decoder for one source sentence, batched over hypotheses.

    Self-attention keys/values are cached per layer, cross-attention keys and
    values are computed once from the encoder output. Results agree with
    ``decode_teacher_forced`` up to float rounding.
    """

    def __init__(self, model: TransformerModel, memory: np.ndarray, src_mask: np.ndarray):
        self.model = model
        cfg, p = model.config, model.params
        self.heads = cfg.heads
        self.scale = 1.0 / math.sqrt(cfg.d_model // cfg.heads)
        memory = np.asarray(memory, dtype=np.float32)
        if memory.ndim == 2:
            memory = memory[None]
        self.src_mask = np.asarray(src_mask, dtype=bool).reshape(1, 1, 1, -1)
        self.cross_kv = [
            (_np_heads(_np_linear(memory, p, f"dec.{j}.cross_attn.k"), cfg.heads),
             _np_heads(_np_linear(memory, p, f"dec.{j}.cross_attn.v"), cfg.heads))
            for j in range(cfg.decoder_depth)
        ]
        self.cache: list[tuple[np.ndarray, np.ndarray] | None] = [None] * cfg.decoder_depth
        self.position = 0

    def _attend(self, q, k, v, mask=None):
        scores = (q @ np.swapaxes(k, -1, -2)) * self.scale
        if mask is not None:
            scores = np.where(mask, scores, -np.inf)
        ctx = _np_softmax(scores) @ v
        n, h, t, dh = ctx.shape
        return ctx.transpose(0, 2, 1, 3).reshape(n, t, h * dh)

    def step(self, tokens) -> np.ndarray:
        """Feed one token per hypothesis; return next-token log-probs ``[n, V]``."""
        cfg, p = self.model.config, self.model.params
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, 1)
        if self.position >= cfg.max_len:
            raise LengthError(f"decoder position {self.position} reached max_len {cfg.max_len}")
        pre = cfg.norm_placement == "pre"
        y = p["embed"].data[tokens] * np.float32(math.sqrt(cfg.d_model))
        y = y + self.model.positional[self.position]
        for j in range(cfg.decoder_depth):
            def self_attn(h, j=j):
                q = _np_heads(_np_linear(h, p, f"dec.{j}.self_attn.q"), self.heads)
                k = _np_heads(_np_linear(h, p, f"dec.{j}.self_attn.k"), self.heads)
                v = _np_heads(_np_linear(h, p, f"dec.{j}.self_attn.v"), self.heads)
                if self.cache[j] is not None:
                    k = np.concatenate([self.cache[j][0], k], axis=2)
                    v = np.concatenate([self.cache[j][1], v], axis=2)
                self.cache[j] = (k, v)
                return _np_linear(self._attend(q, k, v), p, f"dec.{j}.self_attn.o")

            def cross_attn(h, j=j):
                q = _np_heads(_np_linear(h, p, f"dec.{j}.cross_attn.q"), self.heads)
                k, v = self.cross_kv[j]
                return _np_linear(self._attend(q, k, v, self.src_mask), p, f"dec.{j}.cross_attn.o")

            def ffn(h, j=j):
                a = np.maximum(h @ p[f"dec.{j}.ffn.w1"].data + p[f"dec.{j}.ffn.b1"].data, 0)
                return a @ p[f"dec.{j}.ffn.w2"].data + p[f"dec.{j}.ffn.b2"].data

            for fn, ln in ((self_attn, "ln1"), (cross_attn, "ln2"), (ffn, "ln3")):
                prefix = f"dec.{j}.{ln}"
                y = y + fn(_np_ln(y, p, prefix)) if pre else _np_ln(y + fn(y), p, prefix)
        if pre:
            y = _np_ln(y, p, "dec.final_ln")
        self.position += 1
        z = y[:, 0, :] @ p["embed"].data.T
        return nx.log_softmax_np(z)

    def reorder(self, index) -> None:
        """Keep hypotheses ``index`` (with repetition) for the next step."""
        index = np.asarray(index, dtype=np.int64)
        self.cache = [None if c is None else (c[0][index], c[1][index]) for c in self.cache]
