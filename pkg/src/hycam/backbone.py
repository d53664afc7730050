"""Minimal pre-LN decoder-only transformer used as the frozen substrate."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

if TYPE_CHECKING:
    from .adapters import HyCamAdapters, RoutingOutput


class ConfigError(ValueError):
    """A configuration value violates its constraint; the message names the field."""


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 128
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"backbone.{name} must be >= 1")
        if self.max_seq_len < 2:
            raise ConfigError("backbone.max_seq_len must be >= 2")
        if self.d_model % self.n_heads:
            raise ConfigError("backbone.d_model must be divisible by backbone.n_heads")
        if not self.layer_norm_eps > 0:
            raise ConfigError("backbone.layer_norm_eps must be > 0")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


class BlockTrace(NamedTuple):
    h_norm: Tensor
    h_att: Tensor


class ForwardOutput(NamedTuple):
    logits: Tensor
    traces: list[BlockTrace]
    routing: list["RoutingOutput | None"]
    modulation: list[Tensor | None]


BLOCK_PARAMS = ("ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
                "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")


class Backbone:
    """Parameters of the decoder stack, keyed by dotted name.

    Blocks are addressed as ``layers.{i}.<part>``; see :data:`BLOCK_PARAMS`.
    """

    def __init__(self, config: BackboneConfig, seed: int = 0, precision: str = "fp32", init_std: float = 0.02):
        self.config = config
        self.precision = precision
        self.dtype = ad.dtype_for(precision)
        rng = np.random.default_rng(seed)
        c = config
        d, f = c.d_model, c.d_ff
        shapes: list[tuple[str, tuple[int, ...], str]] = [
            ("tok_emb", (c.vocab_size, d), "normal"),
            ("pos_emb", (c.max_seq_len, d), "normal"),
        ]
        for i in range(c.n_layers):
            p = f"layers.{i}."
            shapes += [
                (p + "ln1.g", (d,), "ones"), (p + "ln1.b", (d,), "zeros"),
                (p + "attn.wq", (d, d), "normal"), (p + "attn.wk", (d, d), "normal"),
                (p + "attn.wv", (d, d), "normal"), (p + "attn.wo", (d, d), "proj"),
                (p + "ln2.g", (d,), "ones"), (p + "ln2.b", (d,), "zeros"),
                (p + "ffn.w1", (d, f), "normal"), (p + "ffn.b1", (f,), "zeros"),
                (p + "ffn.w2", (f, d), "proj"), (p + "ffn.b2", (d,), "zeros"),
            ]
        shapes += [("ln_f.g", (d,), "ones"), ("ln_f.b", (d,), "zeros"), ("head", (d, c.vocab_size), "normal")]
        proj_std = init_std / np.sqrt(2 * c.n_layers)
        self.params: dict[str, Parameter] = {}
        for name, shape, kind in shapes:
            if kind == "ones":
                arr = np.ones(shape)
            elif kind == "zeros":
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, proj_std if kind == "proj" else init_std, size=shape)
            self.params[name] = Parameter(name, Tensor(arr.astype(self.dtype)), trainable=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def block(self, i: int) -> dict[str, Tensor]:
        p = f"layers.{i}."
        return {k: self.params[p + k].tensor for k in BLOCK_PARAMS}


def freeze(model: Backbone) -> None:
    for p in model.parameters():
        p.set_trainable(False)


def self_attention(h_norm: Tensor, block: dict[str, Tensor], n_heads: int, max_seq_len: int | None = None,
                   causal: bool = True) -> Tensor:
    """Multi-head scaled dot-product attention over ``(..., L, d)`` input."""
    squeeze = h_norm.ndim == 2
    x = h_norm.reshape((1,) + h_norm.shape) if squeeze else h_norm
    B, L, d = x.shape
    if max_seq_len is not None and L > max_seq_len:
        raise ad.DimensionError(f"sequence length {L} exceeds max_seq_len {max_seq_len}")
    dk = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, L, n_heads, dk).transpose(0, 2, 1, 3)

    q = heads(x @ block["attn.wq"])
    k = heads(x @ block["attn.wk"])
    v = heads(x @ block["attn.wv"])
    scores = ad.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / np.sqrt(dk))
    if causal:
        mask = np.triu(np.full((L, L), -np.inf, dtype=x.dtype), k=1)
        scores = scores + mask
    att = ad.softmax_lastdim(scores)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, d) @ block["attn.wo"]
    return out.reshape(out.shape[1:]) if squeeze else out


def feed_forward(x: Tensor, block: dict[str, Tensor]) -> Tensor:
    h = ad.silu(x @ block["ffn.w1"] + block["ffn.b1"])
    return h @ block["ffn.w2"] + block["ffn.b2"]


def block_forward(h_in: Tensor, block: dict[str, Tensor], config: BackboneConfig, adapter=None, seed=None):
    """One pre-LN block. Returns ``(output, trace, routing, modulation)``.

    With an adapter the attention output is replaced by its modulated form
    before it meets the residual stream.
    """
    from .adapters import hycam_forward

    h_norm = ad.layer_norm(h_in, block["ln1.g"], block["ln1.b"], config.layer_norm_eps)
    h_att = self_attention(h_norm, block, config.n_heads, config.max_seq_len)
    routing = modulation = None
    h_out = h_att
    if adapter is not None:
        h_out, routing, modulation = hycam_forward(h_norm, h_att, adapter, seed=seed)
    x = h_in + h_out
    x = x + feed_forward(ad.layer_norm(x, block["ln2.g"], block["ln2.b"], config.layer_norm_eps), block)
    return x, BlockTrace(h_norm, h_att), routing, modulation


def _layer_seed(seed, layer: int):
    if seed is None:
        return None
    base = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return tuple(base) + (layer,)


def forward(tokens, model: Backbone, adapters: "HyCamAdapters | None" = None, seed=None) -> ForwardOutput:
    """Full forward pass. ``seed`` enables Gumbel noise in the routers; ``None`` is deterministic."""
    c = model.config
    ids = np.asarray(tokens, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    B, L = ids.shape
    if L > c.max_seq_len:
        raise ad.DimensionError(f"sequence length {L} exceeds max_seq_len {c.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
        raise IndexError(f"token id out of range [0, {c.vocab_size})")
    if adapters is not None and len(adapters.layers) != c.n_layers:
        raise ad.DimensionError(f"{len(adapters.layers)} adapter layers for {c.n_layers} blocks")
    x = ad.embedding(model["tok_emb"], ids) + model["pos_emb"][:L]
    traces, routing, modulation = [], [], []
    for i in range(c.n_layers):
        layer = adapters.layers[i] if adapters is not None else None
        x, trace, r, m = block_forward(x, model.block(i), c, layer, _layer_seed(seed, i))
        traces.append(trace)
        routing.append(r)
        modulation.append(m)
    x = ad.layer_norm(x, model["ln_f.g"], model["ln_f.b"], c.layer_norm_eps)
    logits = x @ model["head"]
    if squeeze:
        logits = logits.reshape(logits.shape[1:])
    return ForwardOutput(logits, traces, routing, modulation)


def lm_forward(tokens, model: Backbone, adapters: "HyCamAdapters | None" = None, seed=None) -> Tensor:
    return forward(tokens, model, adapters, seed).logits


def parameter_bytes(params: Sequence[Parameter]) -> bytes:
    return b"".join(p.name.encode() + p.data.tobytes() for p in params)
