"""Contextual attention modulation adapters: shared CAM, SLoRA specialists, router.

A CAM turns the normalised block input into a per-channel gate,
``A = SiLU(h_norm W)``, and applies it to the attention output as
``h_out = h_att + h_att * A``. The hybrid layer adds ``N_s`` low-rank
specialists whose gates are fused per token by Gumbel-Softmax routing
weights. Every variant starts as an exact identity on ``h_att``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Parameter, Tensor
from .backbone import ConfigError

VARIANTS = ("full-hybrid", "shared-only", "spec-only", "full-spec", "inverse-peft")


@dataclass(frozen=True)
class AdapterConfig:
    variant: str = "full-hybrid"
    rank: int = 8
    n_specialists: int = 5
    tau: float = 0.5
    lambda_balance: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"adapter.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.rank < 1:
            raise ConfigError("adapter.rank must be >= 1")
        if self.n_specialists < 1:
            raise ConfigError("adapter.n_specialists must be >= 1")
        if not self.tau > 0:
            raise ConfigError("adapter.tau must be > 0")
        if not self.lambda_balance >= 0:
            raise ConfigError("adapter.lambda_balance must be >= 0")

    def check_against(self, d_model: int) -> None:
        if self.rank >= d_model:
            raise ConfigError(f"adapter.rank must be < d_model ({d_model}), got {self.rank}")

    @property
    def routed(self) -> bool:
        return self.variant != "shared-only"

    def to_dict(self) -> dict:
        return asdict(self)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, int], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class FullCam:
    """Full-parameter CAM projection, ``W`` of shape ``d x d``, zero at init."""

    kind = "dense"

    def __init__(self, prefix: str, d: int, dtype):
        self.W = Parameter(prefix + ".W", Tensor(np.zeros((d, d), dtype=dtype)))

    def parameters(self) -> list[Parameter]:
        return [self.W]

    def project(self, h: Tensor) -> Tensor:
        return h @ self.W.tensor

    def effective_weight(self) -> np.ndarray:
        return self.W.data.copy()


class SloraCam:
    """Three-factor low-rank CAM projection ``B N A``.

    ``A`` (r x d) maps the hidden state down, ``N`` (r x r) mixes inside the
    low-rank space and ``B`` (d x r) maps back up. ``A`` and ``N`` are
    Kaiming-uniform, ``B`` is zero so the gate starts at exactly 0.
    """

    kind = "slora"

    def __init__(self, prefix: str, d: int, r: int, rng: np.random.Generator, dtype):
        if not r < d:
            raise ConfigError(f"adapter.rank must be < d_model ({d}), got {r}")
        self.rank = r
        self.A = Parameter(prefix + ".A", Tensor(kaiming_uniform(rng, (r, d), d).astype(dtype)))
        self.N = Parameter(prefix + ".N", Tensor(kaiming_uniform(rng, (r, r), r).astype(dtype)))
        self.B = Parameter(prefix + ".B", Tensor(np.zeros((d, r), dtype=dtype)))

    def parameters(self) -> list[Parameter]:
        return [self.A, self.N, self.B]

    def project(self, h: Tensor) -> Tensor:
        # d -> r -> r -> d, never forming the d x d product
        z = h @ ad.transpose(self.A.tensor)
        z = z @ ad.transpose(self.N.tensor)
        return z @ ad.transpose(self.B.tensor)

    def effective_weight(self) -> np.ndarray:
        """Dense ``B @ N @ A``; the chained projection equals ``h @ W.T``."""
        return self.B.data @ self.N.data @ self.A.data


# the two roles named after the hybrid design; variants swap their structure
SharedCam = FullCam
SpecializedCam = SloraCam


class Router:
    def __init__(self, prefix: str, d: int, n_specialists: int, tau: float, dtype):
        if not tau > 0:
            raise ConfigError("adapter.tau must be > 0")
        if n_specialists < 1:
            raise ConfigError("adapter.n_specialists must be >= 1")
        self.tau = float(tau)
        self.n_specialists = n_specialists
        self.W = Parameter(prefix + ".W", Tensor(np.zeros((d, n_specialists), dtype=dtype)))

    def parameters(self) -> list[Parameter]:
        return [self.W]


class RoutingOutput(NamedTuple):
    logits: Tensor
    p: Tensor
    softmax_plain: Tensor


class HyCamResult(NamedTuple):
    h_out: Tensor
    routing: RoutingOutput | None
    modulation: Tensor


class HyCamLayer:
    """Adapter bundle attached to one transformer block."""

    def __init__(self, index: int, d: int, config: AdapterConfig, rng: np.random.Generator, dtype=np.float32):
        config.check_against(d)
        self.index = index
        self.d = d
        self.config = config
        self.variant = config.variant
        prefix = f"layers.{index}.hycam"
        v, r, ns = config.variant, config.rank, config.n_specialists

        self.shared: FullCam | SloraCam | None = None
        if v in ("full-hybrid", "shared-only", "full-spec"):
            self.shared = FullCam(prefix + ".shared", d, dtype)
        elif v == "inverse-peft":
            self.shared = SloraCam(prefix + ".shared", d, r, rng, dtype)

        self.specialists: list[FullCam | SloraCam] = []
        if v in ("full-hybrid", "spec-only"):
            self.specialists = [SloraCam(f"{prefix}.spec.{k}", d, r, rng, dtype) for k in range(ns)]
        elif v in ("full-spec", "inverse-peft"):
            self.specialists = [FullCam(f"{prefix}.spec.{k}", d, dtype) for k in range(ns)]

        self.router = Router(prefix + ".router", d, ns, config.tau, dtype) if config.routed else None

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        if self.shared is not None:
            out += self.shared.parameters()
        for s in self.specialists:
            out += s.parameters()
        if self.router is not None:
            out += self.router.parameters()
        return out


class HyCamAdapters:
    """One :class:`HyCamLayer` per transformer block."""

    def __init__(self, n_layers: int, d: int, config: AdapterConfig, seed: int = 0, precision: str = "fp32"):
        self.config = config
        self.precision = precision
        dtype = ad.dtype_for(precision)
        rng = np.random.default_rng(seed)
        self.layers = [HyCamLayer(i, d, config, rng, dtype) for i in range(n_layers)]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    @property
    def params(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}


# --------------------------------------------------------------------------- #
# operations


def _check_width(h: Tensor, d: int) -> None:
    if h.shape[-1] != d:
        raise DimensionError(f"hidden width {h.shape[-1]} does not match adapter width {d}")


def shared_modulation(h_norm: Tensor, shared: FullCam | SloraCam) -> Tensor:
    return ad.silu(shared.project(h_norm))


def specialized_modulation(h_norm: Tensor, spec: FullCam | SloraCam) -> Tensor:
    return ad.silu(spec.project(h_norm))


def effective_weight(spec: FullCam | SloraCam) -> np.ndarray:
    return spec.effective_weight()


def gumbel_noise(shape: tuple[int, ...], seed, dtype) -> np.ndarray:
    rng = np.random.default_rng(seed)
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return (-np.log(-np.log(u))).astype(dtype)


def route(h_norm: Tensor, router: Router, seed=None) -> RoutingOutput:
    """Router logits and soft weights.

    With a seed, ``p = softmax((logits + g) / tau)`` with Gumbel(0, 1) noise
    ``g`` drawn per token; without one ``g = 0``. ``softmax_plain`` is the
    noise-free, untempered softmax of the logits.
    """
    logits = h_norm @ router.W.tensor
    z = logits
    if seed is not None:
        z = z + gumbel_noise(logits.shape, seed, logits.dtype)
    p = ad.softmax_lastdim(ad.scale(z, 1.0 / router.tau))
    return RoutingOutput(logits, p, ad.softmax_lastdim(logits))


def load_balance_loss(routing: RoutingOutput, token_mask=None) -> Tensor:
    """``sum_k mean_b(p[b, k]) * mean_b(softmax_plain[b, k])`` over real tokens."""
    n = routing.p.shape[-1]
    p = routing.p.reshape(-1, n)
    q = routing.softmax_plain.reshape(-1, n)
    if token_mask is None:
        count = p.shape[0]
        sp, sq = p.sum(axis=0), q.sum(axis=0)
    else:
        m = np.asarray(token_mask, dtype=p.dtype).reshape(-1, 1)
        count = float(m.sum())
        if count == 0:
            raise ad.EmptyLossError("load_balance_loss: no tokens")
        sp, sq = (p * m).sum(axis=0), (q * m).sum(axis=0)
    return ad.scale(ad.mul(sp, sq).sum(), 1.0 / (count * count))


def fuse(shared_mod: Tensor | None, spec_mods: Sequence[Tensor], p: Tensor | None) -> Tensor:
    """``A_shared + sum_k p_k * A_spec_k`` with ``p`` applied per token."""
    if p is not None and len(spec_mods) != p.shape[-1]:
        raise DimensionError(f"{len(spec_mods)} specialist modulations for {p.shape[-1]} routing weights")
    out = shared_mod
    for k, mod in enumerate(spec_mods):
        term = ad.mul(p[..., k:k + 1], mod)
        out = term if out is None else out + term
    if out is None:
        raise DimensionError("fuse needs a shared modulation or at least one specialist")
    return out


def apply_modulation(h_att: Tensor, a_fusion: Tensor) -> Tensor:
    return h_att + ad.hadamard(h_att, a_fusion)


def hycam_forward(h_norm: Tensor, h_att: Tensor, layer: HyCamLayer, seed=None) -> HyCamResult:
    _check_width(h_norm, layer.d)
    shared_mod = shared_modulation(h_norm, layer.shared) if layer.shared is not None else None
    routing = None
    spec_mods: list[Tensor] = []
    if layer.router is not None:
        routing = route(h_norm, layer.router, seed)
        spec_mods = [specialized_modulation(h_norm, s) for s in layer.specialists]
    a_fusion = fuse(shared_mod, spec_mods, routing.p if routing is not None else None)
    return HyCamResult(apply_modulation(h_att, a_fusion), routing, a_fusion)


def adapter_param_count(variant: str, d: int, r: int, n_specialists: int) -> int:
    """Trainable parameters of one layer, from the shape formulas."""
    lowrank = 2 * d * r + r * r
    dense = d * d
    router = d * n_specialists
    counts = {
        "full-hybrid": dense + n_specialists * lowrank + router,
        "shared-only": dense,
        "spec-only": n_specialists * lowrank + router,
        "full-spec": dense + n_specialists * dense + router,
        "inverse-peft": lowrank + n_specialists * dense + router,
    }
    try:
        return counts[variant]
    except KeyError:
        raise ConfigError(f"adapter.variant must be one of {VARIANTS}, got {variant!r}") from None
