"""Central finite-difference check of analytic adapter gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import AdapterConfig, HyCamAdapters
from .autodiff import Parameter
from .backbone import Backbone, BackboneConfig, freeze
from .taskgen import VOCAB, batchify, generate, TASKS
from .training import compute_losses

REL_TOL = 1e-4
ABS_TOL = 1e-7


def numerical_gradient(fn: Callable[[], float], param: Parameter, step: float = 1e-5) -> np.ndarray:
    w = param.tensor.data
    grad = np.zeros_like(w, dtype=np.float64)
    it = np.nditer(w, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = w[i]
        w[i] = old + step
        fp = fn()
        w[i] = old - step
        fm = fn()
        w[i] = old
        grad[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, ABS_TOL / REL_TOL)``.

    The floor turns the relative bound into the absolute one for tiny
    gradients, so ``error <= REL_TOL`` means ``|a - n| <= max(REL_TOL*|n|, ABS_TOL)``.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_TOL / REL_TOL)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


@dataclass
class GradcheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = REL_TOL

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def failures(self) -> list[str]:
        return [n for n, e in self.errors.items() if not e <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_text(self) -> str:
        lines = [f"{name} {err:.3e} {'ok' if err <= self.tolerance else 'FAIL'}" for name, err in self.errors.items()]
        lines.append(f"max_relative_error {self.max_error:.3e}")
        lines.append("PASS" if self.passed else "FAIL " + " ".join(self.failures))
        return "\n".join(lines) + "\n"


def check_gradients(fn: Callable[[], "ad.Tensor"], params: Sequence[Parameter], step: float = 1e-5) -> GradcheckReport:
    """Compare ``backward`` of ``fn()`` against central differences for each parameter."""
    ad.zero_grads(params)
    ad.backward(fn())

    def value() -> float:
        with ad.no_grad():
            return fn().item()

    report = GradcheckReport()
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        report.errors[p.name] = relative_error(analytic.astype(np.float64), numerical_gradient(value, p, step))
    return report


TINY_BACKBONE = BackboneConfig(vocab_size=len(VOCAB), d_model=16, n_layers=2, n_heads=2, d_ff=32, max_seq_len=24)


def tiny_gradcheck(variant: str = "full-hybrid", rank: int = 4, n_specialists: int = 3, tau: float = 0.5,
                   lambda_balance: float = 0.1, seed: int = 0, n_samples: int = 5,
                   backbone: BackboneConfig = TINY_BACKBONE) -> GradcheckReport:
    """Gradient check of every adapter parameter on a tiny frozen model and a fixed batch.

    Routing is deterministic. Adapter weights are randomised first so that
    no factor sits at its zero initialisation, which would hide errors in the
    paths it gates.
    """
    if backbone.d_model > 16 or backbone.n_layers > 2 or n_specialists > 3:
        raise ValueError("gradcheck model must have d <= 16, <= 2 layers and N_s <= 3")
    model = Backbone(backbone, seed=seed, precision="fp64", init_std=0.3)
    freeze(model)
    adapters = HyCamAdapters(backbone.n_layers, backbone.d_model,
                             AdapterConfig(variant, rank, n_specialists, tau, lambda_balance),
                             seed=seed + 1, precision="fp64")
    rng = np.random.default_rng([seed, 7])
    for p in adapters.parameters():
        p.tensor.data[...] = rng.normal(0.0, 0.3, size=p.shape)
    samples = [generate(t, 1, seed, (2, 3))[0] for t in TASKS][:n_samples]
    batch = batchify(samples)[0]
    return check_gradients(lambda: compute_losses(model, adapters, batch, lambda_balance, seed=None)[2],
                           adapters.parameters())
