"""Adversarial, classification and reconstruction losses and their weighted sum.

The adversarial objective is the written log-loss with a non-saturating
generator side; sigmoids are clamped at 1e-7 so every term is finite and
bounded below by zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import NumericError

NETWORK_KEYS = ("global", "fusion", "le", "re", "n", "m")
LOCAL_KEYS = ("le", "re", "n", "m")

_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    cls: float = 1.0
    rec: float = 10.0
    per_network: dict[str, float] = field(
        default_factory=lambda: {"global": 1.0, "fusion": 1.0, "local": 1.0}
    )

    def __post_init__(self):
        for name, value in (("adv", self.adv), ("cls", self.cls), ("rec", self.rec)):
            if not (value >= 0 and value == value and value != float("inf")):
                raise ValueError(f"weight {name} must be finite and >= 0, got {value}")
        missing = {"global", "fusion", "local"} - set(self.per_network)
        if missing:
            raise ValueError(f"per_network weights missing keys: {sorted(missing)}")
        for key, value in self.per_network.items():
            if not (value >= 0 and value == value and value != float("inf")):
                raise ValueError(f"per_network weight {key!r} must be finite and >= 0, got {value}")

    def network_weight(self, key: str) -> float:
        return self.per_network["local" if key in LOCAL_KEYS else key]


@dataclass
class NetworkLosses:
    adv_d: float = 0.0
    adv_g: float = 0.0
    cls_d: float = 0.0
    cls_g: float = 0.0
    rec: float = 0.0


@dataclass
class LossReport:
    per_network: dict[str, NetworkLosses]
    total_d: float
    total_g: float


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")


def _log_sigmoid(logits: torch.Tensor) -> torch.Tensor:
    return torch.log(torch.sigmoid(logits).clamp(min=_EPS, max=1 - _EPS))


def _log_one_minus_sigmoid(logits: torch.Tensor) -> torch.Tensor:
    return torch.log((1 - torch.sigmoid(logits)).clamp(min=_EPS, max=1 - _EPS))


def adv_loss_d(
    realness_real: dict[str, torch.Tensor], realness_fake: dict[str, torch.Tensor]
) -> torch.Tensor:
    """-[E log sigma(D(real)) + E log(1 - sigma(D(fake)))], summed over networks."""
    total = None
    for key, real in realness_real.items():
        fake = realness_fake[key]
        _check_finite(real, f"realness_real[{key}]")
        _check_finite(fake, f"realness_fake[{key}]")
        term = -(_log_sigmoid(real).mean() + _log_one_minus_sigmoid(fake).mean())
        total = term if total is None else total + term
    if total is None:
        raise ValueError("adv_loss_d called with no realness maps")
    return total


def adv_loss_g(realness_fake: dict[str, torch.Tensor]) -> torch.Tensor:
    """Non-saturating generator loss: -E log sigma(D(fake)), summed over networks."""
    total = None
    for key, fake in realness_fake.items():
        _check_finite(fake, f"realness_fake[{key}]")
        term = -_log_sigmoid(fake).mean()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("adv_loss_g called with no realness maps")
    return total


def cls_loss(class_logits: torch.Tensor, target) -> torch.Tensor:
    """Mean NLL of the target label under the softmax of the class logits."""
    d = class_logits.shape[1]
    if d < 2:
        raise ValueError(f"need label dim >= 2, got {d}")
    if isinstance(target, torch.Tensor):
        idx = target.long()
    else:
        idx = torch.full((class_logits.shape[0],), target.index, dtype=torch.long)
    if int(idx.max()) >= d or int(idx.min()) < 0:
        raise ValueError(f"target index out of range [0, {d})")
    _check_finite(class_logits, "class logits")
    return F.cross_entropy(class_logits, idx)


def rec_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    if original.shape != reconstructed.shape:
        raise ValueError(
            f"shape mismatch: {tuple(original.shape)} vs {tuple(reconstructed.shape)}"
        )
    return (original - reconstructed).abs().mean()


def total_loss(components: dict[str, NetworkLosses], weights: LossWeights) -> LossReport:
    """Weighted overall objective, computed separately for the discriminator
    and generator sides."""
    missing = [k for k in NETWORK_KEYS if k not in components]
    if missing:
        raise ValueError(f"missing loss components for networks: {', '.join(missing)}")
    total_d = 0.0
    total_g = 0.0
    for key in NETWORK_KEYS:
        comp = components[key]
        lam = weights.network_weight(key)
        total_d += lam * (weights.adv * comp.adv_d + weights.cls * comp.cls_d)
        total_g += lam * (weights.adv * comp.adv_g + weights.cls * comp.cls_g + weights.rec * comp.rec)
    return LossReport(per_network=dict(components), total_d=total_d, total_g=total_g)
