"""Expression labels and their spatial broadcast encoding."""

from __future__ import annotations

from dataclasses import dataclass

import torch

EXPRESSIONS = ("neutral", "happy", "sad", "angry")
NUM_EXPRESSIONS = len(EXPRESSIONS)


@dataclass(frozen=True)
class ExpressionLabel:
    """One-hot expression label of dimension ``dim``."""

    index: int
    dim: int = NUM_EXPRESSIONS

    def __post_init__(self):
        if not 0 <= self.index < self.dim:
            raise ValueError(f"label index {self.index} out of range [0, {self.dim})")

    @property
    def name(self) -> str:
        if self.dim == NUM_EXPRESSIONS:
            return EXPRESSIONS[self.index]
        return str(self.index)

    @property
    def onehot(self) -> torch.Tensor:
        v = torch.zeros(self.dim)
        v[self.index] = 1.0
        return v

    def broadcast(self, height: int, width: int | None = None) -> torch.Tensor:
        """Spatially constant (dim, H, W) encoding: 1s on the label channel."""
        if width is None:
            width = height
        return self.onehot[:, None, None].expand(self.dim, height, width).contiguous()

    @classmethod
    def from_name(cls, name: str, dim: int = NUM_EXPRESSIONS) -> "ExpressionLabel":
        try:
            return cls(EXPRESSIONS.index(name), dim)
        except ValueError:
            raise ValueError(f"unknown expression {name!r}; expected one of {EXPRESSIONS}") from None


def broadcast_batch(indices: torch.Tensor, dim: int, height: int, width: int | None = None) -> torch.Tensor:
    """Batch version: (B,) integer labels -> (B, dim, H, W) constant channels."""
    if width is None:
        width = height
    onehot = torch.zeros(indices.shape[0], dim, dtype=torch.get_default_dtype(), device=indices.device)
    onehot.scatter_(1, indices.view(-1, 1).long(), 1.0)
    return onehot[:, :, None, None].expand(-1, dim, height, width).contiguous()
