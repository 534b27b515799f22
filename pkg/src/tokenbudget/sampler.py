"""Per-frame spatial token sampling and projection into the LLM space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .nn import AttentionStack
from .selector import TextContext


@dataclass
class SpatialQueryBank:
    """Learnable embeddings for the tokens sampled from each frame."""

    embeddings: Tensor  # n_spatial x d

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise DimensionError(
                f"SpatialQueryBank needs at least one query row, got {self.embeddings.shape}"
            )

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[0]

    @classmethod
    def create(cls, rng: np.random.Generator, n_spatial: int, dim: int) -> "SpatialQueryBank":
        return cls(Tensor(rng.standard_normal((n_spatial, dim)) / np.sqrt(dim), requires_grad=True))


@dataclass
class Projection:
    """Single affine map, no activation."""

    weight: Tensor  # d x d_out
    bias: Tensor    # d_out

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1 or self.bias.shape[0] != self.weight.shape[1]:
            raise DimensionError(
                f"Projection: weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @classmethod
    def create(cls, rng: np.random.Generator, d_in: int, d_out: int) -> "Projection":
        return cls(
            Tensor(rng.standard_normal((d_in, d_out)) / np.sqrt(d_in), requires_grad=True),
            Tensor(np.zeros(d_out), requires_grad=True),
        )


def spatial_sample(
    frame_tokens: Tensor,
    text: TextContext,
    bank: SpatialQueryBank,
    net: AttentionStack,
    positions: Tensor | None = None,
) -> Tensor:
    """Sample ``bank.n_tokens`` rows from one frame's body tokens.

    The same query-network architecture as frame selection, with the
    frame's body tokens as cross-attention keys/values.  Keys carry no
    positions by default (output is invariant to their order);
    ``positions`` adds a learned table for experiments.
    """
    if frame_tokens.ndim != 2:
        raise DimensionError(f"spatial_sample expects 2-d frame tokens, got {frame_tokens.shape}")
    d = bank.embeddings.shape[1]
    if frame_tokens.shape[1] != d or text.dim != d:
        raise ConfigError(
            f"dim mismatch: frame tokens {frame_tokens.shape}, text {text.tokens.shape}, bank dim {d}"
        )
    if bank.n_tokens > frame_tokens.shape[0]:
        raise ConfigError(
            f"cannot sample {bank.n_tokens} tokens from a frame holding {frame_tokens.shape[0]}"
        )
    if positions is not None:
        if positions.shape != frame_tokens.shape:
            raise DimensionError(
                f"positions {positions.shape} do not match frame tokens {frame_tokens.shape}"
            )
        frame_tokens = frame_tokens + positions
    return net.forward(bank.embeddings, text.tokens, frame_tokens)


def project(tokens: Tensor, proj: Projection) -> Tensor:
    """Affine map into the target feature space; accepts zero rows."""
    if tokens.ndim != 2 or tokens.shape[1] != proj.weight.shape[0]:
        raise DimensionError(
            f"project: tokens {tokens.shape} do not match weight {proj.weight.shape}"
        )
    return ad.add_bias(tokens @ proj.weight, proj.bias)


def assemble_sequence(
    projected: list[Tensor], text: TextContext, text_proj: Projection | None = None
) -> Tensor:
    """Concatenate the per-frame token blocks, frame order, then the text rows.

    Text passes through unchanged when its width already matches;
    otherwise ``text_proj`` maps it into the same space.
    """
    d_out = projected[0].shape[1] if projected else (
        text_proj.weight.shape[1] if text_proj is not None else text.dim
    )
    if text.dim != d_out:
        if text_proj is None:
            raise ConfigError(
                f"text dim {text.dim} differs from sequence dim {d_out} and no text projection given"
            )
        text_rows = project(text.tokens, text_proj)
    else:
        text_rows = text.tokens
    return ad.concat_rows(list(projected) + [text_rows])
