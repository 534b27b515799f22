"""Text-conditioned frame selection.

Queries generated from the per-frame [CLS] tokens and the text context
score every frame; Gumbel-Softmax turns the score matrix into a
row-stochastic selection matrix whose rows blend (soft) or pick (hard)
source frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .nn import AttentionStack

MODES = ("soft", "hard", "deterministic")

# Uniform draws are clamped away from {0, 1} before the double log.
_U_CLAMP = 1e-12


@dataclass
class VideoTokens:
    """Per-frame embeddings: one [CLS] row per frame plus M body tokens."""

    cls: Tensor   # L x d
    body: Tensor  # L x M x d

    def __post_init__(self):
        if self.cls.ndim != 2 or self.body.ndim != 3:
            raise DimensionError(
                f"VideoTokens: cls must be 2-d and body 3-d, got {self.cls.shape} and {self.body.shape}"
            )
        if self.body.shape[0] != self.cls.shape[0] or self.body.shape[2] != self.cls.shape[1]:
            raise DimensionError(
                f"VideoTokens: cls {self.cls.shape} and body {self.body.shape} disagree"
            )
        if self.frames < 1 or self.tokens_per_frame < 1:
            raise DimensionError("VideoTokens needs at least one frame and one body token")

    @property
    def frames(self) -> int:
        return self.cls.shape[0]

    @property
    def tokens_per_frame(self) -> int:
        return self.body.shape[1]

    @property
    def dim(self) -> int:
        return self.cls.shape[1]


@dataclass
class TextContext:
    """Pre-embedded text rows; no tokenizer lives in this package."""

    tokens: Tensor  # N x d

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise DimensionError(f"TextContext needs an N x d matrix, got {self.tokens.shape}")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class QueryBank:
    """Learnable seed embeddings, one row per selection perspective."""

    embeddings: Tensor  # n_select x d

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise DimensionError(f"QueryBank needs at least one query row, got {self.embeddings.shape}")

    @classmethod
    def create(cls, rng: np.random.Generator, n_select: int, dim: int) -> "QueryBank":
        return cls(Tensor(rng.standard_normal((n_select, dim)) / np.sqrt(dim), requires_grad=True))


@dataclass
class SelectionMatrix:
    """Row-stochastic frame weights, one row per perspective.

    ``weights`` is what the forward pass consumes (one-hot rows in hard
    mode); ``soft`` keeps the relaxed rows that carry gradients, and
    ``perturbed`` the temperature-scaled noisy logits they came from.
    """

    weights: Tensor
    tau: float
    mode: str
    soft: Tensor = field(repr=False, default=None)
    perturbed: Tensor = field(repr=False, default=None)

    @property
    def argmax(self) -> np.ndarray:
        """Selected source frame per perspective."""
        return self.weights.data.argmax(axis=1)


def sample_gumbel(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(shape), _U_CLAMP, 1.0 - _U_CLAMP)
    return -np.log(-np.log(u))


def gumbel_softmax(
    logits: Tensor,
    tau: float,
    mode: str = "soft",
    rng: np.random.Generator | int | None = None,
    noise: np.ndarray | None = None,
    hard_indices: np.ndarray | None = None,
) -> SelectionMatrix:
    """Relaxed categorical sampling over each logit row.

    soft: rows are softmax((logits + g) / tau) with Gumbel noise g.
    hard: rows are one-hot at argmax(logits + g); gradients pass through
          the soft rows (straight-through).
    deterministic: g = 0, so rows are softmax(logits / tau).

    ``noise`` substitutes for the sampled Gumbel draws, and
    ``hard_indices`` pins hard-mode picks, for replaying a recorded run.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown selection mode {mode!r}, expected one of {MODES}")
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    if logits.ndim != 2:
        raise DimensionError(f"gumbel_softmax expects 2-d logits, got {logits.shape}")
    if noise is None:
        if mode == "deterministic":
            noise = np.zeros(logits.shape)
        else:
            if not isinstance(rng, np.random.Generator):
                rng = np.random.default_rng(rng)
            noise = sample_gumbel(logits.shape, rng)
    perturbed = ad.scale(ad.add(logits, Tensor(noise)), 1.0 / tau)
    soft = ad.softmax_rows(perturbed)
    if mode == "hard":
        picks = soft.data.argmax(axis=1) if hard_indices is None else np.asarray(hard_indices)
        one_hot = np.zeros(soft.shape)
        one_hot[np.arange(soft.shape[0]), picks] = 1.0
        weights = ad.straight_through(soft, one_hot)
    else:
        weights = soft
    return SelectionMatrix(weights=weights, tau=tau, mode=mode, soft=soft, perturbed=perturbed)


def generate_queries(
    bank: QueryBank, text: TextContext, cls: Tensor, net: AttentionStack
) -> Tensor:
    """Refine the bank's query rows against the text and [CLS] tokens."""
    d = bank.embeddings.shape[1]
    if text.dim != d or cls.shape[1] != d:
        raise ConfigError(
            f"dim mismatch: queries {bank.embeddings.shape}, text {text.tokens.shape}, cls {cls.shape}"
        )
    return net.forward(bank.embeddings, text.tokens, cls)


def selection_logits(queries: Tensor, cls: Tensor, scaled: bool = False) -> Tensor:
    """Inner products between query rows and [CLS] rows.

    Unscaled by default, exactly as the selection equation writes the
    product; ``scaled`` divides by sqrt(d) for experiments.
    """
    if queries.shape[1] != cls.shape[1]:
        raise DimensionError(f"queries {queries.shape} and cls {cls.shape} disagree on dim")
    logits = queries @ ad.transpose(cls)
    if scaled:
        logits = ad.scale(logits, 1.0 / np.sqrt(queries.shape[1]))
    return logits


def select_frames(selection: SelectionMatrix, video: VideoTokens) -> Tensor:
    """Blend source frames by the selection weights.

    Each output frame is the weighted combination of the per-frame
    [CLS]+body stacks; a one-hot row copies its source frame bit-exactly.
    Returns an n_select x (M+1) x d tensor.
    """
    if selection.weights.shape[1] != video.frames:
        raise DimensionError(
            f"selection has {selection.weights.shape[1]} columns but video has {video.frames} frames"
        )
    m, d = video.tokens_per_frame, video.dim
    flat_body = ad.reshape(video.body, (video.frames, m * d))
    per_frame = ad.concat_cols([video.cls, flat_body])  # L x ((M+1) d)
    blended = selection.weights @ per_frame
    return ad.reshape(blended, (selection.weights.shape[0], m + 1, d))
