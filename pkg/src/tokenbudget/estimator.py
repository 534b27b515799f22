"""Scikit-learn style wrapper so the pipeline composes with that ecosystem.

``fit`` initializes (and optionally trains) the parameters, ``transform``
compresses video/text pairs into LLM-ready sequences, and ``predict``
returns the selected frame indices.  Hyperparameters live verbatim on the
instance, so ``get_params``/``set_params``/``clone`` behave as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .autodiff import Tensor
from .pipeline import PipelineConfig, PipelineParams, SynthInstance, run, train_toy
from .selector import TextContext, VideoTokens


def as_video(video) -> VideoTokens:
    """Accept VideoTokens or a (cls, body) array pair."""
    if isinstance(video, VideoTokens):
        return video
    cls, body = video
    return VideoTokens(cls=Tensor(np.asarray(cls)), body=Tensor(np.asarray(body)))


def as_text(text) -> TextContext:
    if isinstance(text, TextContext):
        return text
    return TextContext(tokens=Tensor(np.asarray(text)))


class TokenBudgetReducer(BaseEstimator, TransformerMixin):
    """Compress video token sequences under a hard visual-token budget.

    Parameters mirror PipelineConfig; ``steps``/``lr`` control the
    optional toy training pass performed by fit when given instances.
    """

    def __init__(
        self,
        select_frames: int = 8,
        spatial_tokens: int = 8,
        budget: int = 2048,
        temperature: float = 0.5,
        dup_threshold: float = 0.9,
        mode: str = "soft",
        seed: int = 0,
        dim: int = 32,
        llm_dim: int = 128,
        layers: int = 2,
        heads: int = 4,
        scale_logits: bool = False,
        temporal_positions: bool = False,
        spatial_positions: bool = False,
        steps: int = 0,
        lr: float = 0.05,
    ):
        self.select_frames = select_frames
        self.spatial_tokens = spatial_tokens
        self.budget = budget
        self.temperature = temperature
        self.dup_threshold = dup_threshold
        self.mode = mode
        self.seed = seed
        self.dim = dim
        self.llm_dim = llm_dim
        self.layers = layers
        self.heads = heads
        self.scale_logits = scale_logits
        self.temporal_positions = temporal_positions
        self.spatial_positions = spatial_positions
        self.steps = steps
        self.lr = lr

    def _config(self) -> PipelineConfig:
        return PipelineConfig(
            select_frames=self.select_frames,
            spatial_tokens=self.spatial_tokens,
            budget=self.budget,
            temperature=self.temperature,
            dup_threshold=self.dup_threshold,
            mode=self.mode,
            seed=self.seed,
            dim=self.dim,
            llm_dim=self.llm_dim,
            layers=self.layers,
            heads=self.heads,
            scale_logits=self.scale_logits,
            temporal_positions=self.temporal_positions,
            spatial_positions=self.spatial_positions,
        )

    def fit(self, X=None, y=None):
        """Initialize parameters; train the selector when X holds instances.

        X may be None (seeded init only) or a list of SynthInstance; with
        ``steps`` > 0 the toy trainer runs over them.
        """
        cfg = self._config()
        frame_tokens = None
        if self.spatial_positions and X:
            frame_tokens = X[0].video.tokens_per_frame
        self.config_ = cfg
        self.params_ = PipelineParams.create(cfg, frame_tokens=frame_tokens)
        self.history_ = None
        if X and self.steps > 0:
            instances = list(X)
            if not all(isinstance(i, SynthInstance) for i in instances):
                raise TypeError("fit expects SynthInstance items")
            self.history_ = train_toy(instances, self.params_, cfg, self.steps, self.lr)
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit before transform/predict")

    def transform(self, X) -> list[np.ndarray]:
        """Compress each (video, text) pair; returns the output sequences."""
        self._check_fitted()
        out = []
        for video, text in X:
            sequence, _ = run(as_video(video), as_text(text), self.params_, self.config_)
            out.append(sequence.data)
        return out

    def transform_one(self, video, text):
        """Single pair, returning (sequence, trace)."""
        self._check_fitted()
        sequence, trace = run(as_video(video), as_text(text), self.params_, self.config_)
        return sequence.data, trace

    def predict(self, X) -> list[np.ndarray]:
        """Selected source-frame index per perspective, for each pair."""
        self._check_fitted()
        out = []
        for video, text in X:
            _, trace = run(as_video(video), as_text(text), self.params_, self.config_)
            out.append(np.asarray(trace.selected_frames))
        return out
