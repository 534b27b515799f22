"""End-to-end orchestration: config, dataflow, synthetic data, toy training.

The dataflow is select -> dedup-merge -> spatially sample -> halve to
budget -> project -> assemble.  A PipelineTrace records every discrete
decision so a run can be replayed with those decisions frozen, which is
what the gradient checks rely on.
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import autodiff as ad
from . import bvtk
from .autodiff import Tensor
from .errors import ConfigError, TrainingError
from .merger import MergeGroups, enforce_budget, find_duplicate_groups, temporal_merge
from .nn import AttentionStack, sinusoidal_positions
from .sampler import Projection, SpatialQueryBank, assemble_sequence, project, spatial_sample
from .selector import (
    MODES,
    QueryBank,
    TextContext,
    VideoTokens,
    generate_queries,
    gumbel_softmax,
    select_frames,
    selection_logits,
)


@dataclass
class PipelineConfig:
    """Every pipeline hyperparameter, with desk-scale defaults.

    ``select_frames`` and ``spatial_tokens`` default to 8 each and the
    temperature to 0.5; the budget default of 2048 mirrors the context
    pressure the pipeline exists to relieve.
    """

    select_frames: int = 8
    spatial_tokens: int = 8
    budget: int = 2048
    temperature: float = 0.5
    dup_threshold: float = 0.9
    mode: str = "soft"
    seed: int = 0
    dim: int = 32
    llm_dim: int = 128
    layers: int = 2
    heads: int = 4
    scale_logits: bool = False
    temporal_positions: bool = False
    spatial_positions: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.select_frames < 1:
            raise ConfigError(f"select_frames must be >= 1, got {self.select_frames}")
        if self.spatial_tokens < 1:
            raise ConfigError(f"spatial_tokens must be >= 1, got {self.spatial_tokens}")
        if self.budget < self.select_frames:
            raise ConfigError(
                f"budget ({self.budget}) must cover at least one token per selected frame ({self.select_frames})"
            )
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 < self.dup_threshold <= 1.0:
            raise ConfigError(f"dup_threshold must be in (0, 1], got {self.dup_threshold}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dim < 1 or self.llm_dim < 1:
            raise ConfigError(f"dims must be >= 1, got dim={self.dim} llm_dim={self.llm_dim}")
        if self.layers < 1 or self.heads < 1:
            raise ConfigError(f"layers and heads must be >= 1, got {self.layers}, {self.heads}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)


@dataclass
class PipelineParams:
    """All learnable state: two query banks, two stacks, the projections."""

    query_bank: QueryBank
    selector_stack: AttentionStack
    spatial_bank: SpatialQueryBank
    sampler_stack: AttentionStack
    visual_proj: Projection
    text_proj: Projection | None = None
    spatial_positions: Tensor | None = None

    @classmethod
    def create(cls, cfg: PipelineConfig, frame_tokens: int | None = None) -> "PipelineParams":
        """Seeded initialization for the given config.

        ``frame_tokens`` (M) is only needed when learned spatial positions
        are enabled, since that table has one row per frame token.
        """
        rng = np.random.default_rng(cfg.seed)
        positions = None
        if cfg.spatial_positions:
            if frame_tokens is None:
                raise ConfigError("spatial_positions requires frame_tokens (M) at init time")
            positions = Tensor(
                rng.standard_normal((frame_tokens, cfg.dim)) / np.sqrt(cfg.dim), requires_grad=True
            )
        return cls(
            query_bank=QueryBank.create(rng, cfg.select_frames, cfg.dim),
            selector_stack=AttentionStack.create(rng, cfg.layers, cfg.heads, cfg.dim),
            spatial_bank=SpatialQueryBank.create(rng, cfg.spatial_tokens, cfg.dim),
            sampler_stack=AttentionStack.create(rng, cfg.layers, cfg.heads, cfg.dim),
            visual_proj=Projection.create(rng, cfg.dim, cfg.llm_dim),
            text_proj=Projection.create(rng, cfg.dim, cfg.llm_dim) if cfg.dim != cfg.llm_dim else None,
            spatial_positions=positions,
        )

    def named_tensors(self) -> dict[str, Tensor]:
        named = {"selector.bank.embeddings": self.query_bank.embeddings}
        for key, t in self.selector_stack.parameters().items():
            named[f"selector.stack.{key}"] = t
        named["sampler.bank.embeddings"] = self.spatial_bank.embeddings
        for key, t in self.sampler_stack.parameters().items():
            named[f"sampler.stack.{key}"] = t
        named["projection.visual.weight"] = self.visual_proj.weight
        named["projection.visual.bias"] = self.visual_proj.bias
        if self.text_proj is not None:
            named["projection.text.weight"] = self.text_proj.weight
            named["projection.text.bias"] = self.text_proj.bias
        if self.spatial_positions is not None:
            named["sampler.positions"] = self.spatial_positions
        return named

    def selector_tensors(self) -> dict[str, Tensor]:
        """The parameters the toy trainer updates."""
        return {
            name: t
            for name, t in self.named_tensors().items()
            if name.startswith("selector.")
        }

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Swap in new values for any subset of named parameters."""
        selector_state = {}
        sampler_state = {}
        for name, value in state.items():
            if name == "selector.bank.embeddings":
                self.query_bank = QueryBank(Tensor(value, requires_grad=True))
            elif name == "sampler.bank.embeddings":
                self.spatial_bank = SpatialQueryBank(Tensor(value, requires_grad=True))
            elif name.startswith("selector.stack."):
                selector_state[name.removeprefix("selector.stack.")] = value
            elif name.startswith("sampler.stack."):
                sampler_state[name.removeprefix("sampler.stack.")] = value
            elif name == "projection.visual.weight":
                self.visual_proj = Projection(Tensor(value, requires_grad=True), self.visual_proj.bias)
            elif name == "projection.visual.bias":
                self.visual_proj = Projection(self.visual_proj.weight, Tensor(value, requires_grad=True))
            elif name == "projection.text.weight":
                self.text_proj = Projection(Tensor(value, requires_grad=True), self.text_proj.bias)
            elif name == "projection.text.bias":
                self.text_proj = Projection(self.text_proj.weight, Tensor(value, requires_grad=True))
            elif name == "sampler.positions":
                self.spatial_positions = Tensor(value, requires_grad=True)
            else:
                raise KeyError(f"unknown parameter name {name!r}")
        if selector_state:
            full = {k: t.data for k, t in self.selector_stack.parameters().items()}
            full.update(selector_state)
            self.selector_stack.load_state(full)
        if sampler_state:
            full = {k: t.data for k, t in self.sampler_stack.parameters().items()}
            full.update(sampler_state)
            self.sampler_stack.load_state(full)

    def save(self, directory: str | Path, cfg: PipelineConfig) -> None:
        meta = cfg.to_dict()
        if self.spatial_positions is not None:
            meta["frame_tokens"] = self.spatial_positions.shape[0]
        bvtk.save_checkpoint(
            directory, {k: t.data for k, t in self.named_tensors().items()}, meta
        )

    @classmethod
    def load(cls, directory: str | Path) -> tuple["PipelineParams", PipelineConfig]:
        _, meta = bvtk.load_checkpoint(directory)
        frame_tokens = meta.pop("frame_tokens", None)
        cfg = PipelineConfig.from_dict(meta)
        params = cls.create(cfg, frame_tokens=frame_tokens)
        expected = {k: t.shape for k, t in params.named_tensors().items()}
        tensors, _ = bvtk.load_checkpoint(directory, expected_shapes=expected)
        params.load_state(tensors)
        return params, cfg


@dataclass
class Decisions:
    """Discrete choices of one run, for exact replay under perturbation."""

    groups: MergeGroups
    matchings: list
    hard_indices: np.ndarray | None = None


@dataclass
class PipelineTrace:
    """What happened in one run: selections, merges, rounds, counts.

    ``stage_counts`` tracks body-token totals through the stages; the
    serialized form keeps only deterministic fields, so wall-clock times
    stay in memory.
    """

    selected_frames: list[int]
    duplicate_groups: list[list[int]]
    halving_rounds: int
    final_token_count: int
    stage_counts: dict[str, int]
    stage_seconds: dict[str, float] = field(default_factory=dict)
    decisions: Decisions | None = None

    def to_json_dict(self) -> dict:
        return {
            "selected_frames": self.selected_frames,
            "duplicate_groups": self.duplicate_groups,
            "halving_rounds": self.halving_rounds,
            "final_token_count": self.final_token_count,
            "stage_counts": self.stage_counts,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineTrace":
        with open(path) as fh:
            data = json.load(fh)
        return cls(
            selected_frames=data["selected_frames"],
            duplicate_groups=data["duplicate_groups"],
            halving_rounds=data["halving_rounds"],
            final_token_count=data["final_token_count"],
            stage_counts=data["stage_counts"],
        )


def run(
    video: VideoTokens,
    text: TextContext,
    params: PipelineParams,
    cfg: PipelineConfig,
    decisions: Decisions | None = None,
) -> tuple[Tensor, PipelineTrace]:
    """Compress one video/text pair into an LLM-ready sequence.

    Returns the assembled sequence (visual blocks then text rows) and the
    trace.  Passing a previous run's ``trace.decisions`` replays its
    discrete choices.
    """
    if video.dim != cfg.dim or text.dim != cfg.dim:
        raise ConfigError(
            f"config dim {cfg.dim} does not match video dim {video.dim} / text dim {text.dim}"
        )
    if cfg.spatial_tokens > video.tokens_per_frame:
        raise ConfigError(
            f"spatial_tokens {cfg.spatial_tokens} exceeds frame tokens {video.tokens_per_frame}"
        )
    rng = np.random.default_rng(cfg.seed)
    m = video.tokens_per_frame
    seconds: dict[str, float] = {}

    t0 = time.perf_counter()
    cls = video.cls
    if cfg.temporal_positions:
        cls = cls + Tensor(sinusoidal_positions(video.frames, cfg.dim))
    queries = generate_queries(params.query_bank, text, cls, params.selector_stack)
    logits = selection_logits(queries, cls, scaled=cfg.scale_logits)
    selection = gumbel_softmax(
        logits,
        cfg.temperature,
        cfg.mode,
        rng=rng,
        hard_indices=decisions.hard_indices if decisions is not None else None,
    )
    v_star = select_frames(selection, video)
    seconds["select"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    groups = decisions.groups if decisions is not None else find_duplicate_groups(
        selection, cfg.dup_threshold
    )
    merged = temporal_merge(v_star, groups)
    seconds["merge"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    n_groups = len(groups)
    flat = ad.reshape(merged, (n_groups * (m + 1), cfg.dim))
    sampled = []
    for g in range(n_groups):
        body = ad.slice_rows(flat, g * (m + 1) + 1, (g + 1) * (m + 1))
        sampled.append(
            spatial_sample(
                body, text, params.spatial_bank, params.sampler_stack, params.spatial_positions
            )
        )
    seconds["sample"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    budgeted, rounds, matchings = enforce_budget(
        sampled, cfg.budget, decisions.matchings if decisions is not None else None
    )
    seconds["budget"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    projected = [project(tokens, params.visual_proj) for tokens in budgeted]
    sequence = assemble_sequence(projected, text, params.text_proj)
    seconds["project"] = time.perf_counter() - t0

    final_count = sum(t.shape[0] for t in budgeted)
    trace = PipelineTrace(
        selected_frames=[int(i) for i in selection.argmax],
        duplicate_groups=[list(g) for g in groups.groups],
        halving_rounds=rounds,
        final_token_count=final_count,
        stage_counts={
            "input": video.frames * m,
            "selected": cfg.select_frames * m,
            "merged": n_groups * m,
            "sampled": sum(t.shape[0] for t in sampled),
            "final": final_count,
        },
        stage_seconds=seconds,
        decisions=Decisions(
            groups=groups,
            matchings=matchings,
            hard_indices=selection.argmax if cfg.mode == "hard" else None,
        ),
    )
    return sequence, trace


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthInstance:
    """One planted-frame task instance plus the knobs that generated it."""

    video: VideoTokens
    text: TextContext
    planted: list[int]
    seed: int
    noise: float


def synth_generate(
    seed: int,
    frames: int,
    tokens: int,
    dim: int,
    planted: Iterable[int],
    noise: float = 0.1,
    text_tokens: int = 4,
) -> SynthInstance:
    """Build a video whose planted frames share a centroid with the text.

    Planted [CLS] rows sit near a "relevant" unit centroid, the rest near
    an orthogonal distractor; body tokens scatter around their frame's
    [CLS]; text rows scatter around the relevant centroid.  noise=0 makes
    all of those exact.
    """
    planted = sorted(int(i) for i in planted)
    if not planted:
        raise ConfigError("planted set must not be empty")
    if planted[0] < 0 or planted[-1] >= frames:
        raise ConfigError(f"planted indices {planted} fall outside 0..{frames - 1}")
    rng = np.random.default_rng(seed)
    relevant = rng.standard_normal(dim)
    relevant /= np.linalg.norm(relevant)
    distractor = rng.standard_normal(dim)
    distractor -= distractor @ relevant * relevant
    distractor /= np.linalg.norm(distractor)

    centroids = np.tile(distractor, (frames, 1))
    centroids[planted] = relevant
    cls = centroids + noise * rng.standard_normal((frames, dim))
    body = cls[:, None, :] + noise * rng.standard_normal((frames, tokens, dim))
    text = relevant + noise * rng.standard_normal((text_tokens, dim))
    return SynthInstance(
        video=VideoTokens(cls=Tensor(cls), body=Tensor(body)),
        text=TextContext(tokens=Tensor(text)),
        planted=planted,
        seed=seed,
        noise=noise,
    )


def synth_stream(
    base_seed: int,
    frames: int,
    tokens: int,
    dim: int,
    n_planted: int,
    noise: float = 0.1,
) -> Iterator[SynthInstance]:
    """Endless stream of instances with freshly drawn planted sets."""
    for i in itertools.count():
        seed = base_seed + i
        planted = np.random.default_rng((seed, 0x9E3779B9)).choice(
            frames, size=n_planted, replace=False
        )
        yield synth_generate(seed, frames, tokens, dim, planted, noise)


# ---------------------------------------------------------------------------
# toy training


@dataclass
class TrainReport:
    """Loss curve plus hard-selection accuracy at each eval point."""

    losses: list[float]
    eval_steps: list[int]
    accuracies: list[float]
    final_accuracy: float

    def to_json_dict(self) -> dict:
        return {
            "losses": self.losses,
            "eval_steps": self.eval_steps,
            "accuracies": self.accuracies,
            "final_accuracy": self.final_accuracy,
        }


def _selection_loss(instance: SynthInstance, params: PipelineParams, cfg: PipelineConfig):
    """Cross-entropy from each perspective's soft row to uniform-over-planted."""
    queries = generate_queries(params.query_bank, instance.text, instance.video.cls, params.selector_stack)
    logits = selection_logits(queries, instance.video.cls, scaled=cfg.scale_logits)
    noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, instance.seed]))
    selection = gumbel_softmax(logits, cfg.temperature, cfg.mode, rng=noise_rng)
    log_probs = ad.log_softmax_rows(selection.perturbed)
    target = np.zeros(logits.shape)
    target[:, instance.planted] = 1.0 / len(instance.planted)
    n_rows = logits.shape[0]
    loss = ad.scale(ad.sum_all(ad.mul(Tensor(target), log_probs)), -1.0 / n_rows)
    return loss, selection


def selection_accuracy(
    instances: Iterable[SynthInstance], params: PipelineParams, cfg: PipelineConfig
) -> float:
    """Fraction of hard selections that land inside the planted set."""
    hard_cfg = replace(cfg, mode="hard")
    hits = total = 0
    for instance in instances:
        queries = generate_queries(
            params.query_bank, instance.text, instance.video.cls, params.selector_stack
        )
        logits = selection_logits(queries, instance.video.cls, scaled=cfg.scale_logits)
        noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, instance.seed, 1]))
        selection = gumbel_softmax(logits.detach(), hard_cfg.temperature, "hard", rng=noise_rng)
        planted = set(instance.planted)
        hits += sum(1 for idx in selection.argmax if int(idx) in planted)
        total += len(selection.argmax)
    return hits / total if total else 0.0


def train_toy(
    data: Iterable[SynthInstance],
    params: PipelineParams,
    cfg: PipelineConfig,
    steps: int,
    lr: float,
    eval_data: list[SynthInstance] | None = None,
    eval_every: int = 100,
    eval_count: int = 16,
) -> TrainReport:
    """Fit the selector (query bank + stack) to pick planted frames.

    Plain gradient descent on the selection cross-entropy.  Hard-selection
    accuracy is measured on ``eval_data`` every ``eval_every`` steps; when
    no eval set is given one is synthesized to match the first training
    instance.  Raises TrainingError with the step index if the loss goes
    non-finite.
    """
    if cfg.mode == "deterministic":
        raise ConfigError("train_toy needs soft or hard mode")
    stream = iter(itertools.cycle(data)) if isinstance(data, (list, tuple)) else iter(data)
    first = next(stream)
    stream = itertools.chain([first], stream)
    if eval_data is None:
        eval_seed = cfg.seed + 1_000_003
        eval_data = list(
            itertools.islice(
                synth_stream(
                    eval_seed,
                    first.video.frames,
                    first.video.tokens_per_frame,
                    first.video.dim,
                    len(first.planted),
                    first.noise,
                ),
                eval_count,
            )
        )
    losses: list[float] = []
    eval_steps: list[int] = []
    accuracies: list[float] = []
    for step in range(steps):
        instance = next(stream)
        loss, _ = _selection_loss(instance, params, cfg)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(step)
        losses.append(value)
        if lr != 0.0:
            loss.backward()
            trainable = params.selector_tensors()
            params.load_state(
                {
                    name: t.data - lr * t.grad
                    for name, t in trainable.items()
                    if t.grad is not None
                }
            )
        if (step + 1) % eval_every == 0 or step == steps - 1:
            eval_steps.append(step + 1)
            accuracies.append(selection_accuracy(eval_data, params, cfg))
    final = accuracies[-1] if accuracies else selection_accuracy(eval_data, params, cfg)
    return TrainReport(
        losses=losses, eval_steps=eval_steps, accuracies=accuracies, final_accuracy=final
    )


# ---------------------------------------------------------------------------
# ablation sweep


def sweep(
    select_grid: Iterable[int],
    spatial_grid: Iterable[int],
    base_cfg: PipelineConfig,
    frames: int = 40,
    tokens: int = 16,
    n_planted: int = 4,
    noise: float = 0.1,
    steps: int = 400,
    lr: float = 0.05,
    eval_count: int = 16,
) -> list[dict]:
    """Train and evaluate at every (select_frames, spatial_tokens) point.

    Emits one row per grid point with the measured selection accuracy and
    the token-count arithmetic; trends are left to the reader.
    """
    rows = []
    for n_select in select_grid:
        for n_spatial in spatial_grid:
            cfg = replace(base_cfg, select_frames=n_select, spatial_tokens=n_spatial)
            params = PipelineParams.create(cfg)
            train = synth_stream(cfg.seed + 17, frames, tokens, cfg.dim, n_planted, noise)
            report = train_toy(
                data=train,
                params=params,
                cfg=cfg,
                steps=steps,
                lr=lr,
                eval_count=eval_count,
                eval_every=max(steps, 1),
            )
            rows.append(
                {
                    "select_frames": int(n_select),
                    "spatial_tokens": int(n_spatial),
                    "accuracy": report.final_accuracy,
                    "tokens_before_budget": int(n_select * n_spatial),
                    "token_count": int(min(n_select * n_spatial, cfg.budget)),
                }
            )
    return rows
