"""Finite-difference verification of analytic gradients.

Central differences at h=1e-5 in float64, compared entry by entry with a
floored relative error.  All checks run in soft selection mode with the
run's discrete decisions replayed, so the probe differentiates exactly
the function the tape differentiated.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .merger import MergeGroups, bipartite_halve, temporal_merge
from .pipeline import PipelineConfig, PipelineParams, run, synth_generate

DEFAULT_H = 1e-5
# Entries whose gradient magnitude sits below this floor are compared
# absolutely; protects against 0/0 blowups on structurally tiny grads.
_REL_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
    return float((np.abs(analytic - numeric) / denom).max())


class TensorBag:
    """Named free tensors with the same state protocol as PipelineParams."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}

    def named_tensors(self) -> dict[str, Tensor]:
        return self.tensors

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.tensors[k] = Tensor(v, requires_grad=True)


def gradient_errors(
    loss_fn: Callable[[], Tensor],
    holder,
    names: list[str] | None = None,
    h: float = DEFAULT_H,
) -> dict[str, float]:
    """Max relative error between tape and central differences, per tensor.

    ``loss_fn`` must rebuild the graph from the holder's current tensors
    on every call; the holder needs named_tensors()/load_state().
    """
    named = holder.named_tensors()
    if names is None:
        names = sorted(named)
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (named[name].grad.copy() if named[name].grad is not None else np.zeros(named[name].shape))
        for name in names
    }
    errors = {}
    for name in names:
        base = named[name].data.copy()
        numeric = np.zeros_like(base)
        flat_base = base.reshape(-1)
        flat_numeric = numeric.reshape(-1)
        for idx in range(flat_base.size):
            probe = flat_base.copy()
            probe[idx] = flat_base[idx] + h
            holder.load_state({name: probe.reshape(base.shape)})
            up = loss_fn().item()
            probe[idx] = flat_base[idx] - h
            holder.load_state({name: probe.reshape(base.shape)})
            down = loss_fn().item()
            flat_numeric[idx] = (up - down) / (2 * h)
        holder.load_state({name: base})
        errors[name] = relative_error(analytic[name], numeric)
    return errors


def _mean_square(t: Tensor) -> Tensor:
    return ad.mean_all(ad.mul(t, t))


def check_selector(seed: int = 0) -> dict[str, float]:
    """Selection path: query network, logits, soft Gumbel rows."""
    cfg = PipelineConfig(select_frames=4, dim=16, layers=1, heads=4, seed=seed, llm_dim=16)
    params = PipelineParams.create(cfg)
    instance = synth_generate(seed + 5, frames=6, tokens=4, dim=16, planted=[1, 4], noise=0.2)
    from .selector import generate_queries, gumbel_softmax, selection_logits

    def loss_fn() -> Tensor:
        queries = generate_queries(
            params.query_bank, instance.text, instance.video.cls, params.selector_stack
        )
        logits = selection_logits(queries, instance.video.cls)
        selection = gumbel_softmax(logits, cfg.temperature, "soft", rng=seed)
        return _mean_square(selection.weights)

    names = sorted(params.selector_tensors())
    return gradient_errors(loss_fn, params, names)


def check_sampler(seed: int = 0) -> dict[str, float]:
    """Spatial path: query network over one frame's body tokens."""
    cfg = PipelineConfig(spatial_tokens=3, dim=16, layers=1, heads=4, seed=seed, llm_dim=16)
    params = PipelineParams.create(cfg)
    instance = synth_generate(seed + 5, frames=2, tokens=6, dim=16, planted=[0], noise=0.2)
    frame_data = instance.video.body.data[0]
    from .sampler import spatial_sample

    def loss_fn() -> Tensor:
        return _mean_square(
            spatial_sample(
                Tensor(frame_data), instance.text, params.spatial_bank, params.sampler_stack
            )
        )

    names = [n for n in params.named_tensors() if n.startswith("sampler.")]
    return gradient_errors(loss_fn, params, sorted(names))


def check_merger(seed: int = 0) -> dict[str, float]:
    """Averaging arithmetic of both merge stages, decisions held fixed."""
    rng = np.random.default_rng(seed)
    errors = {}

    tokens = rng.standard_normal((4, 5))
    bag = TensorBag({"tokens": tokens})
    _, matching = bipartite_halve(Tensor(tokens))

    def halve_loss() -> Tensor:
        merged, _ = bipartite_halve(bag.tensors["tokens"], matching)
        return _mean_square(merged)

    errors["merge.bipartite.tokens"] = gradient_errors(halve_loss, bag)["tokens"]

    stack = rng.standard_normal((4, 3, 5))
    groups = MergeGroups([[0, 2], [1], [3]])
    bag = TensorBag({"frames": stack})

    def temporal_loss() -> Tensor:
        return _mean_square(temporal_merge(bag.tensors["frames"], groups))

    errors["merge.temporal.frames"] = gradient_errors(temporal_loss, bag)["frames"]
    return errors


def check_pipeline(seed: int = 0) -> dict[str, float]:
    """Full run in soft mode; every parameter bank, decisions frozen."""
    cfg = PipelineConfig(
        select_frames=3,
        spatial_tokens=2,
        budget=4,
        dim=16,
        llm_dim=12,
        layers=1,
        heads=4,
        mode="soft",
        seed=seed,
    )
    params = PipelineParams.create(cfg)
    instance = synth_generate(seed + 5, frames=6, tokens=8, dim=16, planted=[0, 3], noise=0.2)
    _, base_trace = run(instance.video, instance.text, params, cfg)
    frozen = base_trace.decisions

    def loss_fn() -> Tensor:
        sequence, _ = run(instance.video, instance.text, params, cfg, decisions=frozen)
        return _mean_square(sequence)

    return gradient_errors(loss_fn, params)


MODULE_CHECKS = {
    "selector": check_selector,
    "sampler": check_sampler,
    "merger": check_merger,
    "pipeline": check_pipeline,
}


def run_checks(module: str, seed: int = 0) -> dict[str, float]:
    """Run one module's check, or every one of them for ``all``."""
    if module == "all":
        results = {}
        for name, fn in MODULE_CHECKS.items():
            for group, err in fn(seed).items():
                results[f"{name}.{group}"] = err
        return results
    return MODULE_CHECKS[module](seed)
