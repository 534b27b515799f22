"""Temporal frame dedup and spatial bipartite merging under a budget.

Discrete choices (which rows group together, which tokens pair up) are
made on raw values and excluded from the gradient path; gradients flow
only through the averaging arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BudgetError, ConfigError, DimensionError
from .selector import SelectionMatrix


@dataclass
class MergeGroups:
    """A partition of row indices, ordered by smallest member."""

    groups: list[list[int]]

    def __post_init__(self):
        seen: set[int] = set()
        for g in self.groups:
            if not g:
                raise ValueError("MergeGroups: empty group")
            if seen & set(g):
                raise ValueError("MergeGroups: groups overlap")
            seen.update(g)
        n = sum(len(g) for g in self.groups)
        if seen != set(range(n)):
            raise ValueError(f"MergeGroups: groups do not partition 0..{n - 1}")
        if [g[0] for g in self.groups] != sorted(min(g) for g in self.groups):
            raise ValueError("MergeGroups: groups must be ordered by smallest member")

    def __len__(self) -> int:
        return len(self.groups)

    @property
    def size(self) -> int:
        return sum(len(g) for g in self.groups)


@dataclass
class BudgetConfig:
    """Token ceiling and duplicate threshold."""

    theta: int
    gamma: float

    def __post_init__(self):
        if self.theta < 1:
            raise ConfigError(f"budget must be >= 1, got {self.theta}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"duplicate threshold must be in (0, 1], got {self.gamma}")


def find_duplicate_groups(selection: SelectionMatrix | Tensor, gamma: float) -> MergeGroups:
    """Group selection rows whose cosine similarity reaches ``gamma``.

    Iterative sweep: take the smallest unassigned row, pull in every
    still-unassigned row at least gamma-similar to it, emit the group,
    repeat.  Always yields a partition regardless of gamma.
    """
    weights = selection.weights if isinstance(selection, SelectionMatrix) else selection
    rows = weights.data
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise DimensionError(f"need a non-empty 2-d selection matrix, got shape {rows.shape}")
    sim = ad.cosine_matrix_data(rows, rows)
    pool = list(range(rows.shape[0]))
    groups: list[list[int]] = []
    while pool:
        anchor = pool[0]
        members = [beta for beta in pool if sim[anchor, beta] >= gamma or beta == anchor]
        pool = [beta for beta in pool if beta not in members]
        groups.append(sorted(members))
    return MergeGroups(groups)


def temporal_merge(v_star: Tensor, groups: MergeGroups) -> Tensor:
    """Average each duplicate group of selected frames into one frame.

    Input is n_select x (M+1) x d; output keeps representative order
    (ascending smallest member), one frame per group.
    """
    if v_star.ndim != 3:
        raise DimensionError(f"temporal_merge expects a 3-d frame stack, got {v_star.shape}")
    n, rows, d = v_star.shape
    if groups.size != n:
        raise DimensionError(f"groups cover {groups.size} frames but stack has {n}")
    flat = ad.reshape(v_star, (n, rows * d))
    merged = ad.group_mean_rows(flat, groups.groups)
    return ad.reshape(merged, (len(groups), rows, d))


def bipartite_halve(tokens: Tensor, matching: list[tuple[int, int]] | None = None) -> tuple[Tensor, list[tuple[int, int]]]:
    """Merge the floor(K/2) most similar cross-partition token pairs.

    The K rows split alternately into A (positions 0, 2, ...) and B
    (positions 1, 3, ...).  Each A token proposes its most cosine-similar
    B token; proposals are ranked by similarity (ties favour the earlier
    A token) and the top floor(K/2) merge into their targets, each target
    becoming the mean of itself and everything merged into it.  Output is
    the surviving A tokens then the updated B tokens, in original order:
    ceil(K/2) rows.

    ``matching`` replays a previously recorded pairing (by original row
    index) so finite-difference probes cannot flip the discrete choice.
    Returns (merged tokens, matching).
    """
    if tokens.ndim != 2:
        raise DimensionError(f"bipartite_halve expects 2-d tokens, got {tokens.shape}")
    k = tokens.shape[0]
    if k < 2:
        return tokens, []
    a_idx = np.arange(0, k, 2)
    b_idx = np.arange(1, k, 2)
    r = k // 2
    if matching is None:
        sim = ad.cosine_matrix_data(tokens.data[a_idx], tokens.data[b_idx])
        best = sim.argmax(axis=1)
        scores = sim[np.arange(len(a_idx)), best]
        ranked = np.argsort(-scores, kind="stable")
        matching = [(int(a_idx[a]), int(b_idx[best[a]])) for a in ranked[:r]]
    merged_into: dict[int, list[int]] = {}
    for a, b in matching:
        merged_into.setdefault(b, []).append(a)
    selected = {a for a, _ in matching}
    groups = [[int(a)] for a in a_idx if a not in selected]
    groups += [[int(b)] + merged_into.get(int(b), []) for b in b_idx]
    return ad.group_mean_rows(tokens, groups), matching


def enforce_budget(
    per_frame_tokens: list[Tensor],
    theta: int,
    matchings: list[list[list[tuple[int, int]]]] | None = None,
) -> tuple[list[Tensor], int, list[list[list[tuple[int, int]]]]]:
    """Halve every frame's tokens round by round until the total fits.

    Each round applies ``bipartite_halve`` once to every frame holding at
    least 2 tokens, in frame order.  Stops when the total is within
    ``theta`` or every frame is down to one token.  Infeasible when there
    are more frames than budget.  Returns (frames, rounds, matchings);
    pass ``matchings`` back in to replay the recorded pairings.
    """
    if len(per_frame_tokens) > theta:
        raise BudgetError(
            f"budget infeasible: {len(per_frame_tokens)} frames cannot fit a budget of {theta} tokens"
        )
    frames = list(per_frame_tokens)
    rounds = 0
    recorded: list[list[list[tuple[int, int]]]] = []
    while sum(f.shape[0] for f in frames) > theta and any(f.shape[0] >= 2 for f in frames):
        replay = matchings[rounds] if matchings is not None else None
        round_record = []
        for i, frame in enumerate(frames):
            if frame.shape[0] >= 2:
                frames[i], match = bipartite_halve(
                    frame, replay[i] if replay is not None else None
                )
                round_record.append(match)
            else:
                round_record.append([])
        recorded.append(round_record)
        rounds += 1
    return frames, rounds, recorded
