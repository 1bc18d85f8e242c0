"""Cycle-consistency and smoothness objectives for the nonparametric model."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import engine as E
from .encoder import EncoderConfig, FeaturePyramid, encode, prepare_images
from .engine import Tensor
from .transition import LevelMatch, SparseTransition, TransitionConfig, chain, coarse_to_fine, product_diagonal


@dataclass
class CycleConfig:
    cycle_length: int = 2
    subcycles: bool = True
    level_weights: list[float] | None = None
    # levels (1 = coarsest) that contribute to the walk loss; None means all
    walk_levels: int | None = None
    reduction: str = "mean"

    def __post_init__(self):
        if self.cycle_length < 2:
            raise ValueError("cycle_length must be >= 2")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")

    def weight(self, level: int) -> float:
        if self.level_weights is None:
            return 1.0
        return float(self.level_weights[level - 1])

    def active_levels(self, total: int) -> list[int]:
        top = total if self.walk_levels is None else min(self.walk_levels, total)
        return list(range(1, top + 1))


@dataclass
class SmoothnessConfig:
    edge_weight: float = 150.0
    weight: float = 30.0

    def __post_init__(self):
        if self.edge_weight < 0:
            raise ValueError("edge_weight must be >= 0")


def crw_cycle_loss(forward: Sequence[SparseTransition], backward: Sequence[SparseTransition],
                   prune_threshold: float = 1e-8, reduction: str = "mean") -> Tensor:
    """-sum log diag(A_fwd A_bwd) over pixels, divided by n for ``reduction='mean'``."""
    fwd = chain(forward, prune_threshold)
    bwd = chain(backward, prune_threshold)
    return _cycle_from_chains(fwd, bwd, reduction)


def _cycle_from_chains(fwd: SparseTransition, bwd: SparseTransition, reduction: str) -> Tensor:
    diag = product_diagonal(fwd, bwd)
    nll = E.mul(E.log(diag), -1.0)
    return E.mean(nll) if reduction == "mean" else E.sum_(nll)


def multiscale_crw_loss(per_level: Sequence[tuple[Sequence[SparseTransition], Sequence[SparseTransition]]],
                        weights: Sequence[float] | None = None, prune_threshold: float = 1e-8,
                        reduction: str = "mean") -> Tensor:
    total = Tensor(0.0)
    for i, (fwd, bwd) in enumerate(per_level):
        w = 1.0 if weights is None else weights[i]
        if w == 0:
            continue
        total = E.add(total, E.mul(crw_cycle_loss(fwd, bwd, prune_threshold, reduction), w))
    return total


def subcycle_losses(forward: Sequence[Sequence[SparseTransition]], backward: Sequence[Sequence[SparseTransition]],
                    k: int, config: CycleConfig | None = None, prune_threshold: float = 1e-8,
                    levels: Sequence[int] | None = None) -> Tensor:
    """Multiscale walk loss for cycles over the first j frames, j = 2..k.

    ``forward[l][i]`` is the level-(l+1) transition from frame i to i+1 and
    ``backward[l][i]`` the one from i+1 to i. Chains for length j are extended
    from those for length j - 1.
    """
    config = config or CycleConfig(cycle_length=k)
    if levels is None:
        levels = list(range(1, len(forward) + 1))
    lengths = range(2, k + 1) if config.subcycles else [k]
    total = Tensor(0.0)
    for level in levels:
        fwd_l, bwd_l = forward[level - 1], backward[level - 1]
        if len(fwd_l) < k - 1 or len(bwd_l) < k - 1:
            raise ValueError(f"level {level}: need {k - 1} transitions per direction")
        weight = config.weight(level)
        if weight == 0:
            continue
        fwd_chain, bwd_chain = fwd_l[0], bwd_l[0]
        for j in range(2, k + 1):
            if j > 2:
                fwd_chain = chain([fwd_chain, fwd_l[j - 2]], prune_threshold)
                bwd_chain = chain([bwd_l[j - 2], bwd_chain], prune_threshold)
            if j in lengths:
                loss = _cycle_from_chains(fwd_chain, bwd_chain, config.reduction)
                total = E.add(total, E.mul(loss, weight))
    return total


def area_downsample(image: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = image.shape
    return image.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def smoothness_loss(flow, image: np.ndarray, config: SmoothnessConfig) -> Tensor:
    """Edge-aware second-order smoothness (unweighted by ``config.weight``).

    Second differences along x and y on interior pixels are weighted by
    ``exp(-edge_weight * mean_c |dI/dd|)`` with a central image derivative,
    then averaged over pixels, flow components and directions.
    """
    flow = E.as_tensor(flow)
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w = flow.shape[:2]
    terms = []
    if w >= 3:
        d2 = E.add(E.sub(flow[:, 2:], E.mul(flow[:, 1:-1], 2.0)), flow[:, :-2])
        grad = np.abs(image[:, 2:] - image[:, :-2]).mean(axis=-1) / 2.0
        terms.append(E.mean(E.mul(E.abs_(d2), np.exp(-config.edge_weight * grad)[..., None])))
    if h >= 3:
        d2 = E.add(E.sub(flow[2:], E.mul(flow[1:-1], 2.0)), flow[:-2])
        grad = np.abs(image[2:] - image[:-2]).mean(axis=-1) / 2.0
        terms.append(E.mean(E.mul(E.abs_(d2), np.exp(-config.edge_weight * grad)[..., None])))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = E.add(total, t)
    return E.mul(total, 1.0 / len(terms))


class WalkState(NamedTuple):
    """Everything one forward pass over a clip produces."""
    frames: np.ndarray
    pyramid: FeaturePyramid
    forward: list[list[LevelMatch]]   # forward[i]: matches frame i -> i+1, per level
    backward: list[list[LevelMatch]]  # backward[i]: matches frame i+1 -> i, per level

    def level_images(self, frame: int, level: int) -> np.ndarray:
        h = self.pyramid.embeddings[level - 1].shape[1]
        return area_downsample(self.frames[frame], self.frames.shape[1] // h)


def walk(frames, params, enc_cfg: EncoderConfig, trans_cfg: TransitionConfig, k: int | None = None) -> WalkState:
    frames = prepare_images(frames, enc_cfg.in_channels)
    k = frames.shape[0] if k is None else k
    frames = frames[:k]
    pyr = encode(frames, params, enc_cfg)
    fwd = [coarse_to_fine(pyr, pyr, trans_cfg, i, i + 1) for i in range(k - 1)]
    bwd = [coarse_to_fine(pyr, pyr, trans_cfg, i + 1, i) for i in range(k - 1)]
    return WalkState(frames, pyr, fwd, bwd)


def walk_terms(state: WalkState, trans_cfg: TransitionConfig, cycle_cfg: CycleConfig,
               smooth_cfg: SmoothnessConfig) -> dict[str, Tensor]:
    """Unweighted walk loss and mean smoothness over every estimated flow."""
    k = len(state.forward) + 1
    L = state.pyramid.levels
    levels = cycle_cfg.active_levels(L)
    fwd = [[state.forward[i][l].transition for i in range(k - 1)] for l in range(L)]
    bwd = [[state.backward[i][l].transition for i in range(k - 1)] for l in range(L)]
    crw = subcycle_losses(fwd, bwd, k, cycle_cfg, trans_cfg.prune_threshold, levels)
    smooth = Tensor(0.0)
    if smooth_cfg.weight:
        for level in levels:
            parts = []
            for i in range(k - 1):
                parts.append(smoothness_loss(state.forward[i][level - 1].flow,
                                             state.level_images(i, level), smooth_cfg))
                parts.append(smoothness_loss(state.backward[i][level - 1].flow,
                                             state.level_images(i + 1, level), smooth_cfg))
            level_mean = parts[0]
            for p in parts[1:]:
                level_mean = E.add(level_mean, p)
            smooth = E.add(smooth, E.mul(level_mean, 1.0 / len(parts)))
    return {"crw": crw, "smooth": smooth}


def nonparametric_objective(frames, params, enc_cfg: EncoderConfig, trans_cfg: TransitionConfig,
                            cycle_cfg: CycleConfig, smooth_cfg: SmoothnessConfig,
                            crw_weight: float = 1.0) -> Tensor:
    """Walk loss over all subcycles plus weighted smoothness for one clip."""
    state = walk(frames, params, enc_cfg, trans_cfg, cycle_cfg.cycle_length)
    terms = walk_terms(state, trans_cfg, cycle_cfg, smooth_cfg)
    return E.add(E.mul(terms["crw"], crw_weight), E.mul(terms["smooth"], smooth_cfg.weight))
