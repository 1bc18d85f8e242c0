"""Held-out evaluation and one-axis ablation sweeps on synthetic data."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .model import FlowModel
from .synthdata import (MetricReport, SyntheticSequence, generate_occlusion_sequence,
                        generate_translation_sequence, jitter)
from .training import train

AXES = ("cycle_length", "window_size", "num_walk_levels")
HELD_OUT_BASE = 10 ** 6


def held_out_set(run: RunConfig, n: int = 10, k: int = 2, base_seed: int = HELD_OUT_BASE) -> list[SyntheticSequence]:
    """Evaluation sequences drawn from seeds disjoint from any training seed stream."""
    tc = run.train
    out = []
    for i in range(n):
        seed = base_seed + i
        if tc.data == "occlusion":
            seq = generate_occlusion_sequence(seed, tc.size, k, max_shift=tc.max_shift)
        else:
            seq = generate_translation_sequence(seed, tc.size, tc.max_shift, k)
        if tc.jitter_brightness or tc.jitter_hue:
            seq.frames = jitter(seq.frames, tc.jitter_brightness, tc.jitter_hue, seed)
        out.append(seq)
    return out


def evaluate(model: FlowModel, sequences: Sequence[SyntheticSequence], kind: str = "nonparametric") -> MetricReport:
    """Pixel-weighted EPE(all), EPE(noc) and ER over the first pair of every sequence."""
    errs_all, errs_noc, bad = [], [], []
    for seq in sequences:
        pred = model.flow(seq.frames[0], seq.frames[1], kind=kind)
        gt = seq.gt_flows[0]
        err = np.linalg.norm(pred - gt, axis=-1)
        vis = ~seq.occlusion_masks[0]
        errs_all.append(err.ravel())
        errs_noc.append(err[vis])
        mag = np.linalg.norm(gt, axis=-1)
        bad.append(((err > 3.0) & (err > 0.05 * mag)).ravel())
    return MetricReport(float(np.concatenate(errs_all).mean()), float(np.concatenate(errs_noc).mean()),
                        100.0 * float(np.concatenate(bad).mean()))


def apply_axis(run: RunConfig, axis: str, value) -> RunConfig:
    if axis == "cycle_length":
        # train 2, 3, ..., k cycles in succession, splitting the base step budget evenly over the stages
        k = int(value)
        total = run.train.steps_per_stage * len(run.train.curriculum)
        stages = list(range(2, k + 1))
        return replace(run, train=replace(run.train, curriculum=stages, steps_per_stage=total // len(stages)),
                       cycle=replace(run.cycle, cycle_length=k))
    if axis == "window_size":
        return replace(run, transition=replace(run.transition, window_size=int(value)))
    if axis == "num_walk_levels":
        return replace(run, cycle=replace(run.cycle, walk_levels=int(value)))
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


@dataclass
class AblationRow:
    axis: str
    value: object
    seed: int
    report: MetricReport


def run_ablation(axis: str, values: Sequence, base: RunConfig, seeds: Sequence[int],
                 n_eval: int = 10, kind: str = "nonparametric",
                 progress: Callable[[AblationRow], None] | None = None) -> list[AblationRow]:
    """Train one model per (value, seed) under the same budget and score it on a held-out set."""
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    rows = []
    for value in values:
        cfg = apply_axis(base, axis, value)
        evalset = held_out_set(cfg, n_eval)
        for seed in seeds:
            run = replace(cfg, train=replace(cfg.train, seed=int(seed)))
            model = train(run).model
            row = AblationRow(axis, value, int(seed), evaluate(model, evalset, kind))
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def summarize(rows: Sequence[AblationRow]) -> dict:
    """Mean EPE(noc) per value, plus the per-seed values."""
    out: dict = {}
    for r in rows:
        out.setdefault(r.value, []).append(r.report.epe_noc)
    return {v: {"mean": float(np.mean(e)), "per_seed": e} for v, e in out.items()}
