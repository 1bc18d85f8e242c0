"""Training loop: synthetic or on-disk clips, curriculum over cycle lengths, CSV loss log."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from . import engine as E
from .config import RunConfig, TrainConfig, save_config
from .engine import Tensor
from .model import FlowModel
from .regressor import boundary_loss, fb_occlusion_mask, photo_crw_loss, regress_flow
from .synthdata import (SyntheticSequence, generate_occlusion_sequence, generate_translation_sequence,
                        jitter)
from .walkloss import CycleConfig, smoothness_loss, walk, walk_terms

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "stage", "L_crw", "L_smooth", "L_photo", "L_bound"]


class NumericalError(RuntimeError):
    """A loss or gradient went non-finite; ``seed`` identifies the offending batch."""

    def __init__(self, message: str, seed: int):
        super().__init__(message)
        self.seed = seed


class Optimizer:
    """Fixed-step first-order optimizer with momentum and global grad-norm clipping.

    ``kind='adam'`` uses ``momentum`` as the first-moment decay; ``kind='sgd'``
    is heavy-ball momentum.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9,
                 grad_clip: float = 10.0, kind: str = "adam", beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params = dict(params)
        self.lr, self.momentum, self.grad_clip, self.kind = lr, momentum, grad_clip, kind
        self.beta2, self.eps = beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the pre-clip gradient norm."""
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        norm = float(np.sqrt(sum((g ** 2).sum() for g in grads.values())))
        if not np.isfinite(norm):
            return norm
        scale = min(1.0, self.grad_clip / norm) if norm > 0 and self.grad_clip else 1.0
        self.t += 1
        for k, p in self.params.items():
            g = grads[k] * scale
            if self.kind == "sgd":
                self.m[k] = self.momentum * self.m[k] + g
                p.data -= self.lr * self.m[k]
            else:
                self.m[k] = self.momentum * self.m[k] + (1 - self.momentum) * g
                self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
                mh = self.m[k] / (1 - self.momentum ** self.t)
                vh = self.v[k] / (1 - self.beta2 ** self.t)
                p.data -= self.lr * mh / (np.sqrt(vh) + self.eps)
        return norm


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------
def batch_seed(seed: int, stage: int, step: int, item: int) -> int:
    return int(np.random.SeedSequence([seed, stage, step, item]).generate_state(1)[0])


def synthetic_clip(train: TrainConfig, k: int, seed: int) -> SyntheticSequence:
    if train.data == "occlusion":
        seq = generate_occlusion_sequence(seed, train.size, k, max_shift=train.max_shift)
    else:
        seq = generate_translation_sequence(seed, train.size, train.max_shift, k)
    if train.jitter_brightness or train.jitter_hue:
        seq.frames = jitter(seq.frames, train.jitter_brightness, train.jitter_hue, seed)
    return seq


class FrameDirectory:
    """Random k-frame windows and crops from a directory of same-sized images."""

    def __init__(self, path, multiple: int):
        from .fileio import read_frame
        files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".ppm"))
        if len(files) < 2:
            raise ValueError(f"{path}: need at least two frames")
        self.frames = np.stack([read_frame(f) for f in files])
        self.multiple = multiple

    def clip(self, k: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        n, h, w = self.frames.shape[:3]
        if n < k:
            raise ValueError(f"need {k} frames, directory has {n}")
        start = int(rng.integers(0, n - k + 1))
        ch, cw = h // self.multiple * self.multiple, w // self.multiple * self.multiple
        top, left = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
        return self.frames[start:start + k, top:top + ch, left:left + cw]


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------
def _mean(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = E.add(total, t)
    return E.mul(total, 1.0 / len(terms))


def clip_terms(frames, model: FlowModel, run: RunConfig, k: int, kind: str,
               rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Unweighted loss terms for one clip.

    ``kind='regressor'`` adds the photometric/agreement and boundary terms and
    applies smoothness to the regressed flows as well.
    """
    cycle = replace(run.cycle, cycle_length=k)
    state = walk(frames, model.params, model.encoder, model.transition, k)
    terms = walk_terms(state, model.transition, cycle, run.smoothness)
    terms["photo"] = Tensor(0.0)
    terms["bound"] = Tensor(0.0)
    if kind != "regressor":
        return terms
    reg = run.regressor
    L = model.encoder.levels
    pyr = state.pyramid
    photo, smooth = [], []
    teacher = None
    for i in range(k - 1):
        fwd_flows, bwd_flows = [], []
        for level in range(1, L + 1):
            mf, mb = state.forward[i][level - 1], state.backward[i][level - 1]
            fwd_flows.append(regress_flow(mf.transition, pyr.feature(level, i), mf.flow, model.params,
                                          level, reg, model.transition.temperature))
            bwd_flows.append(regress_flow(mb.transition, pyr.feature(level, i + 1), mb.flow, model.params,
                                          level, reg, model.transition.temperature))
        if i == 0:
            teacher = fwd_flows[-1].data
        per_pair = []
        for level in range(1, L + 1):
            f, b = fwd_flows[level - 1], bwd_flows[level - 1]
            mf, mb = state.forward[i][level - 1], state.backward[i][level - 1]
            img_s, img_t = state.level_images(i, level), state.level_images(i + 1, level)
            xs, xt = pyr.embedding(level, i).data, pyr.embedding(level, i + 1).data
            loss_f = photo_crw_loss(xs, xt, f, mf.flow.data, reg, fb_occlusion_mask(f, b, reg), img_s, img_t)
            loss_b = photo_crw_loss(xt, xs, b, mb.flow.data, reg, fb_occlusion_mask(b, f, reg), img_t, img_s)
            per_pair.append(E.add(loss_f, loss_b))
            if level in cycle.active_levels(L):
                smooth.append(E.mul(E.add(smoothness_loss(f, img_s, run.smoothness),
                                          smoothness_loss(b, img_t, run.smoothness)), 0.5))
        total = per_pair[0]
        for p in per_pair[1:]:
            total = E.add(total, p)
        photo.append(E.mul(total, 0.5))
    terms["photo"] = _mean(photo)
    if smooth:
        # smoothness of the regressed flows, summed over levels like the nonparametric term
        terms["smooth"] = E.add(terms["smooth"], E.mul(_mean(smooth), float(len(cycle.active_levels(L)))))
    if reg.boundary_weight:
        terms["bound"] = boundary_loss(np.asarray(state.frames), model.params, model.encoder,
                                       model.transition, reg, teacher_flow=teacher, rng=rng)
    return terms


def total_loss(terms: Mapping[str, Tensor], run: RunConfig, crw_weight: float = 1.0) -> Tensor:
    out = E.add(E.mul(terms["crw"], crw_weight), E.mul(terms["smooth"], run.smoothness.weight))
    out = E.add(out, terms["photo"])
    return E.add(out, E.mul(terms["bound"], run.regressor.boundary_weight))


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------
@dataclass
class TrainResult:
    model: FlowModel
    log: list[dict]
    checkpoints: list[Path]


def train(run: RunConfig, model: FlowModel | None = None, out_dir=None, crw_weight: float = 1.0,
          optimizer: str = "adam", progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Run every curriculum stage in order; deterministic given the config and seed.

    Writes ``stage{j}.ckpt`` per stage (plus ``init.ckpt``), ``loss_log.csv``
    and the resolved ``config.txt`` when ``out_dir`` is given.
    """
    tc = run.train
    model = model or FlowModel.create(run.encoder, run.transition, run.regressor, tc.seed)
    out = Path(out_dir) if out_dir is not None else None
    checkpoints: list[Path] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(out / "config.txt", run)
        model.save(out / "init.ckpt")
        checkpoints.append(out / "init.ckpt")
    source = FrameDirectory(tc.data_dir, 2 ** model.encoder.levels) if tc.data_dir else None
    params = model.params if tc.model == "regressor" else model.encoder_params()
    opt = Optimizer(params, tc.lr, tc.momentum, tc.grad_clip, kind=optimizer)
    rows: list[dict] = []
    step = 0
    if tc.steps_per_stage == 0:
        # nothing to optimize: the initialization checkpoint is the only one written
        if out is not None:
            write_log(out / "loss_log.csv", rows)
        return TrainResult(model, rows, checkpoints)
    for stage, k in enumerate(tc.curriculum, 1):
        for _ in range(tc.steps_per_stage):
            step += 1
            opt.zero_grad()
            sums = {"crw": 0.0, "smooth": 0.0, "photo": 0.0, "bound": 0.0}
            for item in range(tc.batch_size):
                seed = batch_seed(tc.seed, stage, step, item)
                frames = source.clip(k, seed) if source else synthetic_clip(tc, k, seed).frames
                terms = clip_terms(frames, model, run, k, tc.model, np.random.default_rng(seed))
                loss = E.mul(total_loss(terms, run, crw_weight), 1.0 / tc.batch_size)
                if not np.isfinite(loss.item()):
                    _dump(out, seed, frames, terms)
                    raise NumericalError(f"non-finite loss at step {step} (batch seed {seed})", seed)
                loss.backward()
                for name in sums:
                    sums[name] += terms[name].item() / tc.batch_size
            norm = opt.step()
            if not np.isfinite(norm):
                _dump(out, seed, frames, terms)
                raise NumericalError(f"non-finite gradient at step {step} (batch seed {seed})", seed)
            row = {"step": step, "stage": stage, "L_crw": sums["crw"], "L_smooth": sums["smooth"],
                   "L_photo": sums["photo"], "L_bound": sums["bound"]}
            rows.append(row)
            if progress is not None:
                progress(row)
        if out is not None and tc.checkpoint_every_stage:
            path = out / f"stage{stage}.ckpt"
            model.save(path)
            checkpoints.append(path)
    if out is not None:
        write_log(out / "loss_log.csv", rows)
        model.save(out / "final.ckpt")
        checkpoints.append(out / "final.ckpt")
    return TrainResult(model, rows, checkpoints)


def write_log(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _dump(out: Path | None, seed: int, frames, terms) -> None:
    info = {k: v.item() for k, v in terms.items()}
    log.error("numerical failure: batch seed %d, terms %s", seed, info)
    if out is not None:
        np.savez(out / f"failure_seed{seed}.npz", frames=np.asarray(frames), **{k: np.array(v) for k, v in info.items()})
