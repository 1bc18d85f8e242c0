"""Finite-difference checks for every primitive and every loss term.

Shared by the ``gradcheck`` command and the test suite.
"""
from __future__ import annotations

from dataclasses import replace
from typing import Callable

import numpy as np

from . import engine as E
from .config import RunConfig
from .encoder import EncoderConfig
from .engine import Tensor, grad_check
from .model import FlowModel
from .regressor import RegressorConfig
from .synthdata import generate_translation_sequence
from .transition import TransitionConfig

TOLERANCE = 1e-4


def primitive_cases(seed: int = 0) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """name -> (scalar function of one tensor, point to check at)."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    other = r(3, 4)
    w = r(3, 3, 2, 3) * 0.5
    img = r(5, 6, 2)
    sx, sy = rng.uniform(0.2, 4.8, 7), rng.uniform(0.2, 3.8, 7)
    idx = rng.integers(0, 4, 9)
    weights = r(3, 4)
    mm_weights = r(3, 3)
    return {
        "add": (lambda x: E.sum_(E.mul(E.add(x, other), weights)), r(3, 4)),
        "sub": (lambda x: E.sum_(E.mul(E.sub(other, x), weights)), r(3, 4)),
        "mul": (lambda x: E.sum_(E.mul(E.mul(x, other), weights)), r(3, 4)),
        "div": (lambda x: E.sum_(E.mul(E.div(other, x), weights)), pos(3, 4)),
        "exp": (lambda x: E.sum_(E.mul(E.exp(x), weights)), r(3, 4)),
        "log": (lambda x: E.sum_(E.mul(E.log(x), weights)), pos(3, 4)),
        "abs": (lambda x: E.sum_(E.mul(E.abs_(x), weights)), pos(3, 4) * np.sign(r(3, 4))),
        "square": (lambda x: E.sum_(E.mul(E.square(x), weights)), r(3, 4)),
        "sqrt": (lambda x: E.sum_(E.mul(E.sqrt(x), weights)), pos(3, 4)),
        "leaky_relu": (lambda x: E.sum_(E.mul(E.leaky_relu(x), weights)), pos(3, 4) * np.sign(r(3, 4))),
        "sum": (lambda x: E.sum_(E.square(E.sum_(x, axis=0))), r(3, 4)),
        "mean": (lambda x: E.sum_(E.square(E.mean(x, axis=1))), r(3, 4)),
        "reshape_transpose": (lambda x: E.sum_(E.mul(E.transpose(E.reshape(x, (4, 3))), weights)), r(3, 4)),
        "getitem": (lambda x: E.sum_(E.square(x[1:, ::2])), r(3, 4)),
        "concat_stack": (lambda x: E.sum_(E.square(E.concat([x, E.stack([x[0], x[1]])], axis=0))), r(3, 4)),
        "matmul": (lambda x: E.sum_(E.mul(E.matmul(x, other.T), mm_weights)), r(3, 4)),
        "conv2d": (lambda x: E.sum_(E.square(E.conv2d(x, w, stride=2))), r(1, 6, 6, 2)),
        "conv2d_weight": (lambda x: E.sum_(E.square(E.conv2d(Tensor(img[None]), x))), w),
        "softmax": (lambda x: E.sum_(E.mul(E.softmax(x), weights)), r(3, 4)),
        "l2_normalize": (lambda x: E.sum_(E.mul(E.l2_normalize(x), weights)), r(3, 4)),
        "gather": (lambda x: E.sum_(E.square(E.gather(x, idx))), r(4, 3)),
        "scatter_add": (lambda x: E.sum_(E.square(E.scatter_add(x, idx, 5))), r(9, 2)),
        "bilinear_image": (lambda x: E.sum_(E.square(E.bilinear_sample(x, sx, sy))), img),
        "bilinear_coords": (lambda x: E.sum_(E.square(E.bilinear_sample(img, x, sy))), sx),
    }


def primitive_errors(seed: int = 0) -> dict[str, float]:
    return {name: grad_check(fn, x) for name, (fn, x) in primitive_cases(seed).items()}


def small_setup(seed: int = 0) -> tuple[RunConfig, FlowModel, np.ndarray]:
    """16x16 two-frame clip and a 3-level model with a 5x5 window."""
    run = RunConfig()
    run = replace(run, encoder=EncoderConfig(levels=3, embed_dim=8, base_channels=4),
                  transition=TransitionConfig(window_size=5),
                  regressor=RegressorConfig(hidden=4, crop_margin=4))
    model = FlowModel.create(run.encoder, run.transition, run.regressor, seed)
    # a head that is not exactly zero so photo and boundary terms depend on every regressor weight
    prng = np.random.default_rng(seed + 7)
    for name, p in model.params.items():
        if ".head." in name and name.startswith("regressor."):
            p.data[...] = prng.standard_normal(p.data.shape) * 0.05
    frames = generate_translation_sequence(seed, 16, 2, 2).frames
    return run, model, frames


LOSS_TERMS = {
    # term -> (objective kind, loss term or None for the full objective, perturbed parameter)
    "L_crw": ("nonparametric", "crw", "encoder.block3.conv_a.weight"),
    "L_smooth": ("nonparametric", "smooth", "encoder.block2.conv_b.weight"),
    "L_photo": ("regressor", "photo", "regressor.level3.conv0.weight"),
    "L_bound": ("regressor", "bound", "regressor.level3.conv4.weight"),
    "L_non": ("nonparametric", None, "encoder.head1.weight"),
    "L_reg": ("regressor", None, "regressor.level2.conv1.weight"),
}


def loss_errors(seed: int = 0, n_entries: int = 6) -> dict[str, float]:
    """Relative finite-difference error of each loss term w.r.t. sampled parameter entries.

    The full regression objective is checked against regressor parameters
    only: its regressor inputs are detached, so an encoder perturbation moves
    the value without any analytic gradient by design.
    """
    from .regressor import boundary_loss
    from .training import clip_terms, total_loss

    run, model, frames = small_setup(seed)
    rng = np.random.default_rng(seed)
    # a fixed teacher that carries border pixels out of the crop, so the boundary mask is non-empty
    h = frames.shape[1] // 2
    teacher = np.broadcast_to(np.array([1.5, -1.0]), (h, h, 2)).copy()
    out = {}
    for name, (kind, term, key) in LOSS_TERMS.items():
        def fn(x, key=key, kind=kind, term=term):
            m = FlowModel({**model.params, key: x}, model.encoder, model.transition, model.regressor)
            if term == "bound":
                return boundary_loss(frames, m.params, m.encoder, m.transition, m.regressor, teacher_flow=teacher)
            terms = clip_terms(frames, m, run, 2, kind, rng=None)
            return terms[term] if term else total_loss(terms, run)
        size = model.params[key].data.size
        idx = rng.choice(size, min(n_entries, size), replace=False)
        out[name] = grad_check(fn, model.params[key].data, indices=idx)
    return out
