"""Flow regression head for occluded pixels and its self-supervised losses.

All regressor inputs (cost-volume logits, conv features, nonparametric flow,
embeddings) are detached, so these losses never produce encoder gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import engine as E
from .encoder import EncoderConfig, encode
from .engine import ShapeError, Tensor
from .transition import SparseTransition, TransitionConfig, coarse_to_fine, warp, window_offsets


@dataclass
class RegressorConfig:
    constraint_weight: float = 1.0        # lambda_a
    feature_weight: float = 0.1
    boundary_weight: float = 1.0
    crop_margin: int = 8
    fb_threshold_abs: float = 0.05
    fb_threshold_rel: float = 0.01
    hidden: int = 16
    layers: int = 5
    photometric: str = "features"         # or "charbonnier" (raw-pixel ablation)
    charbonnier_eps: float = 1e-3
    leaky_slope: float = 0.1

    def __post_init__(self):
        if min(self.constraint_weight, self.feature_weight, self.boundary_weight) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.crop_margin < 1:
            raise ValueError("crop_margin must be >= 1")
        if self.photometric not in ("features", "charbonnier"):
            raise ValueError(f"unknown photometric term {self.photometric!r}")


def init_regressor(enc_cfg: EncoderConfig, trans_cfg: TransitionConfig, config: RegressorConfig,
                   seed: int) -> dict[str, Tensor]:
    """Per-level conv stacks; the 2-channel heads start at zero."""
    rng = np.random.default_rng(seed)
    k2 = trans_cfg.window_size ** 2
    params: dict[str, Tensor] = {}
    for level in range(1, enc_cfg.levels + 1):
        cin = k2 + enc_cfg.channels(level) + 2
        for i in range(config.layers):
            fan_in = 9 * cin
            bound = 1.0 / np.sqrt(fan_in)
            params[f"regressor.level{level}.conv{i}.weight"] = Tensor(
                rng.uniform(-bound, bound, (3, 3, cin, config.hidden)), requires_grad=True)
            params[f"regressor.level{level}.conv{i}.bias"] = Tensor(
                rng.uniform(-bound, bound, (config.hidden,)), requires_grad=True)
            cin = config.hidden
        params[f"regressor.level{level}.head.weight"] = Tensor(np.zeros((3, 3, cin, 2)), requires_grad=True)
        params[f"regressor.level{level}.head.bias"] = Tensor(np.zeros(2), requires_grad=True)
    return params


def cost_volume(A: SparseTransition, temperature: float) -> np.ndarray:
    """Window logits of each row as ``(h, w, k*k)`` channels, rescaled to cosine similarity."""
    if A.window_logits is None:
        raise ValueError("transition carries no window logits")
    h, w = A.grid
    return A.window_logits.data.reshape(h, w, -1) * temperature


def regress_flow(A: SparseTransition, conv_features, base_flow, params: Mapping[str, Tensor],
                 level: int, config: RegressorConfig, temperature: float) -> Tensor:
    """``base_flow`` plus a residual predicted from cost volume, features and flow."""
    h, w = A.grid
    feats = np.asarray(conv_features.data if isinstance(conv_features, Tensor) else conv_features)
    base = np.asarray(base_flow.data if isinstance(base_flow, Tensor) else base_flow)
    if feats.shape[:2] != (h, w) or base.shape != (h, w, 2):
        raise ShapeError(f"regressor inputs misaligned: grid {(h, w)}, features {feats.shape}, flow {base.shape}")
    x = np.concatenate([cost_volume(A, temperature), feats, base], axis=-1)[None]
    pre = f"regressor.level{level}"
    hcur = Tensor(x)
    for i in range(config.layers):
        hcur = E.leaky_relu(E.conv2d(hcur, params[f"{pre}.conv{i}.weight"], params[f"{pre}.conv{i}.bias"]),
                            config.leaky_slope)
    resid = E.conv2d(hcur, params[f"{pre}.head.weight"], params[f"{pre}.head.bias"])
    return E.add(E.reshape(resid, (h, w, 2)), base)


def fb_occlusion_mask(f_fwd, f_bwd, config: RegressorConfig) -> np.ndarray:
    """Forward-backward consistency check; True marks visible pixels."""
    f = np.asarray(f_fwd.data if isinstance(f_fwd, Tensor) else f_fwd, dtype=np.float64)
    b = np.asarray(f_bwd.data if isinstance(f_bwd, Tensor) else f_bwd, dtype=np.float64)
    if f.shape != b.shape:
        raise ShapeError("forward and backward flows differ in shape")
    with E.no_grad():
        bw = warp(b, f).data
    gap = ((f + bw) ** 2).sum(-1)
    mag = (f ** 2).sum(-1) + (bw ** 2).sum(-1)
    return gap < config.fb_threshold_abs + config.fb_threshold_rel * mag


def charbonnier(x, eps: float = 1e-3) -> Tensor:
    return E.sqrt(E.add(E.square(x), eps * eps))


def photo_crw_loss(xs, xt, flow, g_avg, config: RegressorConfig, mask: np.ndarray | None = None,
                   image_s: np.ndarray | None = None, image_t: np.ndarray | None = None) -> Tensor:
    """Masked feature reconstruction plus agreement with the nonparametric flow, per-pixel means.

    With ``photometric='charbonnier'`` the feature term compares raw pixels
    with a Charbonnier penalty instead of embeddings.
    """
    flow = E.as_tensor(flow)
    h, w = flow.shape[:2]
    if config.photometric == "features":
        src = Tensor(np.asarray(xs.data if isinstance(xs, Tensor) else xs))
        tgt = Tensor(np.asarray(xt.data if isinstance(xt, Tensor) else xt))
        per_pixel = E.sum_(E.square(E.sub(src, warp(tgt, flow))), axis=-1)
    else:
        if image_s is None or image_t is None:
            raise ValueError("charbonnier photometric term needs the level images")
        per_pixel = E.mean(charbonnier(E.sub(image_s, warp(image_t, flow)), config.charbonnier_eps), axis=-1)
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        feature = E.mul(E.sum_(E.mul(per_pixel, m)), 1.0 / max(m.sum(), 1.0))
    else:
        feature = E.mean(per_pixel)
    g = np.asarray(g_avg.data if isinstance(g_avg, Tensor) else g_avg)
    agreement = E.mean(E.sum_(E.square(E.sub(flow, g)), axis=-1))
    total = E.mul(feature, config.feature_weight)
    if config.constraint_weight:
        total = E.add(total, E.mul(agreement, config.constraint_weight))
    return total


def crop_window(height: int, width: int, margin: int, levels: int,
                rng: np.random.Generator | None = None) -> tuple[int, int, int, int]:
    """(top, left, crop_h, crop_w) with crop sizes divisible by ``2**levels`` and even offsets."""
    factor = 2 ** levels
    ch = (height - 2 * margin) // factor * factor
    cw = (width - 2 * margin) // factor * factor
    if ch < factor or cw < factor:
        raise ShapeError(f"{height}x{width} frame too small to crop by {margin} px")
    max_top, max_left = (height - ch) // 2, (width - cw) // 2
    if rng is None:
        top, left = max_top // 2, max_left // 2
    else:
        top, left = int(rng.integers(0, max_top + 1)), int(rng.integers(0, max_left + 1))
    return 2 * top, 2 * left, ch, cw


def regressed_flows(frames, params, enc_cfg: EncoderConfig, trans_cfg: TransitionConfig,
                    reg_cfg: RegressorConfig, s: int = 0, t: int = 1):
    """Nonparametric matches and regressed per-level flows for one ordered pair, encoder frozen."""
    with E.no_grad():
        pyr = encode(frames, params, enc_cfg)
        matches = coarse_to_fine(pyr, pyr, trans_cfg, s, t)
    flows = [regress_flow(m.transition, pyr.feature(l + 1, s), m.flow, params, l + 1, reg_cfg,
                          trans_cfg.temperature) for l, m in enumerate(matches)]
    return pyr, matches, flows


def boundary_loss(frames, params, enc_cfg: EncoderConfig, trans_cfg: TransitionConfig,
                  reg_cfg: RegressorConfig, teacher_flow=None, window=None,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Crop self-supervision at the finest level.

    The full-frame regressed flow (detached) supervises the flow predicted on
    a crop, on pixels whose full-frame match leaves the crop.
    """
    frames = np.asarray(frames, dtype=np.float64)
    k, H, W = frames.shape[:3]
    L = enc_cfg.levels
    if teacher_flow is None:
        _, _, flows = regressed_flows(frames[:2], params, enc_cfg, trans_cfg, reg_cfg)
        teacher_flow = flows[-1]
    teacher = np.asarray(teacher_flow.data if isinstance(teacher_flow, Tensor) else teacher_flow)
    if window is None:
        window = crop_window(H, W, reg_cfg.crop_margin, L, rng)
    top, left, ch, cw = window
    if (top, left, ch, cw) == (0, 0, H, W):
        return Tensor(0.0)
    crop = frames[:2, top:top + ch, left:left + cw]
    _, _, student = regressed_flows(crop, params, enc_cfg, trans_cfg, reg_cfg)
    student = student[-1]
    lt, ll = top // 2, left // 2
    hc, wc = student.shape[:2]
    ref = teacher[lt:lt + hc, ll:ll + wc]
    ys, xs = np.mgrid[0:hc, 0:wc]
    tx = xs + ref[..., 0]
    ty = ys + ref[..., 1]
    mask = (tx < 0) | (tx > wc - 1) | (ty < 0) | (ty > hc - 1)
    if not mask.any():
        return Tensor(0.0)
    err = E.sum_(E.square(E.sub(student, ref)), axis=-1)
    return E.mul(E.sum_(E.mul(err, mask.astype(np.float64))), 1.0 / mask.sum())
