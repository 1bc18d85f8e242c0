"""Synthetic clips with exact ground truth, photometric jitter and flow/keypoint metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import gaussian_filter

from .engine import ShapeError


@dataclass
class SyntheticSequence:
    frames: np.ndarray            # (k, H, W, C) in [-1, 1]
    gt_flows: np.ndarray          # (k-1, H, W, 2), frame i -> i+1, full resolution
    occlusion_masks: np.ndarray   # (k-1, H, W) bool, True where the pixel has no match in frame i+1
    keypoint_tracks: np.ndarray   # (k, P, 2) (x, y) per frame
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def visible_masks(self) -> np.ndarray:
        return ~self.occlusion_masks


@dataclass
class MetricReport:
    epe_all: float
    epe_noc: float
    er_percent: float
    pck: dict[float, float] = field(default_factory=dict)

    def as_row(self) -> dict[str, float]:
        row = {"epe_all": self.epe_all, "epe_noc": self.epe_noc, "er_percent": self.er_percent}
        row.update({f"pck@{t:g}": v for t, v in self.pck.items()})
        return row


def _size(size) -> tuple[int, int]:
    if isinstance(size, int):
        return size, size
    return int(size[0]), int(size[1])


def random_texture(rng: np.random.Generator, height: int, width: int, channels: int = 3,
                   texture_scale: float = 1.0, n_waves: int = 6) -> np.ndarray:
    """Band-limited colour texture in [-1, 1]: random sinusoids plus smoothed noise."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)

    def layer() -> np.ndarray:
        out = np.zeros((height, width))
        for _ in range(n_waves):
            freq = rng.uniform(0.03, 0.2) / texture_scale
            theta = rng.uniform(0, np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            out += rng.uniform(0.3, 1.0) * np.sin(
                2 * np.pi * freq * (xs * np.cos(theta) + ys * np.sin(theta)) + phase)
        out /= np.abs(out).max() + 1e-12
        # smoothed noise at several scales keeps structure visible at every pyramid level
        noise = np.zeros((height, width))
        for sigma in (1.0, 2.0, 4.0, 8.0):
            band = gaussian_filter(rng.standard_normal((height, width)), sigma * texture_scale, mode="wrap")
            noise += band / (band.std() + 1e-12)
        noise /= np.abs(noise).max() + 1e-12
        return 0.3 * out + 0.7 * noise

    shared = layer()
    tex = np.stack([0.5 * shared + 0.5 * layer() for _ in range(channels)], axis=-1)
    tex /= np.abs(tex).max() + 1e-12
    return 0.9 * tex


def _sample_keypoints(rng, n, h, w, lo_x, hi_x, lo_y, hi_y):
    xs = rng.integers(max(lo_x, 0), max(min(hi_x, w), max(lo_x, 0) + 1), size=n)
    ys = rng.integers(max(lo_y, 0), max(min(hi_y, h), max(lo_y, 0) + 1), size=n)
    return np.stack([xs, ys], axis=1).astype(np.float64)


def generate_translation_sequence(seed: int, size=64, max_shift: int = 4, k: int = 2,
                                  texture_scale: float = 1.0, channels: int = 3,
                                  n_keypoints: int = 20, shift: tuple[int, int] | None = None) -> SyntheticSequence:
    """A random texture translated by one integer vector per frame."""
    rng = np.random.default_rng(seed)
    h, w = _size(size)
    if shift is None:
        shift = tuple(int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    sx, sy = shift
    pad_x = abs(sx) * (k - 1) + 2
    pad_y = abs(sy) * (k - 1) + 2
    canvas = random_texture(rng, h + 2 * pad_y, w + 2 * pad_x, channels, texture_scale)
    frames = []
    for i in range(k):
        # frame_i(q) = canvas(q - i * s + pad)
        oy, ox = pad_y - i * sy, pad_x - i * sx
        frames.append(canvas[oy:oy + h, ox:ox + w])
    frames = np.stack(frames)
    flow = np.empty((h, w, 2))
    flow[..., 0], flow[..., 1] = sx, sy
    ys, xs = np.mgrid[0:h, 0:w]
    occ = (xs + sx < 0) | (xs + sx > w - 1) | (ys + sy < 0) | (ys + sy > h - 1)
    total_x, total_y = sx * (k - 1), sy * (k - 1)
    kp0 = _sample_keypoints(rng, n_keypoints, h, w,
                            max(0, -total_x) + 2, w - max(0, total_x) - 2,
                            max(0, -total_y) + 2, h - max(0, total_y) - 2)
    tracks = np.stack([kp0 + np.array([sx, sy]) * i for i in range(k)])
    return SyntheticSequence(frames, np.repeat(flow[None], k - 1, axis=0),
                             np.repeat(occ[None], k - 1, axis=0), tracks, seed,
                             {"generator": "translation", "shift": (sx, sy)})


def generate_occlusion_sequence(seed: int, size=64, k: int = 2, bg_shift: tuple[int, int] | None = None,
                                fg_shift: tuple[int, int] | None = None, fg_size: int | None = None,
                                channels: int = 3, max_shift: int = 3, n_keypoints: int = 20) -> SyntheticSequence:
    """A textured square moving over a differently moving textured background."""
    rng = np.random.default_rng(seed)
    h, w = _size(size)
    if min(h, w) < 32:
        raise ValueError("occlusion sequences need size >= 32")
    if bg_shift is None:
        bg_shift = tuple(int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    if fg_shift is None:
        fg_shift = tuple(int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    fg_size = fg_size or max(h, w) // 3
    bx, by = bg_shift
    fx, fy = fg_shift
    pad = max(abs(bx), abs(by)) * (k - 1) + 2
    bg = random_texture(rng, h + 2 * pad, w + 2 * pad, channels)
    fg = random_texture(rng, fg_size, fg_size, channels, texture_scale=0.7)
    # keep the square fully inside every frame
    lo_x = max(0, -fx * (k - 1)) + 1
    hi_x = w - fg_size - max(0, fx * (k - 1)) - 1
    lo_y = max(0, -fy * (k - 1)) + 1
    hi_y = h - fg_size - max(0, fy * (k - 1)) - 1
    x0 = int(rng.integers(lo_x, max(hi_x, lo_x) + 1))
    y0 = int(rng.integers(lo_y, max(hi_y, lo_y) + 1))

    ys, xs = np.mgrid[0:h, 0:w]

    def fg_mask(i):
        cx, cy = x0 + i * fx, y0 + i * fy
        return (xs >= cx) & (xs < cx + fg_size) & (ys >= cy) & (ys < cy + fg_size)

    frames = []
    for i in range(k):
        oy, ox = pad - i * by, pad - i * bx
        frame = bg[oy:oy + h, ox:ox + w].copy()
        cx, cy = x0 + i * fx, y0 + i * fy
        frame[cy:cy + fg_size, cx:cx + fg_size] = fg
        frames.append(frame)
    frames = np.stack(frames)
    flows, occs = [], []
    for i in range(k - 1):
        m = fg_mask(i)
        flow = np.empty((h, w, 2))
        flow[..., 0] = np.where(m, fx, bx)
        flow[..., 1] = np.where(m, fy, by)
        tx = xs + flow[..., 0].astype(int)
        ty = ys + flow[..., 1].astype(int)
        out = (tx < 0) | (tx > w - 1) | (ty < 0) | (ty > h - 1)
        covered = np.zeros((h, w), dtype=bool)
        inside = ~out
        covered[inside] = fg_mask(i + 1)[ty[inside], tx[inside]]
        occs.append(out | (covered & ~m))
        flows.append(flow)
    # keypoints on the foreground square
    kp0 = _sample_keypoints(rng, n_keypoints, h, w, x0, x0 + fg_size, y0, y0 + fg_size)
    tracks = np.stack([kp0 + np.array([fx, fy]) * i for i in range(k)])
    return SyntheticSequence(frames, np.stack(flows), np.stack(occs), tracks, seed,
                             {"generator": "occlusion", "bg_shift": bg_shift, "fg_shift": fg_shift})


# ---------------------------------------------------------------------------
# photometric jitter
# ---------------------------------------------------------------------------
def adjust_brightness(frame: np.ndarray, factor: float) -> np.ndarray:
    """Scale intensities in [0, 1] space and clamp, for frames stored in [-1, 1]."""
    unit = (frame + 1.0) / 2.0
    return np.clip(unit * factor, 0.0, 1.0) * 2.0 - 1.0


def adjust_hue(frame: np.ndarray, shift: float) -> np.ndarray:
    """Rotate hue by ``shift`` turns (in [-0.5, 0.5])."""
    if frame.shape[-1] != 3:
        raise ShapeError("hue jitter needs RGB frames")
    hsv = rgb_to_hsv(np.clip((frame + 1.0) / 2.0, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return hsv_to_rgb(hsv) * 2.0 - 1.0


def jitter(frames: np.ndarray, brightness_max: float, hue_max: float, seed: int) -> np.ndarray:
    """Random brightness/hue change on every frame after the first."""
    frames = np.asarray(frames, dtype=np.float64)
    if hue_max > 0 and frames.shape[-1] != 3:
        raise ShapeError("hue jitter needs RGB frames")
    rng = np.random.default_rng(seed)
    out = frames.copy()
    for i in range(1, frames.shape[0]):
        b = rng.uniform(1.0 - brightness_max, 1.0 + brightness_max)
        hshift = rng.uniform(-hue_max, hue_max)
        if brightness_max > 0:
            out[i] = adjust_brightness(out[i], b)
        if hue_max > 0:
            out[i] = adjust_hue(out[i], hshift)
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------
def _endpoint_errors(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    err = np.linalg.norm(pred - gt, axis=-1)
    if mask is None:
        mask = np.ones(err.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != err.shape:
        raise ShapeError(f"mask {mask.shape} does not match flow {err.shape}")
    if not mask.any():
        raise ValueError("empty mask")
    return err, mask, np.linalg.norm(gt, axis=-1)


def epe(pred, gt, mask=None) -> float:
    err, mask, _ = _endpoint_errors(pred, gt, mask)
    return float(err[mask].mean())


def error_rate(pred, gt, mask=None) -> float:
    """Percentage of pixels whose error exceeds both 3 px and 5% of the true magnitude."""
    err, mask, mag = _endpoint_errors(pred, gt, mask)
    bad = (err > 3.0) & (err > 0.05 * mag)
    return 100.0 * float(bad[mask].mean())


def pck(pred, gt, thresholds=(2.0, 4.0, 8.0)) -> list[float]:
    """Fraction of keypoints within each pixel threshold; NaN predictions count as misses."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ShapeError("keypoint arrays differ in shape")
    if len(gt) == 0:
        raise ValueError("no keypoints")
    dist = np.linalg.norm(pred - gt, axis=1)
    dist = np.where(np.isnan(dist), np.inf, dist)
    return [float((dist <= t).mean()) for t in thresholds]


def flow_report(pred, gt, occluded) -> MetricReport:
    visible = ~np.asarray(occluded, dtype=bool)
    return MetricReport(epe(pred, gt), epe(pred, gt, visible), error_rate(pred, gt))
