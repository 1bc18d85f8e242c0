"""Auto-regressive label propagation along the learned walk.

Labels are soft maps of shape ``(h, w, c)`` at the query level's resolution.
Each target frame attends to its ``m`` most recent predecessors through a
local window anchored at the coarse-to-fine flow, keeps the top-k logits per
row and averages the propagated maps.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engine as E
from .encoder import EncoderConfig, FeaturePyramid, encode
from .engine import ShapeError, Tensor
from .transition import TransitionConfig, coarse_to_fine, interp_matrix, local_attention

LABEL_TOL = 1e-6


@dataclass
class PropagationConfig:
    context_size: int = 1
    top_k: int = 5
    query_level: int | None = None                # None: penultimate level
    hypercolumn_levels: tuple[int, ...] | None = None  # None: the two levels ending at query_level
    window_size: int = 11
    temperature: float = 0.07

    def __post_init__(self):
        if self.context_size < 1:
            raise ValueError("context_size must be >= 1")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError("window_size must be a positive odd number")
        if self.hypercolumn_levels is not None:
            self.hypercolumn_levels = tuple(int(l) for l in self.hypercolumn_levels)

    def resolve(self, levels: int) -> tuple[int, tuple[int, ...]]:
        """Concrete (query level, hypercolumn levels) for a ``levels``-deep pyramid."""
        q = self.query_level if self.query_level is not None else max(levels - 1, 1)
        if not 1 <= q <= levels:
            raise ValueError(f"query_level {q} outside 1..{levels}")
        hc = self.hypercolumn_levels
        if hc is None:
            hc = tuple(l for l in (q - 1, q) if l >= 1)
        if not hc or any(not 1 <= l <= levels for l in hc):
            raise ValueError(f"hypercolumn levels {hc} outside 1..{levels}")
        return q, hc


def check_labelmap(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 3:
        raise ShapeError(f"label map must be (h, w, c), got {labels.shape}")
    if (labels < 0).any():
        raise ValueError("label map has negative entries")
    if (labels.sum(-1) > 1 + LABEL_TOL).any():
        raise ValueError("label map rows sum above 1")
    return labels


def topk_filter(logits, k: int, valid: np.ndarray | None = None, prefer: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the ``k`` largest entries of each row, zeros elsewhere.

    ``valid`` masks out entries; ``prefer`` is a per-column tie-break key
    (smaller wins) applied before column order.
    """
    x = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n, width = x.shape
    if k > width:
        raise ValueError(f"top_k {k} exceeds row length {width}")
    masked = np.where(valid, x, -np.inf) if valid is not None else x
    keys = [np.broadcast_to(np.arange(width), x.shape)]
    if prefer is not None:
        keys.append(np.broadcast_to(np.asarray(prefer), x.shape))
    keys.append(-masked)
    order = np.lexsort(keys, axis=-1)[:, :k]
    kept = np.take_along_axis(masked, order, axis=-1)
    kept = kept - kept.max(axis=-1, keepdims=True)
    w = np.exp(kept)
    w /= w.sum(axis=-1, keepdims=True)
    out = np.zeros_like(x)
    np.put_along_axis(out, order, w, axis=-1)
    return out


def resize_features(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of an ``(h, w, d)`` map (pixel-centre aligned)."""
    h, w = x.shape[:2]
    if (h, w) == (out_h, out_w):
        return x
    return np.einsum("ih,hwd,jw->ijd", interp_matrix(h, out_h), x, interp_matrix(w, out_w))


def hypercolumn(pyr: FeaturePyramid, frame: int, levels: Sequence[int], query_level: int) -> np.ndarray:
    """Embeddings of several levels resized to the query grid, stacked and re-normalized."""
    h, w = pyr.embeddings[query_level - 1].shape[1:3]
    parts = [resize_features(pyr.embedding(l, frame).data, h, w) for l in levels]
    x = np.concatenate(parts, axis=-1)
    return x / np.sqrt((x ** 2).sum(-1, keepdims=True) + 1e-12)


def propagation_step(labels_s: np.ndarray, feat_t: np.ndarray, feat_s: np.ndarray, flow_ts,
                     config: PropagationConfig) -> np.ndarray:
    """Propagate one source label map into the target frame.

    ``flow_ts`` maps target pixels into the source; the window around each
    anchor plays the role of warping the source labels first.
    """
    h, w = feat_t.shape[:2]
    if labels_s.shape[:2] != (h, w):
        raise ShapeError(f"labels {labels_s.shape[:2]} do not match the query grid {(h, w)}")
    tcfg = TransitionConfig(window_size=config.window_size, temperature=config.temperature)
    with E.no_grad():
        A = local_attention(feat_t, feat_s, flow_ts, tcfg)
    n = h * w
    k2 = config.window_size ** 2
    valid = np.zeros((n, k2), dtype=bool)
    cols = np.zeros((n, k2), dtype=np.int64)
    slot = _window_slots(A, config.window_size)
    valid[A.rows, slot] = True
    cols[A.rows, slot] = A.cols
    r = config.window_size // 2
    slots = np.arange(k2)
    # ties go to the slot nearest the anchor, so identical frames map onto themselves
    prefer = (slots % config.window_size - r) ** 2 + (slots // config.window_size - r) ** 2
    weights = topk_filter(A.window_logits.data.reshape(n, k2), min(config.top_k, k2), valid, prefer)
    flat = labels_s.reshape(n, -1)
    out = np.einsum("nk,nkc->nc", weights, flat[cols] * valid[..., None])
    return out.reshape(h, w, -1)


def _window_slots(A, window_size: int) -> np.ndarray:
    """Window slot ``(dy + r) * k + (dx + r)`` of every stored entry of a local transition."""
    r = window_size // 2
    off = np.rint(A.offsets).astype(np.int64)
    return (off[:, 1] + r) * window_size + (off[:, 0] + r)


def propagate_labels(initial: np.ndarray, frames, params, enc_cfg: EncoderConfig, config: PropagationConfig,
                     trans_cfg: TransitionConfig | None = None) -> list[np.ndarray]:
    """Label maps for every frame, starting from ``initial`` on frame 0."""
    labels0 = check_labelmap(initial)
    frames = np.asarray(frames, dtype=np.float64)
    trans_cfg = trans_cfg or TransitionConfig()
    with E.no_grad():
        pyr = encode(frames, params, enc_cfg)
    q, hc_levels = config.resolve(enc_cfg.levels)
    feats = [hypercolumn(pyr, i, hc_levels, q) for i in range(frames.shape[0])]
    if labels0.shape[:2] != feats[0].shape[:2]:
        raise ShapeError(f"initial labels {labels0.shape[:2]} not at query resolution {feats[0].shape[:2]}")
    out = [labels0]
    for t in range(1, frames.shape[0]):
        sources = list(range(max(0, t - config.context_size), t))
        if not sources:
            raise ValueError("empty context")
        acc = np.zeros_like(labels0)
        for s in sources:
            with E.no_grad():
                matches = coarse_to_fine(pyr, pyr, trans_cfg, t, s)
            flow_ts = matches[q - 1].coarse_flow
            acc += propagation_step(out[s], feats[t], feats[s], flow_ts, config)
        out.append(acc / len(sources))
    return out


def keypoints_to_labelmap(keypoints, shape: tuple[int, int], n_classes: int | None = None,
                          scale: float = 1.0) -> np.ndarray:
    """One-hot spatial map per class from ``(x, y, class)`` rows given in full-resolution pixels."""
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, 3)
    h, w = shape
    cls = kp[:, 2].astype(np.int64)
    c = int(cls.max()) + 1 if n_classes is None else n_classes
    if len(kp) and (cls.min() < 0 or cls.max() >= c):
        raise ValueError("keypoint class out of range")
    gx = np.floor(kp[:, 0] / scale + 0.5).astype(np.int64)
    gy = np.floor(kp[:, 1] / scale + 0.5).astype(np.int64)
    if ((gx < 0) | (gx >= w) | (gy < 0) | (gy >= h)).any():
        raise ValueError("keypoint out of bounds")
    labels = np.zeros((h, w, c))
    labels[gy, gx, cls] = 1.0
    over = labels.sum(-1, keepdims=True)
    return labels / np.maximum(over, 1.0)


def labelmap_to_keypoints(labels: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Per-class argmax location as ``(c, 2)`` ``(x, y)``; NaN rows for absent classes.

    Ties go to the first location in row-major order.
    """
    labels = np.asarray(labels, dtype=np.float64)
    h, w, c = labels.shape
    flat = labels.reshape(h * w, c)
    idx = flat.argmax(axis=0)
    out = np.stack([idx % w, idx // w], axis=1).astype(np.float64) * scale
    out[flat.max(axis=0) <= 0] = np.nan
    return out


def propagate_keypoints(keypoints: np.ndarray, frames, params, enc_cfg: EncoderConfig,
                        config: PropagationConfig, trans_cfg: TransitionConfig | None = None) -> np.ndarray:
    """Track ``(P, 2)`` frame-0 keypoints; returns ``(k, P, 2)`` full-resolution positions."""
    frames = np.asarray(frames, dtype=np.float64)
    q, _ = config.resolve(enc_cfg.levels)
    h, w = enc_cfg.level_shape(frames.shape[1], frames.shape[2], q)
    scale = frames.shape[1] / h
    kp = np.asarray(keypoints, dtype=np.float64)
    rows = np.column_stack([kp, np.arange(len(kp))])
    initial = keypoints_to_labelmap(rows, (h, w), len(kp), scale)
    maps = propagate_labels(initial, frames, params, enc_cfg, config, trans_cfg)
    return np.stack([labelmap_to_keypoints(m, scale) for m in maps])
