"""Coarse-to-fine matching: local attention, sparse transitions and flow readout."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from . import engine as E
from .encoder import FeaturePyramid
from .engine import ShapeError, Tensor

MASK_BIAS = -1e30


@dataclass
class TransitionConfig:
    window_size: int = 11
    temperature: float = 0.07
    prune_threshold: float = 1e-8
    # "integer": window centred on round(p + f) in the target grid (chains exactly);
    # "bilinear": logits on bilinearly warped target features.
    anchor: str = "integer"

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 != 1:
            raise ValueError("window_size must be odd and >= 3")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.anchor not in ("integer", "bilinear"):
            raise ValueError(f"unknown anchor mode {self.anchor!r}")

    @property
    def radius(self) -> int:
        return (self.window_size - 1) // 2


@lru_cache(maxsize=64)
def coordinate_grid(h: int, w: int) -> np.ndarray:
    """(n, 2) float array; row i is (i mod w, i div w)."""
    ys, xs = np.divmod(np.arange(h * w), w)
    grid = np.stack([xs, ys], axis=1).astype(np.float64)
    grid.setflags(write=False)
    return grid


@lru_cache(maxsize=16)
def window_offsets(window_size: int) -> np.ndarray:
    """(K, 2) integer (dx, dy) offsets in row-major window order."""
    r = (window_size - 1) // 2
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    off = np.stack([dx.ravel(), dy.ravel()], axis=1)
    off.setflags(write=False)
    return off


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


class SparseTransition:
    """Row-stochastic sparse matrix in row-compressed form.

    Entries are sorted by (row, column). ``values`` is a Tensor so the matrix
    participates in gradient computation; the index arrays are constant.
    Transitions produced by :func:`local_attention` also carry the window
    offsets of each entry relative to the row's anchor and the raw window
    logits, which the flow readout and the regressor consume.
    """

    def __init__(self, values: Tensor, rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int],
                 grid: tuple[int, int], offsets: np.ndarray | None = None,
                 window_logits: Tensor | None = None, level: int | None = None):
        self.values = values
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.shape = (int(shape[0]), int(shape[1]))
        self.grid = grid
        self.offsets = offsets
        self.window_logits = window_logits
        self.level = level
        counts = np.bincount(self.rows, minlength=self.shape[0])
        self.indptr = np.concatenate([[0], np.cumsum(counts)])

    @classmethod
    def from_coo(cls, rows, cols, values, shape, grid=None) -> "SparseTransition":
        """Build from unsorted coordinate entries (duplicates are summed)."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = E.as_tensor(values)
        keys = rows * shape[1] + cols
        uniq, inv = np.unique(keys, return_inverse=True)
        vals = E.scatter_add(values, inv.reshape(-1), len(uniq))
        if grid is None:
            grid = (1, shape[1])
        return cls(vals, uniq // shape[1], uniq % shape[1], shape, grid)

    @classmethod
    def from_dense(cls, matrix, grid=None, requires_grad: bool = False) -> "SparseTransition":
        m = np.asarray(matrix.data if isinstance(matrix, Tensor) else matrix, dtype=np.float64)
        rows, cols = np.nonzero(m)
        if isinstance(matrix, Tensor):
            vals = E.gather(E.reshape(matrix, (-1,)), rows * m.shape[1] + cols)
        else:
            vals = Tensor(m[rows, cols], requires_grad=requires_grad)
        return cls(vals, rows, cols, m.shape, grid if grid is not None else (1, m.shape[1]))

    @classmethod
    def identity(cls, n: int, grid=None) -> "SparseTransition":
        idx = np.arange(n)
        return cls(Tensor(np.ones(n)), idx, idx, (n, n), grid if grid is not None else (1, n))

    @property
    def nnz(self) -> int:
        return len(self.cols)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.values.data
        return out

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.rows, weights=self.values.data, minlength=self.shape[0])

    def keys(self) -> np.ndarray:
        return self.rows * self.shape[1] + self.cols

    def __repr__(self) -> str:
        return f"SparseTransition(shape={self.shape}, nnz={self.nnz}, level={self.level})"


def _flow_array(flow, h: int, w: int) -> np.ndarray:
    if flow is None:
        return np.zeros((h * w, 2))
    data = flow.data if isinstance(flow, Tensor) else np.asarray(flow)
    if data.shape != (h, w, 2):
        raise ShapeError(f"flow shape {data.shape} does not match level grid {(h, w)}")
    return data.reshape(h * w, 2)


def warp(features, flow) -> Tensor:
    """Sample ``features`` at ``p + flow(p)`` bilinearly (clamp-to-edge)."""
    features, flow = E.as_tensor(features), E.as_tensor(flow)
    h, w = features.shape[:2]
    if flow.shape != (h, w, 2):
        raise ShapeError(f"flow {flow.shape} does not match features {features.shape}")
    grid = coordinate_grid(h, w).reshape(h, w, 2)
    x = E.add(flow[:, :, 0], grid[:, :, 0])
    y = E.add(flow[:, :, 1], grid[:, :, 1])
    return E.bilinear_sample(features, x, y)


def local_attention(xs, xt, coarse_flow, config: TransitionConfig, level: int | None = None) -> SparseTransition:
    """Masked softmax over a k x k window of the target around each source pixel's anchor.

    ``xs`` and ``xt`` are ``(h, w, d)`` unit-norm embeddings of one level.
    """
    xs, xt = E.as_tensor(xs), E.as_tensor(xt)
    if xs.shape != xt.shape or xs.ndim != 3:
        raise ShapeError(f"embedding shapes differ or are not (h, w, d): {xs.shape} vs {xt.shape}")
    h, w, d = xs.shape
    n = h * w
    grid = coordinate_grid(h, w)
    target = grid + _flow_array(coarse_flow, h, w)
    anchor = round_half_up(target)
    anchor[:, 0] = np.clip(anchor[:, 0], 0, w - 1)
    anchor[:, 1] = np.clip(anchor[:, 1], 0, h - 1)
    off = window_offsets(config.window_size)
    qx = anchor[:, None, 0] + off[None, :, 0]
    qy = anchor[:, None, 1] + off[None, :, 1]
    valid = (qx >= 0) & (qx < w) & (qy >= 0) & (qy < h)
    cols_full = np.clip(qy, 0, h - 1) * w + np.clip(qx, 0, w - 1)
    xs_flat = E.reshape(xs, (n, 1, d))
    if config.anchor == "integer":
        sampled = E.gather(E.reshape(xt, (n, d)), cols_full)
        offsets_full = (np.stack([qx, qy], axis=-1) - anchor[:, None, :]).astype(np.float64)
    else:
        sx = target[:, None, 0] + off[None, :, 0]
        sy = target[:, None, 1] + off[None, :, 1]
        sampled = E.bilinear_sample(xt, sx, sy)
        offsets_full = np.broadcast_to(off[None].astype(np.float64), (n,) + off.shape)
    logits = E.mul(E.sum_(E.mul(sampled, xs_flat), axis=-1), 1.0 / config.temperature)
    probs = E.softmax(E.add(logits, np.where(valid, 0.0, MASK_BIAS)))
    flat_pos = np.flatnonzero(valid)
    values = E.gather(E.reshape(probs, (-1,)), flat_pos)
    rows = flat_pos // off.shape[0]
    return SparseTransition(
        values, rows, cols_full.reshape(-1)[flat_pos], (n, n), (h, w),
        offsets=offsets_full.reshape(-1, 2)[flat_pos],
        window_logits=E.mul(logits, valid.astype(np.float64)),
        level=level,
    )


def expected_flow(A: SparseTransition, coarse_flow=None) -> Tensor:
    """Transition-weighted mean displacement, returned as a total ``(h, w, 2)`` flow.

    With ``coarse_flow`` the result is ``coarse_flow + sum_q A(p, q) (q - anchor(p))``,
    which equals ``A D - D`` plus the sub-pixel part of the anchor that integer
    rounding dropped. Without it, the plain readout ``A D - D`` is returned.
    """
    h, w = A.grid
    n = A.shape[0]
    if coarse_flow is None:
        target = coordinate_grid(*_target_grid(A))[A.cols]
        moved = E.scatter_add(E.mul(E.reshape(A.values, (-1, 1)), target), A.rows, n)
        return E.reshape(E.sub(moved, coordinate_grid(h, w)), (h, w, 2))
    if A.offsets is None:
        raise ValueError("transition carries no window offsets; pass coarse_flow=None")
    coarse_flow = E.as_tensor(coarse_flow)
    resid = E.scatter_add(E.mul(E.reshape(A.values, (-1, 1)), A.offsets), A.rows, n)
    return E.add(coarse_flow, E.reshape(resid, (h, w, 2)))


def _target_grid(A: SparseTransition) -> tuple[int, int]:
    h, w = A.grid
    if h * w == A.shape[1]:
        return h, w
    return 1, A.shape[1]


@lru_cache(maxsize=64)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights between pixel-centre-aligned 1-D grids."""
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.minimum(np.floor(src).astype(np.int64), max(n_in - 2, 0))
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    m.setflags(write=False)
    return m


def resize_flow(flow, out_h: int, out_w: int) -> Tensor:
    """Bilinearly resample a flow to a new grid, rescaling vectors to the new pixel units."""
    flow = E.as_tensor(flow)
    h, w = flow.shape[:2]
    my, mx = interp_matrix(h, out_h), interp_matrix(w, out_w)
    chw = E.transpose(flow, (2, 0, 1))
    out = E.matmul(E.matmul(my, chw), np.ascontiguousarray(mx.T))
    scale = np.array([out_w / w, out_h / h]).reshape(2, 1, 1)
    return E.transpose(E.mul(out, scale), (1, 2, 0))


def upsample_flow(flow) -> Tensor:
    """2x bilinear upsampling with values doubled."""
    flow = E.as_tensor(flow)
    return resize_flow(flow, 2 * flow.shape[0], 2 * flow.shape[1])


class LevelMatch(NamedTuple):
    transition: SparseTransition
    flow: Tensor          # total flow at this level
    coarse_flow: Tensor   # upsampled flow from the previous level (zeros at level 1)


def coarse_to_fine(pyr_s: FeaturePyramid, pyr_t: FeaturePyramid, config: TransitionConfig,
                   s: int = 0, t: int = 0, embeddings=None) -> list[LevelMatch]:
    """Run the level recursion from coarsest to finest for frame ``s`` -> ``t``.

    ``embeddings`` optionally overrides the per-level ``(xs, xt)`` pairs.
    """
    if pyr_s.levels != pyr_t.levels:
        raise ShapeError("pyramids have different depths")
    out: list[LevelMatch] = []
    coarse = None
    for level in range(1, pyr_s.levels + 1):
        if embeddings is not None:
            xs, xt = embeddings[level - 1]
        else:
            xs, xt = pyr_s.embedding(level, s), pyr_t.embedding(level, t)
        if xs.shape != xt.shape:
            raise ShapeError(f"level {level}: embedding shapes differ {xs.shape} vs {xt.shape}")
        h, w = xs.shape[:2]
        if coarse is None:
            coarse = Tensor(np.zeros((h, w, 2)))
        elif coarse.shape[:2] != (h, w):
            coarse = resize_flow(coarse, h, w) if coarse.shape[:2] != (h // 2, w // 2) else upsample_flow(coarse)
        A = local_attention(xs, xt, coarse, config, level=level)
        flow = expected_flow(A, coarse)
        out.append(LevelMatch(A, flow, coarse))
        coarse = flow
    return out


# ---------------------------------------------------------------------------
# chaining
# ---------------------------------------------------------------------------
def _expand_pairs(P: SparseTransition, Q: SparseTransition) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (e, f) with P entry e's column equal to Q entry f's row."""
    qlen = np.diff(Q.indptr)
    counts = qlen[P.cols]
    total = int(counts.sum())
    e = np.repeat(np.arange(P.nnz), counts)
    starts = np.repeat(Q.indptr[P.cols], counts)
    within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    return e, starts + within


_DENSE_KEY_LIMIT = 1 << 25


def _unique_keys(keys: np.ndarray, space: int) -> tuple[np.ndarray, np.ndarray]:
    """Sorted unique keys and the inverse map; dense marking when the key space is small."""
    if space > _DENSE_KEY_LIMIT:
        uniq, inv = np.unique(keys, return_inverse=True)
        return uniq, inv.reshape(-1)
    mark = np.zeros(space, dtype=bool)
    mark[keys] = True
    uniq = np.flatnonzero(mark)
    table = np.empty(space, dtype=np.int64)
    table[uniq] = np.arange(len(uniq))
    return uniq, table[keys]


def sparse_matmul(P: SparseTransition, Q: SparseTransition, prune_threshold: float = 0.0) -> SparseTransition:
    if P.shape[1] != Q.shape[0]:
        raise ShapeError(f"cannot multiply {P.shape} by {Q.shape}")
    n, m = P.shape[0], Q.shape[1]
    e, f = _expand_pairs(P, Q)
    prod = E.mul(E.gather(P.values, e), E.gather(Q.values, f))
    keys = P.rows[e] * m + Q.cols[f]
    uniq, inv = _unique_keys(keys, n * m)
    vals = E.scatter_add(prod, inv, len(uniq))
    rows, cols = uniq // m, uniq % m
    if prune_threshold > 0:
        keep = np.flatnonzero(vals.data >= prune_threshold)
        if len(keep) < len(uniq):
            vals = E.gather(vals, keep)
            rows, cols = rows[keep], cols[keep]
            sums = E.scatter_add(vals, rows, n)
            vals = E.div(vals, E.gather(sums, rows))
    return SparseTransition(vals, rows, cols, (n, m), Q.grid, level=P.level)


def chain(transitions: Sequence[SparseTransition], prune_threshold: float = 1e-8,
          n: int | None = None) -> SparseTransition:
    """Ordered product of transitions; the empty product is the identity of size ``n``."""
    if not transitions:
        if n is None:
            raise ValueError("chain of no transitions needs an explicit size n")
        return SparseTransition.identity(n)
    out = transitions[0]
    for nxt in transitions[1:]:
        out = sparse_matmul(out, nxt, prune_threshold)
    return out


def product_diagonal(P: SparseTransition, Q: SparseTransition) -> Tensor:
    """diag(P Q) without forming the product."""
    if P.shape[1] != Q.shape[0] or P.shape[0] != Q.shape[1]:
        raise ShapeError(f"diag(PQ) needs square-compatible shapes, got {P.shape} and {Q.shape}")
    n = P.shape[0]
    qkeys = Q.keys()
    want = P.cols * Q.shape[1] + P.rows
    pos = np.searchsorted(qkeys, want)
    pos_c = np.minimum(pos, len(qkeys) - 1)
    hit = np.flatnonzero((pos < len(qkeys)) & (qkeys[pos_c] == want))
    if len(hit) == 0:
        return Tensor(np.zeros(n))
    prod = E.mul(E.gather(P.values, hit), E.gather(Q.values, pos_c[hit]))
    return E.scatter_add(prod, P.rows[hit], n)
