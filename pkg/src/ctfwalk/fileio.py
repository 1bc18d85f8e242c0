"""On-disk formats: Middlebury ``.flo``, flow colour PNGs, indexed label PNGs, keypoint CSV."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image

FLO_MAGIC = np.float32(202021.25)


def write_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        fh.write(np.array([w, h], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(flow).tobytes())


def read_flo(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 12 or np.frombuffer(buf, dtype="<f4", count=1)[0] != FLO_MAGIC:
        raise ValueError(f"{path}: bad .flo magic")
    w, h = np.frombuffer(buf, dtype="<i4", count=2, offset=4)
    if w < 0 or h < 0 or len(buf) != 12 + 8 * int(w) * int(h):
        raise ValueError(f"{path}: truncated or malformed .flo file")
    return np.frombuffer(buf, dtype="<f4", offset=12).reshape(int(h), int(w), 2).copy()


def flow_to_color(flow: np.ndarray) -> np.ndarray:
    """Hue encodes direction, saturation the magnitude over its 99th percentile; zero flow is white."""
    flow = np.asarray(flow, dtype=np.float64)
    mag = np.hypot(flow[..., 0], flow[..., 1])
    scale = np.percentile(mag, 99)
    hue = (np.arctan2(-flow[..., 1], -flow[..., 0]) / np.pi + 1.0) / 2.0
    sat = np.clip(mag / scale, 0.0, 1.0) if scale > 0 else np.zeros_like(mag)
    rgb = hsv_to_rgb(np.stack([hue, sat, np.ones_like(mag)], axis=-1))
    return np.round(rgb * 255).astype(np.uint8)


def write_flow_png(path, flow: np.ndarray) -> None:
    Image.fromarray(flow_to_color(flow)).save(path)


def frame_to_uint8(frame: np.ndarray) -> np.ndarray:
    """Map a [-1, 1] frame to 8-bit."""
    return np.round((np.clip(frame, -1, 1) + 1) * 127.5).astype(np.uint8)


def write_frame(path, frame: np.ndarray) -> None:
    arr = frame_to_uint8(np.asarray(frame))
    Image.fromarray(arr[..., 0] if arr.ndim == 3 and arr.shape[2] == 1 else arr).save(path)


def read_frame(path) -> np.ndarray:
    """Read an 8-bit image as float64 in [-1, 1] with a channel axis."""
    arr = np.asarray(Image.open(path), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr[..., :3] / 127.5 - 1.0


def write_label_png(path, labels: np.ndarray, palette_seed: int = 0) -> None:
    """Indexed PNG; ``labels`` is either an integer index map or an ``(h, w, c)`` soft map (argmax)."""
    labels = np.asarray(labels)
    index = labels.argmax(-1) if labels.ndim == 3 else labels
    if index.max(initial=0) > 255 or index.min(initial=0) < 0:
        raise ValueError("label indices must fit in 0..255")
    img = Image.fromarray(index.astype(np.uint8), mode="P")
    rng = np.random.default_rng(palette_seed)
    palette = rng.integers(0, 256, size=(256, 3), dtype=np.uint8)
    palette[0] = 0
    img.putpalette(palette.reshape(-1).tolist())
    img.save(path)


def read_label_png(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "P" and img.mode != "L":
        raise ValueError(f"{path}: expected an indexed or grayscale label image, got mode {img.mode}")
    return np.asarray(img, dtype=np.int64)


def index_to_onehot(index: np.ndarray, n_classes: int | None = None) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    c = int(index.max()) + 1 if n_classes is None else n_classes
    return np.eye(c)[index]


def write_keypoints_csv(path, tracks: np.ndarray, classes=None) -> None:
    """``tracks`` is ``(frames, P, 2)``; rows are ``frame,x,y,class``. NaN positions are skipped."""
    tracks = np.asarray(tracks, dtype=np.float64)
    classes = np.arange(tracks.shape[1]) if classes is None else np.asarray(classes)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["frame", "x", "y", "class"])
        for f, pts in enumerate(tracks):
            for (x, y), c in zip(pts, classes):
                if np.isfinite(x) and np.isfinite(y):
                    out.writerow([f, repr(float(x)), repr(float(y)), int(c)])


def read_keypoints_csv(path) -> np.ndarray:
    """Rows ``(frame, x, y, class)`` as a float array."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"frame", "x", "y", "class"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: keypoint CSV missing columns {sorted(missing)}")
        rows = [(int(r["frame"]), float(r["x"]), float(r["y"]), int(r["class"])) for r in reader]
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def tracks_from_rows(rows: np.ndarray, n_frames: int | None = None) -> np.ndarray:
    """Inverse of :func:`write_keypoints_csv`: ``(frames, classes, 2)`` with NaN gaps."""
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
    nf = int(rows[:, 0].max()) + 1 if n_frames is None else n_frames
    nc = int(rows[:, 3].max()) + 1 if len(rows) else 0
    out = np.full((nf, nc, 2), np.nan)
    f, c = rows[:, 0].astype(int), rows[:, 3].astype(int)
    out[f, c] = rows[:, 1:3]
    return out
