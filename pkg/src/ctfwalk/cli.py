"""Command-line entry point: ``ctfwalk {train,flow,eval,propagate,gradcheck,synth}``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("ctfwalk")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _jitter(text: str) -> tuple[float, float]:
    try:
        b, h = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected --jitter BRIGHTNESS,HUE") from None
    return b, h


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctfwalk", description="Multiscale contrastive random walks for flow and label propagation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory")
    t.add_argument("--model", choices=["nonparametric", "regressor"])
    t.add_argument("--cycle-len", type=int, help="train cycles 2..N in succession")
    t.add_argument("--window", type=int)
    t.add_argument("--levels", type=int)
    t.add_argument("--jitter", type=_jitter, help="brightness,hue bounds")
    t.add_argument("--steps", type=int, help="steps per curriculum stage")
    t.add_argument("--init", help="start from this checkpoint")

    f = sub.add_parser("flow", help="estimate flow between two frames")
    f.add_argument("checkpoint")
    f.add_argument("frame_a")
    f.add_argument("frame_b")
    f.add_argument("--out", required=True, help="output .flo path (a .png visualization is written beside it)")
    f.add_argument("--model", choices=["nonparametric", "regressor"], default="nonparametric")

    e = sub.add_parser("eval", help="evaluate on a dataset written by `synth`")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--model", choices=["nonparametric", "regressor"], default="nonparametric")
    e.add_argument("--out", help="write the table as CSV here")

    g = sub.add_parser("propagate", help="propagate a label mask or keypoints through a frame directory")
    g.add_argument("checkpoint")
    g.add_argument("frames", help="directory of frames")
    g.add_argument("labels", help="frame-0 labels: indexed PNG or keypoint CSV")
    g.add_argument("--out", required=True)
    g.add_argument("--gt", help="keypoint CSV with ground-truth tracks, for PCK")
    g.add_argument("--config", help="config file (propagation.* keys)")
    g.add_argument("--top-k", type=int)
    g.add_argument("--context", type=int)
    g.add_argument("--query-level", type=int)

    c = sub.add_parser("gradcheck", help="finite-difference check of primitives and loss terms")
    c.add_argument("--config", help="accepted for symmetry; the check uses fixed 16x16, L=3 settings")
    c.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("generator", choices=["translation", "occlusion"])
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=4, help="number of sequences")
    s.add_argument("--k", type=int, default=2, help="frames per sequence")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--max-shift", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jitter", type=_jitter)
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_train(args) -> int:
    from .config import RunConfig, load_config
    from .model import FlowModel
    from .training import train

    run = load_config(args.config) if args.config else RunConfig()
    tc = run.train
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if args.out:
        tc = replace(tc, out=args.out)
    if args.model:
        tc = replace(tc, model=args.model)
    if args.cycle_len is not None:
        if args.cycle_len < 2:
            raise UsageError("--cycle-len must be >= 2")
        tc = replace(tc, curriculum=list(range(2, args.cycle_len + 1)))
    if args.steps is not None:
        tc = replace(tc, steps_per_stage=args.steps)
    if args.jitter:
        tc = replace(tc, jitter_brightness=args.jitter[0], jitter_hue=args.jitter[1])
    run = replace(run, train=tc)
    if args.window is not None:
        run = replace(run, transition=replace(run.transition, window_size=args.window))
    if args.levels is not None:
        run = replace(run, encoder=replace(run.encoder, levels=args.levels))
    model = None
    if args.init:
        model = FlowModel.load(args.init, run.regressor)
    result = train(run, model=model, out_dir=tc.out)
    last = result.log[-1] if result.log else None
    print(f"trained {len(result.log)} steps; checkpoints in {tc.out}")
    if last:
        print("final " + " ".join(f"{k}={v:.4g}" for k, v in last.items() if k.startswith("L_")))
    return EXIT_OK


def cmd_flow(args) -> int:
    from .fileio import read_frame, write_flo, write_flow_png
    from .model import FlowModel

    model = FlowModel.load(args.checkpoint)
    a, b = read_frame(args.frame_a), read_frame(args.frame_b)
    if a.shape != b.shape:
        raise UsageError(f"frame sizes differ: {a.shape[:2]} vs {b.shape[:2]}")
    flow = model.flow(a, b, kind=args.model)
    out = Path(args.out)
    write_flo(out, flow)
    write_flow_png(out.with_suffix(".png"), flow)
    print(f"wrote {out} and {out.with_suffix('.png')} ({flow.shape[1]}x{flow.shape[0]})")
    return EXIT_OK


def _sequence_dirs(root: Path) -> list[Path]:
    return sorted(d for d in root.iterdir() if d.is_dir() and any(d.glob("frame_*.png")))


def cmd_eval(args) -> int:
    from .fileio import read_flo, read_frame
    from .model import FlowModel
    from .synthdata import epe, error_rate

    from PIL import Image
    model = FlowModel.load(args.checkpoint)
    root = Path(args.dataset)
    if not root.is_dir():
        raise UsageError(f"{root}: not a directory")
    rows, skipped = [], 0
    all_err, noc_err, bad = [], [], []
    for seq in _sequence_dirs(root):
        gt_path = seq / "flow_00.flo"
        if not gt_path.exists():
            log.warning("%s: no ground-truth flow, skipped", seq.name)
            skipped += 1
            continue
        gt = read_flo(gt_path).astype(np.float64)
        pred = model.flow(read_frame(seq / "frame_00.png"), read_frame(seq / "frame_01.png"), kind=args.model)
        occ_path = seq / "occ_00.png"
        visible = np.asarray(Image.open(occ_path)) == 0 if occ_path.exists() else np.ones(gt.shape[:2], bool)
        err = np.linalg.norm(pred - gt, axis=-1)
        all_err.append(err.ravel())
        noc_err.append(err[visible])
        bad.append(((err > 3) & (err > 0.05 * np.linalg.norm(gt, axis=-1))).ravel())
        rows.append((seq.name, epe(pred, gt), epe(pred, gt, visible), error_rate(pred, gt)))
    if not rows:
        print(f"no evaluable sequences ({skipped} skipped)")
        return EXIT_USAGE
    agg = ("ALL", float(np.concatenate(all_err).mean()), float(np.concatenate(noc_err).mean()),
           100.0 * float(np.concatenate(bad).mean()))
    lines = ["sequence,epe_all,epe_noc,er_percent"] + [f"{n},{a:.4f},{b:.4f},{c:.4f}" for n, a, b, c in rows + [agg]]
    lines.append(f"skipped,{skipped},,")
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def _frame_files(directory: Path) -> list[Path]:
    """``frame_*.png`` when present (dataset layout), otherwise every PNG, sorted by name."""
    if not directory.is_dir():
        return []
    named = sorted(directory.glob("frame_*.png"))
    return named or sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")


def cmd_propagate(args) -> int:
    from .config import RunConfig, load_config
    from .fileio import (index_to_onehot, read_frame, read_keypoints_csv, read_label_png, tracks_from_rows,
                         write_keypoints_csv, write_label_png)
    from .model import FlowModel
    from .propagate import propagate_keypoints, propagate_labels
    from .synthdata import pck

    model = FlowModel.load(args.checkpoint)
    run = load_config(args.config) if args.config else RunConfig()
    pcfg = run.propagation
    for flag, name in ((args.top_k, "top_k"), (args.context, "context_size"), (args.query_level, "query_level")):
        if flag is not None:
            pcfg = replace(pcfg, **{name: flag})
    frame_dir = Path(args.frames)
    files = _frame_files(frame_dir)
    if len(files) < 2:
        raise UsageError(f"{frame_dir}: need a directory with at least two PNG frames")
    frames = np.stack([read_frame(p) for p in files])
    H, W = frames.shape[1:3]
    factor = 2 ** model.encoder.levels
    if H % factor or W % factor:
        raise UsageError(f"frames {H}x{W} must be divisible by {factor} for propagation")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels_path = Path(args.labels)
    if labels_path.suffix.lower() == ".csv":
        rows = read_keypoints_csv(labels_path)
        first = rows[rows[:, 0] == 0]
        order = np.argsort(first[:, 3], kind="stable")
        kp = first[order, 1:3]
        if (kp[:, 0] < 0).any() or (kp[:, 0] > W - 1).any() or (kp[:, 1] < 0).any() or (kp[:, 1] > H - 1).any():
            raise UsageError("keypoints outside frame 0")
        tracks = propagate_keypoints(kp, frames, model.params, model.encoder, pcfg, model.transition)
        write_keypoints_csv(out / "keypoints.csv", tracks, first[order, 3].astype(int))
        print(f"wrote {out / 'keypoints.csv'}")
        if args.gt:
            gt = tracks_from_rows(read_keypoints_csv(args.gt), len(frames))
            gt = gt[:, first[order, 3].astype(int)]
            scores = pck(tracks[1:].reshape(-1, 2), gt[1:].reshape(-1, 2))
            print("PCK " + " ".join(f"@{t:g}px={s:.3f}" for t, s in zip((2, 4, 8), scores)))
        return EXIT_OK
    index = read_label_png(labels_path)
    if index.shape != (H, W):
        raise UsageError(f"label map {index.shape} does not match frame size {(H, W)}")
    q, _ = pcfg.resolve(model.encoder.levels)
    h, w = model.encoder.level_shape(H, W, q)
    f = H // h
    onehot = index_to_onehot(index)
    initial = onehot.reshape(h, f, w, f, -1).mean(axis=(1, 3))
    maps = propagate_labels(initial, frames, model.params, model.encoder, pcfg, model.transition)
    for i, m in enumerate(maps):
        full = np.repeat(np.repeat(m.argmax(-1), f, axis=0), f, axis=1)
        write_label_png(out / f"labels_{i:03d}.png", full)
    print(f"wrote {len(maps)} label maps to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import TOLERANCE, loss_errors, primitive_errors

    results = {**{f"primitive.{k}": v for k, v in primitive_errors(args.seed).items()},
               **{f"loss.{k}": v for k, v in loss_errors(args.seed).items()}}
    failed = 0
    for name, err in results.items():
        ok = bool(np.isfinite(err) and err < TOLERANCE)
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name} max_rel_err={err:.3e}")
    print(f"{len(results) - failed}/{len(results)} passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def cmd_synth(args) -> int:
    from .fileio import write_flo, write_frame, write_keypoints_csv
    from .synthdata import generate_occlusion_sequence, generate_translation_sequence, jitter

    from PIL import Image
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = ["sequence,generator,seed,frames,size,max_shift"]
    for i in range(args.n):
        seed = args.seed * 100003 + i
        if args.generator == "translation":
            seq = generate_translation_sequence(seed, args.size, args.max_shift, args.k)
        else:
            seq = generate_occlusion_sequence(seed, args.size, args.k, max_shift=args.max_shift)
        frames = seq.frames
        if args.jitter:
            frames = jitter(frames, args.jitter[0], args.jitter[1], seed)
        d = out / f"seq_{i:04d}"
        d.mkdir(exist_ok=True)
        for j, fr in enumerate(frames):
            write_frame(d / f"frame_{j:02d}.png", fr)
        for j, (flow, occ) in enumerate(zip(seq.gt_flows, seq.occlusion_masks)):
            write_flo(d / f"flow_{j:02d}.flo", flow)
            Image.fromarray(occ.astype(np.uint8) * 255).save(d / f"occ_{j:02d}.png")
        write_keypoints_csv(d / "keypoints.csv", seq.keypoint_tracks)
        manifest.append(f"{d.name},{args.generator},{seed},{args.k},{args.size},{args.max_shift}")
    (out / "manifest.csv").write_text("\n".join(manifest) + "\n")
    print(f"wrote {args.n} sequences to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "flow": cmd_flow, "eval": cmd_eval, "propagate": cmd_propagate,
            "gradcheck": cmd_gradcheck, "synth": cmd_synth}


def main(argv=None) -> int:
    from .config import ConfigError
    from .engine import ShapeError
    from .training import NumericalError

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShapeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
