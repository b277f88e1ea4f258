"""Command-line entry point: ``trackssm synth|train|track|eval|ablate``."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data_io import Records, gen_scene, parse_mot, segment_arrays, write_mot
from .errors import TrackSSMError
from .metrics import EvalReport, evaluate, kalman_one_step_iou, mean_prediction_iou
from .tracker import KalmanPredictor, SSMPredictor, detections_by_frame, track_sequence
from .training import train, write_loss_csv

log = logging.getLogger("trackssm")

HISTORY_GRID = (3, 5, 10, 20, 40)
LAYER_GRID = (1, 2, 3, 6, 12)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def _run_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    return cfg.with_overrides(
        seed=getattr(args, "seed", None),
        layers=getattr(args, "layers", None),
        history=getattr(args, "history", None),
        s2l=False if getattr(args, "no_s2l", False) else None,
        normalize=False if getattr(args, "no_normalize", False) else None,
        end_to_end_grad=True if getattr(args, "end_to_end_grad", False) else None,
    )


# --- commands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gt, dets = gen_scene(cfg.scene)
    # scenes are generated in pixels; files are always pixel MOT text
    write_mot(gt, out / "gt.txt", kind="gt")
    write_mot(dets, out / "det.txt", kind="det")
    print(f"wrote {len(gt)} ground-truth rows and {len(dets)} detections to {out}")
    return 0


def _fit(cfg: RunConfig, gt: Records):
    data = segment_arrays(gt, cfg.history)
    if len(data) == 0:
        raise TrackSSMError("ground truth yields no training segments")
    return train(data, cfg.model, cfg.train)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    gt = parse_mot(args.gt, cfg.image_size)
    model, opt, logs = _fit(cfg, gt)
    out = Path(args.out)
    save_checkpoint(out, model, cfg.history, opt)
    loss_path = Path(args.loss_csv) if args.loss_csv else out.with_name(out.name + ".loss.csv")
    write_loss_csv(logs, loss_path)
    print(f"trained {model.num_parameters()} parameters for {len(logs)} epochs; final loss {logs[-1].loss:.6g}")
    return 0


def _predictor(args, cfg: RunConfig):
    if args.motion == "kf":
        return KalmanPredictor(), cfg.association()
    if not args.checkpoint:
        raise TrackSSMError("--motion ssm needs --checkpoint")
    if not Path(args.checkpoint).exists():
        raise TrackSSMError(f"checkpoint {args.checkpoint} does not exist")
    ck = load_checkpoint(args.checkpoint, with_optimizer=False)
    return SSMPredictor(ck.model, ck.history_len), replace(cfg.association(), history_len=ck.history_len)


def cmd_track(args) -> int:
    cfg = _run_config(args)
    predictor, assoc = _predictor(args, cfg)
    dets = parse_mot(args.dets, cfg.image_size)
    result = track_sequence(detections_by_frame(dets), predictor, assoc)
    write_mot(result, args.out, cfg.image_size, kind="result")
    print(f"wrote {len(result)} result rows with {len(set(result.ids.tolist()))} identities to {args.out}")
    return 0


def _mean_iou(cfg: RunConfig, gt: Records, checkpoint: str | None) -> float:
    if checkpoint:
        ck = load_checkpoint(checkpoint, with_optimizer=False)
        segs = segment_arrays(gt, ck.history_len)
        return mean_prediction_iou(ck.model, segs) if len(segs) else float("nan")
    return kalman_one_step_iou(gt)


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    gt = parse_mot(args.gt, cfg.image_size)
    result = parse_mot(args.result, cfg.image_size)
    report = evaluate(gt, result, _mean_iou(cfg, gt, args.checkpoint))
    text = f"{report.csv_header()}\n{report.csv_row()}\n" if args.csv else report.table() + "\n"
    if args.out:
        _atomic_write(Path(args.out), text)
    sys.stdout.write(text)
    return 0


def ablation_rows(cfg: RunConfig, gt: Records, dets: Records, histories, layers) -> list[tuple[str, int, EvalReport]]:
    """Train, track and evaluate once per grid setting; the other axis stays at its configured value."""
    settings = [("history", h, cfg.with_overrides(history=h)) for h in histories]
    settings += [("layers", k, cfg.with_overrides(layers=k)) for k in layers]
    frames = detections_by_frame(dets)
    rows = []
    for axis, value, run in settings:
        model, _, _ = _fit(run, gt)
        result = track_sequence(frames, SSMPredictor(model, run.history), run.association())
        segs = segment_arrays(gt, run.history)
        report = evaluate(gt, result, mean_prediction_iou(model, segs))
        log.info("%s=%d %s", axis, value, report.csv_row())
        rows.append((axis, value, report))
    return rows


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("grid values must be positive integers")
    return vals


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    gt = parse_mot(args.gt, cfg.image_size)
    dets = parse_mot(args.dets, cfg.image_size) if args.dets else gt
    rows = ablation_rows(cfg, gt, dets, args.histories, args.layer_grid)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = EvalReport.__dataclass_fields__.keys()
    w.writerow(["axis", "value", *header])
    for axis, value, rep in rows:
        w.writerow([axis, value, *rep.csv_row().split(",")])
    text = buf.getvalue()
    if args.out:
        _atomic_write(Path(args.out), text)
    sys.stdout.write(text)
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trackssm", description="State-space motion model for multi-object tracking.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, history=True):
        sp.add_argument("--config", help="key = value run configuration file")
        sp.add_argument("--seed", type=int, help="override every seed in the configuration")
        sp.add_argument("--no-normalize", action="store_true", help="keep pixel coordinates")
        if history:
            sp.add_argument("--history", type=int, help="trajectory history length")

    s = sub.add_parser("synth", help="generate a synthetic scene")
    common(s, history=False)
    s.add_argument("--out", required=True, help="output directory for gt.txt and det.txt")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the motion model on ground-truth tracks")
    common(s)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--loss-csv", help="loss log path (default: <checkpoint>.loss.csv)")
    s.add_argument("--layers", type=int, help="number of decoder layers")
    s.add_argument("--no-s2l", action="store_true", help="supervise every layer with the final target")
    s.add_argument("--end-to-end-grad", action="store_true", help="backpropagate through each layer's box input")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("track", help="run the tracker over a detection file")
    common(s)
    s.add_argument("--dets", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--motion", choices=("ssm", "kf"), default="ssm")
    s.add_argument("--checkpoint")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", help="score a tracking result against ground truth")
    common(s, history=False)
    s.add_argument("--gt", required=True)
    s.add_argument("--result", required=True)
    s.add_argument("--checkpoint", help="score one-step predictions of this model (default: Kalman baseline)")
    s.add_argument("--csv", action="store_true", help="emit a CSV header and row")
    s.add_argument("--out", help="also write the report to this file")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="sweep history length and decoder depth")
    common(s, history=False)
    s.add_argument("--gt", required=True)
    s.add_argument("--dets", help="detections to track (default: the ground truth itself)")
    s.add_argument("--histories", type=_int_list, default=list(HISTORY_GRID))
    s.add_argument("--layer-grid", type=_int_list, default=list(LAYER_GRID))
    s.add_argument("--no-s2l", action="store_true")
    s.add_argument("--end-to-end-grad", action="store_true")
    s.add_argument("--out", help="CSV output path")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (TrackSSMError, OSError) as e:
        print(f"trackssm {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
