"""Prediction quality and identity-aware tracking metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data_io import Records
from .errors import DomainError
from .model import TrackSSM
from .tracker import KalmanFilter, hungarian_assign, iou_matrix, iou_pairs
from .training import SegmentArrays


@dataclass(frozen=True)
class EvalReport:
    mean_pred_iou: float
    idf1: float
    mota_lite: float
    id_switches: int
    fp: int
    fn: int

    def csv_header(self) -> str:
        return ",".join(f.name for f in fields(self))

    def csv_row(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="")
        w.writerow([_fmt(v) for v in asdict(self).values()])
        return buf.getvalue()

    def table(self) -> str:
        width = max(len(f.name) for f in fields(self))
        return "\n".join(f"{k:<{width}}  {_fmt(v)}" for k, v in asdict(self).items())


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def mean_prediction_iou(model: TrackSSM, segments: SegmentArrays, batch_size: int = 4096) -> float:
    """Mean IoU between one-step predictions on each history and its next box."""
    if len(segments) == 0:
        raise DomainError("mean IoU over an empty segment set is undefined")
    preds = np.concatenate(
        [model.predict_boxes(segments.histories[i : i + batch_size]) for i in range(0, len(segments), batch_size)]
    )
    return float(iou_pairs(preds, segments.targets).mean())


def kalman_one_step_iou(gt: Records, kf: KalmanFilter | None = None) -> float:
    """Mean IoU of the constant-velocity filter's one-step-ahead prior, updated with every GT box."""
    kf = kf or KalmanFilter()
    ious = []
    for frames, boxes in gt.by_id().values():
        state = None
        prev = None
        for f, b in zip(frames, boxes):
            if state is None or f != prev + 1:
                state = kf.initiate(b)
            else:
                state = kf.predict(state)
                ious.append(float(iou_pairs(state.mean[:4], b)))
                state = kf.update(state, b)
            prev = f
    if not ious:
        raise DomainError("no consecutive ground-truth pairs to evaluate")
    return float(np.mean(ious))


def _frame_pairs(gt: Records, result: Records):
    gt_frames = gt.by_frame()
    res_frames = result.by_frame()
    for f in sorted(set(gt_frames) | set(res_frames)):
        gi = gt_frames.get(f, np.zeros(0, dtype=np.int64))
        ri = res_frames.get(f, np.zeros(0, dtype=np.int64))
        yield f, gi, ri


def idf1(gt: Records, result: Records, iou_thresh: float = 0.5) -> float:
    """Identity F1 over the optimal one-to-one GT-id / predicted-id correspondence."""
    n_gt, n_res = len(gt), len(result)
    if n_gt == 0 and n_res == 0:
        return 1.0
    gt_ids = {int(t): i for i, t in enumerate(np.unique(gt.ids))}
    res_ids = {int(t): i for i, t in enumerate(np.unique(result.ids))}
    overlap = np.zeros((len(gt_ids), len(res_ids)))
    for _, gi, ri in _frame_pairs(gt, result):
        if len(gi) == 0 or len(ri) == 0:
            continue
        m = iou_matrix(gt.boxes[gi], result.boxes[ri]) >= iou_thresh
        for a, b in zip(*np.nonzero(m)):
            overlap[gt_ids[int(gt.ids[gi[a]])], res_ids[int(result.ids[ri[b]])]] += 1
    idtp = 0.0
    if overlap.size:
        rows, cols = linear_sum_assignment(overlap, maximize=True)
        idtp = overlap[rows, cols].sum()
    return float(2 * idtp / (n_gt + n_res))


@dataclass(frozen=True)
class ClearCounts:
    matches: int
    fp: int
    fn: int
    id_switches: int
    n_gt: int

    @property
    def mota(self) -> float:
        if self.n_gt == 0:
            return 1.0 if self.fp == 0 else -float(self.fp)
        return 1.0 - (self.fp + self.fn + self.id_switches) / self.n_gt


def clear_counts(gt: Records, result: Records, iou_thresh: float = 0.5) -> ClearCounts:
    """Per-frame IoU matching; an id switch is a GT track matched to a different id than last time."""
    last_match: dict[int, int] = {}
    tp = fp = fn = sw = 0
    for _, gi, ri in _frame_pairs(gt, result):
        if len(gi) and len(ri):
            a = hungarian_assign(1.0 - iou_matrix(gt.boxes[gi], result.boxes[ri]), 1.0 - iou_thresh)
            pairs = a.matches
        else:
            pairs = []
        tp += len(pairs)
        fn += len(gi) - len(pairs)
        fp += len(ri) - len(pairs)
        for r, c in pairs:
            g, p = int(gt.ids[gi[r]]), int(result.ids[ri[c]])
            if g in last_match and last_match[g] != p:
                sw += 1
            last_match[g] = p
    return ClearCounts(tp, fp, fn, sw, len(gt))


def mota_lite(gt: Records, result: Records, iou_thresh: float = 0.5) -> float:
    return clear_counts(gt, result, iou_thresh).mota


def evaluate(gt: Records, result: Records, mean_pred_iou: float, iou_thresh: float = 0.5) -> EvalReport:
    c = clear_counts(gt, result, iou_thresh)
    return EvalReport(
        mean_pred_iou=float(mean_pred_iou),
        idf1=idf1(gt, result, iou_thresh),
        mota_lite=c.mota,
        id_switches=c.id_switches,
        fp=c.fp,
        fn=c.fn,
    )
