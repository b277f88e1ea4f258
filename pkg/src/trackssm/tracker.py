"""Online tracking: Kalman baseline, IoU/Hungarian matching and two-stage ByteTrack association."""

from __future__ import annotations

import enum
import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Protocol

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from .data_io import Records
from .errors import ConfigError, DomainError, InputError
from .model import BBox, TrackSSM, history_steps, left_pad


# --- Kalman filter baseline --------------------------------------------------


@dataclass(frozen=True)
class KalmanState:
    mean: np.ndarray  # (cx, cy, w, h, vcx, vcy, vw, vh)
    covariance: np.ndarray  # 8 x 8


class KalmanFilter:
    """Constant-velocity filter over (cx, cy, w, h); noise std proportional to box height."""

    def __init__(
        self,
        std_weight_position: float = 1.0 / 20,
        std_weight_velocity: float = 1.0 / 160,
        std_weight_measurement: float | None = None,
    ):
        self.std_weight_position = std_weight_position
        self.std_weight_velocity = std_weight_velocity
        # measurement std defaults to the position weight, as in ByteTrack
        self.std_weight_measurement = std_weight_position if std_weight_measurement is None else std_weight_measurement
        self.motion_mat = np.eye(8)
        self.motion_mat[:4, 4:] = np.eye(4)
        self.update_mat = np.eye(4, 8)

    def initiate(self, box) -> KalmanState:
        box = np.asarray(box, dtype=np.float64)
        mean = np.concatenate([box, np.zeros(4)])
        h = box[3]
        std = np.r_[[2 * self.std_weight_position * h] * 4, [10 * self.std_weight_velocity * h] * 4]
        return KalmanState(mean, np.diag(std**2))

    def process_noise(self, mean: np.ndarray) -> np.ndarray:
        h = mean[3]
        std = np.r_[[self.std_weight_position * h] * 4, [self.std_weight_velocity * h] * 4]
        return np.diag(std**2)

    def measurement_noise(self, mean: np.ndarray) -> np.ndarray:
        h = mean[3]
        return np.diag(np.full(4, (self.std_weight_measurement * h) ** 2))

    def predict(self, s: KalmanState) -> KalmanState:
        F = self.motion_mat
        mean = F @ s.mean
        cov = F @ s.covariance @ F.T + self.process_noise(s.mean)
        return KalmanState(mean, 0.5 * (cov + cov.T))

    def update(self, s: KalmanState, box) -> KalmanState:
        z = np.asarray(box, dtype=np.float64)
        Hm = self.update_mat
        S = Hm @ s.covariance @ Hm.T + self.measurement_noise(s.mean) + 1e-9 * np.eye(4)
        PHt = s.covariance @ Hm.T
        try:
            chol = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
        except np.linalg.LinAlgError as e:
            raise DomainError(f"innovation covariance is singular: {e}") from None
        K = scipy.linalg.cho_solve(chol, PHt.T, check_finite=False).T
        mean = s.mean + K @ (z - Hm @ s.mean)
        cov = s.covariance - K @ S @ K.T
        return KalmanState(mean, 0.5 * (cov + cov.T))


_default_kf = KalmanFilter()


def kf_predict(s: KalmanState, kf: KalmanFilter = _default_kf) -> KalmanState:
    return kf.predict(s)


def kf_update(s: KalmanState, det_box, kf: KalmanFilter = _default_kf) -> KalmanState:
    return kf.update(s, det_box.as_array() if isinstance(det_box, BBox) else det_box)


# --- IoU and assignment ------------------------------------------------------


def _corners(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def iou_pairs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of two broadcastable box arrays [..., 4]."""
    ca, cb = _corners(a), _corners(b)
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0, None)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a: BBox, b: BBox) -> float:
    return float(iou_pairs(a.as_array(), b.as_array()))


def iou_matrix(preds: np.ndarray, dets: np.ndarray) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 4)
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 4)
    return iou_pairs(preds[:, None, :], dets[None, :, :])


@dataclass(frozen=True)
class Assignment:
    matches: list[tuple[int, int]]
    unmatched_rows: list[int]
    unmatched_cols: list[int]


def hungarian_assign(cost: np.ndarray, max_cost: float = np.inf) -> Assignment:
    """Minimum-cost matching restricted to entries ``<= max_cost``.

    Gated entries are priced above any feasible matching, so the solver first
    maximizes the number of allowed pairs and then minimizes their total cost.
    Any gated pair it was forced to use is stripped afterwards. Among equally
    good matchings the lexicographically smallest list of (row, col) pairs wins.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    R, C = cost.shape
    if R == 0 or C == 0:
        return Assignment([], list(range(R)), list(range(C)))
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    allowed = cost <= max_cost
    if not allowed.any():
        return Assignment([], list(range(R)), list(range(C)))
    span = float(np.max(np.abs(cost[allowed])))
    penalty = 1.0 + 2.0 * min(R, C) * (span + 1.0)
    priced = np.where(allowed, cost, penalty)
    tol = 64 * np.finfo(np.float64).eps * (1.0 + min(R, C) * span)

    def solve(rows, cols):
        if not rows or not cols:
            return {}, 0.0
        r_idx, c_idx = linear_sum_assignment(priced[np.ix_(rows, cols)])
        m = {rows[a]: cols[b] for a, b in zip(r_idx, c_idx) if allowed[rows[a], cols[b]]}
        return m, sum(cost[r, c] for r, c in m.items())

    rows, cols = list(range(R)), list(range(C))
    cur, total = solve(rows, cols)
    matches = []
    # fix rows in order, each to the smallest column some optimal matching allows
    for r in range(R):
        rest_rows = [x for x in rows if x != r]
        pick = None
        for c in cols:
            if c == cur.get(r):
                break
            if not allowed[r, c]:
                continue
            rest_cols = [y for y in cols if y != c]
            m, s_rest = solve(rest_rows, rest_cols)
            if len(m) + 1 == len(cur) and s_rest + cost[r, c] <= total + tol:
                pick = (c, m, s_rest)
                break
        if pick is None and r in cur:
            c = cur[r]
            pick = (c, {k: v for k, v in cur.items() if k != r}, total - cost[r, c])
        rows = rest_rows
        if pick is not None:
            c, cur, total = pick
            cols.remove(c)
            matches.append((r, c))
    mr = {r for r, _ in matches}
    mc = {c for _, c in matches}
    return Assignment(matches, [r for r in range(R) if r not in mr], [c for c in range(C) if c not in mc])


# --- tracks ------------------------------------------------------------------


class TrackStatus(enum.Enum):
    TENTATIVE = "tentative"
    ACTIVE = "active"
    LOST = "lost"
    REMOVED = "removed"


@dataclass
class Track:
    id: int
    capacity: int
    status: TrackStatus = TrackStatus.TENTATIVE
    score: float = 0.0
    age_since_update: int = 0
    hits: int = 0
    last_prediction: np.ndarray | None = None
    last_real_box: np.ndarray | None = None
    last_real_frame: int = 0
    motion_state: object = None
    boxes: deque = field(default_factory=deque)  # (frame, box, is_virtual), oldest first

    def __post_init__(self):
        self.boxes = deque(self.boxes, maxlen=self.capacity)

    @property
    def box(self) -> np.ndarray:
        return self.boxes[-1][1]

    def box_history(self) -> np.ndarray:
        return np.stack([b for _, b, _ in self.boxes])

    def history_steps(self, n: int) -> np.ndarray:
        return history_steps(left_pad(self.box_history(), n))

    def append_real(self, frame: int, box: np.ndarray) -> None:
        gap = frame - self.last_real_frame
        if self.last_real_box is not None and gap > 1:
            # replace coasting predictions with the straight path to the new observation
            start = self.last_real_box
            fixed = deque(maxlen=self.capacity)
            for f, b, virtual in self.boxes:
                if virtual:
                    t = (f - self.last_real_frame) / gap
                    b = start + t * (box - start)
                fixed.append((f, b, False))
            self.boxes = fixed
        self.boxes.append((frame, np.asarray(box, dtype=np.float64), False))
        self.last_real_box = np.asarray(box, dtype=np.float64)
        self.last_real_frame = frame

    def append_virtual(self, frame: int, box: np.ndarray) -> None:
        self.boxes.append((frame, np.asarray(box, dtype=np.float64), True))


# --- motion predictors -------------------------------------------------------


class MotionPredictor(Protocol):
    def init_track(self, track: Track, box: np.ndarray) -> None: ...

    def predict(self, tracks: list[Track]) -> np.ndarray: ...

    def update(self, track: Track, box: np.ndarray) -> None: ...


class KalmanPredictor:
    """Constant-velocity Kalman baseline; per-track state lives in ``track.motion_state``."""

    def __init__(self, kf: KalmanFilter | None = None):
        self.kf = kf or KalmanFilter()

    def init_track(self, track: Track, box: np.ndarray) -> None:
        track.motion_state = self.kf.initiate(box)

    def predict(self, tracks: list[Track]) -> np.ndarray:
        out = np.zeros((len(tracks), 4))
        for i, t in enumerate(tracks):
            t.motion_state = self.kf.predict(t.motion_state)
            out[i] = t.motion_state.mean[:4]
        out[:, 2:] = np.maximum(out[:, 2:], 1e-6)
        return out

    def update(self, track: Track, box: np.ndarray) -> None:
        track.motion_state = self.kf.update(track.motion_state, box)


class SSMPredictor:
    """TrackSSM over each track's (left-padded) box history; batched across tracks."""

    def __init__(self, model: TrackSSM, history_len: int):
        self.model = model
        self.history_len = history_len

    def init_track(self, track: Track, box: np.ndarray) -> None:
        pass

    def predict(self, tracks: list[Track]) -> np.ndarray:
        if not tracks:
            return np.zeros((0, 4))
        steps = np.stack([t.history_steps(self.history_len) for t in tracks])
        return self.model.predict_boxes(steps)

    def update(self, track: Track, box: np.ndarray) -> None:
        pass


# --- association -------------------------------------------------------------


@dataclass(frozen=True)
class AssociationConfig:
    track_high_thresh: float = 0.6
    track_low_thresh: float = 0.1
    iou_gate_high: float = 0.2  # stage-1 minimum IoU
    iou_gate_low: float = 0.5  # stage-2 minimum IoU
    max_lost_age: int = 30
    min_hits: int = 2  # consecutive matches for tentative -> active
    history_len: int = 5

    def __post_init__(self):
        if not 0 <= self.track_low_thresh < self.track_high_thresh <= 1:
            raise ConfigError("need 0 <= low threshold < high threshold <= 1")
        for g in (self.iou_gate_high, self.iou_gate_low):
            if not 0 < g < 1:
                raise ConfigError("IoU gates must lie in (0, 1)")
        if self.max_lost_age < 0 or self.min_hits < 1 or self.history_len < 1:
            raise ConfigError("invalid lifecycle settings")


@dataclass
class FrameResult:
    frame: int
    matches: list[tuple[int, int]]  # (track id, detection index)
    spawned: list[tuple[int, int]]  # (new track id, detection index)
    lost: list[int]
    removed: list[int]
    discarded: list[int]  # detection indices below the low threshold or left over in stage 2
    outputs: list[tuple[int, np.ndarray]]  # (track id, box) emitted for this frame


class ByteTracker:
    """Two-stage association: high-score detections against all tracks, then low-score ones against active tracks."""

    def __init__(self, predictor: MotionPredictor, cfg: AssociationConfig | None = None):
        self.predictor = predictor
        self.cfg = cfg or AssociationConfig()
        self.tracks: list[Track] = []
        self._ids = itertools.count(1)
        self.frame_count = 0

    def _spawn(self, frame: int, box: np.ndarray, score: float, first_frame: bool) -> Track:
        t = Track(id=next(self._ids), capacity=max(self.cfg.history_len, 1), score=score, hits=1)
        t.status = TrackStatus.ACTIVE if first_frame else TrackStatus.TENTATIVE
        t.append_real(frame, box)
        self.predictor.init_track(t, box)
        self.tracks.append(t)
        return t

    def _match(self, track: Track, frame: int, box: np.ndarray, score: float) -> None:
        self.predictor.update(track, box)
        track.append_real(frame, box)
        track.score = score
        track.age_since_update = 0
        track.hits += 1
        if track.status is TrackStatus.LOST:
            track.status = TrackStatus.ACTIVE
        elif track.status is TrackStatus.TENTATIVE and track.hits >= self.cfg.min_hits:
            track.status = TrackStatus.ACTIVE

    def step(self, frame: int, boxes: np.ndarray, scores: np.ndarray) -> FrameResult:
        cfg = self.cfg
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        first_frame = self.frame_count == 0
        self.frame_count += 1

        pool = [t for t in self.tracks if t.status is not TrackStatus.REMOVED]
        preds = self.predictor.predict(pool)
        for t, p in zip(pool, preds):
            t.last_prediction = p

        high = np.flatnonzero(scores >= cfg.track_high_thresh)
        low = np.flatnonzero((scores >= cfg.track_low_thresh) & (scores < cfg.track_high_thresh))
        discarded = np.flatnonzero(scores < cfg.track_low_thresh).tolist()

        matches: list[tuple[int, int]] = []
        # stage 1
        a1 = hungarian_assign(1.0 - iou_matrix(preds, boxes[high]), 1.0 - cfg.iou_gate_high)
        for r, c in a1.matches:
            matches.append((r, int(high[c])))
        left = [pool[r] for r in a1.unmatched_rows]
        left_idx = list(a1.unmatched_rows)
        # stage 2: only tracks that are currently active
        act = [i for i, t in zip(left_idx, left) if t.status is TrackStatus.ACTIVE]
        a2 = hungarian_assign(1.0 - iou_matrix(preds[act], boxes[low]), 1.0 - cfg.iou_gate_low)
        for r, c in a2.matches:
            matches.append((act[r], int(low[c])))
        discarded += [int(low[c]) for c in a2.unmatched_cols]

        matched_rows = set()
        result_matches = []
        outputs = []
        for r, d in matches:
            t = pool[r]
            self._match(t, frame, boxes[d], float(scores[d]))
            matched_rows.add(r)
            result_matches.append((t.id, d))
            if t.status is TrackStatus.ACTIVE:
                outputs.append((t.id, boxes[d].copy()))

        lost, removed = [], []
        for r, t in enumerate(pool):
            if r in matched_rows:
                continue
            t.hits = 0
            t.age_since_update += 1
            if t.status is TrackStatus.TENTATIVE:
                t.status = TrackStatus.REMOVED
                removed.append(t.id)
                continue
            if t.age_since_update > cfg.max_lost_age:
                t.status = TrackStatus.REMOVED
                removed.append(t.id)
                continue
            t.status = TrackStatus.LOST
            t.append_virtual(frame, preds[r])
            lost.append(t.id)

        spawned = []
        for c in a1.unmatched_cols:
            d = int(high[c])
            t = self._spawn(frame, boxes[d], float(scores[d]), first_frame)
            spawned.append((t.id, d))
            if t.status is TrackStatus.ACTIVE:
                outputs.append((t.id, boxes[d].copy()))

        self.tracks = [t for t in self.tracks if t.status is not TrackStatus.REMOVED]
        outputs.sort(key=lambda x: x[0])
        result_matches.sort()
        return FrameResult(frame, result_matches, spawned, lost, removed, sorted(discarded), outputs)


def byte_associate(tracker: ByteTracker, frame: int, boxes: np.ndarray, scores: np.ndarray) -> FrameResult:
    return tracker.step(frame, boxes, scores)


def detections_by_frame(dets, n_frames: int | None = None) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Group detection records into ascending (frame, boxes, scores), including empty frames."""
    groups = dets.by_frame()
    last = max(groups, default=0)
    if n_frames is not None:
        last = max(last, n_frames)
    out = []
    for f in range(1, last + 1):
        idx = groups.get(f)
        if idx is None:
            out.append((f, np.zeros((0, 4)), np.zeros(0)))
        else:
            out.append((f, dets.boxes[idx], dets.scores[idx]))
    return out


def track_sequence(
    frames: Iterable[tuple[int, np.ndarray, np.ndarray]],
    predictor: MotionPredictor,
    cfg: AssociationConfig | None = None,
):
    """Fold the tracker over ascending frames; returns records sorted by (frame, id)."""
    tracker = ByteTracker(predictor, cfg)
    rows = []
    prev = None
    for frame, boxes, scores in frames:
        if prev is not None and frame <= prev:
            raise InputError(f"frames must be strictly ascending: {frame} after {prev}")
        prev = frame
        res = tracker.step(frame, boxes, scores)
        for tid, b in res.outputs:
            rows.append((frame, tid, *b, 1.0))
    return Records.from_rows(rows).sorted()
