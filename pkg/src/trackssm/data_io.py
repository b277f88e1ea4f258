"""Synthetic scenes, MOTChallenge text I/O and training-segment construction."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .model import BBox, TrajectoryHistory, history_steps, left_pad
from .training import SegmentArrays, TrainingSegment

# score band used for injected distractor detections (matches the default association thresholds)
DUP_SCORE_LOW = 0.1
DUP_SCORE_HIGH = 0.6


@dataclass
class Records:
    """Flat table of (frame, id, box, score) rows; boxes are center-format [K, 4]."""

    frames: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        n = len(self.frames)
        if not (len(self.ids) == len(self.boxes) == len(self.scores) == n):
            raise ValueError("record columns have different lengths")

    def __len__(self) -> int:
        return len(self.frames)

    @classmethod
    def from_rows(cls, rows) -> "Records":
        """Rows of (frame, id, cx, cy, w, h, score)."""
        rows = list(rows)
        if not rows:
            return cls()
        a = np.asarray(rows, dtype=np.float64)
        return cls(a[:, 0].astype(np.int64), a[:, 1].astype(np.int64), a[:, 2:6], a[:, 6])

    def sorted(self) -> "Records":
        order = np.lexsort((self.ids, self.frames))
        return self.take(order)

    def take(self, idx) -> "Records":
        return Records(self.frames[idx], self.ids[idx], self.boxes[idx], self.scores[idx])

    def frame_ids(self) -> np.ndarray:
        return np.unique(self.frames)

    def by_frame(self) -> dict[int, np.ndarray]:
        """frame -> row indices, frames ascending."""
        out: dict[int, np.ndarray] = {}
        if len(self) == 0:
            return out
        order = np.lexsort((self.ids, self.frames))
        fr = self.frames[order]
        cuts = np.flatnonzero(np.diff(fr)) + 1
        for chunk in np.split(order, cuts):
            out[int(self.frames[chunk[0]])] = chunk
        return out

    def by_id(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """id -> (frames, boxes), each sorted by frame."""
        out = {}
        for tid in np.unique(self.ids):
            sel = np.flatnonzero(self.ids == tid)
            sel = sel[np.argsort(self.frames[sel], kind="stable")]
            out[int(tid)] = (self.frames[sel], self.boxes[sel])
        return out

    def normalized(self, width: float, height: float) -> "Records":
        scale = np.array([width, height, width, height], dtype=np.float64)
        return Records(self.frames, self.ids, self.boxes / scale, self.scores)

    def denormalized(self, width: float, height: float) -> "Records":
        scale = np.array([width, height, width, height], dtype=np.float64)
        return Records(self.frames, self.ids, self.boxes * scale, self.scores)


GroundTruth = Records
TrackingResult = Records


# --- synthetic scenes --------------------------------------------------------


@dataclass(frozen=True)
class SyntheticScene:
    kind: str = "linear"  # linear | sinusoidal | bounce
    n_objects: int = 10
    n_frames: int = 100
    width: float = 1280.0
    height: float = 720.0
    box_w_min: float = 40.0
    box_w_max: float = 80.0
    aspect_min: float = 1.5  # h / w
    aspect_max: float = 2.5
    speed: float = 4.0  # mean |velocity| in px/frame
    speed_jitter: float = 0.25  # per-object speed ~ speed * U(1 - j, 1 + j)
    amplitude: float = 60.0  # sinusoidal: mean vertical amplitude in px
    amplitude_jitter: float = 0.25
    omega: float = 0.15  # sinusoidal: angular frequency in rad/frame
    omega_jitter: float = 0.25
    turn_prob: float = 0.05  # bounce: per-frame probability of a random direction change
    pos_noise: float = 1.0  # detection center noise std, px
    size_noise: float = 1.0  # detection extent noise std, px
    dropout: float = 0.0
    dup_rate: float = 0.05  # low-score distractor rate per kept detection
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("linear", "sinusoidal", "bounce"):
            raise ConfigError(f"unknown scene kind {self.kind!r}")
        if self.n_objects < 1 or self.n_frames < 1:
            raise ConfigError("n_objects and n_frames must be >= 1")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image size must be positive")
        if self.pos_noise < 0 or self.size_noise < 0:
            raise ConfigError("noise std must be nonnegative")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0 <= self.dup_rate <= 1 or not 0 <= self.turn_prob <= 1:
            raise ConfigError("rates must lie in [0, 1]")
        if not 0 < self.box_w_min <= self.box_w_max or not 0 < self.aspect_min <= self.aspect_max:
            raise ConfigError("box size ranges are invalid")
        for name in ("speed_jitter", "amplitude_jitter", "omega_jitter"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.speed < 0 or self.amplitude < 0:
            raise ConfigError("speed and amplitude must be nonnegative")


def scene_from_dict(d: dict) -> SyntheticScene:
    known = {f.name: f.type for f in fields(SyntheticScene)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
    return SyntheticScene(**d)


def _reflect(p: float, v: float, hi: float) -> tuple[float, float]:
    # reflective walls at 0 and hi; loops for steps larger than the arena
    while p < 0 or p > hi:
        if p < 0:
            p, v = -p, -v
        if p > hi:
            p, v = 2 * hi - p, -v
    return p, v


def _jitter(rng: np.random.Generator, mean: float, j: float) -> float:
    return mean * rng.uniform(1 - j, 1 + j)


def gen_scene(
    spec: SyntheticScene,
    starts: np.ndarray | None = None,
    velocities: np.ndarray | None = None,
) -> tuple[Records, Records]:
    """Ground truth and detections in pixel units.

    ``starts`` [n_objects, 2] and ``velocities`` [n_objects, 2] override the
    random initial centers / velocities.
    """
    rng = np.random.default_rng(spec.seed)
    W, H = spec.width, spec.height
    gt_rows = []
    for k in range(spec.n_objects):
        w = rng.uniform(spec.box_w_min, spec.box_w_max)
        h = w * rng.uniform(spec.aspect_min, spec.aspect_max)
        speed = _jitter(rng, spec.speed, spec.speed_jitter)
        theta = rng.uniform(0, 2 * math.pi)
        vx, vy = speed * math.cos(theta), speed * math.sin(theta)
        x, y = rng.uniform(0, W), rng.uniform(0, H)
        amp = _jitter(rng, spec.amplitude, spec.amplitude_jitter)
        omega = _jitter(rng, spec.omega, spec.omega_jitter)
        phase = rng.uniform(0, 2 * math.pi)
        if spec.kind == "sinusoidal":
            vx = speed * (1 if rng.random() < 0.5 else -1)
            vy = 0.0
            amp = min(amp, H / 2)
            y = rng.uniform(amp, H - amp)
        if starts is not None:
            x, y = float(starts[k][0]), float(starts[k][1])
        if velocities is not None:
            vx, vy = float(velocities[k][0]), float(velocities[k][1])
        y0 = y
        for t in range(spec.n_frames):
            if spec.kind == "sinusoidal":
                y = y0 + amp * math.sin(omega * t + phase)
            if t > 0:
                if spec.kind == "bounce" and rng.random() < spec.turn_prob:
                    s = math.hypot(vx, vy)
                    theta = rng.uniform(0, 2 * math.pi)
                    vx, vy = s * math.cos(theta), s * math.sin(theta)
                x, vx = _reflect(x + vx, vx, W)
                if spec.kind != "sinusoidal":
                    y, vy = _reflect(y + vy, vy, H)
            gt_rows.append((t + 1, k + 1, x, y, w, h, 1.0))
    gt = Records.from_rows(gt_rows).sorted()

    det_rows = []
    for i in range(len(gt)):
        if spec.dropout > 0 and rng.random() < spec.dropout:
            continue
        cx, cy, w, h = gt.boxes[i]
        noisy = (
            cx + rng.normal(0, spec.pos_noise) if spec.pos_noise else cx,
            cy + rng.normal(0, spec.pos_noise) if spec.pos_noise else cy,
            max(1.0, w + rng.normal(0, spec.size_noise)) if spec.size_noise else w,
            max(1.0, h + rng.normal(0, spec.size_noise)) if spec.size_noise else h,
        )
        det_rows.append((gt.frames[i], -1, *noisy, rng.uniform(0.5, 1.0)))
        if spec.dup_rate > 0 and rng.random() < spec.dup_rate:
            off = 2 * spec.pos_noise + 0.05 * w
            det_rows.append(
                (
                    gt.frames[i],
                    -1,
                    cx + rng.normal(0, off),
                    cy + rng.normal(0, off),
                    w,
                    h,
                    rng.uniform(DUP_SCORE_LOW, DUP_SCORE_HIGH),
                )
            )
    dets = Records.from_rows(det_rows)
    if len(dets):
        dets = dets.take(np.argsort(dets.frames, kind="stable"))
    return gt, dets


# --- MOTChallenge text format ------------------------------------------------


@dataclass
class ParseReport:
    lines: int = 0
    rows: int = 0
    rejected: int = 0


def _num(tok: str, lineno: int, what: str, integer: bool = False) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"field {what!r} is not a number: {tok[:32]!r}", line=lineno) from None
    if not math.isfinite(v):
        raise ParseError(f"field {what!r} is not finite", line=lineno)
    if integer:
        if v != int(v) or abs(v) >= 2**53:
            raise ParseError(f"field {what!r} must be an integer below 2**53", line=lineno)
        return int(v)
    return v


def parse_mot_text(data: bytes | str, image_size: tuple[float, float] | None = None, report: ParseReport | None = None) -> Records:
    """Parse ``frame,id,x,y,w,h[,conf,...]`` lines (top-left pixel boxes) into center-format records.

    Boxes are divided by ``image_size = (W, H)`` when given. Rows with
    nonpositive extent are dropped and counted in ``report.rejected``.
    """
    report = report if report is not None else ParseReport()
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError("input is not valid UTF-8", offset=e.start) from None
    else:
        text = data
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        report.lines += 1
        line = line.strip()
        if not line:
            continue
        toks = [t.strip() for t in line.split(",")]
        if len(toks) < 6:
            raise ParseError(f"expected at least 6 fields, got {len(toks)}", line=lineno)
        frame = _num(toks[0], lineno, "frame", integer=True)
        if frame < 1:
            raise ParseError("frame numbers are 1-based", line=lineno)
        tid = _num(toks[1], lineno, "id", integer=True)
        x, y, w, h = (_num(t, lineno, n) for t, n in zip(toks[2:6], ("x", "y", "w", "h")))
        conf = _num(toks[6], lineno, "conf") if len(toks) > 6 and toks[6] else 1.0
        if w <= 0 or h <= 0:
            report.rejected += 1
            continue
        rows.append((frame, tid, x + w / 2, y + h / 2, w, h, conf))
        report.rows += 1
    rec = Records.from_rows(rows)
    if image_size is not None:
        rec = rec.normalized(*image_size)
    return rec


def parse_mot(path: str | Path, image_size: tuple[float, float] | None = None, report: ParseReport | None = None) -> Records:
    return parse_mot_text(Path(path).read_bytes(), image_size, report)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="\n") as f:
        f.write(text)
    os.replace(tmp, path)


def format_mot(records: Records, image_size: tuple[float, float] | None = None, kind: str = "result") -> str:
    """MOT lines sorted by (frame, id); ``kind`` is result, gt or det."""
    rec = records.denormalized(*image_size) if image_size is not None else records
    rec = rec.sorted() if kind != "det" else rec
    lines = []
    for fr, tid, (cx, cy, w, h), s in zip(rec.frames, rec.ids, rec.boxes, rec.scores):
        x, y = cx - w / 2, cy - h / 2
        if kind == "gt":
            lines.append(f"{fr},{tid},{x:.3f},{y:.3f},{w:.3f},{h:.3f},1,1,1.0\n")
        elif kind == "det":
            lines.append(f"{fr},-1,{x:.3f},{y:.3f},{w:.3f},{h:.3f},{s:.4f},-1,-1,-1\n")
        else:
            lines.append(f"{fr},{tid},{x:.3f},{y:.3f},{w:.3f},{h:.3f},1.0,-1,-1,-1\n")
    return "".join(lines)


def write_mot(result: Records, path: str | Path, image_size: tuple[float, float] | None = None, kind: str = "result") -> None:
    _atomic_write_text(Path(path), format_mot(result, image_size, kind))


# --- training segments -------------------------------------------------------


def _contiguous_runs(frames: np.ndarray) -> list[slice]:
    cuts = np.flatnonzero(np.diff(frames) != 1) + 1
    bounds = [0, *cuts.tolist(), len(frames)]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def segment_arrays(gt: Records, n: int) -> SegmentArrays:
    """Every (history of <= n boxes ending at frame i, box at i+1) pair per contiguous track run."""
    if n < 1:
        raise ConfigError("history length must be >= 1")
    hists, targets = [], []
    for _, (frames, boxes) in gt.by_id().items():
        for run in _contiguous_runs(frames):
            b = boxes[run]
            for i in range(len(b) - 1):
                hists.append(history_steps(left_pad(b[max(0, i - n + 1) : i + 1], n)))
                targets.append(b[i + 1])
    if not hists:
        return SegmentArrays(np.zeros((0, n, 8)), np.zeros((0, 4)))
    return SegmentArrays(np.stack(hists), np.stack(targets))


def build_segments(gt: Records, n: int) -> list[TrainingSegment]:
    arr = segment_arrays(gt, n)
    return [
        TrainingSegment(TrajectoryHistory(h), BBox.from_array(t)) for h, t in zip(arr.histories, arr.targets)
    ]
