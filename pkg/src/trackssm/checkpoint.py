"""Versioned binary checkpoints.

Layout (little-endian)::

    b"TRACKSSM"  u32 version
    u32 nbytes   config block: UTF-8 ``key=value`` lines, sorted by key
    u32 count    then per tensor:
                 u32 name length, name (UTF-8), u32 rank, rank x u64 dims, float64 data
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .errors import IncompatibleCheckpoint, ParseError
from .model import ModelConfig, TrackSSM
from .training import make_optimizer

MAGIC = b"TRACKSSM"
VERSION = 1
_OPT_PREFIX = "opt."


def _encode_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _decode_value(raw: str, like):
    if isinstance(like, bool):
        if raw not in ("true", "false"):
            raise ValueError(raw)
        return raw == "true"
    return type(like)(raw)


def config_block(cfg: ModelConfig, history_len: int, extra: dict | None = None) -> dict[str, str]:
    out = {f"model.{k}": _encode_value(v) for k, v in cfg.to_dict().items()}
    out["history_len"] = str(history_len)
    for k, v in (extra or {}).items():
        out[k] = _encode_value(v)
    return out


@dataclass
class Checkpoint:
    model: TrackSSM
    optimizer: torch.optim.Adam | None
    history_len: int
    config: dict[str, str]


def _optimizer_tensors(model: TrackSSM, opt: torch.optim.Adam) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    tensors = {}
    meta = {}
    g = opt.param_groups[0]
    meta["opt.lr"] = repr(float(g["lr"]))
    meta["opt.beta1"] = repr(float(g["betas"][0]))
    meta["opt.beta2"] = repr(float(g["betas"][1]))
    meta["opt.eps"] = repr(float(g["eps"]))
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if not st:
            continue
        tensors[f"{_OPT_PREFIX}step.{name}"] = np.array(float(st["step"]))
        tensors[f"{_OPT_PREFIX}exp_avg.{name}"] = st["exp_avg"].detach().cpu().numpy()
        tensors[f"{_OPT_PREFIX}exp_avg_sq.{name}"] = st["exp_avg_sq"].detach().cpu().numpy()
    return tensors, meta


def save_checkpoint(
    path: str | Path,
    model: TrackSSM,
    history_len: int,
    optimizer: torch.optim.Adam | None = None,
    extra: dict | None = None,
) -> None:
    path = Path(path)
    tensors = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    meta = config_block(model.cfg, history_len, extra)
    if optimizer is not None:
        ot, om = _optimizer_tensors(model, optimizer)
        tensors.update(ot)
        meta.update(om)
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg_bytes = "".join(f"{k}={meta[k]}\n" for k in sorted(meta)).encode("utf-8")
    parts += [struct.pack("<I", len(cfg_bytes)), cfg_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is C-order; ascontiguousarray would promote 0-d to 1-d
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
        parts += [struct.pack("<Q", d) for d in arr.shape]
        parts.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"truncated checkpoint while reading {what}", offset=self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def read_checkpoint(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Parse the raw config block and tensors without building a model."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise ParseError("bad magic string", offset=0)
    version = r.u32("version")
    if version != VERSION:
        raise IncompatibleCheckpoint(f"checkpoint version {version}, expected {VERSION}", field="version")
    n = r.u32("config length")
    start = r.pos
    try:
        text = r.take(n, "config block").decode("utf-8")
    except UnicodeDecodeError:
        raise ParseError("config block is not UTF-8", offset=start) from None
    config = {}
    for line in text.splitlines():
        if "=" not in line:
            raise ParseError(f"bad config line {line!r}", offset=start)
        k, v = line.split("=", 1)
        config[k] = v
    tensors = {}
    count = r.u32("tensor count")
    for _ in range(count):
        at = r.pos
        nlen = r.u32("name length")
        try:
            name = r.take(nlen, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("tensor name is not UTF-8", offset=at) from None
        rank = r.u32("rank")
        if rank > 8:
            raise ParseError(f"implausible rank {rank} for {name}", offset=at)
        dims = tuple(r.u64("dim") for _ in range(rank))
        size = math.prod(dims)
        buf = r.take(8 * size, f"data of {name}")
        tensors[name] = np.frombuffer(buf, dtype="<f8").reshape(dims).copy()
    if r.pos != len(r.data):
        raise ParseError("trailing bytes after last tensor", offset=r.pos)
    return config, tensors


def _model_config(config: dict[str, str]) -> ModelConfig:
    defaults = ModelConfig()
    kw = {}
    for f in fields(ModelConfig):
        key = f"model.{f.name}"
        if key not in config:
            raise IncompatibleCheckpoint(f"checkpoint config lacks {key}", field=f.name)
        try:
            kw[f.name] = _decode_value(config[key], getattr(defaults, f.name))
        except ValueError:
            raise IncompatibleCheckpoint(f"bad value {config[key]!r} for {key}", field=f.name) from None
    return ModelConfig(**kw)


def load_checkpoint(
    path: str | Path,
    expected: ModelConfig | None = None,
    expected_history_len: int | None = None,
    with_optimizer: bool = True,
) -> Checkpoint:
    config, tensors = read_checkpoint(path)
    cfg = _model_config(config)
    if expected is not None:
        for f in fields(ModelConfig):
            if getattr(expected, f.name) != getattr(cfg, f.name):
                raise IncompatibleCheckpoint(
                    f"config field {f.name}: checkpoint has {getattr(cfg, f.name)!r}, expected {getattr(expected, f.name)!r}",
                    field=f.name,
                )
    history_len = int(config.get("history_len", "0"))
    if expected_history_len is not None and history_len != expected_history_len:
        raise IncompatibleCheckpoint(
            f"config field history_len: checkpoint has {history_len}, expected {expected_history_len}",
            field="history_len",
        )
    model = TrackSSM(cfg)
    params = dict(model.named_parameters())
    missing = set(params) - set(tensors)
    if missing:
        raise IncompatibleCheckpoint(f"checkpoint lacks tensors {sorted(missing)[:3]}", field=sorted(missing)[0])
    with torch.no_grad():
        for name, p in params.items():
            arr = tensors[name]
            if arr.shape != tuple(p.shape):
                raise IncompatibleCheckpoint(f"tensor {name} has shape {arr.shape}, expected {tuple(p.shape)}", field=name)
            p.copy_(torch.from_numpy(arr).to(p.dtype))
    model.eval()
    opt = None
    if with_optimizer and "opt.lr" in config:
        opt = make_optimizer(
            model, float(config["opt.lr"]), (float(config["opt.beta1"]), float(config["opt.beta2"])), float(config["opt.eps"])
        )
        for name, p in params.items():
            key = f"{_OPT_PREFIX}step.{name}"
            if key in tensors:
                opt.state[p] = {
                    "step": torch.tensor(tensors[key].item()),
                    "exp_avg": torch.from_numpy(tensors[f"{_OPT_PREFIX}exp_avg.{name}"]).to(p.dtype),
                    "exp_avg_sq": torch.from_numpy(tensors[f"{_OPT_PREFIX}exp_avg_sq.{name}"]).to(p.dtype),
                }
    return Checkpoint(model, opt, history_len, config)
