"""TrackSSM motion model: history stem, Mamba encoder, cascaded flow decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, DimensionError, DomainError
from .ssm_core import FlowSSM, MambaBlock

EPS_BOX = 1e-4
PE_TEMPERATURE = 10000.0


@dataclass(frozen=True)
class BBox:
    """Center-format box."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise DomainError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise DomainError(f"box extent must be positive, got w={self.w}, h={self.h}")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BBox":
        a = [float(v) for v in a]
        return cls(a[0], a[1], a[2], a[3])


def history_steps(boxes: np.ndarray) -> np.ndarray:
    """Stack boxes [n, 4] into history steps [n, 8]; the earliest delta is zero."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise DimensionError(f"boxes must be (n, 4), got {boxes.shape}")
    deltas = np.zeros_like(boxes)
    deltas[1:] = boxes[1:] - boxes[:-1]
    return np.concatenate([boxes, deltas], axis=1)


def left_pad(boxes: np.ndarray, n: int) -> np.ndarray:
    """Keep the ``n`` most recent boxes, repeating the earliest one when fewer exist."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if len(boxes) == 0:
        raise DomainError("cannot pad an empty box sequence")
    if len(boxes) >= n:
        return boxes[-n:]
    pad = np.repeat(boxes[:1], n - len(boxes), axis=0)
    return np.concatenate([pad, boxes], axis=0)


@dataclass(frozen=True)
class TrajectoryHistory:
    """Per-track sequence of (cx, cy, w, h, dx, dy, dw, dh) steps, oldest first."""

    steps: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.steps, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != 8:
            raise DimensionError(f"history steps must be (n, 8), got {s.shape}")
        if len(s) == 0:
            raise DomainError("history must contain at least one step")
        if not np.all(np.isfinite(s)):
            raise DomainError("history contains non-finite values")
        if np.any(s[:, 2:4] <= 0):
            raise DomainError("history boxes must have positive extent")
        object.__setattr__(self, "steps", s)

    @classmethod
    def from_boxes(cls, boxes, n: int | None = None) -> "TrajectoryHistory":
        boxes = np.asarray(boxes, dtype=np.float64)
        if n is not None:
            boxes = left_pad(boxes, n)
        return cls(history_steps(boxes))

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def last_box(self) -> BBox:
        return BBox.from_array(self.steps[-1, :4])


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128  # trajectory embedding / flow width
    d_dec: int = 128  # decoder channel width after the split
    d_state: int = 16
    enc_layers: int = 2
    n_layers: int = 6  # cascaded decoder layers
    pe_dim: int = 16  # cosine encoding width per box coordinate
    expand: int = 2
    d_conv: int = 4
    delta_scale: float = 100.0  # fixed input gain on the frame-to-frame deltas
    eps_box: float = EPS_BOX
    end_to_end_grad: bool = False
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        for name in ("d_model", "d_dec", "d_state", "enc_layers", "n_layers", "pe_dim", "expand", "d_conv"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.pe_dim % 2:
            raise ConfigError("pe_dim must be even")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if not self.eps_box > 0:
            raise ConfigError("eps_box must be positive")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def cosine_pos_encode(box: Tensor, dim: int, temperature: float = PE_TEMPERATURE) -> Tensor:
    """Sinusoidal encoding of each box coordinate, [..., 4] -> [..., 4 * dim].

    Coordinate ``c`` becomes interleaved ``sin(c / T**(2j/dim)), cos(c / T**(2j/dim))``
    for ``j < dim/2``; blocks are concatenated in (cx, cy, w, h) order.
    """
    if dim % 2:
        raise ConfigError(f"positional encoding dim must be even, got {dim}")
    if box.shape[-1] != 4:
        raise DimensionError(f"box must have 4 coordinates, got {box.shape[-1]}")
    j = torch.arange(dim // 2, dtype=box.dtype, device=box.device)
    freq = temperature ** (2 * j / dim)
    arg = box.unsqueeze(-1) / freq  # [..., 4, dim/2]
    pe = torch.stack([torch.sin(arg), torch.cos(arg)], dim=-1)  # [..., 4, dim/2, 2]
    return pe.flatten(-3)


class HistoryEmbedding(nn.Module):
    """Per-step stem: linear 8 -> m, SiLU, LayerNorm."""

    def __init__(self, d_model: int, delta_scale: float = 1.0, dtype=torch.float64):
        super().__init__()
        self.linear = nn.Linear(8, d_model, dtype=dtype)
        self.norm = nn.LayerNorm(d_model, dtype=dtype)
        gain = torch.tensor([1.0] * 4 + [delta_scale] * 4, dtype=dtype)
        self.register_buffer("gain", gain, persistent=False)

    def forward(self, steps: Tensor) -> Tensor:
        if steps.shape[-1] != 8:
            raise DimensionError(f"history steps must have 8 features, got {steps.shape[-1]}")
        if steps.ndim < 2 or steps.shape[-2] == 0:
            raise DomainError("empty history")
        return self.norm(F.silu(self.linear(steps * self.gain)))


class MambaEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dt = cfg.torch_dtype
        self.blocks = nn.ModuleList(
            MambaBlock(cfg.d_model, cfg.d_state, cfg.expand, cfg.d_conv, dtype=dt) for _ in range(cfg.enc_layers)
        )
        self.norm = nn.LayerNorm(cfg.d_model, dtype=dt)

    def forward(self, emb: Tensor) -> Tensor:
        """Full encoder output [..., n, m]."""
        x = emb
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class DecoderLayer(nn.Module):
    """Encode box, split into signal/gate, Flow-SSM on the signal, gate, FFN -> additive box delta."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dt = cfg.torch_dtype
        self.pe_dim = cfg.pe_dim
        self.d_dec = cfg.d_dec
        self.eps_box = cfg.eps_box
        self.split = nn.Linear(4 * cfg.pe_dim, 2 * cfg.d_dec, dtype=dt)
        self.flow_ssm = FlowSSM(cfg.d_model, cfg.d_dec, cfg.d_state, dtype=dt)
        self.ffn_in = nn.Linear(cfg.d_dec, 2 * cfg.d_dec, dtype=dt)
        self.ffn_out = nn.Linear(2 * cfg.d_dec, 4, dtype=dt)
        nn.init.zeros_(self.ffn_out.weight)
        nn.init.zeros_(self.ffn_out.bias)
        self.clamp_count = 0

    def forward(self, box_in: Tensor, flow: Tensor, h: Tensor, enc_box: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """``enc_box`` replaces the box fed to the positional encoding (the residual always uses ``box_in``)."""
        pe = cosine_pos_encode(box_in if enc_box is None else enc_box, self.pe_dim)
        e_sig, r_gate = self.split(pe).chunk(2, dim=-1)
        e_out, h_next = self.flow_ssm(flow, e_sig, h)
        gated = e_out * F.silu(r_gate)
        delta = self.ffn_out(F.silu(self.ffn_in(gated)))
        raw = box_in + delta
        clamped = torch.cat([raw[..., :2], raw[..., 2:].clamp_min(self.eps_box)], dim=-1)
        self.clamp_count += int((raw[..., 2:] < self.eps_box).sum())
        return clamped, h_next


def decoder_layer(box_in: Tensor, flow: Tensor, h: Tensor, layer: DecoderLayer) -> tuple[Tensor, Tensor]:
    return layer(box_in, flow, h)


class FlowDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.d_dec = cfg.d_dec
        self.d_state = cfg.d_state
        self.end_to_end_grad = cfg.end_to_end_grad

    def forward(self, box: Tensor, flow: Tensor, flows: list[Tensor] | None = None) -> tuple[Tensor, list[Tensor]]:
        """Run the cascade from a zero hidden state.

        ``flows`` optionally overrides the flow fed to each layer (same flow for all by default).
        Returns the final box and the list of per-layer boxes.
        """
        h = box.new_zeros(box.shape[:-1] + (self.d_dec, self.d_state))
        per_layer = []
        cur = box
        for k, layer in enumerate(self.layers):
            # stop-gradient at the re-encoding of an earlier layer's box; the residual path stays live
            enc = cur.detach() if k > 0 and not self.end_to_end_grad else None
            f = flow if flows is None else flows[k]
            cur, h = layer(cur, f, h, enc)
            per_layer.append(cur)
        return cur, per_layer


class TrackSSM(nn.Module):
    """Encoder-decoder motion predictor over trajectory histories [..., n, 8]."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.embed = HistoryEmbedding(cfg.d_model, cfg.delta_scale, dtype=cfg.torch_dtype)
            self.encoder = MambaEncoder(cfg)
            self.decoder = FlowDecoder(cfg)

    @property
    def dtype(self):
        return self.cfg.torch_dtype

    def embed_history(self, steps: Tensor) -> Tensor:
        return self.embed(steps)

    def encode_flow(self, emb: Tensor) -> Tensor:
        return self.encoder(emb)[..., -1, :]

    def forward(self, steps: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Predict from batched histories; returns (final box [..., 4], per-layer boxes)."""
        flow = self.encode_flow(self.embed_history(steps))
        return self.decoder(steps[..., -1, :4], flow)

    def predict_boxes(self, steps: np.ndarray) -> np.ndarray:
        """Inference on a stacked batch of history steps [B, n, 8] -> boxes [B, 4]."""
        with torch.no_grad():
            out, _ = self(torch.as_tensor(np.asarray(steps), dtype=self.dtype))
        return out.cpu().numpy().astype(np.float64)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def embed_history(hist: TrajectoryHistory, model: TrackSSM) -> Tensor:
    return model.embed_history(torch.as_tensor(hist.steps, dtype=model.dtype))


def encode_flow(emb: Tensor, model: TrackSSM) -> Tensor:
    return model.encode_flow(emb)


def flow_decoder(box: BBox, flow: Tensor, model: TrackSSM) -> tuple[BBox, list[BBox]]:
    with torch.no_grad():
        b = torch.as_tensor(box.as_array(), dtype=model.dtype)
        final, per_layer = model.decoder(b, flow)
    return BBox.from_array(final), [BBox.from_array(p) for p in per_layer]


def predict_next(hist: TrajectoryHistory, model: TrackSSM) -> BBox:
    """Next-frame box for a single history; pure given fixed weights."""
    return BBox.from_array(model.predict_boxes(hist.steps[None])[0])
