"""State-space primitives: discretization, recurrence, Flow-SSM and the selective scan.

All functions accept arbitrary leading batch dimensions. Shapes below list only
the trailing dimensions: ``D`` channels, ``N`` state size per channel, ``L``
sequence length, ``m`` flow width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DimensionError, DomainError


@dataclass(frozen=True)
class SSMParams:
    """Data-independent SSM matrices: continuous state matrix ``A`` [D, N] and skip ``D_skip`` [D]."""

    A: Tensor
    D_skip: Tensor

    def __post_init__(self):
        if self.A.ndim != 2:
            raise DimensionError(f"A must be 2-D (D, N), got shape {tuple(self.A.shape)}")
        if self.D_skip.shape != self.A.shape[:1]:
            raise DimensionError(
                f"D_skip shape {tuple(self.D_skip.shape)} does not match A channels {self.A.shape[0]}"
            )

    @property
    def d_model(self) -> int:
        return self.A.shape[0]

    @property
    def d_state(self) -> int:
        return self.A.shape[1]


class FlowProjection(NamedTuple):
    """Data-dependent parameters: time scale ``delta`` [..., D], ``B_in`` [..., N], ``C_out`` [..., N]."""

    delta: Tensor
    B_in: Tensor
    C_out: Tensor


class DiscretizedParams(NamedTuple):
    A_bar: Tensor
    B_bar: Tensor


class FlowSSMWeights(NamedTuple):
    """Linear map from the flow feature to (delta_raw, B, C), plus the SSM matrices."""

    proj_weight: Tensor  # [D + 2N, m]
    proj_bias: Tensor  # [D + 2N]
    ssm: SSMParams


def zoh_discretize(params: SSMParams, proj: FlowProjection, *, strict: bool = True) -> DiscretizedParams:
    """Discretize ``A`` and ``B`` with time scale ``delta``.

    ``A_bar = exp(delta * A)`` and ``B_bar = delta * B`` (Euler rule for ``B``).
    Pass ``strict=False`` to admit ``delta == 0``.
    """
    D, N = params.A.shape
    delta, B_in = proj.delta, proj.B_in
    if delta.shape[-1:] != (D,):
        raise DimensionError(f"delta trailing dim {tuple(delta.shape[-1:])} != D={D}")
    if B_in.shape[-1:] != (N,):
        raise DimensionError(f"B_in trailing dim {tuple(B_in.shape[-1:])} != N={N}")
    if strict:
        if bool((delta <= 0).any()):
            raise DomainError("delta must be strictly positive")
    elif bool((delta < 0).any()):
        raise DomainError("delta must be nonnegative")
    dA = delta.unsqueeze(-1) * params.A
    A_bar = torch.exp(dA)
    B_bar = delta.unsqueeze(-1) * B_in.unsqueeze(-2)
    return DiscretizedParams(A_bar, B_bar)


def ssm_step(
    disc: DiscretizedParams, params: SSMParams, C_out: Tensor, h: Tensor, x: Tensor
) -> tuple[Tensor, Tensor]:
    """One recurrence step: ``h' = A_bar*h + B_bar*x``; ``y = C.h' + D_skip*x``."""
    D, N = params.A.shape
    if disc.A_bar.shape[-2:] != (D, N) or disc.B_bar.shape[-2:] != (D, N):
        raise DimensionError("discretized parameters do not match SSMParams")
    if h.shape[-2:] != (D, N):
        raise DimensionError(f"hidden state trailing shape {tuple(h.shape[-2:])} != {(D, N)}")
    if x.shape[-1:] != (D,):
        raise DimensionError(f"input trailing dim {tuple(x.shape[-1:])} != D={D}")
    if C_out.shape[-1:] != (N,):
        raise DimensionError(f"C_out trailing dim {tuple(C_out.shape[-1:])} != N={N}")
    h_next = torch.addcmul(disc.B_bar * x.unsqueeze(-1), disc.A_bar, h)
    y = torch.matmul(h_next, C_out.unsqueeze(-1)).squeeze(-1) + params.D_skip * x
    return y, h_next


def project_flow(flow: Tensor, weights: FlowSSMWeights) -> FlowProjection:
    """Linear projection of the flow feature into (delta, B, C); softplus keeps delta positive."""
    D, N = weights.ssm.A.shape
    out_dim, m = weights.proj_weight.shape
    if out_dim != D + 2 * N:
        raise DimensionError(f"projection rows {out_dim} != D + 2N = {D + 2 * N}")
    if flow.shape[-1:] != (m,):
        raise DimensionError(f"flow width {tuple(flow.shape[-1:])} != m={m}")
    z = F.linear(flow, weights.proj_weight, weights.proj_bias)
    delta_raw, B_in, C_out = torch.split(z, [D, N, N], dim=-1)
    return FlowProjection(F.softplus(delta_raw), B_in, C_out)


def flow_ssm(flow: Tensor, e_in: Tensor, h: Tensor, weights: FlowSSMWeights) -> tuple[Tensor, Tensor]:
    """Length-1 selective SSM parameterized by the flow feature.

    Returns ``(e_out, h_next)``.
    """
    proj = project_flow(flow, weights)
    disc = zoh_discretize(weights.ssm, proj)
    return ssm_step(disc, weights.ssm, proj.C_out, h, e_in)


def selective_scan(x_seq: Tensor, proj: FlowProjection, params: SSMParams, h0: Tensor | None = None) -> Tensor:
    """Run the recurrence over ``x_seq`` [..., L, D] with per-step projections [..., L, *].

    The hidden state starts at zero unless ``h0`` is given.
    """
    D, N = params.A.shape
    if x_seq.ndim < 2 or x_seq.shape[-2] == 0:
        raise DomainError("selective_scan needs a nonempty sequence")
    L = x_seq.shape[-2]
    for name, t, w in (("delta", proj.delta, D), ("B_in", proj.B_in, N), ("C_out", proj.C_out, N)):
        if t.shape[-2:] != (L, w):
            raise DimensionError(f"{name} trailing shape {tuple(t.shape[-2:])} != {(L, w)}")
    disc = zoh_discretize(params, proj)
    if h0 is None:
        h = x_seq.new_zeros(x_seq.shape[:-2] + (D, N))
    else:
        h = h0
    ys = []
    for t in range(L):
        step = DiscretizedParams(disc.A_bar[..., t, :, :], disc.B_bar[..., t, :, :])
        y, h = ssm_step(step, params, proj.C_out[..., t, :], h, x_seq[..., t, :])
        ys.append(y)
    return torch.stack(ys, dim=-2)


def s4d_real_a_log(d_model: int, d_state: int, dtype=None) -> Tensor:
    """log(-A) for the S4D-real initialization ``A[d, n] = -(n + 1)``."""
    a = torch.arange(1, d_state + 1, dtype=dtype).repeat(d_model, 1)
    return torch.log(a)


def init_delta_bias(size: int, dt_min: float = 0.01, dt_max: float = 0.1, dtype=None) -> Tensor:
    """Bias whose softplus is log-uniform in [dt_min, dt_max]."""
    dt = torch.exp(torch.rand(size, dtype=dtype) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
    # inverse softplus
    return dt + torch.log(-torch.expm1(-dt))


class FlowSSM(nn.Module):
    """Flow-SSM with learnable ``A`` (stored as ``A_log``), ``D_skip`` and the flow projection."""

    def __init__(self, d_flow: int, d_model: int, d_state: int, dtype=torch.float64):
        super().__init__()
        self.d_model = d_model
        self.d_state = d_state
        self.proj = nn.Linear(d_flow, d_model + 2 * d_state, dtype=dtype)
        with torch.no_grad():
            self.proj.bias[:d_model] = init_delta_bias(d_model, dtype=dtype)
        self.A_log = nn.Parameter(s4d_real_a_log(d_model, d_state, dtype=dtype))
        self.D_skip = nn.Parameter(torch.ones(d_model, dtype=dtype))

    def ssm_params(self) -> SSMParams:
        return SSMParams(-torch.exp(self.A_log), self.D_skip)

    def weights(self) -> FlowSSMWeights:
        return FlowSSMWeights(self.proj.weight, self.proj.bias, self.ssm_params())

    def forward(self, flow: Tensor, e_in: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        return flow_ssm(flow, e_in, h, self.weights())


class MambaBlock(nn.Module):
    """Pre-norm residual Mamba block.

    in_proj -> (signal, gate); causal depthwise conv + SiLU on the signal; selective
    scan with input-dependent delta/B/C; multiply by SiLU(gate); out_proj; residual add.
    """

    def __init__(
        self,
        d_model: int,
        d_state: int = 16,
        expand: int = 2,
        d_conv: int = 4,
        dt_rank: int | None = None,
        dtype=torch.float64,
    ):
        super().__init__()
        self.d_model = d_model
        self.d_inner = expand * d_model
        self.d_state = d_state
        self.dt_rank = dt_rank or math.ceil(d_model / 16)
        self.d_conv = d_conv
        self.norm = nn.LayerNorm(d_model, dtype=dtype)
        self.in_proj = nn.Linear(d_model, 2 * self.d_inner, dtype=dtype)
        # depthwise causal conv, weight [d_inner, d_conv]; tap d_conv-1 hits the current step
        bound = 1.0 / math.sqrt(d_conv)
        self.conv_weight = nn.Parameter(torch.empty(self.d_inner, d_conv, dtype=dtype).uniform_(-bound, bound))
        self.conv_bias = nn.Parameter(torch.empty(self.d_inner, dtype=dtype).uniform_(-bound, bound))
        self.x_proj = nn.Linear(self.d_inner, self.dt_rank + 2 * d_state, bias=False, dtype=dtype)
        self.dt_proj = nn.Linear(self.dt_rank, self.d_inner, dtype=dtype)
        with torch.no_grad():
            self.dt_proj.bias.copy_(init_delta_bias(self.d_inner, dtype=dtype))
        self.A_log = nn.Parameter(s4d_real_a_log(self.d_inner, d_state, dtype=dtype))
        self.D_skip = nn.Parameter(torch.ones(self.d_inner, dtype=dtype))
        self.out_proj = nn.Linear(self.d_inner, d_model, dtype=dtype)

    def ssm_params(self) -> SSMParams:
        return SSMParams(-torch.exp(self.A_log), self.D_skip)

    def forward(self, seq: Tensor) -> Tensor:
        if seq.shape[-1] != self.d_model:
            raise DimensionError(f"block width {self.d_model} != input width {seq.shape[-1]}")
        if seq.ndim < 2 or seq.shape[-2] == 0:
            raise DomainError("mamba_block needs a nonempty sequence")
        lead = seq.shape[:-2]
        L = seq.shape[-2]
        flat = seq.reshape((-1, L, self.d_model))

        x, z = self.in_proj(self.norm(flat)).chunk(2, dim=-1)
        x = F.silu(causal_depthwise_conv(x, self.conv_weight, self.conv_bias))
        dt_low, B_in, C_out = torch.split(self.x_proj(x), [self.dt_rank, self.d_state, self.d_state], dim=-1)
        delta = F.softplus(self.dt_proj(dt_low))
        y = selective_scan(x, FlowProjection(delta, B_in, C_out), self.ssm_params())
        y = y * F.silu(z)
        out = flat + self.out_proj(y)
        return out.reshape(lead + (L, self.d_model))


def causal_depthwise_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel causal convolution over time: x [B, L, C], weight [C, K]."""
    L = x.shape[-2]
    K = weight.shape[-1]
    padded = F.pad(x, (0, 0, K - 1, 0))
    out = bias.expand_as(x)
    for k in range(K):
        out = out + padded[..., k : k + L, :] * weight[:, k]
    return out


def mamba_block(seq: Tensor, block: MambaBlock) -> Tensor:
    return block(seq)
