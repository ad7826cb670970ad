"""Selective state-space block: discretisation, linear-time scan, residual wrapper."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ShapeMismatch
from .module import Module, param, uniform_init
from .tensor import (
    Tensor,
    add_bias,
    depthwise_conv1d,
    exp,
    flip,
    is_grad_enabled,
    layer_norm,
    matmul,
    narrow,
    no_grad,
    reshape,
    silu,
    softplus,
)


@dataclass(frozen=True)
class SsmBlockConfig:
    d_model: int
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    bidirectional: bool = True
    dt_rank: int | None = None
    dt_min: float = 1e-3
    dt_max: float = 0.1
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("d_model", "d_state", "expand", "d_conv"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def rank(self) -> int:
        return self.dt_rank if self.dt_rank is not None else math.ceil(self.d_model / 16)

    def num_parameters(self) -> int:
        """Closed-form trainable scalar count of one block."""
        c, di, n, r, k = self.d_model, self.d_inner, self.d_state, self.rank, self.d_conv
        norm = 2 * c
        projections = 2 * c * di + di * c  # input, gate, output
        conv = di * k + di
        selective = di * (r + 2 * n) + r * di + di  # x_proj, dt_proj, dt_bias
        return norm + projections + conv + selective + di * n + di  # + A_log, D


# ---------------------------------------------------------------------------
# discretisation and scan


def discretize(delta: Tensor, a_diag: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """ZOH for the state matrix, Euler for the input matrix.

    ``delta[..., L, C]``, ``a_diag[C, N]``, ``b[..., L, N]`` ->
    ``a_bar, b_bar`` of shape ``[..., L, C, N]``.
    """
    if a_diag.ndim != 2 or delta.shape[-1] != a_diag.shape[0] or b.shape[:-1] != delta.shape[:-1] or b.shape[-1] != a_diag.shape[1]:
        raise ShapeMismatch(f"discretize: delta {delta.shape}, A {a_diag.shape}, B {b.shape}")
    dl = delta.data[..., None]
    a_bar = np.exp(dl * a_diag.data)
    b_bar = dl * b.data[..., None, :]
    lead = delta.ndim - 1

    def back_a(g):
        ga = g * a_bar
        return (ga * a_diag.data).sum(-1), (ga * dl).reshape((-1,) + a_diag.shape).sum(0), None

    def back_b(g):
        return (g * b.data[..., None, :]).sum(-1), None, (g * dl).sum(axis=lead)

    return (
        Tensor.from_op(a_bar, (delta, a_diag, b), back_a, "discretize_a"),
        Tensor.from_op(b_bar, (delta, a_diag, b), back_b, "discretize_b"),
    )


def _batched(x: np.ndarray, core_ndim: int) -> np.ndarray:
    return x[None] if x.ndim == core_ndim else x


def _records(*inputs: Tensor) -> bool:
    """Whether an op on ``inputs`` will be taped, so its states are worth keeping."""
    return is_grad_enabled() and any(t.requires_grad for t in inputs)


def selective_scan(u: Tensor, a_bar: Tensor, b_bar: Tensor, c: Tensor, d: Tensor) -> Tensor:
    """Run ``h_t = a_bar_t * h_{t-1} + b_bar_t u_t``, ``y_t = <c_t, h_t> + d u_t``.

    Shapes: ``u[(B,) L, C]``, ``a_bar/b_bar[(B,) L, C, N]``, ``c[(B,) L, N]``,
    ``d[C]``. The state starts at zero. Time O(L C N), live state O(C N).
    """
    if u.ndim not in (2, 3):
        raise ShapeMismatch(f"selective_scan: u must be [L, C] or [B, L, C], got {u.shape}")
    n = c.shape[-1]
    if (
        a_bar.shape != u.shape + (n,)
        or b_bar.shape != a_bar.shape
        or c.shape != u.shape[:-1] + (n,)
        or d.shape != (u.shape[-1],)
    ):
        raise ShapeMismatch(f"selective_scan: u {u.shape}, a_bar {a_bar.shape}, b_bar {b_bar.shape}, c {c.shape}, d {d.shape}")
    unbatched = u.ndim == 2
    args = (_batched(u.data, 2), _batched(a_bar.data, 3), _batched(b_bar.data, 3), _batched(c.data, 2), d.data)
    y, hs = _kernels.scan_fwd(*args, _records(u, a_bar, b_bar, c, d))

    def backward(g):
        gu, ga, gb, gc, gd = _kernels.scan_bwd(_batched(g, 2), *args, hs)
        if unbatched:
            gu, ga, gb, gc = gu[0], ga[0], gb[0], gc[0]
        return gu, ga, gb, gc, gd

    return Tensor.from_op(y[0] if unbatched else y, (u, a_bar, b_bar, c, d), backward, "selective_scan")


def selective_scan_fused(u: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor, d: Tensor) -> Tensor:
    """``selective_scan(u, *discretize(delta, a, b), c, d)`` without materialising
    the ``[L, C, N]`` discretised operands. Batched inputs only."""
    if u.ndim != 3 or delta.shape != u.shape or a.shape[0] != u.shape[2] or b.shape != u.shape[:2] + (a.shape[1],) or c.shape != b.shape or d.shape != (u.shape[2],):
        raise ShapeMismatch(f"selective_scan_fused: u {u.shape}, delta {delta.shape}, A {a.shape}, B {b.shape}, C {c.shape}, D {d.shape}")
    args = (u.data, delta.data, a.data, b.data, c.data, d.data)
    y, hs = _kernels.fused_fwd(*args, _records(u, delta, a, b, c, d))

    def backward(g):
        return _kernels.fused_bwd(np.ascontiguousarray(g), *args, hs)

    return Tensor.from_op(y, (u, delta, a, b, c, d), backward, "selective_scan")


def selective_scan_reference(u, a_bar, b_bar, c, d) -> np.ndarray:
    """Quadratic materialised form of the scan, for cross-checking.

    y_t = sum_{s<=t} <c_t, (prod_{r=s+1..t} a_bar_r) * b_bar_s u_s> + d u_t,
    on unbatched numpy inputs.
    """
    u, a_bar, b_bar, c, d = (np.asarray(v, dtype=np.float64) for v in (u, a_bar, b_bar, c, d))
    length, channels = u.shape
    y = np.empty((length, channels))
    for t in range(length):
        acc = np.zeros(channels)
        decay = np.ones_like(a_bar[0])
        for s in range(t, -1, -1):
            acc += (decay * b_bar[s] * u[s][:, None]) @ c[t]
            decay = decay * a_bar[s]
        y[t] = acc + d * u[t]
    return y


# ---------------------------------------------------------------------------
# block


class MambaBlock(Module):
    """Parameters of one pre-norm gated selective-SSM residual block."""

    def __init__(self, config: SsmBlockConfig, rng: np.random.Generator, zero_out_proj: bool = False):
        self._config = config
        c, di, n, r, k = config.d_model, config.d_inner, config.d_state, config.rank, config.d_conv
        self.norm_weight = param(np.ones(c))
        self.norm_bias = param(np.zeros(c))
        self.in_proj = uniform_init(rng, (c, di), c)
        self.gate_proj = uniform_init(rng, (c, di), c)
        self.conv_weight = uniform_init(rng, (di, k), k)
        self.conv_bias = uniform_init(rng, (di,), k)
        self.x_proj = uniform_init(rng, (di, r + 2 * n), di)
        self.dt_proj = param(rng.uniform(-1.0, 1.0, size=(r, di)) / math.sqrt(r))
        dt = np.exp(rng.uniform(math.log(config.dt_min), math.log(config.dt_max), size=di))
        self.dt_bias = param(dt + np.log(-np.expm1(-dt)))  # softplus(dt_bias) == dt
        self.a_log = param(np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (di, 1)))
        self.d_skip = param(np.ones(di))
        self.out_proj = param(np.zeros((di, c))) if zero_out_proj else uniform_init(rng, (di, c), di)

    @property
    def config(self) -> SsmBlockConfig:
        return self._config

    def forward(self, x: Tensor) -> Tensor:
        return mamba_block_forward(x, self, self._config)


def _ssm_path(v: Tensor, p: MambaBlock, cfg: SsmBlockConfig) -> Tensor:
    r, n = cfg.rank, cfg.d_state
    u = depthwise_conv1d(v, p.conv_weight, p.conv_bias)
    proj = matmul(u, p.x_proj)
    delta = softplus(add_bias(matmul(narrow(proj, -1, 0, r), p.dt_proj), p.dt_bias))
    a = exp(p.a_log) * -1.0
    return selective_scan_fused(u, delta, a, narrow(proj, -1, r, r + n), narrow(proj, -1, r + n, r + 2 * n), p.d_skip)


def mamba_block_forward(x: Tensor, params: MambaBlock, config: SsmBlockConfig) -> Tensor:
    """``x + OutProj(SiLU(gate) * SSM(Conv(SiLU(InProj(LN(x))))))``.

    ``x`` is ``[L, C]`` or ``[B, L, C]``. In bidirectional mode the SSM path
    also runs on the reversed sequence and the two outputs are averaged.
    """
    if x.ndim not in (2, 3) or x.shape[-1] != config.d_model:
        raise ShapeMismatch(f"block expects [..., L, {config.d_model}], got {x.shape}")
    unbatched = x.ndim == 2
    xb = reshape(x, (1,) + x.shape) if unbatched else x
    h = layer_norm(xb, params.norm_weight, params.norm_bias, config.norm_eps)
    v = silu(matmul(h, params.in_proj))
    y = _ssm_path(v, params, config)
    if config.bidirectional:
        y_rev = flip(_ssm_path(flip(v, 1), params, config), 1)
        y = (y + y_rev) * 0.5
    out = xb + matmul(y * silu(matmul(h, params.gate_proj)), params.out_proj)
    return reshape(out, x.shape) if unbatched else out


# ---------------------------------------------------------------------------
# benchmark


def _bench_inputs(kind: str, length: int, d_model: int, d_state: int, rng: np.random.Generator) -> tuple:
    u = rng.standard_normal((length, d_model))
    c = rng.standard_normal((length, d_state))
    d = rng.standard_normal(d_model)
    if kind == "generic":
        a_bar = rng.uniform(0.5, 1.0, size=(length, d_model, d_state))
        b_bar = rng.uniform(0.0, 0.1, size=(length, d_model, d_state))
        return tuple(Tensor(v) for v in (u, a_bar, b_bar, c, d))
    delta = rng.uniform(1e-3, 0.1, size=(1, length, d_model))
    a = -np.tile(np.arange(1.0, d_state + 1), (d_model, 1))
    b = rng.standard_normal((1, length, d_state))
    return tuple(Tensor(v) for v in (u[None], delta, a, b, c[None], d))


BENCH_KERNELS = {"fused": selective_scan_fused, "generic": selective_scan}


def bench_scan(lengths, d_model: int = 64, d_state: int = 16, trials: int = 5, seed: int = 0, kernel: str = "fused") -> dict[int, list[int]]:
    """Wall-clock nanoseconds of one forward scan per length and trial.

    ``fused`` is the scan the blocks run; ``generic`` takes pre-discretised
    ``[L, C, N]`` operands, so at long lengths it mostly measures memory traffic.
    """
    if kernel not in BENCH_KERNELS:
        raise ValueError(f"kernel must be one of {sorted(BENCH_KERNELS)}, got {kernel!r}")
    scan = BENCH_KERNELS[kernel]
    rng = np.random.default_rng(seed)
    results: dict[int, list[int]] = {length: [] for length in lengths}
    with no_grad():
        scan(*_bench_inputs(kernel, 2, d_model, d_state, rng))  # compile outside the timing
        inputs = {length: _bench_inputs(kernel, length, d_model, d_state, rng) for length in lengths}
        for args in inputs.values():
            scan(*args)  # untimed pass warms caches and allocator
        # round-robin over lengths so drifting machine load hits every length alike
        for _ in range(trials):
            for length, args in inputs.items():
                t0 = time.perf_counter_ns()
                scan(*args)
                results[length].append(time.perf_counter_ns() - t0)
    return results
