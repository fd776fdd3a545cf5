"""Selective state-space (S6) scan and the bidirectional block built on it.

The recurrence is h_t = A_bar[t] * h_{t-1} + B_bar[t] * x_t with diagonal,
input-dependent coefficients, evaluated either step by step or through a
work-efficient block scan over the associative pair combinator
(a2, b2) o (a1, b1) = (a1*a2, a2*b1 + b2). Both variants share one
differentiable primitive whose backward pass is itself a reversed scan.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from promamba import tensor as T
from promamba.rng import Rng
from promamba.tensor import DimensionError, DomainError, Tensor, make_op

# Chunk length for the blocked scan; sequences this short gain nothing from it.
_BLOCK = 64


def _scan_sequential_nd(a: np.ndarray, b: np.ndarray, acc: np.dtype) -> np.ndarray:
    """h_t = a_t * h_{t-1} + b_t along axis 0, h_0 = 0.

    The running state is kept in ``acc`` (a wider float than the operands);
    the returned array has the dtype of ``b``.
    """
    h = np.empty_like(b)
    state = np.zeros(b.shape[1:], dtype=acc)
    for t in range(b.shape[0]):
        np.multiply(state, a[t], out=state)
        np.add(state, b[t], out=state, casting="unsafe")
        h[t] = state
    return h


def _scan_chunked(a: np.ndarray, b: np.ndarray, acc: np.dtype) -> np.ndarray:
    """Work-efficient evaluation of the recurrence on one channel shard.

    Up-sweep: every length-_BLOCK chunk is reduced (vectorized across chunks)
    to its cumulative decay and local final state, i.e. a fold of the pair
    combinator. A short scan over those summaries yields each chunk's carry;
    the down-sweep replays each chunk seeded with its carry. Associativity of
    the combinator is what makes the regrouping valid.
    """
    L = a.shape[0]
    m = _BLOCK
    if L <= m:
        return _scan_sequential_nd(a, b, acc)
    tail = b.shape[1:]
    k = L // m
    ak = a[: k * m].reshape((k, m) + tail)
    bk = b[: k * m].reshape((k, m) + tail)

    # up-sweep: per-chunk (decay, final state) summaries
    decay = ak[:, 0].astype(acc)
    state = bk[:, 0].astype(acc)
    for t in range(1, m):
        np.multiply(state, ak[:, t], out=state)
        np.add(state, bk[:, t], out=state, casting="unsafe")
        np.multiply(decay, ak[:, t], out=decay)

    # carry scan across chunk summaries
    carry = np.empty((k,) + tail, dtype=acc)
    run = np.zeros(tail, dtype=acc)
    for i in range(k):
        carry[i] = run
        np.multiply(run, decay[i], out=run)
        np.add(run, state[i], out=run, casting="unsafe")

    # down-sweep: replay each chunk from its carry
    h = np.empty_like(b)
    hk = h[: k * m].reshape((k, m) + tail)
    s = carry
    for t in range(m):
        np.multiply(s, ak[:, t], out=s)
        np.add(s, bk[:, t], out=s, casting="unsafe")
        hk[:, t] = s
    if k * m < L:
        st = run.copy()
        for t in range(k * m, L):
            np.multiply(st, a[t], out=st)
            np.add(st, b[t], out=st, casting="unsafe")
            h[t] = st
    return h


def _scan_blocked_nd(a: np.ndarray, b: np.ndarray, acc: np.dtype, workers: int = 1) -> np.ndarray:
    """Chunked scan, optionally sharded over the channel axis by a thread pool.

    Channel shards are independent recurrences, so the result does not depend
    on the worker count.
    """
    if workers > 1 and a.ndim >= 2 and a.shape[1] >= workers:
        bounds = np.linspace(0, a.shape[1], workers + 1, dtype=int)
        spans = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        out = np.empty_like(b)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_scan_chunked, a[:, lo:hi], b[:, lo:hi], acc): (lo, hi)
                for lo, hi in spans
            }
            for fut, (lo, hi) in futures.items():
                out[:, lo:hi] = fut.result()
        return out
    return _scan_chunked(a, b, acc)


def linear_scan(a: Tensor, b: Tensor, parallel: bool = False, workers: int = 1) -> Tensor:
    """Differentiable first-order linear recurrence along axis 0.

    The recurrence state accumulates in float64 regardless of the input dtype,
    so the sequential and blocked evaluations agree to the output ULP. The
    adjoint recurrence g_t = gh_t + a_{t+1} * g_{t+1} is another linear scan
    run on the reversed sequence, so backward reuses the same kernel.
    """
    if a.shape != b.shape:
        raise DimensionError(f"linear_scan operands differ: {a.shape} vs {b.shape}")
    out_dtype = a.data.dtype
    if out_dtype == np.float32:
        from promamba import scan_kernels

        if parallel:
            run = lambda x, y: scan_kernels.run_blocked_f32(x, y, _BLOCK, workers)
        else:
            run = scan_kernels.run_seq_f32
    elif parallel:
        run = lambda x, y: _scan_blocked_nd(x, y, np.longdouble, workers)
    else:
        run = lambda x, y: _scan_sequential_nd(x, y, np.longdouble)
    a_data = a.data
    h = run(a_data, b.data)

    def backward_fn(gh):
        # a_shift[t] = a[t+1], zero beyond the end
        a_shift = np.empty_like(a_data)
        a_shift[:-1] = a_data[1:]
        a_shift[-1] = 0.0
        g = run(np.ascontiguousarray(a_shift[::-1]), np.ascontiguousarray(gh[::-1]))[::-1]
        h_prev = np.empty_like(h)
        h_prev[0] = 0.0
        h_prev[1:] = h[:-1]
        return (g * h_prev, np.ascontiguousarray(g))

    return make_op("linear_scan", h, (a, b), backward_fn)


def discretize(delta: Tensor, A: Tensor, B: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order-hold step: A_bar = exp(delta ox A), B_bar = delta ox B.

    delta [L,d_inner] must be strictly positive; A [d_inner,d_state] is the
    (negative) diagonal state matrix; B [L,d_state]. Outputs are
    [L,d_inner,d_state].
    """
    if np.any(delta.data <= 0):
        raise DomainError("discretize requires delta > 0")
    L, d_inner = delta.shape
    d_state = A.shape[1]
    if A.shape[0] != d_inner or B.shape != (L, d_state):
        raise DimensionError(
            f"discretize shapes inconsistent: delta {delta.shape}, A {A.shape}, B {B.shape}"
        )
    d3 = T.reshape(delta, (L, d_inner, 1))
    a_bar = T.texp(T.mul(d3, T.reshape(A, (1, d_inner, d_state))))
    b_bar = T.mul(d3, T.reshape(B, (L, 1, d_state)))
    return a_bar, b_bar


def _selective_scan(
    x: Tensor,
    delta: Tensor,
    A: Tensor,
    B: Tensor,
    C: Tensor,
    D: Tensor,
    parallel: bool,
    workers: int = 1,
) -> Tensor:
    L, d_inner = x.shape
    d_state = A.shape[1]
    if C.shape != (L, d_state):
        raise DimensionError(f"C must be [L,d_state], got {C.shape}")
    if D.shape != (d_inner,):
        raise DimensionError(f"D must be [d_inner], got {D.shape}")
    a_bar, b_bar = discretize(delta, A, B)
    bx = T.mul(b_bar, T.reshape(x, (L, d_inner, 1)))
    h = linear_scan(a_bar, bx, parallel=parallel, workers=workers)
    y = T.tsum(T.mul(h, T.reshape(C, (L, 1, d_state))), axis=2)
    return T.add(y, T.mul(T.reshape(D, (1, d_inner)), x))


def selective_scan_seq(x, delta, A, B, C, D) -> Tensor:
    """Exact sequential evaluation of the S6 recurrence; y is [L,d_inner]."""
    return _selective_scan(x, delta, A, B, C, D, parallel=False)


def selective_scan_parallel(x, delta, A, B, C, D, workers: int = 1) -> Tensor:
    """Same semantics as :func:`selective_scan_seq` via the block scan."""
    return _selective_scan(x, delta, A, B, C, D, parallel=True, workers=workers)


# --- the Mamba block ----------------------------------------------------------


@dataclass
class SSMBranchParams:
    """One scan direction's parameters: conv, projections, state matrix, skip."""

    conv_w: Tensor  # [d_inner, w] depthwise causal kernel
    conv_b: Tensor  # [d_inner]
    x_proj: Tensor  # [d_inner, dt_rank + 2*d_state]
    dt_proj: Tensor  # [dt_rank, d_inner]
    dt_bias: Tensor  # [d_inner]
    A_log: Tensor  # [d_inner, d_state]; A = -exp(A_log)
    D: Tensor  # [d_inner]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.conv_w": self.conv_w,
            f"{prefix}.conv_b": self.conv_b,
            f"{prefix}.x_proj": self.x_proj,
            f"{prefix}.dt_proj": self.dt_proj,
            f"{prefix}.dt_bias": self.dt_bias,
            f"{prefix}.A_log": self.A_log,
            f"{prefix}.D": self.D,
        }


@dataclass
class SSMBlockParams:
    """Parameters of one bidirectional block.

    The in/out projections are shared between directions; each direction owns
    an independent SSM core (conv, x/dt projections, state matrix, skip).
    """

    in_proj: Tensor  # [d_model, 2*d_inner]
    out_proj: Tensor  # [d_inner, d_model]
    fwd: SSMBranchParams
    bwd: SSMBranchParams | None

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.in_proj": self.in_proj, f"{prefix}.out_proj": self.out_proj}
        out.update(self.fwd.named(f"{prefix}.fwd"))
        if self.bwd is not None:
            out.update(self.bwd.named(f"{prefix}.bwd"))
        return out


def dt_rank_for(d_model: int) -> int:
    return max(1, math.ceil(d_model / 16))


def init_branch(
    d_inner: int, d_state: int, dt_rank: int, conv_width: int, rng: Rng, dtype: str = "float32"
) -> SSMBranchParams:
    """Reference-standard init: A = -(state index + 1), dt in [1e-3, 1e-1]."""
    a_log = np.log(np.arange(1, d_state + 1, dtype=np.float64))
    a_log = np.tile(a_log, (d_inner, 1))
    dt = rng.uniform(1e-3, 1e-1, size=d_inner)
    dt_bias = np.log(np.expm1(dt))  # inverse softplus
    return SSMBranchParams(
        conv_w=Tensor(rng.normal(0, 1 / math.sqrt(conv_width), (d_inner, conv_width)), dtype, True),
        conv_b=Tensor(np.zeros(d_inner), dtype, True),
        x_proj=Tensor(
            rng.normal(0, 1 / math.sqrt(d_inner), (d_inner, dt_rank + 2 * d_state)), dtype, True
        ),
        dt_proj=Tensor(rng.normal(0, 1 / math.sqrt(dt_rank), (dt_rank, d_inner)), dtype, True),
        dt_bias=Tensor(dt_bias, dtype, True),
        A_log=Tensor(a_log, dtype, True),
        D=Tensor(np.ones(d_inner), dtype, True),
    )


def init_block(
    d_model: int,
    d_state: int,
    conv_width: int,
    bidirectional: bool,
    rng: Rng,
    dtype: str = "float32",
) -> SSMBlockParams:
    d_inner = 2 * d_model
    rank = dt_rank_for(d_model)
    return SSMBlockParams(
        in_proj=Tensor(rng.normal(0, 1 / math.sqrt(d_model), (d_model, 2 * d_inner)), dtype, True),
        out_proj=Tensor(rng.normal(0, 1 / math.sqrt(d_inner), (d_inner, d_model)), dtype, True),
        fwd=init_branch(d_inner, d_state, rank, conv_width, rng.child(0), dtype),
        bwd=init_branch(d_inner, d_state, rank, conv_width, rng.child(1), dtype)
        if bidirectional
        else None,
    )


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution over [L, d_inner] with kernel [d_inner, w]."""
    L, d_inner = x.shape
    w = weight.shape[1]
    padded = T.concat([T.zeros((w - 1, d_inner), x.dtype), x], axis=0)
    taps = []
    for k in range(w):
        col = T.reshape(T.narrow(weight, 1, k, 1), (d_inner,))
        taps.append(T.mul(T.narrow(padded, 0, k, L), col))
    out = taps[0]
    for tap in taps[1:]:
        out = T.add(out, tap)
    return T.add(out, T.reshape(bias, (1, d_inner)))


def _run_branch(
    x_conv_in: Tensor,
    branch: SSMBranchParams,
    reverse: bool,
    parallel: bool,
    workers: int,
) -> Tensor:
    """Conv -> SiLU -> input-dependent (delta, B, C) -> scan for one direction."""
    if reverse:
        x_conv_in = T.flip(x_conv_in, axis=0)
    L, d_inner = x_conv_in.shape
    d_state = branch.A_log.shape[1]
    rank = branch.dt_proj.shape[0]
    xc = T.silu(causal_conv1d(x_conv_in, branch.conv_w, branch.conv_b))
    dbc = T.matmul(xc, branch.x_proj)
    delta_raw = T.narrow(dbc, 1, 0, rank)
    B = T.narrow(dbc, 1, rank, d_state)
    C = T.narrow(dbc, 1, rank + d_state, d_state)
    delta = T.softplus(T.add(T.matmul(delta_raw, branch.dt_proj), T.reshape(branch.dt_bias, (1, d_inner))))
    A = T.neg(T.texp(branch.A_log))
    y = _selective_scan(xc, delta, A, B, C, branch.D, parallel=parallel, workers=workers)
    if reverse:
        y = T.flip(y, axis=0)
    return y


def mamba_block(
    tokens: Tensor,
    params: SSMBlockParams,
    direction: str = "forward",
    parallel: bool = True,
    workers: int = 1,
) -> Tensor:
    """One Mamba block pass over [L, d_model] in the given scan direction.

    ``direction="backward"`` runs the conv+scan path on the reversed sequence
    and re-reverses its output immediately after the scan; the gate and the
    shared projections stay position-aligned.
    """
    if direction not in ("forward", "backward"):
        raise DomainError(f"direction must be forward|backward, got {direction!r}")
    branch = params.fwd if direction == "forward" else params.bwd
    if branch is None:
        raise DomainError("backward direction requested but block has no backward branch")
    L, d_model = tokens.shape
    d_inner = params.out_proj.shape[0]
    xz = T.matmul(tokens, params.in_proj)
    x_in = T.narrow(xz, 1, 0, d_inner)
    z = T.narrow(xz, 1, d_inner, d_inner)
    y = _run_branch(x_in, branch, direction == "backward", parallel, workers)
    gated = T.mul(y, T.silu(z))
    return T.matmul(gated, params.out_proj)


def bidirectional_mix(
    tokens: Tensor,
    params: SSMBlockParams,
    bidirectional: bool = True,
    parallel: bool = True,
    workers: int = 1,
) -> Tensor:
    """Sum of the forward and backward scan branches; forward alone if disabled."""
    out = mamba_block(tokens, params, "forward", parallel, workers)
    if bidirectional and params.bwd is not None:
        out = T.add(out, mamba_block(tokens, params, "backward", parallel, workers))
    return out
