"""Non-local memory cell: strided block assembly, multi-head self-attention
with skip connections, gated recurrent memory updates, and the gated
contribution that feeds the backbone's cell-state update.

A memory block covers the ``k`` most recent steps; every ``s``-th step in
that interval survives, so u = ceil(k/s) hidden-state rows and u projected
input rows form the 2u-row attention source. The memory state is a [u, m]
matrix (batched: [B, u, m]) refreshed every ``win`` steps and consumed by
all later steps until the next refresh.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor


class BlockUnavailableError(ValueError):
    """Raised when a block is requested before k steps have elapsed."""


@dataclass
class NrnmConfig:
    k: int = 8
    s: int = 1
    win: int = 4
    m: int = 32
    heads: int = 4
    inject_layer: int = 1
    per_head_scale: bool = False  # False: attention logits scaled by sqrt(m)

    def __post_init__(self):
        if not 1 <= self.s <= self.k:
            raise ConfigError(f"stride s={self.s} must satisfy 1 <= s <= k={self.k}")
        if self.win < 1:
            raise ConfigError(f"sliding window win={self.win} must be >= 1")
        if self.heads < 1 or self.m % self.heads != 0:
            raise ConfigError(
                f"memory size m={self.m} must divide into heads={self.heads}"
            )
        if self.inject_layer < 0:
            raise ConfigError(f"inject_layer={self.inject_layer} must be >= 0")

    @property
    def u(self) -> int:
        return math.ceil(self.k / self.s)


@dataclass
class MemoryState:
    """Recurrent memory matrix plus the step index that produced it."""

    M: Tensor
    produced_at: int = -1
    valid: bool = False

    @classmethod
    def initial(cls, batch: int, cfg: NrnmConfig, dtype) -> "MemoryState":
        return cls(M=Tensor(np.zeros((batch, cfg.u, cfg.m), dtype=dtype)))


@dataclass
class NrnmParams:
    """All learned tensors of the memory cell.

    P_x projects D-dim inputs to the m-dim rows the attention source needs.
    W_q/W_k/W_v/W_o are the full-width attention projections (heads are
    column slices); W_fc/b_fc the post-attention layer. W_im/W_fm/B_im/B_fm
    gate the recurrent memory update from [flattened strided inputs,
    flattened previous memory]. W_m/U_m/b_m build the memory gate and V_m
    down-projects the flattened memory into the backbone's cell space.
    """

    P_x: Tensor
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    W_fc: Tensor
    b_fc: Tensor
    W_im: Tensor
    W_fm: Tensor
    B_im: Tensor
    B_fm: Tensor
    W_m: Tensor
    U_m: Tensor
    b_m: Tensor
    V_m: Tensor

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        cfg: NrnmConfig,
        input_dim: int,
        d_h: int,
        dtype,
    ) -> "NrnmParams":
        if cfg.m != d_h:
            raise ConfigError(
                f"memory size m={cfg.m} must equal backbone d_h={d_h} "
                "at the injection layer"
            )
        u, m = cfg.u, cfg.m
        gate_in = u * input_dim + u * m

        def w(shape, fan):
            r = 1.0 / np.sqrt(fan)
            return Tensor(rng.uniform(-r, r, shape).astype(dtype), requires_grad=True)

        def b(n):
            return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

        return cls(
            P_x=w((input_dim, m), input_dim),
            W_q=w((m, m), m),
            W_k=w((m, m), m),
            W_v=w((m, m), m),
            W_o=w((m, m), m),
            W_fc=w((m, m), m),
            b_fc=b(m),
            W_im=w((gate_in, u * m), gate_in),
            W_fm=w((gate_in, u * m), gate_in),
            B_im=b(u * m),
            B_fm=b(u * m),
            W_m=w((input_dim, d_h), input_dim),
            U_m=w((u * m, d_h), u * m),
            b_m=b(d_h),
            V_m=w((u * m, d_h), u * m),
        )

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def strided_steps(t: int, cfg: NrnmConfig) -> list[int]:
    """Steps surviving the stride inside the block interval [t-k+1, t]."""
    start = t - cfg.k + 1
    return [start + cfg.s * j for j in range(cfg.u)]


def memory_schedule(T_steps: int, cfg: NrnmConfig) -> list[int]:
    """Block-end steps k-1, k-1+win, ... strictly below T.

    The memory produced at end e serves steps e+1 through the next end
    (trailing steps after the last end included); T < k yields no updates
    and the model degenerates to the plain backbone.
    """
    return list(range(cfg.k - 1, T_steps, cfg.win))


def assemble_block(
    h_grid: list[Tensor],
    x_seq: np.ndarray,
    t: int,
    cfg: NrnmConfig,
    p: NrnmParams,
) -> tuple[Tensor, Tensor]:
    """Attention source for the block ending at step t.

    Returns (C, x_flat): C is [B, 2u, m] with rows 0..u-1 the strided
    hidden states (ascending step order) and rows u..2u-1 the same-step
    inputs projected by P_x; x_flat is [B, u*D], the raw strided inputs
    flattened for the update gates.
    """
    if t < cfg.k - 1:
        raise BlockUnavailableError(
            f"block ending at step {t} needs k={cfg.k} steps of history"
        )
    steps = strided_steps(t, cfg)
    batch = h_grid[0].shape[0]
    dtype = h_grid[0].dtype
    h_rows = []
    x_rows = []
    x_raw = []
    for step in steps:
        h = h_grid[step]
        if h.shape[1] != cfg.m:
            raise DimensionError(
                f"assemble_block: hidden width {h.shape[1]} != memory size {cfg.m}"
            )
        h_rows.append(T.reshape(h, (batch, 1, cfg.m)))
        x_t = Tensor(x_seq[:, step, :].astype(dtype, copy=False))
        x_raw.append(x_t)
        x_rows.append(T.reshape(T.matmul(x_t, p.P_x), (batch, 1, cfg.m)))
    C = T.concat(h_rows + x_rows, axis=1)
    x_flat = T.concat(x_raw, axis=1)
    return C, x_flat


def memory_embedding(
    C: Tensor, p: NrnmParams, cfg: NrnmConfig
) -> tuple[Tensor, list[Tensor]]:
    """Attend over the block source and distill it to a [B, u, m] embedding.

    Per head: Q/K/V are column slices of C W_q / C W_k / C W_v, attention
    weights are row-softmaxed scaled dot products, and head outputs are
    concatenated then mixed by W_o. Two skip sublayers follow (attention,
    then a tanh affine layer); the first u rows — the hidden-state query
    positions — become the embedding. Also returns the per-head attention
    weight tensors, each [B, 2u, 2u].
    """
    u, m, heads = cfg.u, cfg.m, cfg.heads
    if C.ndim != 3 or C.shape[1] != 2 * u or C.shape[2] != m:
        raise DimensionError(
            f"memory_embedding: source {C.shape} != [B, {2 * u}, {m}]"
        )
    dh = m // heads
    scale_dim = dh if cfg.per_head_scale else m
    inv_scale = 1.0 / math.sqrt(scale_dim)

    def stage(name, fn):
        try:
            return fn()
        except NumericError as err:
            raise NumericError(f"memory_embedding/{name}: {err}") from err

    Q = stage("queries", lambda: T.matmul(C, p.W_q))
    K = stage("keys", lambda: T.matmul(C, p.W_k))
    V = stage("values", lambda: T.matmul(C, p.W_v))
    att_weights = []
    head_outs = []
    for hd in range(heads):
        lo, hi = hd * dh, (hd + 1) * dh
        Qh = T.slice_cols(Q, lo, hi)
        Kh = T.slice_cols(K, lo, hi)
        Vh = T.slice_cols(V, lo, hi)
        logits = stage(
            f"attention_logits[{hd}]",
            lambda: T.scale(T.bmm(Qh, T.transpose_last(Kh)), inv_scale),
        )
        W_att = stage(f"attention_softmax[{hd}]", lambda: T.softmax_rows(logits))
        att_weights.append(W_att)
        head_outs.append(T.bmm(W_att, Vh))
    M_att = stage("head_mix", lambda: T.matmul(T.concat(head_outs, axis=2), p.W_o))
    A = stage("attention_skip", lambda: T.add(C, M_att))
    fc = stage("fc", lambda: T.tanh(T.add_bias(T.matmul(A, p.W_fc), p.b_fc)))
    Z = stage("fc_skip", lambda: T.add(A, fc))
    return T.slice_rows(Z, 0, u), att_weights


def update_memory(
    M_embed: Tensor,
    prev: MemoryState,
    x_flat: Tensor,
    p: NrnmParams,
    cfg: NrnmConfig,
    t: int,
) -> MemoryState:
    """Gated recurrent refresh: M = G_i * tanh(M_embed) + G_f * M_prev.

    Both gates are sigmoids of [flattened strided inputs, flattened
    previous memory], reshaped to [B, u, m]. An invalid previous state is
    the zero matrix, so the forget branch contributes nothing.
    """
    u, m = cfg.u, cfg.m
    batch = M_embed.shape[0]
    if M_embed.shape != (batch, u, m):
        raise DimensionError(
            f"update_memory: embedding {M_embed.shape} != [B, {u}, {m}]"
        )
    prev_flat = T.reshape(prev.M, (batch, u * m))
    gate_in = T.concat([x_flat, prev_flat], axis=1)
    if gate_in.shape[1] != p.W_im.shape[0]:
        raise DimensionError(
            f"update_memory: gate input width {gate_in.shape[1]} != "
            f"{p.W_im.shape[0]}"
        )
    G_i = T.reshape(
        T.sigmoid(T.add_bias(T.matmul(gate_in, p.W_im), p.B_im)), (batch, u, m)
    )
    G_f = T.reshape(
        T.sigmoid(T.add_bias(T.matmul(gate_in, p.W_fm), p.B_fm)), (batch, u, m)
    )
    M_new = T.add(T.mul(G_i, T.tanh(M_embed)), T.mul(G_f, prev.M))
    return MemoryState(M=M_new, produced_at=t, valid=True)


def memory_contribution(mem: MemoryState, x_t: Tensor, p: NrnmParams) -> Tensor:
    """Gated memory vector added to the backbone cell state.

    A zero vector before the first block completes, so early steps run a
    plain LSTM. Otherwise the flattened memory is down-projected by V_m and
    gated by g_m = sigmoid(x W_m + flat(M) U_m + b_m).
    """
    if not mem.valid:
        d_h = p.V_m.shape[1]
        return Tensor(np.zeros((x_t.shape[0], d_h), dtype=x_t.dtype))
    batch, u, m = mem.M.shape
    flat = T.reshape(mem.M, (batch, u * m))
    v = T.matmul(flat, p.V_m)
    g_m = T.sigmoid(
        T.add_bias(T.add(T.matmul(x_t, p.W_m), T.matmul(flat, p.U_m)), p.b_m)
    )
    return T.mul(g_m, v)
