"""Multi-layer LSTM backbone with an additive cell-state injection point.

States are batched: ``h`` and ``c`` are [B, d_h] tensors. The optional
``mem_contrib`` argument of ``lstm_step`` is an already-gated memory vector
that is simply added into the cell-state update; the backbone neither
computes nor owns it.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

GATE_NAMES = ("i", "f", "o", "c")


@dataclass
class LstmLayerParams:
    """Input/recurrent/bias parameters for the four LSTM gates."""

    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_c: Tensor
    U_i: Tensor
    U_f: Tensor
    U_o: Tensor
    U_c: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_c: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_h: int, dtype) -> "LstmLayerParams":
        """Uniform [-r, r] weights with r = 1/sqrt(d_h); forget bias +1."""
        r = 1.0 / np.sqrt(d_h)

        def w(m, n):
            return Tensor(rng.uniform(-r, r, (m, n)).astype(dtype), requires_grad=True)

        ps = {}
        for g in GATE_NAMES:
            ps[f"W_{g}"] = w(d_in, d_h)
            ps[f"U_{g}"] = w(d_h, d_h)
            bias = np.full(d_h, 1.0 if g == "f" else 0.0, dtype=dtype)
            ps[f"b_{g}"] = Tensor(bias, requires_grad=True)
        return cls(**ps)

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def d_in(self) -> int:
        return self.W_i.shape[0]

    @property
    def d_h(self) -> int:
        return self.W_i.shape[1]


@dataclass
class LstmLayerState:
    h: Tensor
    c: Tensor
    t: int = 0

    @classmethod
    def zeros(cls, batch: int, d_h: int, dtype) -> "LstmLayerState":
        return cls(
            h=Tensor(np.zeros((batch, d_h), dtype=dtype)),
            c=Tensor(np.zeros((batch, d_h), dtype=dtype)),
            t=0,
        )


def _gate(x: Tensor, h: Tensor, W: Tensor, U: Tensor, b: Tensor) -> Tensor:
    return T.add_bias(T.add(T.matmul(x, W), T.matmul(h, U)), b)


def lstm_step(
    params: LstmLayerParams,
    state: LstmLayerState,
    x: Tensor,
    mem_contrib: Optional[Tensor] = None,
) -> LstmLayerState:
    """One LSTM cell update; ``mem_contrib``, when given, is added to c.

    c' = g_f * c + g_i * c_cand (+ mem_contrib);  h' = g_o * tanh(c').
    """
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise DimensionError(
            f"lstm_step: input {x.shape} incompatible with d_in={params.d_in}"
        )
    if state.h.shape != (x.shape[0], params.d_h):
        raise DimensionError(
            f"lstm_step: state {state.h.shape} incompatible with "
            f"batch {x.shape[0]}, d_h={params.d_h}"
        )
    g_i = T.sigmoid(_gate(x, state.h, params.W_i, params.U_i, params.b_i))
    g_f = T.sigmoid(_gate(x, state.h, params.W_f, params.U_f, params.b_f))
    g_o = T.sigmoid(_gate(x, state.h, params.W_o, params.U_o, params.b_o))
    c_cand = T.tanh(_gate(x, state.h, params.W_c, params.U_c, params.b_c))
    c_new = T.add(T.mul(g_f, state.c), T.mul(g_i, c_cand))
    if mem_contrib is not None:
        if mem_contrib.shape != c_new.shape:
            raise DimensionError(
                f"lstm_step: mem_contrib {mem_contrib.shape} vs cell {c_new.shape}"
            )
        c_new = T.add(c_new, mem_contrib)
    h_new = T.mul(g_o, T.tanh(c_new))
    return LstmLayerState(h=h_new, c=c_new, t=state.t + 1)


def stack_forward(
    layers: list[LstmLayerParams],
    x_seq: np.ndarray,
    injections: Optional[dict[int, tuple[int, Tensor]]] = None,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> list[list[Tensor]]:
    """Roll a layer stack over a [T, D] or [B, T, D] sequence.

    ``injections`` maps step -> (layer, mem_contrib); the contribution is
    added at exactly that (step, layer) cell update. Returns hidden states
    as grid[layer][step], each a [B, d_h] tensor. Dropout, when enabled on
    the training path, applies between layers only.
    """
    x_seq = np.asarray(x_seq)
    if x_seq.ndim == 2:
        x_seq = x_seq[np.newaxis]
    if x_seq.ndim != 3:
        raise DimensionError(f"stack_forward: sequence rank must be 2 or 3, got {x_seq.shape}")
    injections = injections or {}
    depth = len(layers)
    for step, (layer_idx, _) in injections.items():
        if not 0 <= layer_idx < depth:
            raise ConfigError(
                f"injection at step {step} names layer {layer_idx}, depth is {depth}"
            )
    batch, steps, _ = x_seq.shape
    dtype = layers[0].W_i.dtype
    states = [LstmLayerState.zeros(batch, layer.d_h, dtype) for layer in layers]
    grid: list[list[Tensor]] = [[] for _ in layers]
    for t in range(steps):
        inp = Tensor(x_seq[:, t, :].astype(dtype, copy=False))
        for li, layer in enumerate(layers):
            contrib = None
            if t in injections and injections[t][0] == li:
                contrib = injections[t][1]
            states[li] = lstm_step(layer, states[li], inp, contrib)
            grid[li].append(states[li].h)
            inp = states[li].h
            if training and dropout_rate > 0.0 and li < depth - 1:
                inp = T.dropout(inp, dropout_rate, rng)
    return grid
