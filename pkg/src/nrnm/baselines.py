"""Reference recurrent models for comparisons: vanilla RNN, GRU, and a
high-order RNN whose update reads the n most recent hidden states.

All three share the classifier head, masking, and training machinery of
the main model; only the per-step recurrence differs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .model import ForwardResult, ModelConfig, SequenceBatch
from .tensor import Tensor

BASELINE_KINDS = ("vanilla_rnn", "gru", "high_order_rnn")


@dataclass
class BaselineKind:
    kind: str = "vanilla_rnn"
    order: int = 3  # high_order_rnn lag count

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ConfigError(f"kind={self.kind!r} not in {BASELINE_KINDS}")
        if self.kind == "high_order_rnn" and self.order < 2:
            raise ConfigError(f"high_order_rnn needs order >= 2, got {self.order}")

    @property
    def history(self) -> int:
        return self.order if self.kind == "high_order_rnn" else 1


def _uniform(rng, shape, d_h, dtype) -> Tensor:
    r = 1.0 / np.sqrt(d_h)
    return Tensor(rng.uniform(-r, r, shape).astype(dtype), requires_grad=True)


def _bias(n, dtype) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


@dataclass
class VanillaLayerParams:
    W: Tensor
    U: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng, d_in, d_h, dtype, order=1):
        return cls(
            W=_uniform(rng, (d_in, d_h), d_h, dtype),
            U=_uniform(rng, (d_h, d_h), d_h, dtype),
            b=_bias(d_h, dtype),
        )

    def named(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class GruLayerParams:
    W_z: Tensor
    U_z: Tensor
    b_z: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_n: Tensor
    U_n: Tensor
    b_n: Tensor

    @classmethod
    def init(cls, rng, d_in, d_h, dtype, order=1):
        ps = {}
        for g in ("z", "r", "n"):
            ps[f"W_{g}"] = _uniform(rng, (d_in, d_h), d_h, dtype)
            ps[f"U_{g}"] = _uniform(rng, (d_h, d_h), d_h, dtype)
            ps[f"b_{g}"] = _bias(d_h, dtype)
        return cls(**ps)

    def named(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class HighOrderLayerParams:
    W: Tensor
    U: list[Tensor]  # U[j-1] multiplies h_{t-j}
    b: Tensor

    @classmethod
    def init(cls, rng, d_in, d_h, dtype, order=3):
        return cls(
            W=_uniform(rng, (d_in, d_h), d_h, dtype),
            U=[_uniform(rng, (d_h, d_h), d_h, dtype) for _ in range(order)],
            b=_bias(d_h, dtype),
        )

    def named(self):
        named = {"W": self.W, "b": self.b}
        for j, u in enumerate(self.U, start=1):
            named[f"U_{j}"] = u
        return named


_PARAM_CLASSES = {
    "vanilla_rnn": VanillaLayerParams,
    "gru": GruLayerParams,
    "high_order_rnn": HighOrderLayerParams,
}


def baseline_step(kind: BaselineKind, params, history: list[Tensor], x_t: Tensor) -> Tensor:
    """One recurrence step; ``history`` holds previous hidden states,
    oldest first, zero tensors at the start of a sequence.

    vanilla: h = tanh(x W + h' U + b)
    gru:     z/r sigmoid gates, candidate tanh(x W_n + (r*h') U_n + b_n),
             h = (1-z)*n + z*h'
    high-order: h = tanh(x W + sum_j h_{t-j} U_j + b)
    """
    if not history:
        raise DimensionError("baseline_step: history must hold >= 1 state")
    h_prev = history[-1]
    if kind.kind == "vanilla_rnn":
        return T.tanh(
            T.add_bias(T.add(T.matmul(x_t, params.W), T.matmul(h_prev, params.U)), params.b)
        )
    if kind.kind == "gru":
        z = T.sigmoid(
            T.add_bias(T.add(T.matmul(x_t, params.W_z), T.matmul(h_prev, params.U_z)), params.b_z)
        )
        r = T.sigmoid(
            T.add_bias(T.add(T.matmul(x_t, params.W_r), T.matmul(h_prev, params.U_r)), params.b_r)
        )
        n = T.tanh(
            T.add_bias(
                T.add(T.matmul(x_t, params.W_n), T.matmul(T.mul(r, h_prev), params.U_n)),
                params.b_n,
            )
        )
        one = Tensor(np.ones_like(z.data))
        return T.add(T.mul(T.sub(one, z), n), T.mul(z, h_prev))
    if len(history) < kind.order:
        raise DimensionError(
            f"baseline_step: high_order_rnn(order={kind.order}) needs "
            f"{kind.order} previous states, got {len(history)}"
        )
    acc = T.matmul(x_t, params.W)
    for j, U_j in enumerate(params.U, start=1):
        acc = T.add(acc, T.matmul(history[-j], U_j))
    return T.tanh(T.add_bias(acc, params.b))


class BaselineClassifier:
    """Multi-layer baseline recurrence with the shared affine head."""

    def __init__(self, cfg: ModelConfig, kind: BaselineKind):
        if cfg.nrnm is not None:
            raise ConfigError("baselines do not take a memory config")
        self.cfg = cfg
        self.kind = kind
        rng = np.random.default_rng(cfg.seed)
        dtype = cfg.dtype
        cls = _PARAM_CLASSES[kind.kind]
        self.layers = []
        d_in = cfg.input_dim
        for _ in range(cfg.depth):
            self.layers.append(cls.init(rng, d_in, cfg.d_h, dtype, order=kind.order))
            d_in = cfg.d_h
        r = 1.0 / np.sqrt(cfg.d_h)
        self.head_W = Tensor(
            rng.uniform(-r, r, (cfg.d_h, cfg.n_classes)).astype(dtype),
            requires_grad=True,
        )
        self.head_b = Tensor(np.zeros(cfg.n_classes, dtype=dtype), requires_grad=True)

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for li, layer in enumerate(self.layers):
            for pname, p in layer.named().items():
                named[f"{self.kind.kind}.layer{li}.{pname}"] = p
        named["head.W"] = self.head_W
        named["head.b"] = self.head_b
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def forward(
        self,
        batch: SequenceBatch,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        **_ignored,
    ) -> ForwardResult:
        cfg = self.cfg
        if training and cfg.dropout > 0.0 and rng is None:
            raise ConfigError("training forward with dropout requires an rng")
        dtype = cfg.dtype
        x_seq = batch.x.astype(dtype, copy=False)
        b, steps, _ = x_seq.shape
        ragged = bool((batch.lengths < steps).any())
        depth_hist = self.kind.history
        histories = [
            [Tensor(np.zeros((b, cfg.d_h), dtype=dtype)) for _ in range(depth_hist)]
            for _ in self.layers
        ]
        for t in range(steps):
            if ragged:
                alive = (batch.lengths > t).astype(dtype)
                mask = Tensor(np.repeat(alive[:, None], cfg.d_h, axis=1))
                inv_mask = Tensor(1.0 - mask.data)
            inp = Tensor(x_seq[:, t, :])
            for li, layer in enumerate(self.layers):
                h = baseline_step(self.kind, layer, histories[li], inp)
                if ragged:
                    h = T.add(T.mul(h, mask), T.mul(histories[li][-1], inv_mask))
                histories[li].append(h)
                if len(histories[li]) > depth_hist:
                    histories[li].pop(0)
                inp = h
                if training and cfg.dropout > 0.0 and li < cfg.depth - 1:
                    inp = T.dropout(inp, cfg.dropout, rng)
        logits = T.add_bias(T.matmul(histories[-1][-1], self.head_W), self.head_b)
        return ForwardResult(logits=logits, probs=T.softmax_rows(logits))
