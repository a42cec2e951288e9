"""Sequence classifier: LSTM backbone, optional non-local memory, affine head.

The classifier reads each sequence's hidden state at its own last valid
step (shorter sequences have frozen states past their length, so the final
grid column already holds it) and trains on the batch-mean negative
log-likelihood computed stably from logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import memory as mem_mod
from . import tensor as T
from .errors import ConfigError, DimensionError
from .lstm import LstmLayerParams, LstmLayerState, lstm_step
from .memory import MemoryState, NrnmConfig, NrnmParams
from .tensor import DTYPES, Tensor


@dataclass
class ModelConfig:
    depth: int = 3
    d_h: int = 32
    input_dim: int = 2
    n_classes: int = 2
    nrnm: Optional[NrnmConfig] = None
    dropout: float = 0.5
    precision: str = "f64"
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth={self.depth} must be >= 1")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes={self.n_classes} must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout={self.dropout} outside [0, 1)")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision={self.precision!r} not in {set(DTYPES)}")
        if self.nrnm is not None and self.nrnm.inject_layer >= self.depth:
            raise ConfigError(
                f"inject_layer={self.nrnm.inject_layer} >= depth={self.depth}"
            )

    @property
    def dtype(self):
        return DTYPES[self.precision]


@dataclass
class SequenceBatch:
    """Padded observations [B, T, D] with true lengths and class labels."""

    x: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x.ndim != 3:
            raise DimensionError(f"batch x must be [B,T,D], got {self.x.shape}")
        b, t, _ = self.x.shape
        if self.lengths.shape != (b,) or self.labels.shape != (b,):
            raise DimensionError(
                f"lengths/labels must be [B={b}], got "
                f"{self.lengths.shape}/{self.labels.shape}"
            )
        if (self.lengths < 1).any() or (self.lengths > t).any():
            raise ConfigError("sequence lengths must lie in [1, T]")
        if (self.labels < 0).any():
            raise ConfigError("labels must be non-negative class indices")

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def steps(self) -> int:
        return self.x.shape[1]


@dataclass
class ForwardResult:
    logits: Tensor
    probs: Tensor
    traces: Optional[list[dict]] = None
    hidden: Optional[list[list[Tensor]]] = None


@dataclass
class GateDiagnostics:
    """Running extrema of gate activations and attention row-sum error."""

    gate_min: float = np.inf
    gate_max: float = -np.inf
    att_rowsum_maxerr: float = 0.0

    def observe_gate(self, values: np.ndarray) -> None:
        self.gate_min = min(self.gate_min, float(values.min()))
        self.gate_max = max(self.gate_max, float(values.max()))

    def observe_attention(self, weights: np.ndarray) -> None:
        err = float(np.abs(weights.sum(axis=-1) - 1.0).max())
        self.att_rowsum_maxerr = max(self.att_rowsum_maxerr, err)


class SequenceClassifier:
    """LSTM stack with an optional non-local memory cell at one layer."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dtype = cfg.dtype
        self.layers = []
        d_in = cfg.input_dim
        for _ in range(cfg.depth):
            self.layers.append(LstmLayerParams.init(rng, d_in, cfg.d_h, dtype))
            d_in = cfg.d_h
        self.nrnm_params: Optional[NrnmParams] = None
        if cfg.nrnm is not None:
            self.nrnm_params = NrnmParams.init(
                rng, cfg.nrnm, cfg.input_dim, cfg.d_h, dtype
            )
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
                named[f"lstm.layer{li}.{pname}"] = p
        if self.nrnm_params is not None:
            for pname, p in self.nrnm_params.named().items():
                named[f"nrnm.{pname}"] = p
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
        collect_traces: bool = False,
        return_hidden: bool = False,
        diagnostics: Optional[GateDiagnostics] = None,
    ) -> ForwardResult:
        cfg = self.cfg
        if batch.labels.max() >= cfg.n_classes:
            raise ConfigError(
                f"label {int(batch.labels.max())} out of range for K={cfg.n_classes}"
            )
        if batch.x.shape[2] != cfg.input_dim:
            raise DimensionError(
                f"batch feature dim {batch.x.shape[2]} != model input_dim "
                f"{cfg.input_dim}"
            )
        if training and cfg.dropout > 0.0 and rng is None:
            raise ConfigError("training forward with dropout requires an rng")

        if diagnostics is None:
            return self._forward(
                batch, training, rng, collect_traces, return_hidden, None
            )
        with T.observe_sigmoids(diagnostics.observe_gate):
            return self._forward(
                batch, training, rng, collect_traces, return_hidden, diagnostics
            )

    def _forward(self, batch, training, rng, collect_traces, return_hidden, diag):
        cfg = self.cfg
        dtype = cfg.dtype
        x_seq = batch.x.astype(dtype, copy=False)
        b, steps, _ = x_seq.shape

        ncfg = cfg.nrnm
        ends = set(mem_mod.memory_schedule(steps, ncfg)) if ncfg else set()
        mem = (
            MemoryState.initial(b, ncfg, dtype) if ncfg is not None else None
        )
        ragged = bool((batch.lengths < steps).any())
        states = [LstmLayerState.zeros(b, cfg.d_h, dtype) for _ in self.layers]
        grid: list[list[Tensor]] = [[] for _ in self.layers]
        traces: list[dict] = []

        for t in range(steps):
            x_t = Tensor(x_seq[:, t, :])
            if ragged:
                alive = (batch.lengths > t).astype(dtype)
                mask = Tensor(np.repeat(alive[:, None], cfg.d_h, axis=1))
                inv_mask = Tensor(1.0 - mask.data)
            inp = x_t
            for li, layer in enumerate(self.layers):
                contrib = None
                if ncfg is not None and li == ncfg.inject_layer:
                    contrib = mem_mod.memory_contribution(mem, x_t, self.nrnm_params)
                new_state = lstm_step(layer, states[li], inp, contrib)
                if ragged:
                    new_state = LstmLayerState(
                        h=T.add(T.mul(new_state.h, mask), T.mul(states[li].h, inv_mask)),
                        c=T.add(T.mul(new_state.c, mask), T.mul(states[li].c, inv_mask)),
                        t=new_state.t,
                    )
                states[li] = new_state
                grid[li].append(new_state.h)
                inp = new_state.h
                if training and cfg.dropout > 0.0 and li < cfg.depth - 1:
                    inp = T.dropout(inp, cfg.dropout, rng)
            if ncfg is not None and t in ends:
                C, x_flat = mem_mod.assemble_block(
                    grid[ncfg.inject_layer], x_seq, t, ncfg, self.nrnm_params
                )
                m_embed, atts = mem_mod.memory_embedding(C, self.nrnm_params, ncfg)
                mem = mem_mod.update_memory(
                    m_embed, mem, x_flat, self.nrnm_params, ncfg, t
                )
                if diag is not None:
                    for w in atts:
                        diag.observe_attention(w.data)
                if collect_traces:
                    traces.append(
                        {
                            "step": t,
                            "layer": ncfg.inject_layer,
                            "heads": [w.data.copy() for w in atts],
                            "memory": mem.M.data.copy(),
                        }
                    )

        h_last = grid[-1][-1]
        logits = T.add_bias(T.matmul(h_last, self.head_W), self.head_b)
        probs = T.softmax_rows(logits)
        return ForwardResult(
            logits=logits,
            probs=probs,
            traces=traces if collect_traces else None,
            hidden=grid if return_hidden else None,
        )

    def loss(self, batch: SequenceBatch, training: bool = False,
             rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor]:
        """Batch-mean NLL from logits; returns (loss, logits)."""
        result = self.forward(batch, training=training, rng=rng)
        return loss_from_logits(result.logits, batch.labels), result.logits


def loss_from_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood, log-sum-exp stable."""
    picked = T.pick(T.log_softmax_rows(logits), labels)
    return T.scale(T.sum_all(picked), -1.0 / logits.shape[0])


def nll_loss(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log of the labelled probabilities.

    The log is floor-clamped, so a zero probability yields a large finite
    loss rather than -inf; prefer ``loss_from_logits`` on the training path.
    """
    picked = T.pick(probs, labels)
    return T.scale(T.sum_all(T.log(picked)), -1.0 / probs.shape[0])


def forward(model: SequenceClassifier, batch: SequenceBatch, **kwargs) -> ForwardResult:
    return model.forward(batch, **kwargs)


def predict(model: SequenceClassifier, batch: SequenceBatch) -> np.ndarray:
    """Argmax class per sequence; ties resolve to the lowest class index."""
    return np.argmax(model.forward(batch).logits.data, axis=1)


def count_parameters(model) -> int:
    return sum(p.data.size for p in model.named_parameters().values())
