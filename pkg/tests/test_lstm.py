"""Backbone LSTM semantics against a hand-rolled numpy reference."""

import numpy as np
import numpy.testing as npt
import pytest
from scipy.special import expit

from nrnm import tensor as T
from nrnm.errors import ConfigError
from nrnm.gradcheck import check_gradients
from nrnm.lstm import LstmLayerParams, LstmLayerState, lstm_step, stack_forward
from nrnm.tensor import Tensor


def make_layer(rng, d_in, d_h):
    return LstmLayerParams.init(rng, d_in, d_h, np.float64)


def zero_layer(d_in, d_h):
    layer = make_layer(np.random.default_rng(0), d_in, d_h)
    for p in layer.named().values():
        p.data[:] = 0.0
    return layer


class NaiveLstm:
    """Step-by-step reference recurrence, independent of the tape engine."""

    def __init__(self, layer):
        self.p = {k: v.data for k, v in layer.named().items()}

    def step(self, h, c, x):
        p = self.p
        g_i = expit(x @ p["W_i"] + h @ p["U_i"] + p["b_i"])
        g_f = expit(x @ p["W_f"] + h @ p["U_f"] + p["b_f"])
        g_o = expit(x @ p["W_o"] + h @ p["U_o"] + p["b_o"])
        cand = np.tanh(x @ p["W_c"] + h @ p["U_c"] + p["b_c"])
        c_new = g_f * c + g_i * cand
        return g_o * np.tanh(c_new), c_new


class TestLstmStep:
    def test_zero_weight_closed_form(self):
        layer = zero_layer(3, 4)
        rng = np.random.default_rng(1)
        c0 = rng.standard_normal((2, 4))
        state = LstmLayerState(h=Tensor(np.zeros((2, 4))), c=Tensor(c0))
        x = Tensor(rng.standard_normal((2, 3)))
        out = lstm_step(layer, state, x)
        npt.assert_allclose(out.c.data, 0.5 * c0, rtol=1e-15)
        npt.assert_allclose(out.h.data, 0.5 * np.tanh(0.5 * c0), rtol=1e-15)
        assert out.t == 1

    def test_zero_mem_contrib_is_bit_exact_identity(self):
        rng = np.random.default_rng(2)
        layer = make_layer(rng, 3, 5)
        state = LstmLayerState(
            h=Tensor(rng.standard_normal((2, 5))),
            c=Tensor(rng.standard_normal((2, 5))),
        )
        x = Tensor(rng.standard_normal((2, 3)))
        plain = lstm_step(layer, state, x)
        zeroed = lstm_step(layer, state, x, mem_contrib=Tensor(np.zeros((2, 5))))
        npt.assert_array_equal(plain.h.data, zeroed.h.data)
        npt.assert_array_equal(plain.c.data, zeroed.c.data)

    def test_rollout_matches_naive_reference(self):
        rng = np.random.default_rng(3)
        layer = make_layer(rng, 4, 6)
        naive = NaiveLstm(layer)
        x_seq = rng.standard_normal((1, 6, 4))
        state = LstmLayerState.zeros(1, 6, np.float64)
        h_ref = np.zeros((1, 6))
        c_ref = np.zeros((1, 6))
        for t in range(6):
            state = lstm_step(layer, state, Tensor(x_seq[:, t, :]))
            h_ref, c_ref = naive.step(h_ref, c_ref, x_seq[:, t, :])
            npt.assert_allclose(state.h.data, h_ref, rtol=1e-10)
            npt.assert_allclose(state.c.data, c_ref, rtol=1e-10)

    def test_gates_in_open_interval(self):
        rng = np.random.default_rng(4)
        layer = make_layer(rng, 3, 4)
        state = LstmLayerState.zeros(2, 4, np.float64)
        x = Tensor(rng.standard_normal((2, 3)) * 5)
        out = lstm_step(layer, state, x)
        # h = g_o * tanh(c), both factors strictly inside (-1, 1)
        assert (np.abs(out.h.data) < 1).all()

    def test_dimension_errors(self):
        layer = make_layer(np.random.default_rng(5), 3, 4)
        state = LstmLayerState.zeros(2, 4, np.float64)
        with pytest.raises(Exception, match="incompatible"):
            lstm_step(layer, state, Tensor(np.zeros((2, 7))))
        with pytest.raises(Exception, match="mem_contrib"):
            lstm_step(layer, state, Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 9))))


class TestStackForward:
    def test_depth_one_reduces_to_repeated_steps(self):
        rng = np.random.default_rng(6)
        layer = make_layer(rng, 3, 4)
        x_seq = rng.standard_normal((2, 5, 3))
        grid = stack_forward([layer], x_seq)
        state = LstmLayerState.zeros(2, 4, np.float64)
        for t in range(5):
            state = lstm_step(layer, state, Tensor(x_seq[:, t, :]))
            npt.assert_array_equal(grid[0][t].data, state.h.data)

    def test_empty_injections_equal_plain_stack(self):
        rng = np.random.default_rng(7)
        layers = [make_layer(rng, 3, 4), make_layer(rng, 4, 4)]
        x_seq = rng.standard_normal((1, 6, 3))
        a = stack_forward(layers, x_seq)
        b = stack_forward(layers, x_seq, injections={})
        for la, lb in zip(a, b):
            for ha, hb in zip(la, lb):
                npt.assert_array_equal(ha.data, hb.data)

    def test_injection_at_middle_layer_changes_only_later_steps(self):
        rng = np.random.default_rng(8)
        layers = [make_layer(rng, 3, 4) for _ in range(1)] + [
            make_layer(rng, 4, 4) for _ in range(2)
        ]
        x_seq = rng.standard_normal((1, 8, 3))
        inject_step = 4
        contrib = Tensor(rng.standard_normal((1, 4)))
        plain = stack_forward(layers, x_seq)
        poked = stack_forward(layers, x_seq, injections={inject_step: (1, contrib)})
        for layer_idx in range(3):
            for t in range(inject_step):
                npt.assert_array_equal(
                    plain[layer_idx][t].data, poked[layer_idx][t].data
                )
        # layer 0 never sees the injection; layers 1-2 must diverge
        for t in range(8):
            npt.assert_array_equal(plain[0][t].data, poked[0][t].data)
        assert not np.array_equal(
            plain[1][inject_step].data, poked[1][inject_step].data
        )
        assert not np.array_equal(
            plain[2][inject_step].data, poked[2][inject_step].data
        )

    def test_injection_layer_out_of_range(self):
        layers = [make_layer(np.random.default_rng(9), 3, 4)]
        with pytest.raises(ConfigError, match="layer 2"):
            stack_forward(layers, np.zeros((1, 4, 3)), {0: (2, Tensor(np.zeros((1, 4))))})

    def test_long_rollout_stays_finite(self):
        rng = np.random.default_rng(10)
        layer = make_layer(rng, 2, 3)
        x_seq = rng.uniform(-1, 1, (1, 10_000, 2))
        grid = stack_forward([layer], x_seq)
        assert np.isfinite(grid[0][-1].data).all()
        assert np.isfinite(max(float(np.abs(h.data).max()) for h in grid[0]))

    def test_gradients_through_rollout(self):
        rng = np.random.default_rng(11)
        layers = [make_layer(rng, 2, 3), make_layer(rng, 3, 3)]
        x_seq = rng.standard_normal((2, 12, 2))
        params = [
            (f"layer{li}.{name}", p)
            for li, layer in enumerate(layers)
            for name, p in layer.named().items()
        ]

        def builder():
            grid = stack_forward(layers, x_seq)
            return T.sum_all(T.tanh(grid[-1][-1]))

        report = check_gradients(builder, params)
        worst = max(report.values())
        assert worst < 1e-4, report


class TestInit:
    def test_forget_bias_one_other_zero(self):
        layer = LstmLayerParams.init(np.random.default_rng(12), 3, 4, np.float64)
        npt.assert_array_equal(layer.b_f.data, np.ones(4))
        npt.assert_array_equal(layer.b_i.data, np.zeros(4))
        npt.assert_array_equal(layer.b_o.data, np.zeros(4))
        npt.assert_array_equal(layer.b_c.data, np.zeros(4))

    def test_weight_range(self):
        d_h = 16
        layer = LstmLayerParams.init(np.random.default_rng(13), 8, d_h, np.float64)
        bound = 1.0 / np.sqrt(d_h)
        for name in ("W_i", "U_f", "W_c", "U_o"):
            w = layer.named()[name].data
            assert (np.abs(w) <= bound).all()
