"""Memory cell: block assembly, attention embedding, gated updates, schedule."""

import math

import numpy as np
import numpy.testing as npt
import pytest
from scipy.special import expit

from nrnm import tensor as T
from nrnm.errors import ConfigError
from nrnm.gradcheck import check_gradients
from nrnm.memory import (
    BlockUnavailableError,
    MemoryState,
    NrnmConfig,
    NrnmParams,
    assemble_block,
    memory_contribution,
    memory_embedding,
    memory_schedule,
    strided_steps,
    update_memory,
)
from nrnm.tensor import Tensor


def make_params(rng, cfg, input_dim, d_h=None):
    return NrnmParams.init(rng, cfg, input_dim, d_h or cfg.m, np.float64)


def make_grid(rng, steps, batch, m):
    return [Tensor(rng.standard_normal((batch, m))) for _ in range(steps)]


class TestConfig:
    def test_u_rounds_up(self):
        assert NrnmConfig(k=4, s=1, m=4, heads=1).u == 4
        assert NrnmConfig(k=8, s=4, m=4, heads=1).u == 2
        assert NrnmConfig(k=10, s=4, m=4, heads=1).u == 3

    def test_validation(self):
        with pytest.raises(ConfigError):
            NrnmConfig(k=4, s=5, m=4, heads=1)
        with pytest.raises(ConfigError):
            NrnmConfig(k=4, s=1, win=0, m=4, heads=1)
        with pytest.raises(ConfigError):
            NrnmConfig(k=4, s=1, m=6, heads=4)

    def test_memory_size_must_match_backbone(self):
        cfg = NrnmConfig(k=4, s=1, m=8, heads=2)
        with pytest.raises(ConfigError, match="d_h"):
            NrnmParams.init(np.random.default_rng(0), cfg, 3, d_h=16, dtype=np.float64)


class TestAssembleBlock:
    def test_stride_one_enumeration(self):
        cfg = NrnmConfig(k=4, s=1, m=5, heads=1)
        rng = np.random.default_rng(1)
        grid = make_grid(rng, 4, 2, 5)
        x_seq = rng.standard_normal((2, 4, 3))
        p = make_params(rng, cfg, 3)
        assert strided_steps(3, cfg) == [0, 1, 2, 3]
        C, x_flat = assemble_block(grid, x_seq, 3, cfg, p)
        assert C.shape == (2, 8, 5)
        for j in range(4):
            npt.assert_array_equal(C.data[:, j, :], grid[j].data)
            npt.assert_allclose(
                C.data[:, 4 + j, :], x_seq[:, j, :] @ p.P_x.data, rtol=1e-15
            )
        npt.assert_array_equal(
            x_flat.data, x_seq[:, :4, :].reshape(2, 12)
        )

    def test_stride_arithmetic(self):
        cfg = NrnmConfig(k=8, s=4, m=4, heads=1)
        assert strided_steps(7, cfg) == [0, 4]
        cfg10 = NrnmConfig(k=10, s=4, m=4, heads=1)
        # enumerate [0..9] and keep every 4th: {0, 4, 8}; ceil(10/4) = 3 rows
        assert strided_steps(9, cfg10) == [0, 4, 8]
        assert cfg10.u == 3

    def test_block_unavailable_before_k_steps(self):
        cfg = NrnmConfig(k=4, s=1, m=3, heads=1)
        rng = np.random.default_rng(2)
        p = make_params(rng, cfg, 2)
        grid = make_grid(rng, 3, 1, 3)
        with pytest.raises(BlockUnavailableError):
            assemble_block(grid, rng.standard_normal((1, 3, 2)), 2, cfg, p)


def naive_embedding(C, p, cfg):
    """Per-head loop oracle with explicit slicing and naive softmax."""
    m, heads, u = cfg.m, cfg.heads, cfg.u
    dh = m // heads
    Q, K, V = C @ p.W_q.data, C @ p.W_k.data, C @ p.W_v.data
    outs, atts = [], []
    for hd in range(heads):
        q = Q[:, hd * dh : (hd + 1) * dh]
        k = K[:, hd * dh : (hd + 1) * dh]
        v = V[:, hd * dh : (hd + 1) * dh]
        logits = q @ k.T / math.sqrt(m)
        e = np.exp(logits)
        w = e / e.sum(axis=1, keepdims=True)
        atts.append(w)
        outs.append(w @ v)
    m_att = np.hstack(outs) @ p.W_o.data
    a = C + m_att
    z = a + np.tanh(a @ p.W_fc.data + p.b_fc.data)
    return z[:u], atts


class TestMemoryEmbedding:
    def test_zero_logits_give_uniform_attention(self):
        cfg = NrnmConfig(k=3, s=1, m=4, heads=2)
        rng = np.random.default_rng(3)
        p = make_params(rng, cfg, 2)
        p.W_q.data[:] = 0.0
        p.W_k.data[:] = 0.0
        C = Tensor(rng.standard_normal((1, 6, 4)))
        m_embed, atts = memory_embedding(C, p, cfg)
        for w in atts:
            npt.assert_allclose(w.data, 1.0 / 6.0, rtol=1e-14)
        # uniform attention mixes V rows equally
        V = C.data[0] @ p.W_v.data
        mixed = np.repeat(V.mean(axis=0, keepdims=True), 6, axis=0) @ p.W_o.data
        a = C.data[0] + mixed
        expect = (a + np.tanh(a @ p.W_fc.data + p.b_fc.data))[:3]
        npt.assert_allclose(m_embed.data[0], expect, rtol=1e-12)

    def test_minimal_block_hand_trace(self):
        cfg = NrnmConfig(k=1, s=1, m=3, heads=1)
        rng = np.random.default_rng(4)
        p = make_params(rng, cfg, 2)
        for w in (p.W_q, p.W_k, p.W_v, p.W_o):
            w.data[:] = np.eye(3)
        p.W_fc.data[:] = 0.0
        p.b_fc.data[:] = 0.0
        C = Tensor(rng.standard_normal((1, 2, 3)))
        m_embed, atts = memory_embedding(C, p, cfg)
        c = C.data[0]
        logits = c @ c.T / math.sqrt(3)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        w_att = e / e.sum(axis=1, keepdims=True)
        expect = (c + w_att @ c)[0]
        npt.assert_allclose(m_embed.data[0, 0], expect, rtol=1e-12)
        npt.assert_allclose(atts[0].data[0], w_att, rtol=1e-12)

    def test_matches_naive_multihead_oracle(self):
        cfg = NrnmConfig(k=4, s=1, m=16, heads=4)
        rng = np.random.default_rng(5)
        p = make_params(rng, cfg, 3)
        C = Tensor(rng.standard_normal((2, 8, 16)))
        m_embed, atts = memory_embedding(C, p, cfg)
        for b in range(2):
            expect, att_expect = naive_embedding(C.data[b], p, cfg)
            npt.assert_allclose(m_embed.data[b], expect, rtol=1e-10)
            for got, want in zip(atts, att_expect):
                npt.assert_allclose(got.data[b], want, rtol=1e-10)

    def test_per_head_scale_switch(self):
        base = dict(k=4, s=1, m=16, heads=4)
        rng = np.random.default_rng(6)
        p = make_params(rng, NrnmConfig(**base), 3)
        C = Tensor(rng.standard_normal((1, 8, 16)))
        full, _ = memory_embedding(C, p, NrnmConfig(**base))
        per_head, _ = memory_embedding(C, p, NrnmConfig(**base, per_head_scale=True))
        assert not np.allclose(full.data, per_head.data)

    def test_attention_rows_sum_to_one(self):
        cfg = NrnmConfig(k=5, s=2, m=8, heads=2)
        rng = np.random.default_rng(7)
        p = make_params(rng, cfg, 4)
        C = Tensor(rng.standard_normal((3, 2 * cfg.u, 8)) * 4)
        _, atts = memory_embedding(C, p, cfg)
        for w in atts:
            npt.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-10)


class TestUpdateMemory:
    def setup_case(self, seed, u=2, m=4, d=3, valid_prev=True):
        cfg = NrnmConfig(k=u, s=1, m=m, heads=2)
        rng = np.random.default_rng(seed)
        p = make_params(rng, cfg, d)
        m_embed = Tensor(rng.standard_normal((1, u, m)))
        x_flat = Tensor(rng.standard_normal((1, u * d)))
        prev = MemoryState.initial(1, cfg, np.float64)
        if valid_prev:
            prev = MemoryState(
                M=Tensor(rng.standard_normal((1, u, m))), produced_at=3, valid=True
            )
        return cfg, p, m_embed, x_flat, prev

    def test_invalid_previous_memory_annihilates_forget_term(self):
        cfg, p, m_embed, x_flat, prev = self.setup_case(8, valid_prev=False)
        out = update_memory(m_embed, prev, x_flat, p, cfg, t=7)
        z = np.concatenate([x_flat.data[0], prev.M.data[0].reshape(-1)])
        g_i = expit(z @ p.W_im.data + p.B_im.data).reshape(2, 4)
        npt.assert_allclose(out.M.data[0], g_i * np.tanh(m_embed.data[0]), rtol=1e-14)
        assert out.valid and out.produced_at == 7

    def test_saturated_gates_pass_tanh_through(self):
        cfg, p, m_embed, x_flat, prev = self.setup_case(9)
        p.W_im.data[:] = 0.0
        p.W_fm.data[:] = 0.0
        p.B_im.data[:] = 30.0
        p.B_fm.data[:] = -30.0
        out = update_memory(m_embed, prev, x_flat, p, cfg, t=5)
        npt.assert_allclose(out.M.data[0], np.tanh(m_embed.data[0]), atol=1e-6)

    def test_matches_explicit_loop_oracle(self):
        cfg, p, m_embed, x_flat, prev = self.setup_case(10)
        out = update_memory(m_embed, prev, x_flat, p, cfg, t=9)
        z = np.concatenate([x_flat.data[0], prev.M.data[0].reshape(-1)])
        gates = {}
        for name, (W, B) in {
            "i": (p.W_im.data, p.B_im.data),
            "f": (p.W_fm.data, p.B_fm.data),
        }.items():
            g = np.zeros(8)
            for col in range(8):
                acc = B[col]
                for row in range(z.size):
                    acc += z[row] * W[row, col]
                g[col] = 1.0 / (1.0 + math.exp(-acc))
            gates[name] = g.reshape(2, 4)
        expect = gates["i"] * np.tanh(m_embed.data[0]) + gates["f"] * prev.M.data[0]
        npt.assert_allclose(out.M.data[0], expect, rtol=1e-12)

    def test_gates_strictly_inside_unit_interval(self):
        cfg, p, m_embed, x_flat, prev = self.setup_case(11)
        out = update_memory(m_embed, prev, x_flat, p, cfg, t=9)
        assert np.isfinite(out.M.data).all()


class TestMemoryContribution:
    def test_invalid_memory_yields_zero_vector(self):
        cfg = NrnmConfig(k=2, s=1, m=4, heads=2)
        rng = np.random.default_rng(12)
        p = make_params(rng, cfg, 3)
        mem = MemoryState.initial(2, cfg, np.float64)
        out = memory_contribution(mem, Tensor(rng.standard_normal((2, 3))), p)
        npt.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_zero_projection_annihilates(self):
        cfg = NrnmConfig(k=2, s=1, m=4, heads=2)
        rng = np.random.default_rng(13)
        p = make_params(rng, cfg, 3)
        p.V_m.data[:] = 0.0
        mem = MemoryState(
            M=Tensor(rng.standard_normal((2, 2, 4))), produced_at=1, valid=True
        )
        out = memory_contribution(mem, Tensor(rng.standard_normal((2, 3))), p)
        npt.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_matches_loop_oracle(self):
        cfg = NrnmConfig(k=2, s=1, m=4, heads=2)
        rng = np.random.default_rng(14)
        p = make_params(rng, cfg, 3)
        mem = MemoryState(
            M=Tensor(rng.standard_normal((1, 2, 4))), produced_at=1, valid=True
        )
        x_t = Tensor(rng.standard_normal((1, 3)))
        out = memory_contribution(mem, x_t, p)
        flat = mem.M.data[0].reshape(-1)
        expect = np.zeros(4)
        for i in range(4):
            gate = p.b_m.data[i]
            proj = 0.0
            for j in range(3):
                gate += x_t.data[0, j] * p.W_m.data[j, i]
            for j in range(8):
                gate += flat[j] * p.U_m.data[j, i]
                proj += flat[j] * p.V_m.data[j, i]
            expect[i] = 1.0 / (1.0 + math.exp(-gate)) * proj
        npt.assert_allclose(out.data[0], expect, rtol=1e-12)


class TestSchedule:
    def test_arithmetic_progression(self):
        cfg = NrnmConfig(k=8, s=1, win=4, m=4, heads=1)
        assert memory_schedule(20, cfg) == [7, 11, 15, 19]
        assert len(memory_schedule(20, cfg)) == (20 - 8) // 4 + 1

    def test_sequence_shorter_than_block(self):
        cfg = NrnmConfig(k=8, s=1, win=4, m=4, heads=1)
        assert memory_schedule(7, cfg) == []

    def test_each_memory_serves_following_window(self):
        cfg = NrnmConfig(k=8, s=1, win=8, m=4, heads=1)
        ends = memory_schedule(100, cfg)
        assert len(ends) == 12
        provider = {}
        for t in range(100):
            past = [e for e in ends if e < t]
            provider[t] = past[-1] if past else None
        for e, nxt in zip(ends, ends[1:]):
            served = [t for t, who in provider.items() if who == e]
            assert served == list(range(e + 1, nxt + 1))
        tail = [t for t, who in provider.items() if who == ends[-1]]
        assert tail == list(range(ends[-1] + 1, 100))

    def test_update_count_formula_random_triples(self):
        rng = np.random.default_rng(15)
        for _ in range(50):
            k = int(rng.integers(1, 16))
            win = int(rng.integers(1, 16))
            t_steps = int(rng.integers(k, 120))
            cfg = NrnmConfig(k=k, s=1, win=win, m=4, heads=1)
            assert len(memory_schedule(t_steps, cfg)) == (t_steps - k) // win + 1


class TestGradientsThroughMemory:
    def test_embedding_update_contribution_chain(self):
        cfg = NrnmConfig(k=3, s=1, m=4, heads=2)
        rng = np.random.default_rng(16)
        p = make_params(rng, cfg, 2)
        grid = [
            Tensor(rng.standard_normal((1, 4)), requires_grad=True) for _ in range(3)
        ]
        x_seq = rng.standard_normal((1, 3, 2))
        x_t = Tensor(rng.standard_normal((1, 2)))
        prev = MemoryState(
            M=Tensor(rng.standard_normal((1, 3, 4))), produced_at=-1, valid=True
        )

        def builder():
            C, x_flat = assemble_block(grid, x_seq, 2, cfg, p)
            m_embed, _ = memory_embedding(C, p, cfg)
            mem = update_memory(m_embed, prev, x_flat, p, cfg, t=2)
            contrib = memory_contribution(mem, x_t, p)
            return T.sum_all(T.tanh(contrib))

        params = list(p.named().items()) + [
            (f"h{i}", h) for i, h in enumerate(grid)
        ]
        report = check_gradients(builder, params)
        worst = max(report.values())
        assert worst < 1e-4, report
