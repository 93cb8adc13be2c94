"""Decoder tests: query init, refinement stages, coupling, output heads."""

import numpy as np
import pytest

import modecast.tensor as T
from modecast import nn
from modecast.decoder import (ForecastHeads, ModeQueryRefiner, QueryCoupler,
                              StateQueryRefiner, TimeQueryInit,
                              TrajectoryDecoder)
from modecast.encoder import SceneContext
from modecast.gradcheck import finite_difference_check
from modecast.tensor import Tensor


def make_ctx(rng, batch=1, tokens=5, dim=8, mask=None):
    data = rng.uniform(-1, 1, (batch, tokens, dim))
    if mask is None:
        mask = np.ones((batch, tokens), dtype=bool)
    provenance = np.zeros((batch, tokens), dtype=np.int8)
    return SceneContext(tokens=Tensor(data), token_mask=mask,
                        provenance=provenance)


class TestTimeQueryInit:
    def test_single_step_uses_t_equal_one(self, rng):
        init = TimeQueryInit(8, rng)
        q = init(1)
        expected = init.mlp(Tensor(np.array([[1.0]])))
        np.testing.assert_array_equal(q.data, expected.data)

    def test_deterministic(self, rng):
        init = TimeQueryInit(8, rng)
        np.testing.assert_array_equal(init(6).data, init(6).data)

    def test_distinct_timestamps_distinct_queries(self, rng):
        init = TimeQueryInit(8, rng)
        q = init(12).data
        dists = np.linalg.norm(q[:, None] - q[None, :], axis=-1)
        off_diag = dists[~np.eye(12, dtype=bool)]
        assert off_diag.min() > 0

    def test_zero_steps_rejected(self, rng):
        init = TimeQueryInit(8, rng)
        with pytest.raises(ValueError):
            init(0)


class TestStateQueryRefiner:
    def test_zero_depth_is_identity(self, rng):
        ref = StateQueryRefiner(8, rng, attn_depth=0, scan_depth=0)
        q = Tensor(rng.uniform(-1, 1, (1, 4, 8)))
        out = ref(q, make_ctx(rng))
        np.testing.assert_array_equal(out.data, q.data)

    def test_single_token_context_equals_duplicated_token(self, rng):
        ref = StateQueryRefiner(8, rng, attn_depth=2, scan_depth=1,
                                num_heads=2, state_dim=4)
        q = Tensor(rng.uniform(-1, 1, (1, 4, 8)))
        tok = rng.uniform(-1, 1, (1, 1, 8))
        ctx1 = SceneContext(Tensor(tok), np.ones((1, 1), dtype=bool),
                            np.zeros((1, 1), dtype=np.int8))
        ctx2 = SceneContext(Tensor(np.repeat(tok, 3, axis=1)),
                            np.ones((1, 3), dtype=bool),
                            np.zeros((1, 3), dtype=np.int8))
        np.testing.assert_allclose(ref(q, ctx1).data, ref(q, ctx2).data,
                                   atol=1e-12)

    def test_empty_context_well_defined(self, rng):
        ref = StateQueryRefiner(8, rng, attn_depth=2, scan_depth=1,
                                num_heads=2, state_dim=4)
        q = Tensor(rng.uniform(-1, 1, (1, 4, 8)))
        ctx = SceneContext(Tensor(np.zeros((1, 0, 8))),
                           np.zeros((1, 0), dtype=bool),
                           np.zeros((1, 0), dtype=np.int8))
        out = ref(q, ctx)
        assert out.shape == (1, 4, 8)
        assert np.isfinite(out.data).all()

    def test_last_step_influences_first_output(self, rng):
        ref = StateQueryRefiner(8, rng, attn_depth=1, scan_depth=1,
                                num_heads=2, state_dim=4)
        ctx = make_ctx(rng)
        q1 = rng.uniform(-1, 1, (1, 5, 8))
        q2 = q1.copy()
        q2[0, -1, 3] += 1.0
        out1 = ref(Tensor(q1), ctx).data
        out2 = ref(Tensor(q2), ctx).data
        assert np.abs(out1[0, 0] - out2[0, 0]).max() > 0


class TestModeQueryRefiner:
    def test_single_mode_runs(self, rng):
        ref = ModeQueryRefiner(8, rng, depth=2, num_heads=2)
        out = ref(Tensor(rng.uniform(-1, 1, (1, 1, 8))), make_ctx(rng))
        assert out.shape == (1, 1, 8)
        assert np.isfinite(out.data).all()

    def test_identical_queries_get_identical_outputs(self, rng):
        ref = ModeQueryRefiner(8, rng, depth=2, num_heads=2)
        row = rng.uniform(-1, 1, (1, 1, 8))
        q = Tensor(np.repeat(row, 3, axis=1))
        out = ref(q, make_ctx(rng)).data
        np.testing.assert_allclose(out[0, 0], out[0, 1], atol=1e-12)
        np.testing.assert_allclose(out[0, 0], out[0, 2], atol=1e-12)

    def test_permutation_equivariance(self, rng):
        ref = ModeQueryRefiner(8, rng, depth=3, num_heads=2)
        ctx = make_ctx(rng)
        q = rng.uniform(-1, 1, (1, 4, 8))
        perm = rng.permutation(4)
        out1 = ref(Tensor(q), ctx).data
        out2 = ref(Tensor(q[:, perm]), ctx).data
        assert np.abs(out1[:, perm] - out2).max() < 1e-10


class TestQueryCoupler:
    def test_zero_depth_is_broadcast_sum(self, rng):
        coupler = QueryCoupler(8, rng, attn_depth=0, scan_depth=0)
        q_m = rng.uniform(-1, 1, (1, 3, 8))
        q_s = rng.uniform(-1, 1, (1, 5, 8))
        out = coupler(Tensor(q_m), Tensor(q_s), make_ctx(rng)).data
        np.testing.assert_array_equal(out, q_m[:, :, None] + q_s[:, None])

    def test_degenerate_single_mode_single_step(self, rng):
        coupler = QueryCoupler(8, rng, attn_depth=3, scan_depth=2,
                               num_heads=2, state_dim=4)
        out = coupler(Tensor(rng.uniform(-1, 1, (1, 1, 8))),
                      Tensor(rng.uniform(-1, 1, (1, 1, 8))), make_ctx(rng))
        assert out.shape == (1, 1, 1, 8)
        assert np.isfinite(out.data).all()

    def test_mode_permutation_equivariance(self, rng):
        coupler = QueryCoupler(8, rng, attn_depth=2, scan_depth=1,
                               num_heads=2, state_dim=4)
        ctx = make_ctx(rng)
        q_m = rng.uniform(-1, 1, (1, 4, 8))
        q_s = rng.uniform(-1, 1, (1, 3, 8))
        perm = rng.permutation(4)
        out1 = coupler(Tensor(q_m), Tensor(q_s), ctx).data
        out2 = coupler(Tensor(q_m[:, perm]), Tensor(q_s), ctx).data
        assert np.abs(out1[:, perm] - out2).max() < 1e-10

    def test_gradcheck(self, rng):
        coupler = QueryCoupler(8, rng, attn_depth=1, scan_depth=1,
                               num_heads=2, state_dim=3)
        ctx = make_ctx(rng, tokens=4)
        q_m = Tensor(rng.uniform(-1, 1, (1, 2, 8)), requires_grad=True)
        q_s = Tensor(rng.uniform(-1, 1, (1, 4, 8)), requires_grad=True)
        params = ([("q_m", q_m), ("q_s", q_s)]
                  + list(coupler.named_parameters()))
        report = finite_difference_check(
            lambda: (coupler(q_m, q_s, ctx) ** 2).mean(), params,
            tolerance=1e-5, max_elements_per_param=4,
            rng=np.random.default_rng(3))
        assert report.passed, "\n".join(report.lines())


class TestForecastHeads:
    def test_zero_heads_give_origin_and_uniform(self, rng):
        heads = ForecastHeads(8, 4, 6, 3, rng)
        for mlp in (heads.traj, heads.score, heads.state_traj,
                    heads.mode_traj, heads.mode_score):
            for layer in mlp.layers:
                layer.w.data[:] = 0.0
                layer.b.data[:] = 0.0
        fc = heads(Tensor(rng.uniform(-1, 1, (2, 4, 3, 8))),
                   Tensor(rng.uniform(-1, 1, (2, 3, 8))),
                   Tensor(rng.uniform(-1, 1, (2, 4, 8))))
        np.testing.assert_array_equal(fc.trajectories.data, 0.0)
        np.testing.assert_allclose(fc.probabilities.data, 0.25, atol=1e-15)
        np.testing.assert_array_equal(fc.aux_state_traj.data, 0.0)
        np.testing.assert_array_equal(fc.aux_mode_trajs.data, 0.0)
        np.testing.assert_allclose(fc.aux_mode_probs.data, 0.25, atol=1e-15)

    def test_probabilities_sum_to_one(self, rng):
        heads = ForecastHeads(8, 5, 6, 6, rng)
        fc = heads(Tensor(rng.uniform(-2, 2, (3, 5, 6, 8))),
                   Tensor(rng.uniform(-2, 2, (3, 6, 8))),
                   Tensor(rng.uniform(-2, 2, (3, 5, 8))))
        np.testing.assert_allclose(fc.probabilities.data.sum(-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(fc.aux_mode_probs.data.sum(-1), 1.0, atol=1e-6)

    def test_waypoint_grid_indexing(self, rng):
        # r = 2: grid step t (0-based) owns waypoints 2t and 2t+1.
        heads = ForecastHeads(8, 2, 6, 3, rng)
        q_h = rng.uniform(-1, 1, (1, 2, 3, 8))
        base = heads(Tensor(q_h), Tensor(np.zeros((1, 3, 8))),
                     Tensor(np.zeros((1, 2, 8)))).trajectories.data
        q_h2 = q_h.copy()
        q_h2[0, 1, 1] += 0.5
        bumped = heads(Tensor(q_h2), Tensor(np.zeros((1, 3, 8))),
                       Tensor(np.zeros((1, 2, 8)))).trajectories.data
        diff = np.abs(base - bumped).max(axis=-1)   # [1, K, T_f]
        np.testing.assert_array_equal(diff[0, 0], 0.0)
        np.testing.assert_array_equal(diff[0, 1, [0, 1, 4, 5]], 0.0)
        assert (diff[0, 1, [2, 3]] > 0).all()

    def test_indivisible_steps_rejected(self, rng):
        with pytest.raises(ValueError, match="divisible"):
            ForecastHeads(8, 2, 7, 3, rng)


class TestTrajectoryDecoder:
    def build(self, rng, modes=3, t_f=6, t_s=None, dim=8):
        return TrajectoryDecoder(
            dim, modes, t_f, rng, query_steps=t_s, num_heads=2,
            state_dim=4, state_attn_depth=1, state_scan_depth=1,
            mode_depth=1, grid_attn_depth=1, grid_scan_depth=1)

    def test_output_shapes(self, rng):
        for t_s, t_f in [(6, 6), (3, 6), (1, 4)]:
            dec = self.build(rng, modes=3, t_f=t_f, t_s=t_s)
            fc = dec(make_ctx(rng, batch=2))
            assert fc.trajectories.shape == (2, 3, t_f, 2)
            assert fc.probabilities.shape == (2, 3)
            assert fc.aux_state_traj.shape == (2, t_f, 2)
            assert fc.aux_mode_trajs.shape == (2, 3, t_f, 2)

    def test_indivisible_rejected(self, rng):
        with pytest.raises(ValueError, match="divisible"):
            self.build(rng, t_f=7, t_s=3)

    def test_probability_simplex(self, rng):
        dec = self.build(rng)
        fc = dec(make_ctx(rng, batch=3, tokens=6))
        p = fc.probabilities.data
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)

    def test_mode_permutation_equivariance_end_to_end(self, rng):
        dec = self.build(rng, modes=4)
        ctx = make_ctx(rng, tokens=6)
        fc1 = dec(ctx)
        perm = np.array([2, 0, 3, 1])
        dec.mode_queries.data = dec.mode_queries.data[perm]
        fc2 = dec(ctx)
        assert np.abs(fc1.trajectories.data[:, perm] -
                      fc2.trajectories.data).max() < 1e-10
        assert np.abs(fc1.probabilities.data[:, perm] -
                      fc2.probabilities.data).max() < 1e-10

    def test_deterministic_without_dropout(self, rng):
        dec = self.build(rng)
        ctx = make_ctx(rng)
        np.testing.assert_array_equal(dec(ctx).trajectories.data,
                                      dec(ctx).trajectories.data)

    def test_empty_context(self, rng):
        dec = self.build(rng)
        ctx = SceneContext(Tensor(np.zeros((1, 0, 8))),
                           np.zeros((1, 0), dtype=bool),
                           np.zeros((1, 0), dtype=np.int8))
        fc = dec(ctx)
        assert np.isfinite(fc.trajectories.data).all()
        np.testing.assert_allclose(fc.probabilities.data.sum(-1), 1.0,
                                   atol=1e-6)

    def test_dropout_only_active_with_rng(self, rng):
        dec = TrajectoryDecoder(8, 2, 4, rng, num_heads=2, state_dim=4,
                                dropout_rate=0.5, state_attn_depth=1,
                                state_scan_depth=1, mode_depth=1,
                                grid_attn_depth=1, grid_scan_depth=1)
        ctx = make_ctx(rng)
        a = dec(ctx).trajectories.data
        b = dec(ctx).trajectories.data
        np.testing.assert_array_equal(a, b)
        c = dec(ctx, rng=np.random.default_rng(0)).trajectories.data
        assert np.abs(a - c).max() > 0

    def test_gradcheck(self, rng):
        dec = self.build(rng, modes=2, t_f=4, t_s=2)
        ctx = make_ctx(rng, tokens=4)
        ctx.tokens.requires_grad = True

        def f():
            fc = dec(ctx)
            return (fc.trajectories ** 2).mean() + (fc.logits ** 2).mean()

        params = ([("ctx", ctx.tokens)] + list(dec.named_parameters()))
        report = finite_difference_check(
            f, params, tolerance=1e-4, max_elements_per_param=3,
            rng=np.random.default_rng(5))
        assert report.passed, "\n".join(report.lines())
