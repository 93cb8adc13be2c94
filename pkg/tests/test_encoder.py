"""Scene normalization and encoding tests."""

import numpy as np
import pytest

import modecast.tensor as T
from modecast import encoder, nn
from modecast.encoder import (AgentEncoder, PolylineEncoder, SceneEncoder,
                              SceneInput, WorldScene, focal_to_world,
                              last_valid_index, normalize_scene)
from modecast.gradcheck import finite_difference_check
from modecast.tensor import Tensor


def make_world(rng, n_poly=3, seg_len=4, n_agents=2, t_h=5, focal=0):
    pts = rng.uniform(-50, 50, (n_poly, seg_len, 4))
    types = rng.integers(0, len(encoder.MAP_TYPES), n_poly)
    map_mask = np.ones((n_poly, seg_len), dtype=bool)
    agents = np.zeros((n_agents, t_h, 5))
    agents[..., 0:2] = rng.uniform(-30, 30, (n_agents, t_h, 2))
    agents[..., 2] = rng.uniform(-np.pi, np.pi, (n_agents, t_h))
    agents[..., 3:5] = rng.uniform(-10, 10, (n_agents, t_h, 2))
    agent_mask = np.ones((n_agents, t_h), dtype=bool)
    return WorldScene(map_segments=pts, map_types=types, map_mask=map_mask,
                      agents=agents, agent_mask=agent_mask, focal_index=focal)


class TestNormalizeScene:
    def test_identity_when_focal_at_origin_heading_x(self, rng):
        world = make_world(rng)
        world.agents[0, -1, :3] = 0.0
        scene = normalize_scene(world)
        np.testing.assert_allclose(scene.map[..., 0:2], world.map_segments[..., 0:2],
                                   atol=1e-12)
        np.testing.assert_allclose(scene.map[..., 2:4], world.map_segments[..., 2:4],
                                   atol=1e-12)
        np.testing.assert_allclose(scene.agents[..., 0:2], world.agents[..., 0:2],
                                   atol=1e-12)

    def test_focal_pose_maps_to_origin_heading_zero(self, rng):
        world = make_world(rng)
        world.agents[0, -1, 0:3] = [10.0, 0.0, np.pi / 2]
        scene = normalize_scene(world)
        f = scene.focal_index
        np.testing.assert_allclose(scene.agents[f, -1, 0:2], 0.0, atol=1e-12)
        # features carry cos/sin of the normalized heading
        np.testing.assert_allclose(scene.agents[f, -1, 2], 1.0, atol=1e-12)
        np.testing.assert_allclose(scene.agents[f, -1, 3], 0.0, atol=1e-12)

    def test_radius_filter_drops_far_polylines(self, rng):
        world = make_world(rng, n_poly=2)
        world.map_segments[0, :, :] = 200.0   # all endpoints ~283 m out
        world.map_segments[1] = np.array([[100, 0, 101, 0]] * 4)
        world.agents[0, -1, :3] = 0.0
        scene = normalize_scene(world, radius_m=150.0)
        assert scene.map.shape[0] == 1
        np.testing.assert_allclose(scene.map[0, 0, 0:2], [100, 0], atol=1e-9)

    def test_radius_filter_drops_far_agents_keeps_focal(self, rng):
        world = make_world(rng, n_agents=3)
        world.agents[0, -1, :3] = 0.0
        world.agents[2, :, 0:2] = 500.0
        scene = normalize_scene(world)
        assert scene.agents.shape[0] == 2
        assert scene.focal_index == 0

    def test_missing_focal_observation_rejected(self, rng):
        world = make_world(rng)
        world.agent_mask[0, -1] = False
        with pytest.raises(ValueError, match="focal"):
            normalize_scene(world)

    def test_focal_index_remapped_after_filtering(self, rng):
        world = make_world(rng, n_agents=3, focal=2)
        world.agents[2, -1, :3] = 0.0
        world.agents[0, :, 0:2] = 999.0
        scene = normalize_scene(world)
        assert scene.agents.shape[0] == 2
        assert scene.focal_index == 1
        np.testing.assert_allclose(scene.agents[1, -1, 0:2], 0.0, atol=1e-12)

    def test_world_round_trip(self, rng):
        world = make_world(rng)
        origin = world.agents[0, -1, :2].copy()
        theta = float(world.agents[0, -1, 2])
        scene = normalize_scene(world)
        recovered = focal_to_world(scene.agents[..., 0:2], origin, theta)
        # compare only valid in-radius rows (all rows here)
        np.testing.assert_allclose(recovered, world.agents[..., 0:2], atol=1e-9)

    def test_masked_rows_zeroed(self, rng):
        world = make_world(rng)
        world.agents[0, -1, :3] = 0.0
        world.map_mask[0, 1] = False
        world.agent_mask[1, 0] = False
        scene = normalize_scene(world)
        np.testing.assert_array_equal(scene.map[0, 1], 0.0)
        np.testing.assert_array_equal(scene.agents[1, 0], 0.0)

    def test_velocity_rotated_with_frame(self, rng):
        world = make_world(rng, n_agents=1)
        world.agents[0, -1] = [0.0, 0.0, np.pi / 2, 0.0, 3.0]
        scene = normalize_scene(world)
        # velocity (0, 3) in world, frame heading +y -> velocity +x
        np.testing.assert_allclose(scene.agents[0, -1, 4:6], [3.0, 0.0],
                                   atol=1e-12)


class TestPolylineEncoder:
    def test_single_point_pool_is_point_feature(self, rng):
        enc = PolylineEncoder(8, rng)
        feat = rng.uniform(-1, 1, (1, 1, encoder.MAP_FEATURES))
        mask = np.ones((1, 1), dtype=bool)
        out, valid = enc(feat, mask)
        expected = enc.point_mlp(Tensor(feat[0])).data[0] + enc.tag.data
        np.testing.assert_allclose(out.data[0], expected, atol=1e-12)
        assert valid.tolist() == [True]

    def test_duplicated_point_unchanged(self, rng):
        enc = PolylineEncoder(8, rng)
        feat = rng.uniform(-1, 1, (1, 3, encoder.MAP_FEATURES))
        out1, _ = enc(feat, np.ones((1, 3), dtype=bool))
        dup = np.concatenate([feat, feat[:, :1]], axis=1)
        out2, _ = enc(dup, np.ones((1, 4), dtype=bool))
        np.testing.assert_array_equal(out1.data, out2.data)

    def test_point_permutation_invariance(self, rng):
        enc = PolylineEncoder(8, rng)
        feat = rng.uniform(-1, 1, (2, 5, encoder.MAP_FEATURES))
        out1, _ = enc(feat, np.ones((2, 5), dtype=bool))
        perm = rng.permutation(5)
        out2, _ = enc(feat[:, perm], np.ones((2, 5), dtype=bool))
        assert np.abs(out1.data - out2.data).max() < 1e-12

    def test_fully_masked_polyline_zeroed(self, rng):
        enc = PolylineEncoder(8, rng)
        feat = rng.uniform(-1, 1, (2, 3, encoder.MAP_FEATURES))
        mask = np.ones((2, 3), dtype=bool)
        mask[1] = False
        out, valid = enc(feat, mask)
        np.testing.assert_array_equal(out.data[1], 0.0)
        assert valid.tolist() == [True, False]

    def test_masked_point_ignored(self, rng):
        enc = PolylineEncoder(8, rng)
        feat = rng.uniform(-1, 1, (1, 4, encoder.MAP_FEATURES))
        mask = np.array([[True, True, False, True]])
        out1, _ = enc(feat, mask)
        feat2 = feat.copy()
        feat2[0, 2] = 99.0
        out2, _ = enc(feat2, mask)
        np.testing.assert_array_equal(out1.data, out2.data)


class TestAgentEncoder:
    def test_single_step_history(self, rng):
        enc = AgentEncoder(8, rng, depth=2, state_dim=4)
        agents = rng.uniform(-1, 1, (2, 1, encoder.AGENT_FEATURES))
        mask = np.ones((2, 1), dtype=bool)
        out, valid = enc(agents, mask)
        assert out.shape == (2, 8)
        assert valid.all()

    def test_leading_padding_invariance(self, rng):
        enc = AgentEncoder(8, rng, depth=2, state_dim=4)
        hist = rng.uniform(-1, 1, (1, 5, encoder.AGENT_FEATURES))
        out1, _ = enc(hist, np.ones((1, 5), dtype=bool))
        padded = np.concatenate(
            [np.zeros((1, 3, encoder.AGENT_FEATURES)), hist], axis=1)
        mask = np.array([[False] * 3 + [True] * 5])
        out2, _ = enc(padded, mask)
        np.testing.assert_array_equal(out1.data, out2.data)

    def test_feature_reads_last_valid_step(self, rng):
        enc = AgentEncoder(8, rng, depth=1, state_dim=4)
        hist = rng.uniform(-1, 1, (1, 6, encoder.AGENT_FEATURES))
        mask = np.array([[True] * 4 + [False] * 2])
        out1, _ = enc(hist, mask)
        hist2 = hist.copy()
        hist2[0, 5] = 7.0   # masked trailing step
        out2, _ = enc(hist2, mask)
        np.testing.assert_array_equal(out1.data, out2.data)

    def test_zero_valid_agent_masked(self, rng):
        enc = AgentEncoder(8, rng, depth=1, state_dim=4)
        agents = rng.uniform(-1, 1, (2, 4, encoder.AGENT_FEATURES))
        mask = np.ones((2, 4), dtype=bool)
        mask[1] = False
        out, valid = enc(agents, mask)
        np.testing.assert_array_equal(out.data[1], 0.0)
        assert valid.tolist() == [True, False]

    def test_last_valid_index(self):
        mask = np.array([[True, True, False], [False, True, True],
                         [False, False, False]])
        np.testing.assert_array_equal(last_valid_index(mask), [1, 2, 0])


class TestSceneEncoder:
    def build(self, rng, fusion_depth=2):
        return SceneEncoder(8, rng, fusion_depth=fusion_depth, agent_depth=1,
                            num_heads=2, state_dim=4)

    def scene_arrays(self, rng, batch=2, n_m=3, seg=4, n_a=2, t_h=5):
        map_feat = rng.uniform(-1, 1, (batch, n_m, seg, encoder.MAP_FEATURES))
        map_mask = np.ones((batch, n_m, seg), dtype=bool)
        agents = rng.uniform(-1, 1, (batch, n_a, t_h, encoder.AGENT_FEATURES))
        agent_mask = np.ones((batch, n_a, t_h), dtype=bool)
        return map_feat, map_mask, agents, agent_mask

    def test_zero_depth_fusion_is_exact_concat(self, rng):
        enc = self.build(rng, fusion_depth=0)
        m, mm, a, am = self.scene_arrays(rng)
        f_m, v_m = enc.polylines(m, mm)
        f_a, v_a = enc.agents(a, am)
        ctx = enc.fuse(f_a, f_m, v_a, v_m)
        np.testing.assert_array_equal(ctx.tokens.data[:, :2], f_a.data)
        np.testing.assert_array_equal(ctx.tokens.data[:, 2:], f_m.data)
        np.testing.assert_array_equal(ctx.provenance[0], [0, 0, 1, 1, 1])

    def test_map_token_permutation_equivariance(self, rng):
        enc = self.build(rng)
        m, mm, a, am = self.scene_arrays(rng, batch=1, n_m=4)
        ctx1 = enc(m, mm, a, am)
        perm = rng.permutation(4)
        ctx2 = enc(m[:, perm], mm[:, perm], a, am)
        agents_part1, map_part1 = ctx1.tokens.data[:, :2], ctx1.tokens.data[:, 2:]
        agents_part2, map_part2 = ctx2.tokens.data[:, :2], ctx2.tokens.data[:, 2:]
        assert np.abs(agents_part1 - agents_part2).max() < 1e-10
        assert np.abs(map_part1[:, perm] - map_part2).max() < 1e-10

    def test_masked_token_cannot_influence_valid_tokens(self, rng):
        enc = self.build(rng)
        m, mm, a, am = self.scene_arrays(rng)
        mm[0, 1] = False     # polyline 1 of scene 0 fully masked
        ctx1 = enc(m, mm, a, am)
        m2 = m.copy()
        m2[0, 1] = 42.0
        ctx2 = enc(m2, mm, a, am)
        keep = ctx1.token_mask[0]
        np.testing.assert_array_equal(ctx1.tokens.data[0][keep],
                                      ctx2.tokens.data[0][keep])

    def test_all_map_tokens_masked_still_runs(self, rng):
        enc = self.build(rng)
        m, mm, a, am = self.scene_arrays(rng, batch=1)
        mm[:] = False
        ctx = enc(m, mm, a, am)
        assert np.isfinite(ctx.tokens.data).all()
        assert ctx.token_mask[0].tolist() == [True, True, False, False, False]

    def test_empty_map_supported(self, rng):
        enc = self.build(rng)
        m = np.zeros((1, 0, 4, encoder.MAP_FEATURES))
        mm = np.zeros((1, 0, 4), dtype=bool)
        _, _, a, am = self.scene_arrays(rng, batch=1)
        ctx = enc(m, mm, a, am)
        assert ctx.tokens.shape == (1, 2, 8)

    def test_gradcheck(self, rng):
        enc = SceneEncoder(4, rng, fusion_depth=1, agent_depth=1, num_heads=2,
                           state_dim=3)
        m, mm, a, am = self.scene_arrays(rng, batch=1, n_m=2, seg=3, n_a=2, t_h=4)
        mm[0, 1, 2] = False
        am[0, 1, 0] = False

        def f():
            return (enc(m, mm, a, am).tokens ** 2).mean()

        report = finite_difference_check(
            f, list(enc.named_parameters()), tolerance=1e-4,
            max_elements_per_param=4, rng=np.random.default_rng(0))
        assert report.passed, "\n".join(report.lines())
