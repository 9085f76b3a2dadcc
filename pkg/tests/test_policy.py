from unittest import TestCase

import numpy as np

from idp3 import tensornet as tn
from idp3.dataset import DatasetStats
from idp3.encoders import EncoderVariant
from idp3.geom import DepthImage, Intrinsics
from idp3.perception import Observation, perceive
from idp3.policy import ExpertController, Policy, PolicyController
from idp3.sim import reset, ScriptedExpert, SceneConfig
from idp3.utils import derive_seed

from .base import TempDirTestCase, tiny_manifest


K = Intrinsics(4.0, 4.0, 4.0, 4.0, 8, 8)
STATS = DatasetStats(
    np.array([-0.5, -0.5, 0.0, 0.0]),
    np.array([0.5, 0.5, 0.2, 1.0]),
    np.zeros(4),
    np.ones(4),
)


def make_policy(**changes: object) -> Policy:
    return Policy(tiny_manifest(**changes), STATS, np.random.default_rng(0))


def observation(policy: Policy, seed: int = 0) -> Observation:
    rng = np.random.default_rng(seed)
    depth = DepthImage(8, 8, rng.uniform(0.3, 0.9, 64))
    return perceive(depth, rng.normal(size=4), K, policy.obs_cfg, seed)


class PolicyTest(TestCase):
    def test_sample_shape_and_range(self) -> None:
        policy = make_policy()
        history = [observation(policy, 0), observation(policy, 1)]
        chunk = policy.sample(history, seed=3)
        self.assertEqual(chunk.shape, (4, 4))
        self.assertTrue(np.all(chunk >= STATS.action_min - 1e-12))
        self.assertTrue(np.all(chunk <= STATS.action_max + 1e-12))

    def test_sample_seeded(self) -> None:
        policy = make_policy()
        history = [observation(policy, 0), observation(policy, 1)]
        np.testing.assert_array_equal(policy.sample(history, 5), policy.sample(history, 5))
        self.assertFalse(np.array_equal(policy.sample(history, 5), policy.sample(history, 6)))

    def test_history_length(self) -> None:
        policy = make_policy()
        with self.assertRaisesRegex(ValueError, 'expected 2 observations'):
            policy.sample([observation(policy)], seed=0)

    def test_condition_shape(self) -> None:
        policy = make_policy()
        inputs = np.stack([[observation(policy, i).points.features() for i in (0, 1)]] * 3)
        cond = policy.condition(inputs, np.zeros((3, 2, 4)))
        self.assertEqual(cond.shape, (3, 16))

    def test_image_features(self) -> None:
        policy = make_policy(variant='image_baseline')
        self.assertIs(policy.variant, EncoderVariant.IMAGE_BASELINE)
        self.assertEqual(policy.features(observation(policy)).shape, (24, 24))
        chunk = policy.sample([observation(policy, 0), observation(policy, 1)], seed=0)
        self.assertEqual(chunk.shape, (4, 4))

    def test_point_features(self) -> None:
        policy = make_policy()
        self.assertEqual(policy.features(observation(policy)).shape, (64, 3))


class PolicyCheckpointTest(TempDirTestCase):
    def test_round_trip(self) -> None:
        policy = make_policy()
        path = self.folder / 'policy.ckpt'
        policy.save(path)
        loaded = Policy.load(path)
        self.assertEqual(loaded.manifest, policy.manifest)
        np.testing.assert_array_equal(loaded.stats.action_max, STATS.action_max)
        history = [observation(policy, 0), observation(policy, 1)]
        np.testing.assert_array_equal(loaded.sample(history, 7), policy.sample(history, 7))

    def test_missing_stats(self) -> None:
        policy = make_policy()
        path = self.folder / 'bare.ckpt'
        tn.save_checkpoint(path, policy.state_dict(), policy.manifest.to_text())
        with self.assertRaisesRegex(ValueError, 'normalization stats'):
            Policy.load(path)

    def test_wrong_architecture(self) -> None:
        policy = make_policy()
        path = self.folder / 'wide.ckpt'
        arrays = make_policy(widths=(8, 32)).checkpoint_arrays()
        tn.save_checkpoint(path, arrays, policy.manifest.to_text())
        with self.assertRaises(tn.ShapeError):
            Policy.load(path)


class PolicyControllerTest(TestCase):
    def setUp(self) -> None:
        self.policy = make_policy()
        self.obs = [observation(self.policy, i) for i in range(5)]
        self.state, _ = reset(SceneConfig(resolution=8))

    def test_receding_horizon(self) -> None:
        controller = PolicyController(self.policy, seed=1, h_act=2)
        actions = [controller.act(self.state, obs) for obs in self.obs]
        self.assertEqual(controller.sampling_calls, 3)
        self.assertTrue(all(action.shape == (4,) for action in actions))

    def test_full_chunk(self) -> None:
        controller = PolicyController(self.policy, seed=1, h_act=4)
        for obs in self.obs:
            controller.act(self.state, obs)
        self.assertEqual(controller.sampling_calls, 2)

    def test_first_frame_fills_history(self) -> None:
        controller = PolicyController(self.policy, seed=1)
        first = controller.act(self.state, self.obs[0])
        expected = self.policy.sample([self.obs[0], self.obs[0]], derive_seed(1, 0))
        np.testing.assert_array_equal(first, expected[0])

    def test_reset(self) -> None:
        controller = PolicyController(self.policy, seed=1)
        first = controller.act(self.state, self.obs[0])
        controller.act(self.state, self.obs[1])
        controller.reset()
        self.assertEqual(controller.sampling_calls, 0)
        np.testing.assert_array_equal(controller.act(self.state, self.obs[0]), first)

    def test_h_act_range(self) -> None:
        for h_act in (0, 5):
            with self.subTest(h_act=h_act):
                with self.assertRaises(ValueError):
                    PolicyController(self.policy, seed=0, h_act=h_act)


class ExpertControllerTest(TestCase):
    def test_matches_expert(self) -> None:
        scene = SceneConfig(resolution=8)
        state, obs = reset(scene)
        controller = ExpertController(scene)
        np.testing.assert_array_equal(
            controller.act(state, obs), ScriptedExpert(scene)(state))
        self.assertEqual(controller.sampling_calls, 0)
