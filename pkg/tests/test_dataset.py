from collections import Counter
from dataclasses import replace
from unittest import TestCase

import numpy as np

from idp3.dataset import (
    all_windows, batch_count, collect_demos, CollectionError, Dataset, DatasetError,
    DatasetStats, demo_seeds, from_bytes, load, sample_window, save, to_bytes,
    Trajectory, window_at,
)
from idp3.geom import Intrinsics
from idp3.perception import ObservationConfig
from idp3.sampling import SamplingConfig
from idp3.sim import (
    advance, Event, JitterConfig, observe, render_depth, reset, SceneConfig, SensorNoise,
)

from .base import logger_hush, TempDirTestCase


SCENE = SceneConfig(resolution=24)
JITTER = JitterConfig(0.3, 0.005, seed=2)
OBS_CFG = ObservationConfig(sampling=SamplingConfig(target_points=32))


def synthetic_dataset(lengths: list[int], seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    trajectories = [
        Trajectory(
            rng.uniform(0.3, 0.9, size=(length, 4, 4)),
            rng.normal(size=(length, 4)),
            rng.normal(size=(length, 4)),
            scene_seed=index,
            jitter=JitterConfig(),
            timestamp=float(index),
        )
        for index, length in enumerate(lengths)
    ]
    return Dataset.from_trajectories(trajectories, Intrinsics(2.0, 2.0, 2.0, 2.0, 4, 4))


class TrajectoryTest(TestCase):
    def test_validation(self) -> None:
        with self.assertRaisesRegex(DatasetError, 'empty'):
            Trajectory(np.zeros((0, 2, 2)), np.zeros((0, 4)), np.zeros((0, 4)), 0, JitterConfig())
        with self.assertRaisesRegex(DatasetError, 'counts differ'):
            Trajectory(np.zeros((3, 2, 2)), np.zeros((2, 4)), np.zeros((3, 4)), 0, JitterConfig())
        with self.assertRaisesRegex(DatasetError, 'finite'):
            actions = np.zeros((1, 4))
            actions[0, 0] = np.nan
            Trajectory(np.zeros((1, 2, 2)), np.zeros((1, 4)), actions, 0, JitterConfig())

    def test_observation_seeded_per_frame(self) -> None:
        dataset = synthetic_dataset([3])
        trajectory = dataset.trajectories[0]
        self.assertNotEqual(trajectory.sampling_seed(0), trajectory.sampling_seed(1))
        a = trajectory.observation(1, dataset.intrinsics, OBS_CFG)
        self.assertEqual(a, trajectory.observation(1, dataset.intrinsics, OBS_CFG))
        self.assertEqual(len(a.points), 32)


class DatasetTest(TestCase):
    def test_properties(self) -> None:
        dataset = synthetic_dataset([5, 7])
        self.assertEqual(dataset.frame_shape, (4, 4))
        self.assertEqual((dataset.proprio_dim, dataset.action_dim), (4, 4))
        self.assertEqual(dataset.frame_count, 12)
        self.assertIn('2 trajectories, 12 frames (length 5-7)', dataset.summary())
        self.assertEqual(batch_count(dataset, 5), 3)

    def test_mismatched_trajectories(self) -> None:
        a = synthetic_dataset([3]).trajectories[0]
        b = Trajectory(np.zeros((3, 2, 2)), np.zeros((3, 4)), np.zeros((3, 4)), 0, JitterConfig())
        with self.assertRaises(DatasetError):
            Dataset.from_trajectories([a, b], Intrinsics(2.0, 2.0, 2.0, 2.0, 4, 4))
        with self.assertRaises(DatasetError):
            Dataset([], Intrinsics(2.0, 2.0, 2.0, 2.0, 4, 4), DatasetStats.compute([a]))

    def test_check_horizon(self) -> None:
        dataset = synthetic_dataset([5, 20])
        dataset.check_horizon(2, 3)
        with self.assertRaisesRegex(DatasetError, 'shortest trajectory has 5 steps'):
            dataset.check_horizon(2, 4)

    def test_stats(self) -> None:
        dataset = synthetic_dataset([5, 7])
        actions = np.concatenate([t.actions for t in dataset.trajectories])
        np.testing.assert_array_equal(dataset.stats.action_min, actions.min(axis=0))
        np.testing.assert_array_equal(dataset.stats.action_max, actions.max(axis=0))

    def test_normalize_proprio(self) -> None:
        stats = DatasetStats(
            np.zeros(2), np.ones(2), np.array([1.0, 5.0]), np.array([2.0, 0.0]))
        np.testing.assert_array_equal(
            stats.normalize_proprio(np.array([3.0, 6.0])), [1.0, 1.0])


class FileFormatTest(TempDirTestCase):
    def test_round_trip(self) -> None:
        dataset = synthetic_dataset([4, 6])
        path = self.folder / 'demo.idp3data'
        with logger_hush():
            save(dataset, path)
            loaded = load(path)
        self.assertEqual(loaded.intrinsics, dataset.intrinsics)
        for a, b in zip(loaded.trajectories, dataset.trajectories):
            np.testing.assert_array_equal(a.depths, b.depths)
            np.testing.assert_array_equal(a.proprio, b.proprio)
            np.testing.assert_array_equal(a.actions, b.actions)
            self.assertEqual((a.scene_seed, a.jitter, a.timestamp),
                             (b.scene_seed, b.jitter, b.timestamp))
        self.assertEqual(to_bytes(loaded), path.read_bytes())

    def test_header(self) -> None:
        data = to_bytes(synthetic_dataset([2]))
        self.assertEqual(data[:8], b'IDP3DATA')

    def test_bad_magic(self) -> None:
        data = to_bytes(synthetic_dataset([2]))
        with self.assertRaisesRegex(DatasetError, 'not a dataset'):
            from_bytes(b'XXXXXXXX' + data[8:])

    def test_truncated(self) -> None:
        data = to_bytes(synthetic_dataset([2]))
        for cut in (4, 40, len(data) - 1):
            with self.subTest(cut=cut):
                with self.assertRaisesRegex(DatasetError, 'corrupt'):
                    from_bytes(data[:cut])

    def test_trailing_bytes(self) -> None:
        data = to_bytes(synthetic_dataset([2]))
        with self.assertRaisesRegex(DatasetError, 'trailing'):
            from_bytes(data + b'\0')


class WindowTest(TestCase):
    def test_padding(self) -> None:
        first = window_at(5, 0, 0, h_obs=2, h_pred=4)
        np.testing.assert_array_equal(first.obs_indices, [0, 0])
        np.testing.assert_array_equal(first.action_indices, [0, 1, 2, 3])
        last = window_at(5, 0, 4, h_obs=2, h_pred=4)
        np.testing.assert_array_equal(last.obs_indices, [3, 4])
        np.testing.assert_array_equal(last.action_indices, [4, 4, 4, 4])

    def test_out_of_range(self) -> None:
        with self.assertRaises(IndexError):
            window_at(5, 0, 5, 2, 4)

    def test_window_contents(self) -> None:
        dataset = synthetic_dataset([6])
        window = window_at(6, 0, 5, 2, 3)
        actions = window.actions(dataset)
        self.assertEqual(actions.shape, (3, 4))
        np.testing.assert_array_equal(actions[1], dataset.trajectories[0].actions[5])
        observations = window.observations(dataset, OBS_CFG)
        self.assertEqual(len(observations), 2)
        np.testing.assert_array_equal(
            observations[0].proprio, dataset.trajectories[0].proprio[4])

    def test_all_windows(self) -> None:
        dataset = synthetic_dataset([3, 2])
        windows = all_windows(dataset, 2, 4)
        self.assertEqual([(w.trajectory, w.start) for w in windows],
                         [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1)])

    def test_sampling_is_uniform(self) -> None:
        dataset = synthetic_dataset([3, 7])
        rng = np.random.default_rng(5)
        draws = [sample_window(dataset, rng, 2, 4) for _ in range(4000)]
        trajectories = Counter(w.trajectory for w in draws)
        self.assertLess(abs(trajectories[0] / 4000 - 0.5), 0.05)
        starts = np.bincount([w.start for w in draws if w.trajectory == 1], minlength=7)
        expected = starts.sum() / 7
        chi_square = float(np.sum((starts - expected) ** 2 / expected))
        # 99.9% quantile of chi-square with 6 degrees of freedom
        self.assertLess(chi_square, 22.46)


class CollectTest(TempDirTestCase):
    def collect(self, n_demos: int = 1, rounds: int = 1, seed: int = 0) -> Dataset:
        with logger_hush():
            return collect_demos(n_demos, rounds, JITTER, demo_seeds(seed, n_demos), SCENE)

    def test_replays_to_placement(self) -> None:
        dataset = self.collect(n_demos=2, rounds=2)
        self.assertEqual(len(dataset.trajectories), 2)
        for trajectory in dataset.trajectories:
            cfg = replace(SCENE, seed=trajectory.scene_seed, rounds=2)
            state, _ = reset(cfg)
            placements = 0
            for i, action in enumerate(trajectory.actions):
                np.testing.assert_array_equal(trajectory.proprio[i], state.proprio)
                np.testing.assert_array_equal(trajectory.depths[i], render_depth(state, cfg).depth)
                state, events = advance(state, action, cfg)
                placements += Event.SUCCESS_PLACE in events
            self.assertEqual(placements, 2)
            self.assertIn(Event.SUCCESS_PLACE, events)

    def test_stored_clouds_match_live_observations(self) -> None:
        dataset = self.collect()
        trajectory = dataset.trajectories[0]
        cfg = replace(SCENE, seed=trajectory.scene_seed, rounds=1)
        state, _ = reset(cfg)
        for i in range(3):
            live = observe(state, cfg, OBS_CFG)
            self.assertEqual(trajectory.observation(i, dataset.intrinsics, OBS_CFG), live)
            state, _ = advance(state, trajectory.actions[i], cfg)

    def test_reproducible_bytes(self) -> None:
        a = to_bytes(self.collect(seed=3))
        b = to_bytes(self.collect(seed=3))
        self.assertEqual(a, b)
        self.assertNotEqual(a, to_bytes(self.collect(seed=4)))

    def test_logical_timestamps(self) -> None:
        dataset = self.collect(n_demos=2)
        first, second = dataset.trajectories
        self.assertEqual(first.timestamp, 0.0)
        self.assertAlmostEqual(second.timestamp, len(first) * 0.1)

    def test_demo_jitter_seeds_differ(self) -> None:
        dataset = self.collect(n_demos=2)
        first, second = dataset.trajectories
        self.assertNotEqual(first.jitter.seed, second.jitter.seed)
        self.assertEqual(first.jitter.sigma, JITTER.sigma)

    def test_hopeless_scene(self) -> None:
        # The grasp never counts, so no round can finish
        scene = SceneConfig(resolution=16, lift_hold_steps=10_000, noise=SensorNoise.off())
        with logger_hush():
            with self.assertRaisesRegex(CollectionError, 'failed 6 times'):
                collect_demos(1, 1, JITTER, [0], scene)

    def test_arguments(self) -> None:
        with self.assertRaises(ValueError):
            collect_demos(2, 1, JITTER, [0], SCENE)
        with self.assertRaises(ValueError):
            collect_demos(0, 1, JITTER, [], SCENE)

    def test_demo_seeds(self) -> None:
        self.assertEqual(demo_seeds(0, 3), demo_seeds(0, 3))
        self.assertEqual(len(set(demo_seeds(0, 3))), 3)
        self.assertNotEqual(demo_seeds(0, 1), demo_seeds(1, 1))
