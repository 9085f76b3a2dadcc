import json
import math
from unittest import TestCase

import numpy as np

from idp3.dataset import DatasetStats
from idp3.evaluation import (
    episode_tasks, evaluate, EvalReport, expert_report, SceneVariation, ViewPerturbation,
)
from idp3.manifest import ManifestError, RunManifest
from idp3.policy import Policy

from .base import logger_hush, TempDirTestCase, tiny_manifest


# Targets far from the table and a gripper that never closes
IDLE_STATS = DatasetStats(
    np.array([0.10, 0.40, 1.10, 0.0]),
    np.array([0.15, 0.50, 1.20, 0.0]),
    np.zeros(4),
    np.ones(4),
)


def idle_policy() -> Policy:
    return Policy(tiny_manifest(), IDLE_STATS, np.random.default_rng(0))


class ExpertEvaluationTest(TestCase):
    manifest: RunManifest
    report: EvalReport

    @classmethod
    def setUpClass(cls) -> None:
        cls.manifest = tiny_manifest(eval_rounds=2)
        with logger_hush():
            cls.report = expert_report(cls.manifest, n_episodes=2, steps_per_episode=150)

    def test_expert_succeeds_every_round(self) -> None:
        self.assertEqual(self.report.episode_count, 2)
        self.assertEqual(self.report.attempts, 4)
        self.assertEqual(self.report.successes, 4)
        self.assertEqual(self.report.placements, 4)
        self.assertEqual(self.report.success_rate, 1.0)
        self.assertEqual(str(self.report), '4/4')

    def test_stops_at_round_cap(self) -> None:
        for episode in self.report.episodes:
            self.assertLess(episode.steps, 150)
            self.assertEqual(episode.sampling_calls, 0)

    def test_logs_match_counts(self) -> None:
        for episode in self.report.episodes:
            self.assertEqual(len(episode.log.records), episode.steps)

    def test_worker_count_irrelevant(self) -> None:
        with logger_hush():
            parallel = evaluate(None, 2, 150, manifest=self.manifest, workers=2)
        self.assertEqual(parallel.episodes, self.report.episodes)

    def test_zero_yaw_is_unperturbed(self) -> None:
        with logger_hush():
            report = evaluate(
                None, 2, 150, ViewPerturbation(yaw_deg=0.0, shift_m=0.0), manifest=self.manifest)
        self.assertEqual(report.episodes, self.report.episodes)


class PolicyEvaluationTest(TempDirTestCase):
    def test_idle_policy_never_succeeds(self) -> None:
        with logger_hush():
            report = evaluate(idle_policy(), n_episodes=2, steps_per_episode=7)
        self.assertEqual((report.successes, report.attempts), (0, 0))
        self.assertEqual(report.success_rate, 0.0)

    def test_sampling_calls(self) -> None:
        policy = idle_policy()
        with logger_hush():
            report = evaluate(policy, n_episodes=2, steps_per_episode=7)
        per_episode = math.ceil(7 / policy.manifest.h_act)
        self.assertEqual([e.sampling_calls for e in report.episodes], [per_episode] * 2)
        self.assertEqual(report.sampling_calls, 2 * per_episode)
        self.assertTrue(all(e.steps == 7 for e in report.episodes))

    def test_checkpoint_path(self) -> None:
        policy = idle_policy()
        path = self.folder / 'idle.ckpt'
        policy.save(path)
        with logger_hush():
            a = evaluate(path, 1, 4)
            b = evaluate(policy, 1, 4)
        self.assertEqual(a.episodes, b.episodes)

    def test_manifest_mismatch(self) -> None:
        with self.assertRaises(ManifestError):
            evaluate(idle_policy(), 1, 4, manifest=tiny_manifest(epochs=5))

    def test_arguments(self) -> None:
        with self.assertRaises(ValueError):
            evaluate(None, 1, 4)
        with self.assertRaises(ValueError):
            evaluate(idle_policy(), 0, 4)


class EpisodeTasksTest(TestCase):
    def test_seeded_scenes(self) -> None:
        manifest = tiny_manifest()
        tasks = episode_tasks(manifest, 3, 10)
        self.assertEqual([t.index for t in tasks], [0, 1, 2])
        self.assertEqual(len({t.scene.seed for t in tasks}), 3)
        self.assertEqual(len({t.sampling_seed for t in tasks}), 3)
        self.assertEqual([t.scene.seed for t in episode_tasks(manifest, 3, 10)],
                         [t.scene.seed for t in tasks])
        self.assertTrue(all(t.scene.rounds == manifest.eval_rounds for t in tasks))

    def test_eval_seed_changes_scenes(self) -> None:
        a = episode_tasks(tiny_manifest(), 1, 10)[0]
        b = episode_tasks(tiny_manifest(eval_seed=7), 1, 10)[0]
        self.assertNotEqual(a.scene.seed, b.scene.seed)

    def test_view_perturbation(self) -> None:
        plain = episode_tasks(tiny_manifest(), 1, 10)[0].scene
        turned = episode_tasks(tiny_manifest(), 1, 10, ViewPerturbation(yaw_deg=15.0))[0].scene
        self.assertFalse(np.allclose(plain.camera_pose.rotation, turned.camera_pose.rotation))
        shifted = episode_tasks(tiny_manifest(), 1, 10, ViewPerturbation(shift_m=0.1))[0].scene
        np.testing.assert_allclose(
            shifted.camera_pose.translation - plain.camera_pose.translation, [0.0, 0.1, 0.0])
        self.assertTrue(ViewPerturbation().identity)

    def test_scene_variation(self) -> None:
        variation = SceneVariation(table_height=0.8, distractors=2)
        scene = episode_tasks(tiny_manifest(), 1, 10, variation=variation)[0].scene
        self.assertEqual((scene.table_height, scene.distractors), (0.8, 2))
        self.assertEqual(scene.object_size, tiny_manifest().scene(0).object_size)


class EvalReportTest(TempDirTestCase):
    report: EvalReport

    @classmethod
    def setUpClass(cls) -> None:
        with logger_hush():
            cls.report = evaluate(idle_policy(), n_episodes=3, steps_per_episode=3)

    def test_empty(self) -> None:
        self.assertEqual(EvalReport().success_rate, 0.0)
        self.assertEqual(str(EvalReport()), '0/0')

    def test_csv_row(self) -> None:
        manifest = tiny_manifest()
        row = self.report.csv_row(manifest)
        self.assertEqual(
            row, [manifest.content_hash(), 'conv_pyramid_idp3', '64', '4', '0', '0', '3'])

    def test_json(self) -> None:
        document = json.loads(self.report.to_json())
        self.assertEqual(document['episodes'], 3)
        self.assertEqual(document['successes'], 0)
        self.assertEqual(len(document['episode_logs']), 3)
        self.assertEqual(len(document['episode_logs'][0]['events']), 3)

    def test_episode_logs(self) -> None:
        self.report.write_episode_logs(self.folder / 'logs')
        names = sorted(path.name for path in (self.folder / 'logs').iterdir())
        self.assertEqual(names, ['episode-0000.jsonl', 'episode-0001.jsonl', 'episode-0002.jsonl'])
        lines = (self.folder / 'logs' / 'episode-0000.jsonl').read_text().splitlines()
        self.assertEqual(json.loads(lines[0])['step'], 1)
