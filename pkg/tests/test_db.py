from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import mock, TestCase

from sqlalchemy import inspect
from sqlalchemy.engine.base import Engine as SQLAlchemyEngine
from sqlalchemy.exc import IntegrityError
from sqlalchemy.orm.session import Session as SQLAlchemySession

from idp3.db import connect, disconnect, record_report, Report, Run
from idp3.evaluation import EpisodeResult, EvalReport, SceneVariation, ViewPerturbation
from idp3.manifest import RunManifest
from idp3.sim import EpisodeLog

from .base import logger_hush, tiny_manifest, TransactionTestCase


def get_table_names(session: SQLAlchemySession) -> list[str]:
    assert isinstance(session.bind, SQLAlchemyEngine)
    inspector = inspect(session.bind)
    tables = inspector.get_table_names()
    return tables


def make_report(*counts: tuple[int, int]) -> EvalReport:
    """
    Report with one episode per (successes, attempts) pair.
    """
    episodes = tuple(
        EpisodeResult(index, index, successes, attempts, successes, 100, 0, EpisodeLog(index))
        for index, (successes, attempts) in enumerate(counts)
    )
    return EvalReport(episodes)


class ConnectTest(TestCase):
    temp_folder: TemporaryDirectory[str]

    @classmethod
    def setUpClass(cls) -> None:
        cls.temp_folder = TemporaryDirectory()

    @classmethod
    def tearDownClass(cls) -> None:
        cls.temp_folder.cleanup()

    def path_name(self, file_name: str) -> Path:
        """
        Build path inside test class's temporary folder.
        """
        path = Path(self.temp_folder.name) / file_name
        return path

    def test_connect_default(self) -> None:
        session = connect()
        assert isinstance(session, SQLAlchemySession)
        assert isinstance(session.bind, SQLAlchemyEngine)
        self.assertEqual(session.bind.url.drivername, 'sqlite+pysqlite')
        self.assertEqual(session.bind.url.database, ':memory:')

    def test_connect_create_file(self) -> None:
        path = self.path_name('results.db')

        # Suppress 'create new database' log message
        with logger_hush():
            session = connect(path)

        try:
            assert isinstance(session, SQLAlchemySession)
            assert isinstance(session.bind, SQLAlchemyEngine)
            assert session.bind.url.database is not None
            self.assertTrue(session.bind.url.database.endswith(path.name))
            self.assertEqual(get_table_names(session), ['reports', 'runs'])
        finally:
            session.close()

    def test_connect_existing_file(self) -> None:
        path = self.path_name('existing.db')
        path.touch()

        session = connect(path)
        try:
            self.assertEqual(get_table_names(session), ['reports', 'runs'])
        finally:
            session.close()

    def test_disconnect_folds_log(self) -> None:
        path = self.path_name('folded.db')
        with logger_hush():
            session = connect(path)
            record_report(session, tiny_manifest(), make_report((1, 1)))
        disconnect(session)
        self.assertFalse(path.with_name('folded.db-wal').exists())
        session = connect(path)
        try:
            self.assertEqual(Report.objects(session).count_rows(), 1)
        finally:
            disconnect(session)


class RunTest(TransactionTestCase):
    """
    Test ``Run`` database model.
    """
    def test_repr(self) -> None:
        run = Run(manifest_hash='0123456789ab', variant='conv')
        self.assertEqual(repr(run), '<Run: 0123456789ab conv>')

    def test_hash_lowercased(self) -> None:
        run = Run(manifest_hash='0123456789AB')
        self.assertEqual(run.manifest_hash, '0123456789ab')

    def test_hash_length(self) -> None:
        message = r"^Manifest hash not 12 characters long: 'abc'$"
        with self.assertRaisesRegex(ValueError, message):
            Run(manifest_hash='abc')

    def test_get_or_create(self) -> None:
        manager = Run.objects(self.session)
        manifest = tiny_manifest()
        self.assertEqual(manager.count_rows(), 0)
        run = manager.get_or_create(manifest)
        self.assertEqual(run.id, 1)
        self.assertEqual((run.variant, run.points, run.h_pred), ('conv_pyramid_idp3', 64, 4))
        self.assertIs(manager.get_or_create(manifest), run)
        self.assertEqual(manager.count_rows(), 1)
        self.assertEqual(run.get_manifest(), manifest)

    def test_get_missing(self) -> None:
        self.assertIsNone(Run.objects(self.session).get('000000000000'))

    def test_not_unique(self) -> None:
        manifest = RunManifest()
        fields = {
            'manifest_hash': manifest.content_hash(),
            'variant': manifest.variant,
            'points': manifest.target_points,
            'h_pred': manifest.h_pred,
            'manifest': manifest.to_text(),
        }
        self.session.add(Run(**fields))
        self.session.add(Run(**fields))
        with self.assertRaisesRegex(IntegrityError, 'UNIQUE constraint failed: runs.manifest_hash'):
            self.session.commit()


class ReportTest(TransactionTestCase):
    """
    Test ``Report`` database model.
    """
    def test_repr(self) -> None:
        report = Report(successes=3, attempts=5, episodes=2)
        self.assertEqual(repr(report), '<Report: 3/5 over 2>')

    def test_more_successes_than_attempts(self) -> None:
        with self.assertRaisesRegex(ValueError, 'More successes than attempts: 4 > 3'):
            Report(successes=4, attempts=3)

    def test_success_rate(self) -> None:
        self.assertEqual(Report(episodes=4, successful_episodes=3).success_rate, 0.75)
        self.assertEqual(Report(episodes=0, successful_episodes=0).success_rate, 0.0)

    def test_record(self) -> None:
        manifest = tiny_manifest()
        with logger_hush():
            row = record_report(self.session, manifest, make_report((2, 3), (0, 4)))
        self.assertEqual((row.successes, row.attempts, row.episodes), (2, 7, 2))
        self.assertEqual((row.placements, row.successful_episodes), (2, 1))
        self.assertEqual((row.view_yaw_deg, row.view_shift_m), (0.0, 0.0))
        self.assertIsNone(row.table_height_m)
        self.assertEqual(row.run.manifest_hash, manifest.content_hash())

    def test_record_conditions(self) -> None:
        manifest = tiny_manifest()
        with logger_hush():
            row = record_report(
                self.session, manifest, make_report((1, 1)),
                ViewPerturbation(yaw_deg=15.0, shift_m=0.05),
                SceneVariation(table_height=0.8, distractors=3),
            )
        self.assertEqual((row.view_yaw_deg, row.view_shift_m), (15.0, 0.05))
        self.assertEqual((row.table_height_m, row.distractors), (0.8, 3))


class ReportManagerTest(TransactionTestCase):
    def test_for_run_and_summary(self) -> None:
        a, b = tiny_manifest(), tiny_manifest(variant='linear_dp3')
        with logger_hush():
            record_report(self.session, a, make_report((1, 2)))
            record_report(self.session, b, make_report((0, 2)))
            record_report(self.session, a, make_report((2, 2)), ViewPerturbation(yaw_deg=10.0))
        run = Run.objects(self.session).get_or_create(a)
        reports = Report.objects(self.session).for_run(run)
        self.assertEqual([r.successes for r in reports], [1, 2])
        self.assertEqual(Run.objects(self.session).count_rows(), 2)
        self.assertEqual(Report.objects(self.session).summary(), [
            (a.content_hash(), 'conv_pyramid_idp3', 64, 4, 1, 2),
            (b.content_hash(), 'linear_dp3', 64, 4, 0, 2),
            (a.content_hash(), 'conv_pyramid_idp3', 64, 4, 2, 2),
        ])

    def test_record_replaces_same_condition(self) -> None:
        manifest = tiny_manifest()
        view = ViewPerturbation(shift_m=0.05)
        with logger_hush():
            first = record_report(self.session, manifest, make_report((1, 2)), view)
            second = record_report(self.session, manifest, make_report((2, 3)), view)
        self.assertIs(second, first)
        self.assertEqual((second.successes, second.attempts), (2, 3))
        self.assertEqual(Report.objects(self.session).count_rows(), 1)

    def test_record_same_counts_unchanged(self) -> None:
        manifest = tiny_manifest()
        with logger_hush():
            first = record_report(self.session, manifest, make_report((1, 2)))
            with mock.patch.object(self.session, 'commit') as commit:
                again = record_report(self.session, manifest, make_report((1, 2)))
        commit.assert_not_called()
        self.assertIs(again, first)
        self.assertEqual(Report.objects(self.session).count_rows(), 1)

    def test_find(self) -> None:
        manifest = tiny_manifest()
        variation = SceneVariation(table_height=0.8)
        with logger_hush():
            row = record_report(self.session, manifest, make_report((1, 1)), variation=variation)
        run = Run.objects(self.session).get_or_create(manifest)
        manager = Report.objects(self.session)
        self.assertIs(manager.find(run, variation=variation), row)
        self.assertIsNone(manager.find(run))
        self.assertIsNone(manager.find(run, ViewPerturbation(yaw_deg=5.0), variation))
