import argparse
import csv
import logging
from pathlib import Path
import sys
import time
from typing import Callable, Optional

import numpy as np

from . import dataset as ds
from . import utils
from .ablation import run_ablation
from .db import connect, disconnect, record_report, Report
from .evaluation import CSV_HEADER, evaluate, SceneVariation, ViewPerturbation
from .geom import CropBox, PointCloud
from .manifest import GridManifest, ManifestError, RunManifest
from .policy import Policy
from .sampling import bench_samplers, BenchReport, SamplingConfig
from .tensornet import CHECKPOINT_MAGIC, CheckpointError, NumericalError
from .training import checkpoint_name, LOSS_CSV_HEADER, read_loss_csv, train, TrainingAborted


logger = logging.getLogger(__name__)

LEDGER_NAME = 'results.sqlite3'
LOG_NAME = 'idp3.log'

EXIT_BAD_MANIFEST = 2
EXIT_MISSING_FILE = 3
EXIT_NUMERICAL_ABORT = 4
EXIT_BAD_FILE = 5
EXIT_COLLECTION_FAILED = 6


class UnknownFileError(ValueError):
    """
    File is none of the kinds this program reads.
    """


class Formatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        """
        Change formatting depending on level of message.
        """
        if record.levelno <= logging.DEBUG:
            self._style._fmt = "    %(message)s"
        elif record.levelno <= logging.INFO:
            self._style._fmt = "  %(message)s"
        else:
            self._style._fmt = "%(asctime)s %(message)s"

        return super().format(record)


class CommandLine:
    """
    Command-line interface to whole program.
    """
    def __init__(self, arguments: list[str]):
        parser = self.make_parser()
        self.options = parser.parse_args(arguments)
        self.out_dir = Path(self.options.out)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.configure_logging()
        self.progress = sys.stdout.isatty() and not self.options.quiet

    def configure_logging(self) -> None:
        """
        Log to a file in the output folder.
        """
        level = logging.INFO
        if self.options.verbose:
            level = logging.DEBUG
        if self.options.quiet:
            level = logging.WARNING

        path = self.out_dir / LOG_NAME
        handler = logging.FileHandler(filename=path)
        handler.setFormatter(Formatter())

        logging.basicConfig(
            format="%(message)s",
            handlers=(handler,),
            level=level,
            force=True,
        )

    def make_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog='idp3',
            description="Egocentric 3D diffusion policy at desk scale")

        # Shared by every subcommand
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument(
            '-o', '--out', metavar='DIR', default='.',
            help="output folder for artifacts and the log file",
        )
        group = common.add_mutually_exclusive_group()
        group.add_argument(
            '-q', '--quiet', action='store_true',
            help='log only warnings and errors',
        )
        group.add_argument(
            '-v', '--verbose', action='store_true',
            help='enable debug logging messages',
        )

        commands = parser.add_subparsers(dest='command', required=True)

        collect = commands.add_parser(
            'collect', parents=[common], help="record expert demonstrations")
        collect.add_argument('manifest', metavar='MANIFEST', help="run manifest")

        train = commands.add_parser(
            'train', parents=[common], help="train a policy on a dataset")
        train.add_argument('manifest', metavar='MANIFEST', help="run manifest")
        train.add_argument(
            '--data', metavar='PATH',
            help="dataset file (default: the one `collect` wrote to the output folder)",
        )

        evaluate = commands.add_parser(
            'eval', parents=[common], help="evaluate a trained policy")
        evaluate.add_argument('manifest', metavar='MANIFEST', help="run manifest")
        evaluate.add_argument(
            '--checkpoint', metavar='PATH',
            help="checkpoint file (default: the one `train` wrote to the output folder)",
        )
        evaluate.add_argument(
            '--view-yaw-deg', type=float, default=0.0, metavar='DEG',
            help="yaw the camera about the vertical axis",
        )
        evaluate.add_argument(
            '--view-shift-m', type=float, default=0.0, metavar='M',
            help="shift the camera sideways",
        )
        evaluate.add_argument(
            '--table-height-m', type=float, default=None, metavar='M',
            help="move the table top to a new height",
        )
        evaluate.add_argument(
            '--distractors', type=int, default=None, metavar='N',
            help="add clutter boxes to the table",
        )
        evaluate.add_argument(
            '--workers', type=int, default=1, metavar='N',
            help="evaluate episodes in parallel processes",
        )

        ablate = commands.add_parser(
            'ablate', parents=[common], help="train and evaluate an ablation grid")
        ablate.add_argument('manifest', metavar='GRID', help="grid manifest")
        ablate.add_argument(
            '--workers', type=int, default=1, metavar='N',
            help="run grid cells in parallel processes",
        )

        bench = commands.add_parser(
            'bench', parents=[common], help="time the cascade sampler against FPS")
        bench.add_argument('manifest', metavar='MANIFEST', help="run manifest")

        inspect = commands.add_parser(
            'inspect', parents=[common],
            help="summarize a dataset, checkpoint, manifest or results ledger")
        inspect.add_argument('path', metavar='PATH', help="file to describe")
        return parser

    def run(self) -> int:
        started = time.perf_counter()
        logger.warning("Started %s.", self.options.command)
        commands: dict[str, Callable[[], None]] = {
            'collect': self.cmd_collect,
            'train': self.cmd_train,
            'eval': self.cmd_eval,
            'ablate': self.cmd_ablate,
            'bench': self.cmd_bench,
            'inspect': self.cmd_inspect,
        }
        try:
            commands[self.options.command]()
        except ManifestError as e:
            return self.fail(EXIT_BAD_MANIFEST, 'bad-manifest', e)
        except FileNotFoundError as e:
            return self.fail(EXIT_MISSING_FILE, 'missing-file', e)
        except (NumericalError, TrainingAborted) as e:
            return self.fail(EXIT_NUMERICAL_ABORT, 'numerical-abort', e)
        except (ds.DatasetError, CheckpointError, UnknownFileError) as e:
            return self.fail(EXIT_BAD_FILE, 'bad-file', e)
        except ds.CollectionError as e:
            return self.fail(EXIT_COLLECTION_FAILED, 'collection-failed', e)

        elapsed = utils.duration(time.perf_counter() - started)
        logger.warning("Finished %s in %s.", self.options.command, elapsed)
        return 0

    def fail(self, code: int, category: str, error: Exception) -> int:
        message = str(error).replace('\n', ' ')
        if isinstance(error, FileNotFoundError) and error.filename:
            message = f"{error.strerror}: {error.filename}"
        logger.error("%s: %s", category, message)
        print(f"error: {category}: {message}", file=sys.stderr)
        return code

    # Subcommands ##############################################################

    def load_manifest(self) -> RunManifest:
        path = Path(self.options.manifest)
        if not path.is_file():
            raise FileNotFoundError(2, 'No such manifest', str(path))
        return RunManifest.load(path)

    def existing(self, option: Optional[str], default: Path) -> Path:
        path = default if option is None else Path(option)
        if not path.is_file():
            raise FileNotFoundError(2, 'No such file', str(path))
        return path

    def dataset_path(self, manifest: RunManifest) -> Path:
        return self.out_dir / f"{manifest.content_hash()}.idp3data"

    def cmd_collect(self) -> None:
        manifest = self.load_manifest()
        dataset = ds.collect_demos(
            manifest.n_demos,
            manifest.rounds_per_demo,
            manifest.jitter(manifest.data_seed),
            ds.demo_seeds(manifest.data_seed, manifest.n_demos),
            manifest.scene(0),
        )
        path = self.dataset_path(manifest)
        ds.save(dataset, path)
        print(f"Wrote {path}: {dataset.summary()}")

    def cmd_train(self) -> None:
        manifest = self.load_manifest()
        path = self.existing(self.options.data, self.dataset_path(manifest))
        result = train(ds.load(path), manifest, self.out_dir, progress=self.progress)
        final = result.losses[-1].loss
        print(
            f"Wrote {result.checkpoint} and {result.loss_csv}: final loss {final:.6f}, "
            f"trained in {utils.duration(result.seconds)}")

    def cmd_eval(self) -> None:
        manifest = self.load_manifest()
        path = self.existing(self.options.checkpoint, self.out_dir / checkpoint_name(manifest))
        view = ViewPerturbation(self.options.view_yaw_deg, self.options.view_shift_m)
        variation = SceneVariation(self.options.table_height_m, self.options.distractors)
        report = evaluate(
            path,
            manifest.eval_episodes,
            manifest.eval_steps,
            view,
            variation,
            manifest=manifest,
            workers=self.options.workers,
            progress=self.progress,
        )

        stem = f"{manifest.content_hash()}-eval{condition_tag(view, variation)}"
        with open(self.out_dir / f"{stem}.csv", 'w', newline='', encoding='utf-8') as fp:
            writer = csv.writer(fp, lineterminator='\n')
            writer.writerow(CSV_HEADER)
            writer.writerow(report.csv_row(manifest))
        (self.out_dir / f"{stem}.json").write_text(report.to_json(), encoding='utf-8')
        report.write_episode_logs(self.out_dir / f"{stem}-episodes")

        session = connect(self.out_dir / LEDGER_NAME)
        try:
            record_report(session, manifest, report, view, variation)
        finally:
            disconnect(session)
        print(
            f"{report} over {report.episode_count} episodes, "
            f"success rate {report.success_rate:.0%}; wrote {stem}.csv")

    def cmd_ablate(self) -> None:
        path = Path(self.options.manifest)
        if not path.is_file():
            raise FileNotFoundError(2, 'No such manifest', str(path))
        grid = GridManifest.load(path)
        table = run_ablation(grid, self.out_dir, self.options.workers, self.progress)
        for cell in table.cells:
            print(','.join(cell.csv_row()))

    def cmd_bench(self) -> None:
        manifest = self.load_manifest()
        rng = utils.make_rng(manifest.data_seed)
        box = CropBox.in_front()
        positions = rng.uniform(box.min_corner, box.max_corner, size=(manifest.bench_points, 3))
        cfg = SamplingConfig(manifest.target_points, manifest.voxel_size, manifest.data_seed)
        report = bench_samplers(PointCloud(positions), cfg, manifest.bench_repetitions)
        path = self.out_dir / f"{manifest.content_hash()}-bench.csv"
        with open(path, 'w', newline='', encoding='utf-8') as fp:
            writer = csv.writer(fp, lineterminator='\n')
            writer.writerow(BenchReport.CSV_HEADER)
            for timing in report.timings:
                writer.writerow(timing.csv_row())
        for timing in report.timings:
            print(
                f"{timing.strategy}: median {timing.median_ns / 1e6:.3f} ms, "
                f"stdev {timing.stdev_ns / 1e6:.3f} ms")
        print(f"Faster: {report.winner()}")

    def cmd_inspect(self) -> None:
        path = Path(self.options.path)
        if not path.is_file():
            raise FileNotFoundError(2, 'No such file', str(path))
        print(describe(path))


def condition_tag(view: ViewPerturbation, variation: SceneVariation) -> str:
    """
    File-name suffix for a test-time condition; empty for the training scene.
    """
    parts = []
    if view.yaw_deg:
        parts.append(f"yaw{view.yaw_deg:g}")
    if view.shift_m:
        parts.append(f"shift{view.shift_m:g}")
    if variation.table_height is not None:
        parts.append(f"table{variation.table_height:g}")
    if variation.distractors is not None:
        parts.append(f"clutter{variation.distractors}")
    return ''.join(f"-{part}" for part in parts)


def describe(path: Path) -> str:
    """
    Text summary of any file this program writes or reads.
    """
    with open(path, 'rb') as fp:
        head = fp.read(8)
    if head == ds.DATASET_MAGIC:
        dataset = ds.load(path)
        height, width = dataset.frame_shape
        lines = [
            f"Dataset: {path}",
            f"trajectories: {len(dataset.trajectories)}",
            f"frames: {dataset.frame_count}",
            f"depth: {height}x{width}",
            f"proprio_dim: {dataset.proprio_dim}",
            f"action_dim: {dataset.action_dim}",
            f"action_min: {np.array2string(dataset.stats.action_min, precision=4)}",
            f"action_max: {np.array2string(dataset.stats.action_max, precision=4)}",
        ]
    elif head == CHECKPOINT_MAGIC:
        policy = Policy.load(path)
        manifest = policy.manifest
        lines = [
            f"Checkpoint: {path}",
            f"manifest_hash: {manifest.content_hash()}",
            f"variant: {manifest.variant}",
            f"points: {manifest.target_points}",
            f"h_pred: {manifest.h_pred}",
            f"parameters: {policy.parameter_count():,}",
        ]
    elif head.startswith(b'SQLite'):
        session = connect(path)
        try:
            rows = Report.objects(session).summary()
        finally:
            disconnect(session)
        lines = [f"Results ledger: {path}", f"reports: {len(rows)}"]
        lines.extend(','.join(str(value) for value in row) for row in rows)
    elif head == ','.join(LOSS_CSV_HEADER).encode()[:8]:
        try:
            curve = read_loss_csv(path)
        except ValueError as e:
            raise UnknownFileError(f"malformed loss curve: {path} ({e})") from None
        lines = [f"Loss curve: {path}", f"epochs: {len(curve)}"]
        if curve:
            lines.append(f"final_loss: {curve[-1][1]:.6f}")
    else:
        try:
            manifest = RunManifest.load(path)
        except ManifestError:
            try:
                grid = GridManifest.load(path)
            except ManifestError as e:
                raise UnknownFileError(
                    f"not a dataset, checkpoint, ledger, loss curve or manifest: {path} ({e})"
                ) from None
            return (
                f"Grid manifest: {path}\ngrid_hash: {grid.content_hash()}\n"
                f"cells: {len(list(grid.cells()))}"
            )
        lines = [f"Manifest: {path}", f"manifest_hash: {manifest.content_hash()}"]
        lines.extend(manifest.to_text().splitlines())
    return '\n'.join(lines)
