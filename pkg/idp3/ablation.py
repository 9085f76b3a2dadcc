"""
Ablation grids: collect, train and evaluate every cell of a grid manifest.

Cells with the same demonstration settings share one dataset file, which
is collected before any training starts. Cells are independent after that
and may run in parallel worker processes.
"""

from __future__ import annotations

from collections import defaultdict
import csv
from dataclasses import dataclass
import logging
from pathlib import Path
import statistics
import time

from tqdm.contrib.concurrent import process_map

from . import dataset as ds
from .evaluation import CSV_HEADER, evaluate, EvalReport
from .manifest import GridManifest, RunManifest
from .training import train
from .utils import duration


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CellTask:
    index: int
    manifest: RunManifest
    dataset: Path
    out_dir: Path


@dataclass(frozen=True)
class CellResult:
    index: int
    manifest: RunManifest
    report: EvalReport

    def csv_row(self) -> list[str]:
        return self.report.csv_row(self.manifest)


@dataclass(frozen=True)
class AblationTable:
    grid_hash: str
    cells: tuple[CellResult, ...]

    def mean_successes(self, key: str) -> dict[object, float]:
        """
        Mean successes per value of one grid axis, over every other axis.

        Args:
            key:
                `RunManifest` field, e.g. 'variant' or 'h_pred'.
        """
        groups: defaultdict[object, list[int]] = defaultdict(list)
        for cell in self.cells:
            groups[getattr(cell.manifest, key)].append(cell.report.successes)
        return {value: statistics.fmean(counts) for value, counts in groups.items()}

    def write_csv(self, path: Path) -> None:
        with open(path, 'w', newline='', encoding='utf-8') as fp:
            writer = csv.writer(fp, lineterminator='\n')
            writer.writerow(CSV_HEADER)
            for cell in self.cells:
                writer.writerow(cell.csv_row())


def dataset_path(out_dir: Path, manifest: RunManifest) -> Path:
    return out_dir / 'data' / f"{manifest.data_hash()}.idp3data"


def ensure_dataset(manifest: RunManifest, path: Path) -> Path:
    """
    Collect the demonstrations `manifest` asks for, unless already on disk.
    """
    if path.exists():
        logger.info("Reusing dataset %s", path)
        return path
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset = ds.collect_demos(
        manifest.n_demos,
        manifest.rounds_per_demo,
        manifest.jitter(manifest.data_seed),
        ds.demo_seeds(manifest.data_seed, manifest.n_demos),
        manifest.scene(0),
    )
    ds.save(dataset, path)
    return path


def run_cell(task: CellTask) -> CellResult:
    started = time.perf_counter()
    cell_dir = task.out_dir / task.manifest.content_hash()
    result = train(ds.load(task.dataset), task.manifest, cell_dir)
    report = evaluate(result.policy, task.manifest.eval_episodes, task.manifest.eval_steps)
    (cell_dir / f"{task.manifest.content_hash()}-report.json").write_text(
        report.to_json(), encoding='utf-8')
    logger.info(
        "Cell %d (%s, %d points, h_pred %d): %s in %s",
        task.index, task.manifest.variant, task.manifest.target_points, task.manifest.h_pred,
        report, duration(time.perf_counter() - started))
    return CellResult(task.index, task.manifest, report)


def run_ablation(
    grid: GridManifest,
    out_dir: Path,
    workers: int = 1,
    progress: bool = False,
) -> AblationTable:
    """
    Train and evaluate every grid cell; write one CSV row per cell.

    Results are identical for any worker count.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = list(grid.cells())
    logger.info("Ablation grid %s: %d cells", grid.content_hash(), len(cells))

    tasks = []
    for index, manifest in enumerate(cells):
        path = ensure_dataset(manifest, dataset_path(out_dir, manifest))
        tasks.append(CellTask(index, manifest, path, out_dir / 'cells'))

    if workers <= 1:
        results = [run_cell(task) for task in tasks]
    else:
        results = process_map(
            run_cell, tasks, max_workers=workers, chunksize=1, disable=not progress, unit='cell')

    table = AblationTable(grid.content_hash(), tuple(results))
    table.write_csv(out_dir / f"{grid.content_hash()}-ablation.csv")
    return table
