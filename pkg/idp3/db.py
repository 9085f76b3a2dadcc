"""
Results ledger via SQLAlchemy.

CREATE TABLE runs (
    id INTEGER NOT NULL,
    manifest_hash VARCHAR(12) NOT NULL,
    variant VARCHAR NOT NULL,
    points INTEGER NOT NULL,
    h_pred INTEGER NOT NULL,
    manifest VARCHAR NOT NULL,
    PRIMARY KEY (id),
    UNIQUE (manifest_hash)
);

CREATE TABLE reports (
    id INTEGER NOT NULL,
    successes INTEGER NOT NULL,
    attempts INTEGER NOT NULL,
    episodes INTEGER NOT NULL,
    placements INTEGER NOT NULL,
    successful_episodes INTEGER NOT NULL,
    view_yaw_deg FLOAT NOT NULL,
    view_shift_m FLOAT NOT NULL,
    table_height_m FLOAT,
    distractors INTEGER,
    run_id INTEGER NOT NULL,
    PRIMARY KEY (id),
    FOREIGN KEY(run_id) REFERENCES runs (id)
);

"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Iterable, Optional, Type

from sqlalchemy import create_engine, Engine, event, func, ForeignKey, select, String
from sqlalchemy.orm import (
    DeclarativeBase,
    Mapped,
    mapped_column,
    relationship,
    Session,
    sessionmaker,
    validates,
)

from .evaluation import EvalReport, SceneVariation, ViewPerturbation
from .manifest import RunManifest


logger = logging.getLogger(__name__)


class Base(DeclarativeBase):
    pass


def connect(path: Optional[Path] = None) -> Session:
    """
    Create an SQLAlchemy session instance.
    """
    location = ":memory:"
    if path is not None:
        location = str(path)
        if path.exists():
            logger.debug("Connecting to existing SQLite3 database: %s", path)
        else:
            logger.info("Creating new SQLite3 database: %s", path)

    uri = f"sqlite+pysqlite:///{location}"
    engine = create_engine(uri)

    @event.listens_for(engine, "connect")
    def set_sqlite_pragma(dbapi_connection: Any, connection_record: Any) -> None:
        logger.debug("Running SQLite3 PRAGMAs")
        cursor = dbapi_connection.cursor()
        cursor.execute('PRAGMA foreign_keys = ON;')
        cursor.execute('PRAGMA journal_mode = WAL;')
        cursor.execute('PRAGMA synchronous = NORMAL;')
        cursor.close()

    Base.metadata.create_all(engine)
    Session = sessionmaker(bind=engine)
    session = Session()
    return session


def disconnect(session: Session) -> None:
    """
    Close session and its engine, so SQLite folds the write-ahead log back
    into the database file.
    """
    bind = session.get_bind()
    session.close()
    if isinstance(bind, Engine):
        bind.dispose()


class Manager:
    """
    Functions that operate on many rows, not just one.
    """
    model: Type[Base]

    def __init__(self, session: Session):
        self.session = session

    def add(self, instance: Base) -> None:
        self.session.add(instance)
        self.session.commit()

    def add_all(self, instances: Iterable[Base]) -> None:
        self.session.add_all(instances)
        self.session.commit()

    def count_rows(self) -> int:
        statement = select(func.count()).select_from(self.model)
        num_rows = self.session.scalars(statement).first()
        assert num_rows is not None
        return int(num_rows)


class Run(Base):
    """
    One trained configuration, identified by its manifest hash.
    """
    __tablename__ = 'runs'

    # Fields
    id: Mapped[int] = mapped_column(primary_key=True)
    manifest_hash: Mapped[str] = mapped_column(String(12), unique=True)
    variant: Mapped[str]
    points: Mapped[int]
    h_pred: Mapped[int]
    manifest: Mapped[str]

    # Relationships
    reports: Mapped[list["Report"]] = relationship(
        back_populates="run", cascade="all, delete-orphan"
    )

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__}: {self.manifest_hash} {self.variant}>"

    @staticmethod
    def objects(session: Session) -> RunManager:
        return RunManager(session)

    @validates('manifest_hash')
    def validate_manifest_hash(self, key: str, manifest_hash: str) -> str:
        if len(manifest_hash) != 12:
            raise ValueError(f"Manifest hash not 12 characters long: {manifest_hash!r}")
        return manifest_hash.casefold()

    def get_manifest(self) -> RunManifest:
        return RunManifest.parse(self.manifest)


class RunManager(Manager):
    model = Run

    def get(self, manifest_hash: str) -> Optional[Run]:
        statement = select(Run).where(Run.manifest_hash == manifest_hash)
        return self.session.scalars(statement).first()

    def get_or_create(self, manifest: RunManifest) -> Run:
        run = self.get(manifest.content_hash())
        if run is None:
            run = Run(
                manifest_hash=manifest.content_hash(),
                variant=manifest.variant,
                points=manifest.target_points,
                h_pred=manifest.h_pred,
                manifest=manifest.to_text(),
            )
            self.add(run)
        return run


class Report(Base):
    """
    One evaluation of a run, under a particular test-time condition.
    """
    __tablename__ = 'reports'

    # Fields
    id: Mapped[int] = mapped_column(primary_key=True)
    successes: Mapped[int]
    attempts: Mapped[int]
    episodes: Mapped[int]
    placements: Mapped[int]
    successful_episodes: Mapped[int]
    view_yaw_deg: Mapped[float] = mapped_column(default=0.0)
    view_shift_m: Mapped[float] = mapped_column(default=0.0)
    table_height_m: Mapped[Optional[float]]
    distractors: Mapped[Optional[int]]

    # Relationships
    run_id: Mapped[int] = mapped_column(ForeignKey("runs.id"))
    run: Mapped["Run"] = relationship(back_populates="reports")

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__}: {self.successes}/{self.attempts} over {self.episodes}>"

    @staticmethod
    def objects(session: Session) -> ReportManager:
        return ReportManager(session)

    @validates('attempts')
    def validate_attempts(self, key: str, attempts: int) -> int:
        if self.successes is not None and self.successes > attempts:
            raise ValueError(f"More successes than attempts: {self.successes} > {attempts}")
        return attempts

    @property
    def success_rate(self) -> float:
        return self.successful_episodes / self.episodes if self.episodes else 0.0


class ReportManager(Manager):
    model = Report

    def find(
        self,
        run: Run,
        view: ViewPerturbation = ViewPerturbation(),
        variation: SceneVariation = SceneVariation(),
    ) -> Optional[Report]:
        """
        The report for this run under exactly this test-time condition.
        """
        statement = select(Report).where(
            Report.run_id == run.id,
            Report.view_yaw_deg == view.yaw_deg,
            Report.view_shift_m == view.shift_m,
            Report.table_height_m.is_(None) if variation.table_height is None
            else Report.table_height_m == variation.table_height,
            Report.distractors.is_(None) if variation.distractors is None
            else Report.distractors == variation.distractors,
        )
        return self.session.scalars(statement).first()

    def record(
        self,
        run: Run,
        report: EvalReport,
        view: ViewPerturbation = ViewPerturbation(),
        variation: SceneVariation = SceneVariation(),
    ) -> Report:
        """
        Insert or replace the report for this run and condition.

        Recording the same counts again writes nothing.
        """
        counts = {
            'successes': report.successes,
            'attempts': report.attempts,
            'episodes': report.episode_count,
            'placements': report.placements,
            'successful_episodes': report.successful_episodes,
        }
        row = self.find(run, view, variation)
        if row is None:
            row = Report(
                run=run,
                view_yaw_deg=view.yaw_deg,
                view_shift_m=view.shift_m,
                table_height_m=variation.table_height,
                distractors=variation.distractors,
                **counts,
            )
            self.add(row)
            logger.debug("Recorded %r for %r", row, run)
        elif any(getattr(row, key) != value for key, value in counts.items()):
            for key, value in counts.items():
                setattr(row, key, value)
            self.session.commit()
            logger.debug("Replaced %r for %r", row, run)
        return row

    def for_run(self, run: Run) -> list[Report]:
        statement = select(Report).where(Report.run_id == run.id).order_by(Report.id)
        return list(self.session.scalars(statement))

    def summary(self) -> list[tuple[str, str, int, int, int, int]]:
        """
        (hash, variant, points, h_pred, successes, attempts) per report, oldest first.
        """
        statement = (
            select(Run.manifest_hash, Run.variant, Run.points, Run.h_pred,
                   Report.successes, Report.attempts)
            .join(Report.run)
            .order_by(Report.id)
        )
        return [tuple(row) for row in self.session.execute(statement)]  # type: ignore[misc]


def record_report(
    session: Session,
    manifest: RunManifest,
    report: EvalReport,
    view: ViewPerturbation = ViewPerturbation(),
    variation: SceneVariation = SceneVariation(),
) -> Report:
    run = Run.objects(session).get_or_create(manifest)
    return Report.objects(session).record(run, report, view, variation)
