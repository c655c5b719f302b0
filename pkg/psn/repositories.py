from datetime import datetime
from typing import Dict, List, Optional, Protocol, Sequence

from sqlalchemy.orm import Session

from psn.database import BenchRecordDB, HistoryDB, RunDB
from psn.models import BenchRecord, HistoryRecord, RunManifest, StoredRun


class RunRepository(Protocol):
    """Abstraction over where run manifests, histories and benchmark records are kept."""

    def add_run(self, manifest: RunManifest) -> int:
        ...

    def add_history(self, run_id: int, records: Sequence[HistoryRecord]) -> None:
        ...

    def add_bench_records(self, run_id: int, records: Sequence[BenchRecord]) -> None:
        ...

    def list_runs(self) -> List[StoredRun]:
        ...

    def get_run(self, run_id: int) -> Optional[StoredRun]:
        ...

    def get_history(self, run_id: int) -> List[HistoryRecord]:
        ...

    def get_bench_records(self, run_id: int) -> List[BenchRecord]:
        ...


class InMemoryRunRepository:
    """In-memory implementation of RunRepository for tests and dev."""

    def __init__(self) -> None:
        self._runs: List[StoredRun] = []
        self._history: Dict[int, List[HistoryRecord]] = {}
        self._bench: Dict[int, List[BenchRecord]] = {}
        self._next_id = 1

    def add_run(self, manifest: RunManifest) -> int:
        run = StoredRun(id=self._next_id, command=manifest.command, manifest=manifest, created_at=datetime.now())
        self._runs.append(run)
        self._next_id += 1
        return run.id

    def add_history(self, run_id: int, records: Sequence[HistoryRecord]) -> None:
        self._history.setdefault(run_id, []).extend(records)

    def add_bench_records(self, run_id: int, records: Sequence[BenchRecord]) -> None:
        self._bench.setdefault(run_id, []).extend(records)

    def list_runs(self) -> List[StoredRun]:
        return list(self._runs)

    def get_run(self, run_id: int) -> Optional[StoredRun]:
        for run in self._runs:
            if run.id == run_id:
                return run
        return None

    def get_history(self, run_id: int) -> List[HistoryRecord]:
        return list(self._history.get(run_id, []))

    def get_bench_records(self, run_id: int) -> List[BenchRecord]:
        return list(self._bench.get(run_id, []))


class SQLiteRunRepository:
    """SQLAlchemy implementation of RunRepository for persistent storage."""

    def __init__(self, db: Session):
        self.db = db

    def add_run(self, manifest: RunManifest) -> int:
        db_run = RunDB(command=manifest.command, manifest=manifest.model_dump(mode="json"), created_at=datetime.now())
        self.db.add(db_run)
        self.db.commit()
        self.db.refresh(db_run)
        return db_run.id

    def add_history(self, run_id: int, records: Sequence[HistoryRecord]) -> None:
        self.db.add_all(HistoryDB(run_id=run_id, **record.model_dump()) for record in records)
        self.db.commit()

    def add_bench_records(self, run_id: int, records: Sequence[BenchRecord]) -> None:
        self.db.add_all(BenchRecordDB(run_id=run_id, **record.model_dump(mode="json")) for record in records)
        self.db.commit()

    def list_runs(self) -> List[StoredRun]:
        db_runs = self.db.query(RunDB).order_by(RunDB.id).all()
        return [self._db_to_model(run) for run in db_runs]

    def get_run(self, run_id: int) -> Optional[StoredRun]:
        db_run = self.db.query(RunDB).filter(RunDB.id == run_id).first()
        return self._db_to_model(db_run) if db_run else None

    def get_history(self, run_id: int) -> List[HistoryRecord]:
        rows = self.db.query(HistoryDB).filter(HistoryDB.run_id == run_id).order_by(HistoryDB.id).all()
        return [HistoryRecord(epoch=row.epoch, split=row.split, metric=row.metric, value=row.value) for row in rows]

    def get_bench_records(self, run_id: int) -> List[BenchRecord]:
        rows = self.db.query(BenchRecordDB).filter(BenchRecordDB.run_id == run_id).order_by(BenchRecordDB.id).all()
        return [
            BenchRecord(neuron_kind=row.neuron_kind, N=row.N, T=row.T, mode=row.mode,
                        wall_time_seconds=row.wall_time_seconds, ratio_vs_baseline=row.ratio_vs_baseline,
                        status=row.status, threads=row.threads)
            for row in rows
        ]

    def _db_to_model(self, db_run: RunDB) -> StoredRun:
        """Convert database model to Pydantic model."""
        return StoredRun(id=db_run.id, command=db_run.command, manifest=RunManifest.model_validate(db_run.manifest),
                         created_at=db_run.created_at)
