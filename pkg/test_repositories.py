from datetime import datetime

import pytest

from psn.database import get_db, make_session_factory
from psn.models import BenchMode, BenchRecord, HistoryRecord, RunManifest
from psn.repositories import InMemoryRunRepository, SQLiteRunRepository


@pytest.fixture
def manifest():
    return RunManifest(command="train", config={"train": {"epochs": 2}}, seed=7, version="0.3.0", threads=1,
                       started_at=datetime(2026, 1, 2, 3, 4, 5), outputs=["history.jsonl"])


@pytest.fixture
def history():
    return [HistoryRecord(epoch=0, split="train", metric="loss", value=1.25),
            HistoryRecord(epoch=0, split="test", metric="accuracy", value=0.5)]


@pytest.fixture
def bench_records():
    return [BenchRecord(neuron_kind="psn", N=256, T=8, mode=BenchMode.INFERENCE, wall_time_seconds=0.002,
                        ratio_vs_baseline=3.5),
            BenchRecord(neuron_kind="psn", N=2 ** 20, T=8, mode=BenchMode.INFERENCE, status="skipped")]


@pytest.fixture(params=["memory", "sqlite"])
def repository(request, tmp_path):
    """Both repository implementations behind the same protocol"""
    if request.param == "memory":
        yield InMemoryRunRepository()
        return
    db = make_session_factory(f"sqlite:///{tmp_path / 'runs.db'}")()
    try:
        yield SQLiteRunRepository(db)
    finally:
        db.close()


class TestRunRepository:
    """Run store shared by the in-memory and SQL implementations"""

    def test_add_and_get_run(self, repository, manifest):
        """A stored run keeps its command and manifest"""
        run_id = repository.add_run(manifest)
        stored = repository.get_run(run_id)
        assert stored.id == run_id and stored.command == "train"
        assert stored.manifest == manifest

    def test_ids_increase(self, repository, manifest):
        """Runs are listed in insertion order"""
        first = repository.add_run(manifest)
        second = repository.add_run(manifest.model_copy(update={"command": "bench"}))
        assert second > first
        assert [run.command for run in repository.list_runs()] == ["train", "bench"]

    def test_history(self, repository, manifest, history):
        """History records come back in order"""
        run_id = repository.add_run(manifest)
        repository.add_history(run_id, history)
        assert repository.get_history(run_id) == history

    def test_bench_records(self, repository, manifest, bench_records):
        """Skipped cells keep their empty time and ratio"""
        run_id = repository.add_run(manifest)
        repository.add_bench_records(run_id, bench_records)
        assert repository.get_bench_records(run_id) == bench_records

    def test_unknown_run(self, repository):
        """Unknown ids give no run and empty record lists"""
        assert repository.get_run(99) is None
        assert repository.get_history(99) == []
        assert repository.get_bench_records(99) == []


def test_sqlite_store_persists(tmp_path, manifest, history):
    """A second session on the same file sees the stored run"""
    url = f"sqlite:///{tmp_path / 'runs.db'}"
    db = make_session_factory(url)()
    run_id = SQLiteRunRepository(db).add_run(manifest)
    SQLiteRunRepository(db).add_history(run_id, history)
    db.close()

    db = make_session_factory(url)()
    try:
        repository = SQLiteRunRepository(db)
        assert [run.id for run in repository.list_runs()] == [run_id]
        assert repository.get_history(run_id) == history
    finally:
        db.close()


def test_get_db_sessions(tmp_path, manifest):
    """Sessions opened with get_db write and read the same store"""
    url = f"sqlite:///{tmp_path / 'runs.db'}"
    with get_db(url) as db:
        run_id = SQLiteRunRepository(db).add_run(manifest)
    with get_db(url) as db:
        assert SQLiteRunRepository(db).get_run(run_id).manifest == manifest
