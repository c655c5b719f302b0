import os
from contextlib import contextmanager
from typing import Iterator

from sqlalchemy import JSON, Column, DateTime, Float, ForeignKey, Integer, String, create_engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

DEFAULT_DATABASE_URL = "sqlite:///./psn_runs.db"

Base = declarative_base()


def database_url() -> str:
    return os.environ.get("PSN_DATABASE_URL", DEFAULT_DATABASE_URL)


class RunDB(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, index=True)
    manifest = Column(JSON)
    created_at = Column(DateTime)


class HistoryDB(Base):
    __tablename__ = "history"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), index=True)
    epoch = Column(Integer)
    split = Column(String)
    metric = Column(String)
    value = Column(Float)


class BenchRecordDB(Base):
    __tablename__ = "bench_records"

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"), index=True)
    neuron_kind = Column(String)
    N = Column(Integer)
    T = Column(Integer)
    mode = Column(String)
    wall_time_seconds = Column(Float, nullable=True)
    ratio_vs_baseline = Column(Float, nullable=True)
    status = Column(String)
    threads = Column(Integer)


def make_session_factory(url: str) -> sessionmaker:
    """Engine + session factory for ``url``; tables are created on first use."""
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    engine = create_engine(url, connect_args=connect_args)
    Base.metadata.create_all(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


@contextmanager
def get_db(url: str) -> Iterator[Session]:
    db = make_session_factory(url)()
    try:
        yield db
    finally:
        db.close()
