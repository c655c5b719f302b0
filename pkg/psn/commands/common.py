"""Helpers shared by the sub-commands: manifests, thread defaults and the run store."""
import argparse
import logging
import os
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

from psn import __version__
from psn.database import database_url, get_db
from psn.errors import ContractError
from psn.io import PathLike, atomic_write_text
from psn.models import RunManifest
from psn.repositories import SQLiteRunRepository
from psn.tensor import set_num_threads

logger = logging.getLogger(__name__)


def default_threads() -> int:
    raw = os.environ.get("PSN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning(f"Ignoring PSN_THREADS={raw!r}: not an integer")
        return 1


def int_list(text: str) -> List[int]:
    """Parse ``"1,2,4"`` for argparse."""
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def str_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out-dir", type=Path, default=Path("psn_runs"), help="directory for outputs and the manifest")
    parser.add_argument("--threads", type=int, default=default_threads(),
                        help="kernel threads (default: PSN_THREADS or 1)")
    parser.add_argument("--seed", type=int, default=0)


def add_db_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--db", nargs="?", const="", default=None, metavar="URL",
                        help="persist the run in a SQL run store (default URL: PSN_DATABASE_URL)")


def apply_threads(threads: int) -> None:
    if threads < 1:
        raise ContractError(f"--threads must be >= 1, got {threads}")
    set_num_threads(threads)


def manifest_path(out_dir: Path, command: str) -> Path:
    return out_dir / f"{command}.manifest.json"


def start_manifest(command: str, config: Dict[str, Any], seed: int, threads: int, out_dir: Path) -> RunManifest:
    """Write the manifest before any work is done."""
    manifest = RunManifest(command=command, config=config, seed=seed, version=__version__, threads=threads,
                           started_at=datetime.now())
    write_manifest(manifest_path(out_dir, command), manifest)
    return manifest


def finish_manifest(manifest: RunManifest, out_dir: Path, outputs: List[Path]) -> RunManifest:
    manifest.finished_at = datetime.now()
    manifest.outputs = [str(path) for path in outputs]
    write_manifest(manifest_path(out_dir, manifest.command), manifest)
    return manifest


def write_manifest(path: PathLike, manifest: RunManifest) -> Path:
    return atomic_write_text(path, manifest.model_dump_json(indent=2) + "\n")


def read_manifest(path: PathLike) -> RunManifest:
    target = Path(path)
    if not target.exists():
        raise ContractError(f"manifest {target} does not exist")
    return RunManifest.model_validate_json(target.read_text())


@contextmanager
def run_store(url: Optional[str]) -> Iterator[Optional[SQLiteRunRepository]]:
    """A SQL run repository when ``--db`` was given, else ``None``."""
    if url is None:
        yield None
        return
    resolved = url or database_url()
    logger.info(f"Recording run in {resolved}")
    with get_db(resolved) as db:
        yield SQLiteRunRepository(db)
