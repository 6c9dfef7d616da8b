from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
import json
import os
import sqlite3
import threading

from .utils import utc_now_iso


TERMINAL_STATUSES = ("SUCCEEDED", "FAILED", "INTERRUPTED_RECOVERED")
MAX_EVENT_ROWS = 5000
MAX_AUDIT_LOG_BYTES = 5 * 1024 * 1024


@dataclass(frozen=True, slots=True)
class Run:
    id: int
    scenario: str
    config_hash: str
    output_dir: str
    status: str
    created_at: str
    updated_at: str
    started_at: str | None
    ended_at: str | None
    pid: int | None
    exit_code: int | None
    error_code: str | None
    error: str | None


@dataclass(frozen=True, slots=True)
class RecoverySummary:
    recovered_count: int
    orphan_running_count: int


class RunStore:
    """Run ledger: a sqlite table of runs and events plus an append-only JSONL audit log."""

    def __init__(self, db_path: Path, audit_log_path: Path):
        self.db_path = Path(db_path)
        self.audit_log_path = Path(audit_log_path)
        self.db_path.parent.mkdir(mode=0o700, parents=True, exist_ok=True)
        self.audit_log_path.parent.mkdir(mode=0o700, parents=True, exist_ok=True)
        self._chmod_if_exists(self.db_path.parent, 0o700)
        self._lock = threading.Lock()
        self._conn = sqlite3.connect(self.db_path, check_same_thread=False, timeout=20.0)
        self._conn.row_factory = sqlite3.Row
        self._chmod_if_exists(self.db_path, 0o600)
        self.audit_log_path.touch(exist_ok=True)
        self._chmod_if_exists(self.audit_log_path, 0o600)

    @classmethod
    def for_output_dir(cls, output_dir: Path) -> "RunStore":
        ledger = Path(output_dir) / ".ledger"
        return cls(ledger / "runs.db", ledger / "audit.jsonl")

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    def initialize(self) -> None:
        with self._lock:
            self._conn.execute("PRAGMA foreign_keys = ON;")
            self._conn.executescript(
                """
                CREATE TABLE IF NOT EXISTS runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    scenario TEXT NOT NULL,
                    config_hash TEXT NOT NULL,
                    output_dir TEXT NOT NULL,
                    status TEXT NOT NULL,
                    created_at TEXT NOT NULL,
                    updated_at TEXT NOT NULL,
                    started_at TEXT,
                    ended_at TEXT,
                    pid INTEGER,
                    exit_code INTEGER,
                    error_code TEXT,
                    error TEXT
                );

                CREATE TABLE IF NOT EXISTS events (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id INTEGER,
                    event_type TEXT NOT NULL,
                    message TEXT NOT NULL,
                    created_at TEXT NOT NULL,
                    FOREIGN KEY (run_id) REFERENCES runs(id)
                );
                """
            )
            self._conn.commit()

    def create_run(
        self,
        scenario: str,
        config_hash: str,
        output_dir: Path,
        *,
        pid: int | None = None,
    ) -> Run:
        now = utc_now_iso()
        with self._lock:
            cursor = self._conn.execute(
                """
                INSERT INTO runs (scenario, config_hash, output_dir, status, created_at, updated_at, started_at, pid)
                VALUES (?, ?, ?, 'RUNNING', ?, ?, ?, ?)
                """,
                (scenario, config_hash, str(output_dir), now, now, now, pid),
            )
            self._conn.commit()
            row = self._conn.execute("SELECT * FROM runs WHERE id = ?", (cursor.lastrowid,)).fetchone()
            assert row is not None
            return self._row_to_run(row)

    def set_run_status(
        self,
        run_id: int,
        status: str,
        *,
        exit_code: int | None = None,
        error_code: str | None = None,
        error: str | None = None,
    ) -> None:
        now = utc_now_iso()
        ended_at = now if status in TERMINAL_STATUSES else None
        with self._lock:
            self._conn.execute(
                """
                UPDATE runs
                SET status = ?,
                    updated_at = ?,
                    ended_at = COALESCE(?, ended_at),
                    exit_code = ?,
                    error_code = ?,
                    error = ?
                WHERE id = ?
                """,
                (status, now, ended_at, exit_code, error_code, error, run_id),
            )
            self._conn.commit()

    def get_run(self, run_id: int) -> Run | None:
        with self._lock:
            row = self._conn.execute("SELECT * FROM runs WHERE id = ?", (run_id,)).fetchone()
            return self._row_to_run(row) if row else None

    def list_runs(self, limit: int = 100) -> list[Run]:
        with self._lock:
            rows = self._conn.execute("SELECT * FROM runs ORDER BY id DESC LIMIT ?", (limit,)).fetchall()
            return [self._row_to_run(row) for row in reversed(rows)]

    def reconcile_running_runs(self, *, pid_is_alive: Callable[[int], bool]) -> RecoverySummary:
        """Mark RUNNING rows left behind by a dead process as INTERRUPTED_RECOVERED."""
        with self._lock:
            now = utc_now_iso()
            running_rows = self._conn.execute(
                "SELECT id, pid FROM runs WHERE status = 'RUNNING' ORDER BY id DESC"
            ).fetchall()

            recovered_count = 0
            orphan_running_count = 0
            for row in running_rows:
                pid = row["pid"]
                if isinstance(pid, int) and pid > 0 and pid_is_alive(pid):
                    orphan_running_count += 1
                    continue
                recovered_count += 1
                self._conn.execute(
                    """
                    UPDATE runs
                    SET status = 'INTERRUPTED_RECOVERED',
                        updated_at = ?,
                        ended_at = ?,
                        error = COALESCE(error, 'Recovered after restart while run process was not alive')
                    WHERE id = ?
                    """,
                    (now, now, row["id"]),
                )

            self._conn.commit()
            return RecoverySummary(
                recovered_count=recovered_count,
                orphan_running_count=orphan_running_count,
            )

    def add_event(self, run_id: int | None, event_type: str, message: str) -> None:
        now = utc_now_iso()
        with self._lock:
            self._conn.execute(
                """
                INSERT INTO events (run_id, event_type, message, created_at)
                VALUES (?, ?, ?, ?)
                """,
                (run_id, event_type, message, now),
            )
            self._conn.execute(
                """
                DELETE FROM events
                WHERE id NOT IN (
                    SELECT id FROM events ORDER BY id DESC LIMIT ?
                )
                """,
                (MAX_EVENT_ROWS,),
            )
            self._conn.commit()
            self._append_audit_line(
                {
                    "created_at": now,
                    "run_id": run_id,
                    "event_type": event_type,
                    "message": message,
                }
            )

    def list_events(self, limit: int = 100) -> list[sqlite3.Row]:
        with self._lock:
            rows = self._conn.execute(
                """
                SELECT * FROM events
                ORDER BY id DESC
                LIMIT ?
                """,
                (limit,),
            ).fetchall()
            return list(reversed(rows))

    def _append_audit_line(self, payload: dict) -> None:
        try:
            if self.audit_log_path.exists() and self.audit_log_path.stat().st_size > MAX_AUDIT_LOG_BYTES:
                rotated = self.audit_log_path.with_suffix(self.audit_log_path.suffix + ".1")
                if rotated.exists():
                    rotated.unlink()
                self.audit_log_path.replace(rotated)
            with self.audit_log_path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(payload, ensure_ascii=True) + "\n")
            self._chmod_if_exists(self.audit_log_path, 0o600)
        except OSError:
            # Audit writes are best-effort and never fail a run.
            return

    @staticmethod
    def _chmod_if_exists(path: Path, mode: int) -> None:
        try:
            os.chmod(path, mode)
        except OSError:
            return

    @staticmethod
    def _row_to_run(row: sqlite3.Row) -> Run:
        return Run(
            id=row["id"],
            scenario=row["scenario"],
            config_hash=row["config_hash"],
            output_dir=row["output_dir"],
            status=row["status"],
            created_at=row["created_at"],
            updated_at=row["updated_at"],
            started_at=row["started_at"],
            ended_at=row["ended_at"],
            pid=row["pid"],
            exit_code=row["exit_code"],
            error_code=row["error_code"],
            error=row["error"],
        )
