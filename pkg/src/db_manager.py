"""
Database manager module for the Slow SDE Laboratory.
Keeps the results ledger: runs, their assertions and the artifacts they wrote.
"""

import aiosqlite
import logging
from datetime import datetime

from config import Config

logger = logging.getLogger(__name__)


class ResultsDatabase:
    def __init__(self, db_path=None):
        """Initialize the ledger with the specified database path."""
        self.db_path = db_path or Config.DB_FILE
        self.db = None

    async def init_db(self):
        """Open the database and create tables if they don't exist."""
        try:
            self.db = await aiosqlite.connect(self.db_path)

            # Enable foreign keys
            await self.db.execute("PRAGMA foreign_keys = ON")

            await self._create_tables()

            logger.info(f"Results ledger initialized at {self.db_path}")
            return True
        except Exception as e:
            logger.error(f"Error initializing results ledger: {e}")
            return False

    async def close(self):
        """Close the database connection."""
        if self.db:
            await self.db.close()
            self.db = None
            logger.info("Results ledger closed")

    async def _create_tables(self):
        """Create all required tables if they don't exist."""
        await self.db.execute("""
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY,
            command TEXT NOT NULL,
            experiment TEXT,
            model TEXT,
            seed INTEGER NOT NULL,
            config_json TEXT NOT NULL,
            status TEXT NOT NULL,
            started_at TIMESTAMP NOT NULL,
            finished_at TIMESTAMP
        )
        """)

        await self.db.execute("""
        CREATE TABLE IF NOT EXISTS assertions (
            id INTEGER PRIMARY KEY,
            run_id INTEGER NOT NULL REFERENCES runs(id) ON DELETE CASCADE,
            name TEXT NOT NULL,
            target TEXT NOT NULL,
            observed REAL,
            tolerance TEXT,
            passed BOOLEAN NOT NULL
        )
        """)

        await self.db.execute("""
        CREATE TABLE IF NOT EXISTS artifacts (
            id INTEGER PRIMARY KEY,
            run_id INTEGER NOT NULL REFERENCES runs(id) ON DELETE CASCADE,
            path TEXT NOT NULL,
            kind TEXT NOT NULL,
            created_at TIMESTAMP NOT NULL,
            UNIQUE (run_id, path)
        )
        """)

        await self.db.commit()

    # Runs

    async def start_run(self, command, experiment, model, seed, config_json):
        """Insert a run in status 'running'; returns its id or None."""
        try:
            cursor = await self.db.execute(
                "INSERT INTO runs (command, experiment, model, seed, config_json, status, started_at) "
                "VALUES (?, ?, ?, ?, ?, ?, ?)",
                (command, experiment, model, int(seed), config_json, "running", datetime.now().isoformat())
            )
            await self.db.commit()
            logger.info(f"Started run {cursor.lastrowid}: {command} {experiment or ''}".rstrip())
            return cursor.lastrowid
        except Exception as e:
            logger.error(f"Error starting run: {e}")
            return None

    async def finish_run(self, run_id, status):
        """Set the final status ('passed', 'failed', 'error', 'ok') of a run."""
        try:
            cursor = await self.db.execute(
                "UPDATE runs SET status = ?, finished_at = ? WHERE id = ?",
                (status, datetime.now().isoformat(), run_id)
            )
            await self.db.commit()
            if cursor.rowcount > 0:
                logger.info(f"Run {run_id} finished with status {status}")
                return True
            else:
                logger.warning(f"Run not found: {run_id}")
                return False
        except Exception as e:
            logger.error(f"Error finishing run: {e}")
            return False

    async def get_run(self, run_id):
        """Get one run as a dict."""
        try:
            async with self.db.execute(
                "SELECT id, command, experiment, model, seed, config_json, status, started_at, finished_at "
                "FROM runs WHERE id = ?",
                (run_id,)
            ) as cursor:
                row = await cursor.fetchone()
                if not row:
                    return None
                keys = ("id", "command", "experiment", "model", "seed", "config_json", "status",
                        "started_at", "finished_at")
                return dict(zip(keys, row))
        except Exception as e:
            logger.error(f"Error getting run: {e}")
            return None

    # Assertions

    async def add_assertions(self, run_id, assertions):
        """Record every Assertion of a report under a run."""
        try:
            await self.db.executemany(
                "INSERT INTO assertions (run_id, name, target, observed, tolerance, passed) VALUES (?, ?, ?, ?, ?, ?)",
                [(run_id, a.name, a.target, a.observed, a.tolerance, bool(a.passed)) for a in assertions]
            )
            await self.db.commit()
            return True
        except aiosqlite.IntegrityError:
            logger.warning(f"Run not found for assertions: {run_id}")
            return False
        except Exception as e:
            logger.error(f"Error adding assertions: {e}")
            return False

    async def get_assertions(self, run_id, failed_only=False):
        try:
            query = "SELECT name, target, observed, tolerance, passed FROM assertions WHERE run_id = ?"
            if failed_only:
                query += " AND passed = 0"
            async with self.db.execute(query + " ORDER BY id", (run_id,)) as cursor:
                rows = await cursor.fetchall()
                return [
                    {"name": row[0], "target": row[1], "observed": row[2], "tolerance": row[3],
                     "passed": bool(row[4])}
                    for row in rows
                ]
        except Exception as e:
            logger.error(f"Error getting assertions: {e}")
            return []

    # Artifacts

    async def add_artifact(self, run_id, path, kind):
        """Record a written file (csv, svg, txt, json) under a run."""
        try:
            await self.db.execute(
                "INSERT INTO artifacts (run_id, path, kind, created_at) VALUES (?, ?, ?, ?)",
                (run_id, str(path), kind, datetime.now().isoformat())
            )
            await self.db.commit()
            logger.info(f"Recorded {kind} artifact: {path}")
            return True
        except aiosqlite.IntegrityError:
            logger.warning(f"Artifact already recorded or run missing: {path}")
            return False
        except Exception as e:
            logger.error(f"Error adding artifact: {e}")
            return False

    async def get_artifacts(self, run_id):
        try:
            async with self.db.execute(
                "SELECT path, kind FROM artifacts WHERE run_id = ? ORDER BY id",
                (run_id,)
            ) as cursor:
                rows = await cursor.fetchall()
                return [{"path": row[0], "kind": row[1]} for row in rows]
        except Exception as e:
            logger.error(f"Error getting artifacts: {e}")
            return []

