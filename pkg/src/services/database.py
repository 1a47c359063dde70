"""
Run ledger.
Appends one row per CLI run to a SQL database when a ledger URL is configured.
"""
import logging
from contextlib import contextmanager
from typing import List, Optional

from sqlalchemy import create_engine
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session, sessionmaker

from src.config import settings
from src.models.results import Base, RunRecordDB

logger = logging.getLogger(__name__)


class RunLedger:
    """SQLAlchemy-backed ledger; every failure is logged and swallowed."""

    def __init__(self, url: Optional[str] = None):
        self.url = url if url is not None else settings.ledger_url
        self.engine = None
        self.SessionLocal = None
        if self.url:
            self._connect()

    def _connect(self):
        try:
            self.engine = create_engine(
                self.url,
                connect_args={"check_same_thread": False} if "sqlite" in self.url else {},
                echo=False
            )
            Base.metadata.create_all(bind=self.engine)
            self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)
            logger.info("Run ledger ready")
        except SQLAlchemyError as e:
            logger.warning(f"Run ledger unavailable: {e}")
            self.engine = None
            self.SessionLocal = None

    @property
    def enabled(self) -> bool:
        return self.SessionLocal is not None

    @contextmanager
    def session(self):
        """Context manager for database sessions."""
        session: Session = self.SessionLocal()
        try:
            yield session
            session.commit()
        except Exception as e:
            session.rollback()
            logger.error(f"Database error: {e}")
            raise
        finally:
            session.close()

    def record(self, subcommand: str, experiment: Optional[str], config_hash: str, master_seed: int,
               version: str, exit_code: int, manifest: Optional[str] = None) -> Optional[int]:
        """Append one run; returns its id, or None when the ledger is off or failing."""
        if not self.enabled:
            return None
        try:
            with self.session() as session:
                row = RunRecordDB(
                    subcommand=subcommand,
                    experiment=experiment,
                    config_hash=config_hash,
                    master_seed=str(master_seed),
                    version=version,
                    exit_code=exit_code,
                    manifest=manifest,
                )
                session.add(row)
                session.flush()
                run_id = row.id
            logger.info(f"Recorded run {run_id} ({subcommand}, exit {exit_code})")
            return run_id
        except SQLAlchemyError as e:
            logger.error(f"Could not record run: {e}")
            return None

    def recent(self, limit: int = 20) -> List[dict]:
        if not self.enabled:
            return []
        try:
            with self.session() as session:
                rows = session.query(RunRecordDB).order_by(RunRecordDB.id.desc()).limit(limit).all()
                return [row.to_dict() for row in rows]
        except SQLAlchemyError as e:
            logger.error(f"Could not read the ledger: {e}")
            return []
