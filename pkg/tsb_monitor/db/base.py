from functools import lru_cache
from typing import Iterator

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

from tsb_monitor.core.logger import get_logger

logger = get_logger(__name__)

# Create Base class
Base = declarative_base()


def sqlite_url(path) -> str:
    return f"sqlite:///{path}"


@lru_cache(maxsize=16)
def get_engine(database_url: str) -> Engine:
    """Engine per database URL; checkpoint files are opened once per process."""
    return create_engine(
        database_url,
        pool_pre_ping=True,
        connect_args={"check_same_thread": False} if database_url.startswith("sqlite") else {},
    )


def get_session(database_url: str) -> Iterator[Session]:
    """Yield a session bound to the given database, rolling back on failure."""
    SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=get_engine(database_url))
    db = SessionLocal()
    try:
        yield db
    except Exception as e:
        logger.error("Checkpoint session error", error=str(e))
        db.rollback()
        raise
    finally:
        db.close()


def init_db(database_url: str) -> None:
    """Create checkpoint tables if missing."""
    # Registers the ORM rows on Base.metadata
    from tsb_monitor.models import models  # noqa: F401

    try:
        Base.metadata.create_all(bind=get_engine(database_url))
        logger.info("Checkpoint tables ready", database_url=database_url)
    except Exception as e:
        logger.error("Failed to create checkpoint tables", error=str(e))
        raise
