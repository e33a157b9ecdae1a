# === app/db.py ===

import logging
from os import getenv

from dotenv import load_dotenv
from sqlmodel import Session, SQLModel, create_engine

import app.models  # registers RunJob with SQLModel.metadata

load_dotenv()

# ─── Configure logging ──────────────────────────────────────────────────────
logging.basicConfig(level=getenv("LOG_LEVEL", "INFO"))
logger = logging.getLogger("fewshot_lab.db")

# ─── Read the URL ────────────────────────────────────────────────────
DATABASE_URL = getenv("DATABASE_URL", "sqlite:///./fewshot_lab.db")

# ─── Create engine ─────────────────────────────────────────────────────────
connect_args = {"check_same_thread": False} if DATABASE_URL.startswith("sqlite") else {}
engine = create_engine(DATABASE_URL, connect_args=connect_args, pool_pre_ping=True)

logger.info(f"🚒 Engine connected to: {engine.url!s}")


def init_db() -> None:
    """Create missing tables (idempotent)."""
    SQLModel.metadata.create_all(engine)


# ─── Session factory ───────────────────────────────────────────────────────
def get_session():
    with Session(engine) as session:
        yield session
