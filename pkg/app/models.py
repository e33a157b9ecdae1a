from datetime import datetime, timezone
from typing import Optional
from uuid import uuid4

from sqlalchemy import Column, DateTime, Integer, String
from sqlmodel import JSON, Field, SQLModel


class RunJob(SQLModel, table=True):
    __table_args__ = ({"comment": "Background experiment runs submitted over HTTP"},)

    id: str = Field(default_factory=lambda: str(uuid4()), primary_key=True)
    status: str = Field(sa_column=Column(String, index=True))
    config: dict = Field(default_factory=dict, sa_column=Column(JSON, nullable=False))
    total: int = Field(default=0, sa_column=Column(Integer))
    processed: int = Field(default=0, sa_column=Column(Integer))
    error: Optional[str] = Field(default=None, sa_column=Column(String))
    summary: Optional[dict] = Field(default=None, sa_column=Column(JSON))
    created_at: datetime = Field(
        default_factory=lambda: datetime.now(timezone.utc),
        sa_column=Column(DateTime(timezone=True)),
    )
    updated_at: datetime = Field(
        default_factory=lambda: datetime.now(timezone.utc),
        sa_column=Column(DateTime(timezone=True)),
    )
