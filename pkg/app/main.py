from contextlib import asynccontextmanager

from fastapi import FastAPI

from app.db import init_db
from app.routes import runs


@asynccontextmanager
async def lifespan(_: FastAPI):
    init_db()
    yield


app = FastAPI(title="fewshot-lab", lifespan=lifespan)

app.include_router(runs.router)


@app.get("/health")
def health_check():
    return {"status": "ok"}


@app.get("/")
def root():
    return {"status": "ok"}
