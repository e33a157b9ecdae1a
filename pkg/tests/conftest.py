import os
import tempfile
from pathlib import Path

# The engine is created at import time, so point it at a scratch database first.
_SCRATCH = Path(tempfile.mkdtemp(prefix="fewshot_lab_tests_"))
os.environ["DATABASE_URL"] = f"sqlite:///{_SCRATCH / 'jobs.db'}"
os.environ.setdefault("FEWSHOT_RUNS_DIR", str(_SCRATCH / "runs"))

import pytest  # noqa: E402

from app.network import init_extractor, init_head, save_checkpoint  # noqa: E402
from app.schemas import NetworkConfig, SynthConfig  # noqa: E402
from app.utils.datasets import generate_synthetic, save_dataset  # noqa: E402
from app.utils.rng import rng_new  # noqa: E402

TINY_SIZE = 8


@pytest.fixture
def tiny_net() -> NetworkConfig:
    return NetworkConfig(stem_channels=4, blocks=2, input_size=TINY_SIZE)


@pytest.fixture
def tiny_synth() -> SynthConfig:
    return SynthConfig(name="tiny", n_classes=6, per_class=12, image_size=TINY_SIZE, freq_band=(1.0, 3.0))


@pytest.fixture
def tiny_dataset(tiny_synth):
    return generate_synthetic(tiny_synth, rng_new(0).fork("data").fork("tiny"))


@pytest.fixture
def tiny_extractor(tiny_net):
    return init_extractor(tiny_net, rng_new(1).fork("init"))


@pytest.fixture
def lab_files(tmp_path, tiny_dataset, tiny_extractor):
    """A dataset file and a checkpoint on disk, plus base config keys pointing at them."""
    data_path = tmp_path / "target.fsds"
    ckpt_path = tmp_path / "desk.ftm"
    save_dataset(tiny_dataset, data_path)
    head = init_head(tiny_extractor.feature_dim, tiny_dataset.n_classes, rng_new(1).fork("head"))
    save_checkpoint(ckpt_path, tiny_extractor, head)
    return {
        "data.path": str(data_path),
        "data.source": str(data_path),
        "model.checkpoint": str(ckpt_path),
        "model.input_size": str(TINY_SIZE),
        "model.stem_channels": "4",
        "model.blocks": "2",
        "episode.n": "3",
        "episode.k": "2",
        "episode.kq": "3",
        "ft.epochs": "3",
        "run.episodes": "3",
        "run.seed": "7",
    }


@pytest.fixture
def write_config(tmp_path):
    """Write a flat key = value run config and return its path."""

    def write(values: dict, name: str = "lab.cfg") -> Path:
        path = tmp_path / name
        path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()), encoding="utf-8")
        return path

    return write
