import pytest

from app.config import (
    GridTooLarge,
    RunConfig,
    build_run_config,
    expand_grid,
    load_run_config,
    parse_overrides,
    split_list,
)
from app.errors import ConfigError
from app.schemas import AugKind, IntensityPreset, MixMode
from app.utils.reporting import config_hash


def test_defaults():
    cfg = RunConfig()
    assert cfg.run_episodes == 600
    assert cfg.batch_size == 4
    assert cfg.finetune_config().schedule is None
    assert cfg.tta_config() is None
    assert str(cfg.finetune_config().mode) == "LP"
    assert cfg.intensity_config().pairs is None
    assert cfg.network_config().feature_dim == 128


def test_batch_size_auto_follows_shots():
    assert build_run_config({"episode.k": "20"}).batch_size == 16
    assert build_run_config({"episode.k": "5"}).batch_size == 4
    assert build_run_config({"episode.k": "20", "ft.batch_size": "8"}).batch_size == 8


def test_file_then_overrides(write_config):
    path = write_config(
        {
            "# comment line": "",
            "ft.mode": "Partial(2)",
            "ft.lr": "0.05",
            "episode.k": "5",
            "intensity.policies": "HFlip, MixUp",
            "sched.start": "",
        }
    )
    cfg = load_run_config(path, ["--ft.lr", "0.2", "episode.k=20"])
    assert cfg.ft_mode == "Partial(2)"
    assert cfg.ft_lr == 0.2
    assert cfg.episode_k == 20
    assert cfg.intensity_policies == (AugKind.HFLIP, AugKind.MIXUP)
    assert cfg.sched_start is None


def test_da_schedule_defaults_to_every_epoch():
    cfg = build_run_config({"da.kind": "CutMix", "da.mix_mode": "W", "ft.epochs": "40"})
    sched = cfg.finetune_config().schedule
    assert (sched.start, sched.end) == (1, 40)
    assert cfg.da_policy().mix_mode == MixMode.W
    windowed = build_run_config({"da.kind": "MixUp", "sched.start": "31", "sched.end": "70"})
    assert windowed.finetune_config().schedule.start == 31


def test_tta_preset_matches_da_preset():
    cfg = build_run_config({"tta.enabled": "true", "da.preset": "Strong"})
    assert cfg.tta_config().policy.preset == IntensityPreset.STRONG
    explicit = build_run_config({"tta.enabled": "true", "da.preset": "Strong", "tta.preset": "Weak"})
    assert explicit.tta_config().policy.preset == IntensityPreset.WEAK


@pytest.mark.parametrize(
    "raw",
    [
        {"no.such.key": "1"},
        {"ft.mode": "Sideways"},
        {"ft.batch_size": "many"},
        {"sched.start": "3"},
        {"tta.space": "ranks"},
        {"tta.preset": "Hardest"},
        {"run.episodes": "0"},
        {"da.kind": "Rotate"},
        {"sched.start": "1", "sched.end": "200", "ft.epochs": "100"},
        {"ft.mode": "TwoStage(LP,FT,150)", "ft.epochs": "100"},
        {"ft.mode": "Partial(4)"},
        {"episode.n": "1"},
        {"tta.enabled": "true", "tta.kind": "MixUp"},
        {"model.input_size": "12"},
    ],
)
def test_invalid_configs_raise_config_error(raw):
    with pytest.raises(ConfigError):
        build_run_config(raw)


def test_missing_config_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "absent.cfg")


def test_require_files(tmp_path):
    cfg = build_run_config({"data.path": str(tmp_path / "x.fsds")})
    with pytest.raises(ConfigError, match="not found"):
        cfg.require_files("data.path")
    with pytest.raises(ConfigError, match="required"):
        cfg.require_files("model.checkpoint")


def test_echo_leaves_out_the_worker_count():
    one = build_run_config({"run.workers": "1"})
    eight = build_run_config({"run.workers": "8"})
    assert "run.workers" not in one.echo()
    assert one.echo()["ft.mode"] == "LP"
    assert config_hash(one.echo()) == config_hash(eight.echo())
    assert build_run_config(one.echo()) == one


def test_parse_overrides():
    assert parse_overrides(["--a", "1", "--b=2", "c=3", "a=4"]) == {"a": "4", "b": "2", "c": "3"}
    with pytest.raises(ConfigError):
        parse_overrides(["--dangling"])
    with pytest.raises(ConfigError):
        parse_overrides(["loose"])


def test_split_list_respects_parentheses():
    assert split_list("LP, TwoStage(LP,FT,50), Partial(1)") == ["LP", "TwoStage(LP,FT,50)", "Partial(1)"]


# ─── Grids ─────────────────────────────────────────────────────────────────
def test_grid_is_the_cartesian_product():
    runs = expand_grid({"ft.mode": "LP,FT,TwoStage(LP,FT,50)", "episode.k": "1,20", "run.seed": "3"})
    assert len(runs) == 6
    slugs = [slug for slug, _ in runs]
    assert slugs[0] == "ft.mode-LP_episode.k-1"
    assert len(set(slugs)) == 6
    assert runs[-1][1] == {"ft.mode": "TwoStage(LP,FT,50)", "episode.k": "20", "run.seed": "3"}


def test_grid_ignores_list_valued_keys():
    runs = expand_grid({"intensity.policies": "HFlip,MixUp", "tta.v": "1,32"})
    assert [sub["intensity.policies"] for _, sub in runs] == ["HFlip,MixUp", "HFlip,MixUp"]


def test_grid_limits():
    with pytest.raises(ConfigError):
        expand_grid({"ft.mode": "LP"})
    with pytest.raises(ConfigError):
        expand_grid({"ft.mode": "LP,,FT"})
    with pytest.raises(GridTooLarge):
        expand_grid({"run.seed": ",".join(str(i) for i in range(9)), "tta.v": ",".join(str(i) for i in range(1, 9))})
    assert len(expand_grid({"run.seed": "1,2,3", "grid.cap": "3"})) == 3
