# app/config.py
"""
Run configuration.

A run config is a flat ``key = value`` file (``#`` comments, comma lists)
read with python-dotenv and validated by ``RunConfig``, whose fields carry
the dotted keys as aliases. Precedence: defaults < file < command line.
"""

import itertools
import logging
import os
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.errors import ConfigError
from app.network import InvalidUpdateMode, freeze_mask
from app.schemas import (
    AugKind,
    AugPolicy,
    EpisodeSpec,
    FineTuneConfig,
    IntensityConfig,
    IntensityPreset,
    MixMode,
    NetworkConfig,
    PretrainConfig,
    Schedule,
    TtaConfig,
    UpdateMode,
)

load_dotenv()

logger = logging.getLogger("fewshot_lab.config")

# ─── Environment ───────────────────────────────────────────────────────────
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
DEFAULT_WORKERS = int(os.getenv("FEWSHOT_WORKERS", "1"))

LIST_KEYS = {"intensity.policies", "intensity.mix_modes", "pretrain.milestones"}
EXECUTION_KEYS = {"run.workers"}
_TOP_LEVEL_COMMA = re.compile(r",(?![^()]*\))")


class GridTooLarge(ConfigError):
    pass


def split_list(value: str) -> List[str]:
    """Comma split that leaves commas inside parentheses alone (TwoStage(LP,FT,50))."""
    return [part.strip() for part in _TOP_LEVEL_COMMA.split(value)]


def _as_list(value: Any) -> Any:
    if isinstance(value, str):
        return [v for v in split_list(value) if v]
    return value


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)

    # ─── Data / model ──────────────────────────────────────────────────────
    data_path: Optional[str] = Field(None, alias="data.path")
    data_source: Optional[str] = Field(None, alias="data.source")
    model_checkpoint: Optional[str] = Field(None, alias="model.checkpoint")
    model_input_size: int = Field(32, alias="model.input_size")
    model_stem_channels: int = Field(16, alias="model.stem_channels")
    model_blocks: int = Field(3, alias="model.blocks")

    # ─── Pre-training ──────────────────────────────────────────────────────
    pretrain_epochs: int = Field(60, alias="pretrain.epochs")
    pretrain_batch_size: int = Field(64, alias="pretrain.batch_size")
    pretrain_lr: float = Field(0.1, alias="pretrain.lr")
    pretrain_momentum: float = Field(0.9, alias="pretrain.momentum")
    pretrain_weight_decay: float = Field(1e-4, alias="pretrain.weight_decay")
    pretrain_milestones: Tuple[float, ...] = Field((0.6, 0.8), alias="pretrain.milestones")
    pretrain_preset: IntensityPreset = Field(IntensityPreset.DEFAULT, alias="pretrain.preset")

    # ─── Fine-tuning ───────────────────────────────────────────────────────
    ft_mode: str = Field("LP", alias="ft.mode")
    ft_lr: float = Field(1e-2, alias="ft.lr")
    ft_momentum: float = Field(0.9, alias="ft.momentum")
    ft_weight_decay: float = Field(1e-3, alias="ft.weight_decay")
    ft_epochs: int = Field(100, alias="ft.epochs")
    ft_batch_size: Union[int, str] = Field("auto", alias="ft.batch_size")
    da_kind: AugKind = Field(AugKind.NONE, alias="da.kind")
    da_preset: IntensityPreset = Field(IntensityPreset.DEFAULT, alias="da.preset")
    da_mix_mode: MixMode = Field(MixMode.WB, alias="da.mix_mode")
    aug_per_epoch_params: bool = Field(False, alias="aug.per_epoch_params")
    sched_start: Optional[int] = Field(None, alias="sched.start")
    sched_end: Optional[int] = Field(None, alias="sched.end")

    # ─── TTA ───────────────────────────────────────────────────────────────
    tta_enabled: bool = Field(False, alias="tta.enabled")
    tta_v: int = Field(32, alias="tta.v", ge=1)
    tta_kind: AugKind = Field(AugKind.BASE_AUG, alias="tta.kind")
    tta_preset: str = Field("match", alias="tta.preset")
    tta_space: str = Field("probs", alias="tta.space")

    # ─── Episodes / run ────────────────────────────────────────────────────
    episode_n: int = Field(5, alias="episode.n")
    episode_k: int = Field(1, alias="episode.k")
    episode_kq: int = Field(15, alias="episode.kq")
    run_episodes: int = Field(600, alias="run.episodes", ge=1)
    run_seed: int = Field(0, alias="run.seed", ge=0)
    run_workers: int = Field(DEFAULT_WORKERS, alias="run.workers", ge=1)
    run_record_runtime: bool = Field(False, alias="run.record_runtime")

    # ─── Intensity ─────────────────────────────────────────────────────────
    intensity_subset_size: int = Field(256, alias="intensity.subset_size")
    intensity_subset_seed: int = Field(0, alias="intensity.subset_seed")
    intensity_pairs: Union[int, str] = Field("full", alias="intensity.pairs")
    intensity_lambda_draws: int = Field(1, alias="intensity.lambda_draws")
    intensity_fixed_lambda: Optional[float] = Field(None, alias="intensity.fixed_lambda")
    intensity_policies: Tuple[AugKind, ...] = Field(
        tuple(AugKind), alias="intensity.policies"
    )
    intensity_preset: IntensityPreset = Field(IntensityPreset.DEFAULT, alias="intensity.preset")
    intensity_mix_modes: Tuple[MixMode, ...] = Field((MixMode.WB,), alias="intensity.mix_modes")
    intensity_diversity: bool = Field(False, alias="intensity.diversity")
    intensity_normalize: bool = Field(False, alias="intensity.normalize")

    grid_cap: int = Field(64, alias="grid.cap", ge=1)

    # ─── Validation ────────────────────────────────────────────────────────
    @model_validator(mode="before")
    @classmethod
    def _blank_is_default(cls, data: Any) -> Any:
        if isinstance(data, dict):
            return {k: v for k, v in data.items() if not (v is None or (isinstance(v, str) and v.strip() == ""))}
        return data

    @field_validator("pretrain_milestones", "intensity_policies", "intensity_mix_modes", mode="before")
    @classmethod
    def _comma_lists(cls, value: Any) -> Any:
        return _as_list(value)

    @field_validator("ft_mode")
    @classmethod
    def _known_mode(cls, value: str) -> str:
        return str(UpdateMode.parse(value))

    @field_validator("ft_batch_size", "intensity_pairs", mode="before")
    @classmethod
    def _int_or_word(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip().lstrip("-").isdigit():
            return int(value)
        return value

    @field_validator("tta_preset")
    @classmethod
    def _tta_preset(cls, value: str) -> str:
        if value != "match":
            IntensityPreset(value)
        return value

    @model_validator(mode="after")
    def _check_words(self) -> "RunConfig":
        if isinstance(self.ft_batch_size, str) and self.ft_batch_size != "auto":
            raise ValueError(f"ft.batch_size must be an integer or 'auto', got '{self.ft_batch_size}'")
        if isinstance(self.intensity_pairs, str) and self.intensity_pairs != "full":
            raise ValueError(f"intensity.pairs must be an integer or 'full', got '{self.intensity_pairs}'")
        if self.tta_space not in ("probs", "logits"):
            raise ValueError(f"tta.space must be 'probs' or 'logits', got '{self.tta_space}'")
        if (self.sched_start is None) != (self.sched_end is None):
            raise ValueError("sched.start and sched.end must be set together")
        return self

    @model_validator(mode="after")
    def _check_derived(self) -> "RunConfig":
        # cross-key limits live on the derived models; build them all up front
        try:
            self.network_config()
            self.pretrain_config()
            self.episode_spec()
            self.intensity_config()
            self.tta_config()
            ft = self.finetune_config()
            freeze_mask(ft.mode.stage_for_epoch(1), self.model_blocks)
        except ValidationError as e:
            raise ValueError("; ".join(err["msg"] for err in e.errors())) from None
        except InvalidUpdateMode as e:
            raise ValueError(f"ft.mode: {e}") from None
        return self

    # ─── Derived configs ───────────────────────────────────────────────────
    def network_config(self) -> NetworkConfig:
        return NetworkConfig(
            stem_channels=self.model_stem_channels, blocks=self.model_blocks, input_size=self.model_input_size
        )

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            epochs=self.pretrain_epochs,
            batch_size=self.pretrain_batch_size,
            lr=self.pretrain_lr,
            momentum=self.pretrain_momentum,
            weight_decay=self.pretrain_weight_decay,
            milestones=self.pretrain_milestones,
            preset=self.pretrain_preset,
        )

    def episode_spec(self) -> EpisodeSpec:
        return EpisodeSpec(n=self.episode_n, k=self.episode_k, k_q=self.episode_kq)

    @property
    def batch_size(self) -> int:
        if self.ft_batch_size == "auto":
            return 16 if self.episode_k >= 20 else 4
        return int(self.ft_batch_size)

    def schedule(self) -> Optional[Schedule]:
        if self.sched_start is not None:
            return Schedule(start=self.sched_start, end=self.sched_end)
        if self.da_kind != AugKind.NONE and self.ft_epochs > 0:
            return Schedule(start=1, end=self.ft_epochs)
        return None

    def da_policy(self) -> AugPolicy:
        return AugPolicy.build(self.da_kind, self.da_preset, self.da_mix_mode)

    def finetune_config(self) -> FineTuneConfig:
        return FineTuneConfig(
            mode=UpdateMode.parse(self.ft_mode),
            lr=self.ft_lr,
            momentum=self.ft_momentum,
            weight_decay=self.ft_weight_decay,
            epochs=self.ft_epochs,
            batch_size=self.batch_size,
            da_policy=self.da_policy(),
            schedule=self.schedule(),
            per_epoch_params=self.aug_per_epoch_params,
        )

    def tta_config(self) -> Optional[TtaConfig]:
        if not self.tta_enabled:
            return None
        preset = self.da_preset if self.tta_preset == "match" else IntensityPreset(self.tta_preset)
        return TtaConfig(policy=AugPolicy.build(self.tta_kind, preset), v=self.tta_v, space=self.tta_space)

    def intensity_config(self) -> IntensityConfig:
        return IntensityConfig(
            subset_size=self.intensity_subset_size,
            subset_seed=self.intensity_subset_seed,
            pairs=None if self.intensity_pairs == "full" else self.intensity_pairs,
            lambda_draws=self.intensity_lambda_draws,
            normalize=self.intensity_normalize,
            fixed_lambda=self.intensity_fixed_lambda,
        )

    def echo(self) -> Dict[str, Any]:
        """
        Every key by its dotted name; feeding this back reproduces the artifacts.
        Execution-only keys (worker count) are left out so they never change an output byte.
        """
        dumped = self.model_dump(by_alias=True, mode="json")
        return {k: v for k, v in dumped.items() if k not in EXECUTION_KEYS}

    def require_files(self, *keys: str) -> None:
        for key in keys:
            value = getattr(self, key.replace(".", "_"))
            if not value:
                raise ConfigError(f"{key} is required for this command")
            if not Path(value).is_file():
                raise ConfigError(f"{key}: file not found: {value}")


# ─── Loading ───────────────────────────────────────────────────────────────
def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    if not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    values = dotenv_values(path, interpolate=False)
    return {k: ("" if v is None else v) for k, v in values.items()}


def parse_overrides(tokens: Sequence[str]) -> Dict[str, str]:
    """`--key value`, `--key=value` and `key=value` tokens, later ones winning."""
    out: Dict[str, str] = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if token.startswith("--"):
            body = token[2:]
            if "=" in body:
                key, value = body.split("=", 1)
            elif i + 1 < len(tokens):
                key, value = body, tokens[i + 1]
                i += 1
            else:
                raise ConfigError(f"override --{body} has no value")
        elif "=" in token:
            key, value = token.split("=", 1)
        else:
            raise ConfigError(f"cannot parse override '{token}' (use key=value or --key value)")
        out[key.strip()] = value.strip()
        i += 1
    return out


def build_run_config(raw: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid run config: {problems}") from e


def load_raw(path: Optional[Union[str, Path]], overrides: Sequence[str] = ()) -> Dict[str, str]:
    raw = read_config_file(path) if path else {}
    raw.update(parse_overrides(overrides))
    return raw


def load_run_config(path: Optional[Union[str, Path]], overrides: Sequence[str] = ()) -> RunConfig:
    return build_run_config(load_raw(path, overrides))


# ─── Grids ─────────────────────────────────────────────────────────────────
def _slug_part(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", text).strip("-")


def expand_grid(raw: Dict[str, str]) -> List[Tuple[str, Dict[str, str]]]:
    """
    Cartesian product of every comma-valued key (list-typed keys excepted).
    Returns (slug, raw config) per combination; the cap is checked before any
    config is built.
    """
    axes: List[Tuple[str, List[str]]] = []
    for key, value in raw.items():
        if key in LIST_KEYS or not isinstance(value, str):
            continue
        parts = split_list(value)
        if len(parts) < 2:
            continue
        if any(p == "" for p in parts):
            raise ConfigError(f"grid key {key} has an empty value in '{value}'")
        axes.append((key, parts))
    if not axes:
        raise ConfigError("grid needs at least one comma-separated key to sweep")

    size = 1
    for _, values in axes:
        size *= len(values)
    cap = int(raw.get("grid.cap") or 64)
    if size > cap:
        raise GridTooLarge(f"grid has {size} combinations, cap is {cap} (raise grid.cap)")

    runs = []
    for combo in itertools.product(*(values for _, values in axes)):
        sub = dict(raw)
        parts = []
        for (key, _), value in zip(axes, combo):
            sub[key] = value
            parts.append(f"{_slug_part(key)}-{_slug_part(value)}")
        runs.append(("_".join(parts), sub))
    return runs
