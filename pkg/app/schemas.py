import re
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Range = Tuple[float, float]


# ─── Augmentation ──────────────────────────────────────────────────────────
class AugKind(str, Enum):
    NONE = "None"
    HFLIP = "HFlip"
    RCROP = "RCrop"
    CJITTER = "CJitter"
    BASE_AUG = "BaseAug"
    MIXUP = "MixUp"
    CUTMIX = "CutMix"

    @property
    def is_mixing(self) -> bool:
        return self in (AugKind.MIXUP, AugKind.CUTMIX)


class MixMode(str, Enum):
    WB = "WB"  # unconstrained pairing
    W = "W"  # within-class only
    B = "B"  # between-class only


class IntensityPreset(str, Enum):
    WEAKER = "Weaker"
    WEAK = "Weak"
    DEFAULT = "Default"
    STRONG = "Strong"
    STRONGER = "Stronger"


# (crop scale, jitter range) per designed intensity
PRESET_RANGES: Dict[IntensityPreset, Tuple[Range, Range]] = {
    IntensityPreset.WEAKER: ((0.9, 1.0), (0.8, 1.2)),
    IntensityPreset.WEAK: ((0.6, 1.0), (0.6, 1.4)),
    IntensityPreset.DEFAULT: ((0.08, 1.0), (0.6, 1.4)),
    IntensityPreset.STRONG: ((0.3, 1.0), (0.4, 1.6)),
    IntensityPreset.STRONGER: ((0.01, 1.0), (0.2, 1.8)),
}

CROP_RATIO: Range = (0.75, 1.33)


class AugPolicy(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: AugKind = AugKind.NONE
    preset: IntensityPreset = IntensityPreset.DEFAULT
    crop_scale: Range = PRESET_RANGES[IntensityPreset.DEFAULT][0]
    crop_ratio: Range = CROP_RATIO
    jitter_range: Range = PRESET_RANGES[IntensityPreset.DEFAULT][1]
    hue: float = 0.0
    flip_prob: float = 0.5
    mix_mode: MixMode = MixMode.WB

    @model_validator(mode="after")
    def _check_ranges(self) -> "AugPolicy":
        for name in ("crop_scale", "crop_ratio", "jitter_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} min {lo} exceeds max {hi}")
        lo, hi = self.crop_scale
        if lo <= 0 or hi > 1:
            raise ValueError(f"crop_scale must lie in (0, 1], got {self.crop_scale}")
        if self.crop_ratio[0] <= 0:
            raise ValueError("crop_ratio must be positive")
        if self.jitter_range[0] < 0:
            raise ValueError("jitter_range must be non-negative")
        if self.hue != 0.0:
            raise ValueError("hue jitter is not supported; hue stays 0")
        return self

    @classmethod
    def build(
        cls,
        kind: AugKind,
        preset: IntensityPreset = IntensityPreset.DEFAULT,
        mix_mode: MixMode = MixMode.WB,
    ) -> "AugPolicy":
        scale, jitter = PRESET_RANGES[IntensityPreset(preset)]
        return cls(
            kind=AugKind(kind),
            preset=IntensityPreset(preset),
            crop_scale=scale,
            jitter_range=jitter,
            mix_mode=MixMode(mix_mode),
        )

    @property
    def label(self) -> str:
        return self.kind.value


# ─── Network / optimisation ────────────────────────────────────────────────
class NetworkConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    in_channels: int = Field(3, ge=1)
    stem_channels: int = Field(16, ge=1)
    blocks: int = Field(3, ge=1)
    input_size: int = Field(32, ge=2)
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @property
    def feature_dim(self) -> int:
        return self.stem_channels * 2**self.blocks

    @model_validator(mode="after")
    def _check_pooling(self) -> "NetworkConfig":
        if self.input_size % 2**self.blocks:
            raise ValueError(
                f"input_size {self.input_size} must be divisible by 2**blocks ({2**self.blocks})"
            )
        return self


_MODE_RE = re.compile(
    r"^\s*(?:(?P<simple>LP|FT)|Partial\((?P<depth>\d+)\)"
    r"|TwoStage\((?P<first>LP|FT),\s*(?P<second>LP|FT),\s*(?P<switch>\d+)\))\s*$"
)


class UpdateMode(BaseModel):
    """LP | FT | Partial(d) | TwoStage(first, second, switch_epoch)."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["LP", "FT", "Partial", "TwoStage"] = "LP"
    depth: Optional[int] = None
    first: Optional[Literal["LP", "FT"]] = None
    second: Optional[Literal["LP", "FT"]] = None
    switch_epoch: Optional[int] = None

    @model_validator(mode="after")
    def _check_fields(self) -> "UpdateMode":
        if self.kind == "Partial" and self.depth is None:
            raise ValueError("Partial mode needs a depth")
        if self.kind == "TwoStage":
            if None in (self.first, self.second, self.switch_epoch):
                raise ValueError("TwoStage mode needs first, second and switch_epoch")
            if self.first == self.second:
                raise ValueError("TwoStage stages must differ")
        return self

    @classmethod
    def parse(cls, text: str) -> "UpdateMode":
        m = _MODE_RE.match(text)
        if not m:
            raise ValueError(
                f"unknown update mode '{text}' (LP, FT, Partial(d) or TwoStage(LP,FT,50))"
            )
        if m["simple"]:
            return cls(kind=m["simple"])
        if m["depth"] is not None:
            return cls(kind="Partial", depth=int(m["depth"]))
        return cls(
            kind="TwoStage",
            first=m["first"],
            second=m["second"],
            switch_epoch=int(m["switch"]),
        )

    def stage_for_epoch(self, epoch: int) -> "UpdateMode":
        """The single-stage mode in force at a 1-indexed epoch."""
        if self.kind != "TwoStage":
            return self
        return UpdateMode(kind=self.first if epoch <= self.switch_epoch else self.second)

    @property
    def trains_extractor(self) -> bool:
        if self.kind == "LP":
            return False
        if self.kind == "Partial":
            return self.depth > 0
        if self.kind == "TwoStage":
            return "FT" in (self.first, self.second)
        return True

    def __str__(self) -> str:
        if self.kind == "Partial":
            return f"Partial({self.depth})"
        if self.kind == "TwoStage":
            return f"TwoStage({self.first},{self.second},{self.switch_epoch})"
        return self.kind


class Schedule(BaseModel):
    model_config = ConfigDict(frozen=True)

    start: int = Field(..., ge=1)
    end: int = Field(..., ge=1)

    @model_validator(mode="after")
    def _check_order(self) -> "Schedule":
        if self.start > self.end:
            raise ValueError(f"schedule start {self.start} is after end {self.end}")
        return self


class FineTuneConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: UpdateMode = UpdateMode()
    lr: float = Field(1e-2, ge=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(1e-3, ge=0)
    epochs: int = Field(100, ge=0)
    batch_size: int = Field(4, ge=1)
    da_policy: AugPolicy = AugPolicy()
    schedule: Optional[Schedule] = None
    per_epoch_params: bool = False

    @model_validator(mode="after")
    def _check_against_epochs(self) -> "FineTuneConfig":
        if self.schedule is not None and self.schedule.end > self.epochs:
            raise ValueError(
                f"schedule end {self.schedule.end} exceeds {self.epochs} epochs"
            )
        if self.mode.kind == "TwoStage" and not 0 < self.mode.switch_epoch < self.epochs:
            raise ValueError(
                f"switch epoch {self.mode.switch_epoch} must lie inside (0, {self.epochs})"
            )
        return self


class PretrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(60, ge=0)
    batch_size: int = Field(64, ge=2)
    lr: float = Field(1e-1, ge=0)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: Tuple[float, ...] = (0.6, 0.8)
    preset: IntensityPreset = IntensityPreset.DEFAULT

    def lr_at(self, epoch: int) -> float:
        """Step-decayed learning rate for a 1-indexed epoch."""
        drops = sum(1 for m in self.milestones if epoch > round(m * self.epochs))
        return self.lr * 0.1**drops


class TrainTrace(BaseModel):
    losses: List[float] = []
    accuracies: List[float] = []

    @property
    def epochs(self) -> int:
        return len(self.losses)


# ─── Episodes / data ───────────────────────────────────────────────────────
class EpisodeSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    n: int = Field(5, ge=2)
    k: int = Field(1, ge=1)
    k_q: int = Field(15, ge=1)


class SynthConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "custom"
    n_classes: int = Field(20, ge=1)
    per_class: int = Field(100, ge=1)
    image_size: int = Field(32, ge=2)
    freq_band: Range = (1.0, 4.0)
    components: int = Field(4, ge=1)
    color_scale: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    channel_order: Tuple[int, int, int] = (0, 1, 2)
    noise_sigma: float = Field(0.05, ge=0)
    translate_radius: int = Field(1, ge=0)
    brightness: Range = (0.9, 1.1)

    @model_validator(mode="after")
    def _check(self) -> "SynthConfig":
        if not self.freq_band[0] < self.freq_band[1]:
            raise ValueError(f"frequency band must satisfy f_lo < f_hi, got {self.freq_band}")
        if sorted(self.channel_order) != [0, 1, 2]:
            raise ValueError(f"channel_order must permute (0, 1, 2), got {self.channel_order}")
        if self.brightness[0] > self.brightness[1]:
            raise ValueError(f"brightness range inverted: {self.brightness}")
        return self


# ─── Intensity ─────────────────────────────────────────────────────────────
class IntensityConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    subset_size: int = Field(256, ge=1)
    subset_seed: int = 0
    pairs: Optional[int] = Field(None, ge=1)  # None = full |S|^2 enumeration
    lambda_draws: int = Field(1, ge=1)
    normalize: bool = False
    fixed_lambda: Optional[float] = Field(None, ge=0, le=1)


class IntensityReport(BaseModel):
    policy: str
    preset: str
    mode: str
    value: float = Field(..., ge=0)
    n_terms: int
    extractor_id: str
    config_hash: str
    seed: int
    diversity: Optional[float] = None


# ─── Evaluation ────────────────────────────────────────────────────────────
class TtaConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    policy: AugPolicy = AugPolicy.build(AugKind.BASE_AUG)
    v: int = Field(32, ge=1)
    space: Literal["probs", "logits"] = "probs"

    @field_validator("policy")
    @classmethod
    def _single_aug_only(cls, policy: AugPolicy) -> AugPolicy:
        if policy.kind.is_mixing:
            raise ValueError("TTA needs a single-image augmentation, not a mixing one")
        return policy


class EpisodeResult(BaseModel):
    episode_id: int
    acc_last: float = Field(..., ge=0, le=1)
    acc_best: float = Field(..., ge=0, le=1)
    best_epoch: int
    v_measure_pre: float
    v_measure_post: float
    expected_gain: float
    layer_diffs: Dict[str, float]
    config_hash: str

    @model_validator(mode="after")
    def _best_dominates_last(self) -> "EpisodeResult":
        if self.acc_best < self.acc_last:
            raise ValueError("acc_best must be >= acc_last")
        return self


class Report(BaseModel):
    episodes: int
    mean: float
    ci95: float = Field(..., ge=0)
    rows: List[EpisodeResult]
    extras: Dict[str, Any] = {}


# ─── HTTP job surface ──────────────────────────────────────────────────────
class RunRequest(BaseModel):
    config: Dict[str, Any]


class RunResponse(BaseModel):
    job_id: str


class RunStatusResponse(BaseModel):
    job_id: str
    status: str
    total: int
    processed: int
    error: Optional[str]
    summary: Optional[Dict[str, Any]] = None
