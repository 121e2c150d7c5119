"""Provides the models that describe a pretraining run.

A run is fully described by a `RunConfig`, which is stored next to every
checkpoint as `run-config.json`. Nested models map onto the dotted keys used
on the command line, e.g. `proj.d_intra` or `loss.tau`.
"""

import json
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from mmpoint.core import N_VIEWS
from mmpoint.errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EncoderConfig(_Strict):
    k_nn: int = Field(16, ge=1)
    point_widths: tuple[int, ...] = (64, 64, 128)
    image_widths: tuple[int, ...] = (32, 64, 128, 256)
    image_channels: int = Field(3, ge=1)
    resolution: int = 64
    norm_groups: int = Field(8, ge=0)

    @property
    def point_dim(self) -> int:
        """Return D, the width of the global point feature (max + mean pooling)."""
        return 2 * self.point_widths[-1]

    @property
    def image_dim(self) -> int:
        """Return C, the width of the image feature."""
        return self.image_widths[-1]


def default_cross_dims(m: int) -> list[int]:
    """Return the default per-level cross-modal dims, 384 growing by 64 per level."""
    return [384 + 64 * j for j in range(m)]


class ProjectionConfig(_Strict):
    d_intra: int = Field(256, ge=1)
    d_cross: list[int] = Field(default_factory=lambda: default_cross_dims(4))

    @property
    def m(self) -> int:
        """Return the number of cross-modal levels."""
        return len(self.d_cross)


def validate_config(cfg: ProjectionConfig):
    """Check the ordering constraints on projection dims.

    Cross-modal spaces must be wider than the intra-modal space, and their
    widths must not shrink as the level (and augmentation strength) grows.

    Raises:
        ConfigError: listing every failing constraint.
    """
    problems = []
    if not cfg.d_cross:
        problems.append("d_cross is empty")
    low = [j + 1 for j, d in enumerate(cfg.d_cross) if d <= cfg.d_intra]
    if low:
        problems.append(f"cross <= intra at level(s) {low} (d_intra={cfg.d_intra})")
    drops = [j + 1 for j in range(1, len(cfg.d_cross)) if cfg.d_cross[j] < cfg.d_cross[j - 1]]
    if drops:
        problems.append(f"non-monotone d_cross {cfg.d_cross} at level(s) {drops}")
    if problems:
        raise ConfigError(problems)


class LossConfig(_Strict):
    tau: float = Field(0.1, gt=0)
    lambda_intra: float = Field(1.0, ge=0)
    lambda_inter: float = Field(1.0, ge=0)


class PointAugmentConfig(_Strict):
    rotation_deg: float = Field(180.0, ge=0, le=180)
    scale_low: float = Field(0.8, gt=0)
    scale_high: float = Field(1.25, gt=0)
    jitter_sigma: float = Field(0.01, ge=0)
    jitter_clip: float = Field(0.05, ge=0)
    dropout_max: float = Field(0.1, ge=0, lt=1)

    @classmethod
    def identity(cls) -> "PointAugmentConfig":
        """Return a configuration under which augmentation is the identity."""
        return cls(
            rotation_deg=0, scale_low=1, scale_high=1, jitter_sigma=0, jitter_clip=0, dropout_max=0
        )

    @classmethod
    def rotation_only(cls) -> "PointAugmentConfig":
        """Return a configuration that only rotates about the vertical axis."""
        return cls.identity().model_copy(update={"rotation_deg": 180.0})


class Toggles(_Strict):
    multi_mlp: bool = True
    decoupled_intra: bool = True
    multi_level_aug: bool = True
    per_view_aug: bool = False

    @property
    def aug_strategy(self) -> str:
        """Return one of `multi-level`, `multi` or `unified`."""
        if self.multi_level_aug:
            return "multi-level"
        return "multi" if self.per_view_aug else "unified"


class EvalConfig(_Strict):
    c_reg: float = Field(1.0, gt=0)
    n_way: int = Field(5, ge=2)
    k_shot: int = Field(10, ge=1)
    n_query: int = Field(20, ge=1)
    runs: int = Field(10, ge=1)


class RunConfig(_Strict):
    data: Optional[str] = None
    m: int = Field(4, ge=1, le=N_VIEWS)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(30, ge=1)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    cosine_schedule: bool = False
    prefetch: int = Field(2, ge=0)
    seed: int = 0
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    proj: Optional[ProjectionConfig] = None
    loss: LossConfig = Field(default_factory=LossConfig)
    point_aug: PointAugmentConfig = Field(default_factory=PointAugmentConfig)
    toggles: Toggles = Field(default_factory=Toggles)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _check_run(self) -> "RunConfig":
        from mmpoint.augment import default_catalog

        if self.proj is None:
            self.proj = ProjectionConfig(d_cross=default_cross_dims(self.m))

        problems = []
        if self.proj.m != self.m:
            problems.append(f"proj.d_cross has {self.proj.m} entries but m={self.m}")
        try:
            validate_config(self.proj)
        except ConfigError as e:
            problems.extend(e.violations)

        available = len(default_catalog())
        needed = self.m + 1 if self.toggles.aug_strategy != "unified" else 2
        if available < needed:
            problems.append(
                f"augmentation catalog has {available} entries, "
                f"{self.toggles.aug_strategy} augmentation with m={self.m} needs {needed}"
            )
        if self.point_aug.scale_low > self.point_aug.scale_high:
            problems.append("point_aug.scale_low exceeds point_aug.scale_high")
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def projection(self) -> ProjectionConfig:
        """Return the (always populated) projection config."""
        assert self.proj is not None
        return self.proj

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        """Read a run config from a JSON file."""
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError([f"cannot read {path}: {e}"]) from e
        return cls.parse(data)

    @classmethod
    def parse(cls, data: dict[str, Any]) -> "RunConfig":
        """Validate a raw mapping, turning pydantic errors into a ConfigError."""
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            problems = []
            for err in e.errors():
                loc = ".".join(str(p) for p in err["loc"])
                problems.append(f"{loc}: {err['msg']}" if loc else err["msg"])
            raise ConfigError(problems) from e

    def dump(self, path: str | Path):
        """Write the run config as JSON."""
        Path(path).write_text(self.model_dump_json(indent=2) + "\n")

    def with_overrides(self, **dotted: Any) -> "RunConfig":
        """Return a new config with dotted keys replaced, e.g. `loss__tau=0.2` or `m=3`.

        Nested keys use a double underscore in place of the dot. Changing `m`
        without also passing `proj__d_cross` resets the cross dims to the
        defaults for the new `m`.
        """
        data = self.model_dump()
        for key, value in dotted.items():
            parts = key.split("__")
            node = data
            for p in parts[:-1]:
                if node.get(p) is None:
                    node[p] = {}
                node = node[p]
            node[parts[-1]] = value
        if "m" in dotted and "proj__d_cross" not in dotted and data.get("proj"):
            data["proj"]["d_cross"] = default_cross_dims(dotted["m"])
        return RunConfig.parse(data)
