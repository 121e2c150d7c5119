"""Point-cloud and multi-level 2D view augmentation.

Point clouds get two independent random variants. Views get incremental
pipelines: with a catalog [t0, t1, ..., tm], the pipeline at level i is

    T_i = Combine{t0, t1, ..., ti}

so every pipeline is a prefix of the next one. The resized crop in t0 also
tightens with the level: its scale floor moves linearly from 0.8 at level 1
to 0.2 at level m.

Typical usage:

    from mmpoint.augment import apply_level, augment_point_cloud, build_pipelines

    p1, p2 = augment_point_cloud(cloud, rng)
    pipelines = build_pipelines(4)
    v = apply_level(view, pipelines[2], rng)
"""

import functools
import math
from typing import Literal

import numpy as np
import torch
import torchvision.transforms.functional as TF
from pydantic import BaseModel, ConfigDict, Field

from mmpoint.config import PointAugmentConfig
from mmpoint.core import PointCloud, SeedTree, ViewImage
from mmpoint.errors import ConfigError
from mmpoint.shapegen import KINDS, CameraRig, generate_object, render_points, sample_spec

MIN_KEPT_POINTS = 64
MAX_REDRAWS = 10
ERASE_ASPECT = (0.3, 3.3)
PROBE_SEED = 20240101

Kind = Literal[
    "resized-crop",
    "horizontal-flip",
    "color-jitter",
    "gaussian-blur",
    "gaussian-noise",
    "random-erase",
    "grayscale-mix",
]
Strategy = Literal["multi-level", "multi", "unified"]


# ---------------------------------------------------------------------------
# Point clouds


def _yaw_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _dropout(points: np.ndarray, rng: np.random.Generator, max_ratio: float) -> np.ndarray:
    n = points.shape[0]
    for _ in range(MAX_REDRAWS):
        ratio = rng.uniform(0.0, max_ratio)
        drop = rng.uniform(size=n) < ratio
        if not drop.any():
            return points
        if drop.all() or n - int(drop.sum()) < min(MIN_KEPT_POINTS, n):
            continue
        out = points.copy()
        out[drop] = points[np.flatnonzero(~drop)[0]]
        return out
    return points


def _augment_once(
    points: np.ndarray, rng: np.random.Generator, cfg: PointAugmentConfig
) -> np.ndarray:
    theta = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    scale = rng.uniform(cfg.scale_low, cfg.scale_high, size=3)
    jitter = np.clip(
        rng.normal(0.0, cfg.jitter_sigma, size=points.shape), -cfg.jitter_clip, cfg.jitter_clip
    )
    out = (points @ _yaw_matrix(theta).T) * scale + jitter
    if cfg.dropout_max > 0:
        out = _dropout(out, rng, cfg.dropout_max)
    return out


def augment_point_cloud(
    cloud: PointCloud, stream: np.random.Generator, config: PointAugmentConfig | None = None
) -> tuple[PointCloud, PointCloud]:
    """Return two independently augmented variants of a cloud.

    Each variant is rotated about the vertical axis, scaled anisotropically,
    jittered (clipped) and has a random fraction of points dropped. Dropped
    points are replaced by a copy of the first kept point so n is unchanged.

    Args:
        cloud:  A normalized point cloud.
        stream: The random stream to draw from.
        config: (Optional) Augmentation strengths; defaults to `PointAugmentConfig()`.
    """
    cfg = config or PointAugmentConfig()
    first = _augment_once(cloud.points, stream, cfg)
    second = _augment_once(cloud.points, stream, cfg)
    return cloud.with_points(first), cloud.with_points(second)


# ---------------------------------------------------------------------------
# Crops


class CropQuaternion(BaseModel):
    """A crop rectangle given by its centre (x, y) and its size (h, w), in pixels."""

    model_config = ConfigDict(frozen=True)

    x: float
    y: float
    h: int
    w: int

    @property
    def top(self) -> int:
        """Return the first row of the crop."""
        return int(round(self.y - self.h / 2))

    @property
    def left(self) -> int:
        """Return the first column of the crop."""
        return int(round(self.x - self.w / 2))


def sample_crop(
    s_range: tuple[float, float],
    r_range: tuple[float, float],
    size: tuple[int, int],
    stream: np.random.Generator,
) -> CropQuaternion:
    """Draw a crop with area ratio s and aspect ratio r from the given ranges.

    The rectangle has h = round(sqrt(s*H*W/r)) and w = round(sqrt(s*H*W*r)), and
    its centre is uniform over the positions that keep it inside the image. A
    side that does not fit is clamped to [1, H] or [1, W].

    Args:
        s_range: Area ratio bounds, within (0, 1].
        r_range: Aspect ratio (w/h) bounds, within [1/2, 2].
        size:    Image (H, W).
        stream:  The random stream to draw from.
    """
    s_lo, s_hi = s_range
    r_lo, r_hi = r_range
    if not 0 < s_lo <= s_hi <= 1:
        raise ValueError(f"s_range must lie in (0, 1], got {s_range}")
    if not 0.5 <= r_lo <= r_hi <= 2:
        raise ValueError(f"r_range must lie in [1/2, 2], got {r_range}")

    H, W = size
    s = stream.uniform(s_lo, s_hi)
    r = math.exp(stream.uniform(math.log(r_lo), math.log(r_hi)))
    h = min(max(int(round(math.sqrt(s * H * W / r))), 1), H)
    w = min(max(int(round(math.sqrt(s * H * W * r))), 1), W)
    top = int(stream.integers(0, H - h + 1))
    left = int(stream.integers(0, W - w + 1))
    return CropQuaternion(x=left + w / 2, y=top + h / 2, h=h, w=w)


# ---------------------------------------------------------------------------
# 2D transforms and pipelines


_NEUTRAL: dict[str, dict[str, float]] = {
    "resized-crop": {
        "scale_max": 1.0,
        "scale_min_first": 1.0,
        "scale_min_last": 1.0,
        "ratio_min": 1.0,
        "ratio_max": 1.0,
    },
    "horizontal-flip": {"p": 0.0},
    "color-jitter": {"brightness": 0.0, "contrast": 0.0},
    "gaussian-blur": {"sigma_min": 0.0, "sigma_max": 0.0},
    "gaussian-noise": {"sigma_min": 0.0, "sigma_max": 0.0},
    "random-erase": {"p": 0.0},
    "grayscale-mix": {"alpha_max": 0.0},
}


class Transform2D(BaseModel):
    """One view transform with its parameters and the catalog level that introduced it."""

    model_config = ConfigDict(frozen=True)

    kind: Kind
    params: dict[str, float] = Field(default_factory=dict)
    level_introduced: int = Field(0, ge=0)

    def serialize(self) -> str:
        """Return a stable text form, e.g. `color-jitter@1(brightness=0.4,contrast=0.4)`."""
        args = ",".join(f"{k}={v:g}" for k, v in sorted(self.params.items()))
        return f"{self.kind}@{self.level_introduced}({args})"

    def zeroed(self) -> "Transform2D":
        """Return the same transform with every strength set to the identity."""
        return self.model_copy(update={"params": {**self.params, **_NEUTRAL[self.kind]}})


CatalogEntry = tuple[Transform2D, ...]


def default_catalog() -> list[CatalogEntry]:
    """Return the default ordered catalog t0..t6."""
    return [
        (
            Transform2D(
                kind="resized-crop",
                params={
                    "scale_max": 1.0,
                    "scale_min_first": 0.8,
                    "scale_min_last": 0.2,
                    "ratio_min": 0.75,
                    "ratio_max": 4 / 3,
                },
            ),
            Transform2D(kind="horizontal-flip", params={"p": 0.5}),
        ),
        (
            Transform2D(
                kind="color-jitter",
                params={"brightness": 0.4, "contrast": 0.4},
                level_introduced=1,
            ),
        ),
        (
            Transform2D(
                kind="gaussian-blur",
                params={"sigma_min": 0.1, "sigma_max": 1.5},
                level_introduced=2,
            ),
        ),
        (
            Transform2D(
                kind="random-erase",
                params={"p": 0.5, "area_min": 0.02, "area_max": 0.15},
                level_introduced=3,
            ),
        ),
        (Transform2D(kind="grayscale-mix", params={"alpha_max": 0.4}, level_introduced=4),),
        (
            Transform2D(
                kind="random-erase",
                params={"p": 0.7, "area_min": 0.05, "area_max": 0.2},
                level_introduced=5,
            ),
        ),
        (
            Transform2D(
                kind="gaussian-noise",
                params={"sigma_min": 0.1, "sigma_max": 0.2},
                level_introduced=6,
            ),
        ),
    ]


class AugmentationPipeline(BaseModel):
    """The ordered transforms applied to the view assigned to one level."""

    model_config = ConfigDict(frozen=True)

    level: int = Field(..., ge=1)
    n_levels: int = Field(..., ge=1)
    transforms: list[Transform2D]
    escalate: bool = True

    @property
    def crop_floor(self) -> float:
        """Return the lower bound of the crop area ratio at this level."""
        crop = next((t for t in self.transforms if t.kind == "resized-crop"), None)
        if crop is None:
            return 1.0
        first = crop.params.get("scale_min_first", 1.0)
        last = crop.params.get("scale_min_last", first)
        if not self.escalate or self.n_levels == 1:
            return first
        return first + (last - first) * (self.level - 1) / (self.n_levels - 1)

    def serialize(self) -> str:
        """Return the transforms' text forms joined in application order."""
        return ";".join(t.serialize() for t in self.transforms)

    def describe(self) -> dict:
        """Return a JSON-friendly record for run manifests."""
        return {
            "level": self.level,
            "crop_floor": self.crop_floor,
            "transforms": self.serialize(),
        }

    def zeroed(self) -> "AugmentationPipeline":
        """Return the pipeline with all strengths at the identity."""
        return self.model_copy(update={"transforms": [t.zeroed() for t in self.transforms]})


def build_pipelines(
    m: int, catalog: list[CatalogEntry] | None = None, *, strategy: Strategy = "multi-level"
) -> list[AugmentationPipeline]:
    """Build the pipelines for levels 1..m.

    Args:
        m:        Number of levels (sampled views).
        catalog:  (Optional) Ordered entries [t0, t1, ...]; defaults to `default_catalog()`.
        strategy: (Optional) `multi-level` for T_i = Combine{t0..ti}; `multi` for
                  Combine{t0, ti} at a fixed crop strength; `unified` for T_1 on every view.
    """
    catalog = default_catalog() if catalog is None else catalog
    if m < 1:
        raise ConfigError([f"m must be at least 1, got {m}"])
    needed = 2 if strategy == "unified" else m + 1
    if len(catalog) < needed:
        raise ConfigError(
            [
                f"{strategy} augmentation with m={m} needs {needed} catalog entries, "
                f"got {len(catalog)}"
            ]
        )

    def flat(entries: list[CatalogEntry]) -> list[Transform2D]:
        return [t for entry in entries for t in entry]

    if strategy == "multi-level":
        return [
            AugmentationPipeline(level=i, n_levels=m, transforms=flat(catalog[: i + 1]))
            for i in range(1, m + 1)
        ]
    if strategy == "multi":
        return [
            AugmentationPipeline(
                level=i, n_levels=m, transforms=flat([catalog[0], catalog[i]]), escalate=False
            )
            for i in range(1, m + 1)
        ]
    unified = AugmentationPipeline(
        level=1, n_levels=m, transforms=flat(catalog[:2]), escalate=False
    )
    return [unified] * m


def _apply(
    img: torch.Tensor, t: Transform2D, pipeline: AugmentationPipeline, rng: np.random.Generator
) -> torch.Tensor:
    p = t.params
    H, W = img.shape[-2:]
    if t.kind == "resized-crop":
        q = sample_crop(
            (pipeline.crop_floor, p["scale_max"]), (p["ratio_min"], p["ratio_max"]), (H, W), rng
        )
        if (q.h, q.w) != (H, W):
            img = TF.resized_crop(img, q.top, q.left, q.h, q.w, [H, W], antialias=True)
    elif t.kind == "horizontal-flip":
        if rng.uniform() < p["p"]:
            img = TF.hflip(img)
    elif t.kind == "color-jitter":
        b = rng.uniform(1 - p["brightness"], 1 + p["brightness"])
        c = rng.uniform(1 - p["contrast"], 1 + p["contrast"])
        if b != 1.0:
            img = TF.adjust_brightness(img, b)
        if c != 1.0:
            img = TF.adjust_contrast(img, c)
    elif t.kind == "gaussian-blur":
        sigma = rng.uniform(p["sigma_min"], p["sigma_max"])
        if sigma > 0:
            k = 2 * math.ceil(2 * sigma) + 1
            img = TF.gaussian_blur(img, [k, k], [sigma, sigma])
    elif t.kind == "gaussian-noise":
        sigma = rng.uniform(p["sigma_min"], p["sigma_max"])
        if sigma > 0:
            noise = rng.normal(0.0, sigma, size=tuple(img.shape)).astype(np.float32)
            img = img + torch.from_numpy(noise).to(img.dtype)
    elif t.kind == "random-erase":
        if rng.uniform() < p["p"]:
            area = rng.uniform(p["area_min"], p["area_max"]) * H * W
            aspect = math.exp(rng.uniform(*np.log(ERASE_ASPECT)))
            eh = int(round(math.sqrt(area / aspect)))
            ew = int(round(math.sqrt(area * aspect)))
            if 0 < eh < H and 0 < ew < W:
                top = int(rng.integers(0, H - eh + 1))
                left = int(rng.integers(0, W - ew + 1))
                value = torch.full((img.shape[0], eh, ew), float(rng.uniform()), dtype=img.dtype)
                img = TF.erase(img, top, left, eh, ew, value)
    elif t.kind == "grayscale-mix":
        alpha = rng.uniform(0.0, p["alpha_max"])
        if alpha > 0:
            img = (1 - alpha) * img + alpha * 0.5
    return img.clamp(0.0, 1.0)


def apply_pipeline(
    img: torch.Tensor, pipeline: AugmentationPipeline, stream: np.random.Generator
) -> torch.Tensor:
    """Apply a pipeline to a (C, H, W) tensor with values in [0, 1].

    Transform k draws from the k-th child spawned from `stream`, so a pipeline
    and its extension see identical draws for the transforms they share.
    """
    for t, rng in zip(pipeline.transforms, stream.spawn(len(pipeline.transforms))):
        img = _apply(img, t, pipeline, rng)
    return img


def apply_level(
    view: ViewImage, pipeline: AugmentationPipeline, stream: np.random.Generator
) -> ViewImage:
    """Apply the pipeline of one level to a view, in catalog order."""
    out = apply_pipeline(view.to_tensor(), pipeline, stream)
    return ViewImage.from_tensor(out, view_index=view.view_index, object_id=view.object_id)


# ---------------------------------------------------------------------------
# Distortion


def probe_set(n: int = 32, resolution: int = 64) -> np.ndarray:
    """Return a fixed set of n rendered views, shape (n, R, R)."""
    return _render_probe(n, resolution).copy()


@functools.lru_cache(maxsize=4)
def _render_probe(n: int, resolution: int) -> np.ndarray:
    tree = SeedTree(PROBE_SEED)
    rig = CameraRig()
    images = []
    for i in range(n):
        rng = tree.stream(f"probe-{i}")
        cloud = generate_object(sample_spec(i % len(KINDS), rng), 512, rng, object_id=i)
        k = int(rng.integers(0, rig.n_views))
        images.append(render_points(cloud.points, rig, resolution, [k])[0])
    return np.stack(images)


def distortion_profile(
    pipelines: list[AugmentationPipeline],
    probe: np.ndarray,
    tree: SeedTree,
    *,
    draws: int = 4,
) -> list[float]:
    """Return D(i) = E||x - T_i(x)||_2 for each pipeline over a probe set.

    Every level sees the same random streams (keyed by image and draw only),
    so levels are compared on common random numbers.
    """
    profile = []
    for pipeline in pipelines:
        total = 0.0
        for n, x in enumerate(probe):
            img = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))[None]
            for d in range(draws):
                out = apply_pipeline(img, pipeline, tree.stream(f"probe-{n}-draw-{d}"))
                total += float(torch.linalg.vector_norm(out - img))
        profile.append(total / (len(probe) * draws))
    return profile


def check_monotone(profile: list[float]):
    """Check that a distortion profile never decreases from one level to the next.

    Raises:
        ConfigError: naming every level whose distortion is below the previous one.
    """
    problems = [
        f"distortion drops at level {j + 1}: {profile[j]:.4f} < {profile[j - 1]:.4f}"
        for j in range(1, len(profile))
        if profile[j] < profile[j - 1]
    ]
    if problems:
        raise ConfigError(problems)
