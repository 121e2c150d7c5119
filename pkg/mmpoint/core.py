"""Shared domain types and the seeded random-stream discipline.

Every stochastic decision in mmpoint is drawn from a named stream of a single
`SeedTree`. Two processes that start from the same root seed and ask for the
same stream names see the same numbers, regardless of the order in which the
streams are requested.

Typical usage:

    from mmpoint.core import SeedTree, normalize_cloud

    tree = SeedTree(1234)
    rng = tree.child("data").stream("object-0")
    cloud = normalize_cloud(rng.normal(size=(1024, 3)), object_id=0)
"""

import hashlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from mmpoint.errors import CloudError

N_VIEWS = 24
MIN_POINTS = 8
MIN_IMAGE_SIDE = 16
UNIT_NORM_TOL = 1e-5

# Stream names used across the package.
DATA = "data"
AUGMENT_3D = "augment-3d"
INIT = "init"
BATCH_ORDER = "batch-order"


def augment_2d_level(level: int) -> str:
    """Return the stream name for the 2D augmentation of a given view level."""
    return f"augment-2d-level-{level}"


@dataclass(frozen=True)
class SeedTree:
    """A tree of named, independent pseudo-random streams rooted at one seed."""

    root_seed: int
    path: tuple[str, ...] = ()

    def child(self, name: str) -> "SeedTree":
        """Return the subtree for `name`."""
        return SeedTree(self.root_seed, (*self.path, name))

    def _sequence(self, name: str) -> np.random.SeedSequence:
        key = "/".join((*self.path, name)).encode()
        words = np.frombuffer(hashlib.sha256(key).digest(), dtype="<u4")
        return np.random.SeedSequence(
            entropy=self.root_seed & 0xFFFFFFFFFFFFFFFF,
            spawn_key=tuple(int(w) for w in words),
        )

    def stream(self, name: str) -> np.random.Generator:
        """Return a fresh generator for the named stream."""
        return np.random.default_rng(self._sequence(name))

    def seed(self, name: str) -> int:
        """Return a 63-bit integer seed for libraries that want one (e.g. torch)."""
        state = self._sequence(name).generate_state(1, dtype=np.uint64)
        return int(state[0] >> np.uint64(1))


def array_digest(*arrays: np.ndarray | torch.Tensor) -> str:
    """Hash the exact bytes and shapes of a sequence of arrays."""
    h = hashlib.sha256()
    for a in arrays:
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        a = np.ascontiguousarray(a)
        h.update(str((a.dtype.str, a.shape)).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class PointCloud(BaseModel):
    """A 3D sample: n x 3 coordinates with an object id and an optional class label."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    points: np.ndarray
    object_id: int
    label: Optional[int] = None

    @field_validator("points", mode="before")
    @classmethod
    def _check_points(cls, v):
        a = np.asarray(v, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != 3:
            raise ValueError(f"points must have shape (n, 3), got {a.shape}")
        if a.shape[0] < MIN_POINTS:
            raise ValueError(f"a point cloud needs at least {MIN_POINTS} points, got {a.shape[0]}")
        if not np.all(np.isfinite(a)):
            raise ValueError("points contain non-finite values")
        return _frozen(a)

    @property
    def n(self) -> int:
        """Return the number of points."""
        return self.points.shape[0]

    def is_normalized(self, tol: float = 1e-6) -> bool:
        """Report whether the cloud is centred with unit maximum norm."""
        centroid = self.points.mean(axis=0)
        radius = np.linalg.norm(self.points, axis=1).max()
        return bool(np.linalg.norm(centroid) < tol and abs(radius - 1.0) < tol)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        """Return a copy with new coordinates and the same identity."""
        return PointCloud(points=points, object_id=self.object_id, label=self.label)


class ViewImage(BaseModel):
    """One rendered 2D view of an object."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pixels: np.ndarray
    view_index: int
    object_id: int

    @field_validator("pixels", mode="before")
    @classmethod
    def _check_pixels(cls, v):
        a = np.asarray(v, dtype=np.float32)
        if a.ndim == 2:
            a = a[..., None]
        if a.ndim != 3:
            raise ValueError(f"pixels must have shape (H, W, C), got {a.shape}")
        if min(a.shape[:2]) < MIN_IMAGE_SIDE:
            raise ValueError(f"images must be at least {MIN_IMAGE_SIDE}px, got {a.shape[:2]}")
        if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
            raise ValueError("pixels must lie in [0, 1]")
        return _frozen(a)

    @field_validator("view_index")
    @classmethod
    def _check_view_index(cls, v: int) -> int:
        if not 0 <= v < N_VIEWS:
            raise ValueError(f"view_index must be in [0, {N_VIEWS}), got {v}")
        return v

    @property
    def resolution(self) -> int:
        """Return the image height (views are square)."""
        return self.pixels.shape[0]

    def to_tensor(self) -> torch.Tensor:
        """Return the pixels as a (C, H, W) float tensor."""
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(2, 0, 1)))

    @classmethod
    def from_tensor(cls, t: torch.Tensor, *, view_index: int, object_id: int) -> "ViewImage":
        """Build a view from a (C, H, W) tensor."""
        pixels = t.detach().clamp(0.0, 1.0).permute(1, 2, 0).cpu().numpy()
        return cls(pixels=pixels, view_index=view_index, object_id=object_id)


class ViewSet(BaseModel):
    """The rendered views of one object."""

    model_config = ConfigDict(frozen=True)

    object_id: int
    views: list[ViewImage]

    @model_validator(mode="after")
    def _check_views(self) -> "ViewSet":
        if not 1 <= len(self.views) <= N_VIEWS:
            raise ValueError(f"a view set holds 1..{N_VIEWS} views, got {len(self.views)}")
        indices = [v.view_index for v in self.views]
        if len(set(indices)) != len(indices):
            raise ValueError(f"duplicate view indices: {indices}")
        return self

    def __len__(self) -> int:  # noqa: D105
        return len(self.views)

    def subsample(self, positions: list[int]) -> "ViewSet":
        """Return the views at the given positions, in that order."""
        return ViewSet(object_id=self.object_id, views=[self.views[p] for p in positions])


def space_tag(level: int | None) -> str:
    """Return the tag of the intra space (None) or of the cross space at a level."""
    return "intra" if level is None else f"cross-level-{level}"


class EmbeddingBatch(BaseModel):
    """A batch of unit-norm embeddings that live in one projection space."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    rows: torch.Tensor
    space_tag: str

    @model_validator(mode="after")
    def _check_rows(self) -> "EmbeddingBatch":
        if self.rows.ndim != 2:
            raise ValueError(f"rows must be a B x d matrix, got shape {tuple(self.rows.shape)}")
        check_unit_rows(self.rows)
        return self

    @property
    def dim(self) -> int:
        """Return the embedding dimension."""
        return self.rows.shape[1]

    def check_dim(self, registry: dict[str, int]):
        """Verify the dimension against the dims registered for each space tag."""
        expected = registry.get(self.space_tag)
        if expected is None:
            raise ValueError(f"unknown space tag {self.space_tag!r}")
        if expected != self.dim:
            raise ValueError(f"{self.space_tag} expects dim {expected}, got {self.dim}")


def check_unit_rows(rows: torch.Tensor, tol: float = UNIT_NORM_TOL):
    """Raise ValueError unless every row has unit Euclidean norm within `tol`."""
    with torch.no_grad():
        norms = rows.detach().norm(dim=-1)
        worst = (norms - 1.0).abs().max().item() if norms.numel() else 0.0
    if worst > tol:
        raise ValueError(f"embedding rows are not unit-norm (max deviation {worst:.2e})")


def normalize_cloud(
    raw: np.ndarray, *, object_id: int = 0, label: int | None = None
) -> PointCloud:
    """Centre a raw cloud on its centroid and scale it to unit maximum norm.

    Point order is preserved.

    Args:
        raw:       An n x 3 array of coordinates, n >= 8.
        object_id: (Optional) Identifier carried by the returned cloud.
        label:     (Optional) Class label carried by the returned cloud.
    """
    a = np.asarray(raw, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise CloudError(f"expected an (n, 3) array, got shape {a.shape}")
    if a.shape[0] < MIN_POINTS:
        raise CloudError(f"need at least {MIN_POINTS} points, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        bad = int(np.count_nonzero(~np.isfinite(a).all(axis=1)))
        raise CloudError(f"{bad} point(s) have non-finite coordinates")

    centred = a - a.mean(axis=0)
    radius = np.linalg.norm(centred, axis=1).max()
    if radius < 1e-12:
        raise CloudError("degenerate cloud: all points coincide")

    return PointCloud(points=centred / radius, object_id=object_id, label=label)
