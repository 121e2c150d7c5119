"""Procedural 3D objects and their multi-view renderings.

Each class is one generator kind (sphere, box, ...). An instance is drawn by
deforming the canonical surface with an anisotropic scale, a rotation and a
little surface noise, then normalizing. Views come from a fixed ring of 24
orthographic cameras; each view is a soft point-splat density image.

Typical usage:

    from mmpoint.core import SeedTree
    from mmpoint.shapegen import CameraRig, generate_object, render_views, sample_spec

    rng = SeedTree(0).stream("object-0")
    cloud = generate_object(sample_spec(2, rng), 1024, rng)
    views = render_views(cloud, CameraRig(), 64)
"""

from enum import Enum
from typing import Callable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.transform import Rotation

from mmpoint.core import N_VIEWS, PointCloud, ViewImage, ViewSet, normalize_cloud

RESOLUTIONS = (32, 64, 128)
MIN_GENERATED_POINTS = 64
SCALE_RANGE = (0.6, 1.4)
NOISE_MAX = 0.01
TILT_MAX_DEG = 30.0


class ShapeKind(str, Enum):
    """The generator kinds; class k uses the k-th kind."""

    SPHERE = "sphere"
    BOX = "box"
    CYLINDER = "cylinder"
    CONE = "cone"
    TORUS = "torus"
    CAPSULE = "capsule"
    PYRAMID = "pyramid"
    ELLIPSOID = "ellipsoid"


KINDS = list(ShapeKind)


def kind_for_class(class_id: int) -> ShapeKind:
    """Return the generator kind for a class id."""
    if not 0 <= class_id < len(KINDS):
        raise ValueError(f"class_id must be in [0, {len(KINDS)}), got {class_id}")
    return KINDS[class_id]


class ShapeSpec(BaseModel):
    """A class plus the deformation parameters of one instance."""

    model_config = ConfigDict(frozen=True)

    class_id: int
    kind: ShapeKind
    scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise: float = Field(0.0, ge=0.0)
    yaw_deg: float = 0.0
    tilt_deg: float = 0.0

    @model_validator(mode="after")
    def _check_spec(self) -> "ShapeSpec":
        if kind_for_class(self.class_id) != self.kind:
            raise ValueError(
                f"class {self.class_id} is generated by {kind_for_class(self.class_id)}"
            )
        lo, hi = SCALE_RANGE
        if any(not lo <= s <= hi for s in self.scale):
            raise ValueError(f"scale {self.scale} outside [{lo}, {hi}]")
        return self

    @classmethod
    def canonical(cls, class_id: int, **kwargs) -> "ShapeSpec":
        """Return the undeformed spec for a class."""
        return cls(class_id=class_id, kind=kind_for_class(class_id), **kwargs)


def sample_spec(class_id: int, stream: np.random.Generator) -> ShapeSpec:
    """Draw the per-instance deformation for a class."""
    scale = stream.uniform(*SCALE_RANGE, size=3)
    noise = stream.uniform(0.0, NOISE_MAX)
    yaw = stream.uniform(0.0, 360.0)
    tilt = stream.uniform(-TILT_MAX_DEG, TILT_MAX_DEG)
    return ShapeSpec.canonical(
        class_id,
        scale=tuple(float(s) for s in scale),
        noise=float(noise),
        yaw_deg=float(yaw),
        tilt_deg=float(tilt),
    )


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng: np.random.Generator, n: int) -> np.ndarray:
    return _unit_vectors(rng, n)


def _ellipsoid(rng: np.random.Generator, n: int) -> np.ndarray:
    return _unit_vectors(rng, n) * np.array([1.0, 0.55, 0.75])


def _box(rng: np.random.Generator, n: int) -> np.ndarray:
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts = np.empty((n, 3))
    for a in range(3):
        others = [b for b in range(3) if b != a]
        sel = axis == a
        pts[sel, a] = sign[sel]
        pts[np.ix_(sel, others)] = uv[sel]
    return pts


def _disk(rng: np.random.Generator, n: int, radius: float, y: float) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(size=n))
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    return np.stack([r * np.cos(theta), np.full(n, y), r * np.sin(theta)], axis=1)


def _cylinder(rng: np.random.Generator, n: int, radius: float = 0.6, half: float = 1.0):
    side, cap = 2 * np.pi * radius * 2 * half, np.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    y = rng.uniform(-half, half, size=n)
    pts = np.stack([radius * np.cos(theta), y, radius * np.sin(theta)], axis=1)
    for p, cy in ((1, half), (2, -half)):
        sel = part == p
        pts[sel] = _disk(rng, int(sel.sum()), radius, cy)
    return pts


def _cone(rng: np.random.Generator, n: int, radius: float = 0.8, height: float = 2.0):
    slant = np.hypot(radius, height)
    lateral, base = np.pi * radius * slant, np.pi * radius**2
    on_base = rng.uniform(size=n) < base / (lateral + base)
    t = np.sqrt(rng.uniform(size=n))
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    pts = np.stack(
        [radius * t * np.cos(theta), height / 2 - height * t, radius * t * np.sin(theta)], axis=1
    )
    pts[on_base] = _disk(rng, int(on_base.sum()), radius, -height / 2)
    return pts


def _torus(rng: np.random.Generator, n: int, major: float = 0.75, minor: float = 0.25):
    out = []
    while sum(len(o) for o in out) < n:
        u = rng.uniform(0.0, 2 * np.pi, size=2 * n)
        v = rng.uniform(0.0, 2 * np.pi, size=2 * n)
        keep = rng.uniform(size=2 * n) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        out.append(np.stack([ring * np.cos(u), minor * np.sin(v), ring * np.sin(u)], axis=1))
    return np.concatenate(out)[:n]


def _capsule(rng: np.random.Generator, n: int, radius: float = 0.45, half: float = 0.55):
    side, caps = 2 * np.pi * radius * 2 * half, 4 * np.pi * radius**2
    on_caps = rng.uniform(size=n) < caps / (side + caps)
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    y = rng.uniform(-half, half, size=n)
    pts = np.stack([radius * np.cos(theta), y, radius * np.sin(theta)], axis=1)
    d = _unit_vectors(rng, int(on_caps.sum()))
    d[:, 1] += np.where(d[:, 1] >= 0, half / radius, -half / radius)
    pts[on_caps] = d * radius
    return pts


def _triangles(rng: np.random.Generator, n: int, tris: np.ndarray) -> np.ndarray:
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    pick = rng.choice(len(tris), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(size=(n, 1)))
    r2 = rng.uniform(size=(n, 1))
    return (1 - r1) * a[pick] + r1 * (1 - r2) * b[pick] + r1 * r2 * c[pick]


def _pyramid(rng: np.random.Generator, n: int, half: float = 0.8):
    apex = np.array([0.0, 1.0, 0.0])
    corners = np.array(
        [[-half, -1, -half], [half, -1, -half], [half, -1, half], [-half, -1, half]]
    )
    tris = [[corners[i], corners[(i + 1) % 4], apex] for i in range(4)]
    tris += [[corners[0], corners[1], corners[2]], [corners[0], corners[2], corners[3]]]
    return _triangles(rng, n, np.array(tris, dtype=float))


_SAMPLERS: dict[ShapeKind, Callable[[np.random.Generator, int], np.ndarray]] = {
    ShapeKind.SPHERE: _sphere,
    ShapeKind.BOX: _box,
    ShapeKind.CYLINDER: _cylinder,
    ShapeKind.CONE: _cone,
    ShapeKind.TORUS: _torus,
    ShapeKind.CAPSULE: _capsule,
    ShapeKind.PYRAMID: _pyramid,
    ShapeKind.ELLIPSOID: _ellipsoid,
}

# Kinds whose surface is symmetric under p -> -p.
_SYMMETRIC = {
    ShapeKind.SPHERE,
    ShapeKind.BOX,
    ShapeKind.CYLINDER,
    ShapeKind.TORUS,
    ShapeKind.CAPSULE,
    ShapeKind.ELLIPSOID,
}


def surface_points(kind: ShapeKind, n: int, stream: np.random.Generator) -> np.ndarray:
    """Sample n points on the canonical surface of a kind.

    Centrally symmetric kinds are sampled in mirrored pairs, so the centroid of
    an even-sized sample is exactly the origin.
    """
    sampler = _SAMPLERS.get(kind)
    if sampler is None:
        raise ValueError(f"unknown generator kind {kind!r}")
    if kind not in _SYMMETRIC:
        return sampler(stream, n)

    half = sampler(stream, n // 2)
    pts = np.concatenate([half, -half])
    if n % 2:
        pts = np.concatenate([pts, sampler(stream, 1)])
    return pts


def generate_object(
    spec: ShapeSpec, n_points: int, stream: np.random.Generator, *, object_id: int = 0
) -> PointCloud:
    """Generate one normalized instance of a shape.

    Args:
        spec:      The class and deformation to apply.
        n_points:  The number of surface samples, at least 64.
        stream:    The random stream to draw surface samples and noise from.
        object_id: (Optional) Identifier carried by the cloud.
    """
    if n_points < MIN_GENERATED_POINTS:
        raise ValueError(f"n_points must be at least {MIN_GENERATED_POINTS}, got {n_points}")

    pts = surface_points(spec.kind, n_points, stream) * np.asarray(spec.scale)
    rot = Rotation.from_euler("y", spec.yaw_deg, degrees=True) * Rotation.from_euler(
        "x", spec.tilt_deg, degrees=True
    )
    pts = rot.apply(pts)
    if spec.noise > 0:
        pts = pts + stream.normal(0.0, spec.noise, size=pts.shape)
    return normalize_cloud(pts, object_id=object_id, label=spec.class_id)


class CameraRig(BaseModel):
    """A ring of orthographic cameras around the vertical (+y) axis.

    View k looks from azimuth k * azimuth_step_deg at a fixed elevation, so a
    pose depends only on the view index.
    """

    model_config = ConfigDict(frozen=True)

    n_views: int = N_VIEWS
    azimuth_step_deg: float = 15.0
    elevation_deg: float = 20.0
    radius: float = 2.5
    extent: float = 1.1
    splat_sigma_px: float = 1.5

    def pose(self, view_index: int) -> np.ndarray:
        """Return the 3x3 world-to-camera rotation of a view."""
        if not 0 <= view_index < self.n_views:
            raise ValueError(f"view_index must be in [0, {self.n_views}), got {view_index}")
        rot = Rotation.from_euler("x", self.elevation_deg, degrees=True) * Rotation.from_euler(
            "y", view_index * self.azimuth_step_deg, degrees=True
        )
        return rot.as_matrix()


def render_points(
    points: np.ndarray,
    rig: CameraRig,
    resolution: int,
    view_indices: list[int] | None = None,
) -> np.ndarray:
    """Splat points into one density image per requested view.

    Returns:
        A (V, resolution, resolution) float32 array with values in [0, 1].
    """
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("cannot render an empty cloud")
    if view_indices is None:
        view_indices = list(range(rig.n_views))

    poses = np.stack([rig.pose(k) for k in view_indices])
    cam = np.einsum("kij,nj->kni", poses, pts)

    step = 2 * rig.extent / resolution
    cols = -rig.extent + (np.arange(resolution) + 0.5) * step
    rows = cols[::-1]
    sigma = rig.splat_sigma_px * step

    gx = np.exp(-((cam[..., 0, None] - cols) ** 2) / (2 * sigma**2))
    gy = np.exp(-((cam[..., 1, None] - rows) ** 2) / (2 * sigma**2))
    density = np.einsum("knr,knc->krc", gy, gx)

    peak = density.max(axis=(1, 2), keepdims=True)
    images = np.divide(density, peak, out=np.zeros_like(density), where=peak > 0)
    return np.clip(images, 0.0, 1.0).astype(np.float32)


def render_views(cloud: PointCloud, rig: CameraRig, resolution: int) -> ViewSet:
    """Render all views of a cloud as single-channel images.

    The result is a pure function of the coordinates, the rig and the
    resolution; the label is never consulted.
    """
    images = render_points(cloud.points, rig, resolution)
    views = [
        ViewImage(pixels=img[..., None], view_index=k, object_id=cloud.object_id)
        for k, img in enumerate(images)
    ]
    return ViewSet(object_id=cloud.object_id, views=views)
