"""On-disk datasets of point clouds and their rendered views.

A dataset directory holds a `manifest.json` and, per split, little-endian
float32 blobs whose shapes are declared in the manifest:

    manifest.json
    train-points.bin    (N_train, P, 3)
    train-views.bin     (N_train, 24, R, R)   only for procedural datasets
    test-points.bin     ...

Procedural datasets are generated by `build_dataset`. External ModelNet-style
HDF5 archives are converted by `ingest_external`; they ship no images, so
their views are rendered on the fly when requested.

Typical usage:

    from mmpoint.core import SeedTree
    from mmpoint.dataset import DatasetHandle, build_dataset

    handle = build_dataset("data/", classes=8, per_class=100, tree=SeedTree(0))
    handle = DatasetHandle("data/")
    clouds = handle.clouds("train")
"""

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Literal, Optional

import h5py
import numpy as np
from pydantic import BaseModel, ValidationError

from mmpoint.core import DATA, N_VIEWS, PointCloud, SeedTree, ViewImage, ViewSet, normalize_cloud
from mmpoint.errors import DatasetError
from mmpoint.shapegen import (
    MIN_GENERATED_POINTS,
    RESOLUTIONS,
    CameraRig,
    generate_object,
    kind_for_class,
    render_points,
    render_views,
    sample_spec,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MANIFEST_VERSION = 1
TEST_FRACTION = 0.2
SPLITS = ("train", "test")



class BlobRecord(BaseModel):
    file: str
    shape: list[int]
    sha256: str


class SplitRecord(BaseModel):
    object_ids: list[int]
    labels: list[int]
    blobs: dict[str, BlobRecord]


class DatasetManifest(BaseModel):
    version: int = MANIFEST_VERSION
    source: Literal["procedural", "hdf5"]
    seed: int
    classes: int
    per_class: Optional[int] = None
    n_points: int
    resolution: int
    n_views: int = N_VIEWS
    views_rendered: bool
    counts: dict[str, int]
    splits: dict[str, SplitRecord]


def held_out_count(n: int) -> int:
    """Return how many of a class's n objects go to the test split."""
    if n < 2:
        return 0
    return min(n - 1, math.ceil(TEST_FRACTION * n))


def stratified_split(
    labels: np.ndarray, stream: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Split positions 80/20 within every class (ceil on the test side).

    Returns:
        Sorted train positions and sorted test positions.
    """
    test = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        k = held_out_count(len(members))
        if k == 0:
            logger.warning("class %d has a single example; it goes to the train split", c)
            continue
        test.extend(stream.choice(members, size=k, replace=False).tolist())
    test_mask = np.zeros(len(labels), dtype=bool)
    test_mask[test] = True
    return np.flatnonzero(~test_mask), np.flatnonzero(test_mask)


def _write_blob(root: Path, name: str, array: np.ndarray) -> BlobRecord:
    data = np.ascontiguousarray(array, dtype="<f4")
    raw = data.tobytes()
    try:
        (root / name).write_bytes(raw)
    except OSError as e:
        raise DatasetError(f"could not write {root / name}: {e}") from e
    return BlobRecord(file=name, shape=list(data.shape), sha256=hashlib.sha256(raw).hexdigest())


def _write_manifest(root: Path, manifest: DatasetManifest):
    try:
        (root / MANIFEST).write_text(manifest.model_dump_json(indent=2) + "\n")
    except OSError as e:
        raise DatasetError(f"could not write {root / MANIFEST}: {e}") from e


class DatasetHandle:
    """Read access to a dataset directory."""

    def __init__(self, root: str | Path, *, rig: CameraRig | None = None):
        """Open a dataset directory.

        Args:
            root: The directory holding `manifest.json`.
            rig:  (Optional) The camera rig used when views must be rendered on the fly.
        """
        self.root = Path(root)
        self.rig = rig or CameraRig()
        path = self.root / MANIFEST
        try:
            raw = path.read_bytes()
        except OSError as e:
            raise DatasetError(f"cannot read {path}: {e}") from e
        try:
            self.manifest = DatasetManifest.model_validate_json(raw)
        except ValidationError as e:
            raise DatasetError(f"invalid manifest {path}: {e.error_count()} error(s)") from e
        if self.manifest.version != MANIFEST_VERSION:
            raise DatasetError(f"manifest version {self.manifest.version} is not supported")
        self._digest = hashlib.sha256(raw).hexdigest()
        self._blobs: dict[tuple[str, str], np.ndarray] = {}

    def digest(self) -> str:
        """Return the sha256 of the manifest file."""
        return self._digest

    @property
    def resolution(self) -> int:
        """Return the side length of rendered views."""
        return self.manifest.resolution

    @property
    def n_views(self) -> int:
        """Return the number of views per object."""
        return self.manifest.n_views

    def _split(self, split: str) -> SplitRecord:
        try:
            return self.manifest.splits[split]
        except KeyError:
            raise DatasetError(f"unknown split {split!r}") from None

    def _blob(self, split: str, kind: str) -> np.ndarray:
        key = (split, kind)
        if key not in self._blobs:
            record = self._split(split).blobs.get(kind)
            if record is None:
                raise DatasetError(f"split {split!r} has no {kind} blob")
            path = self.root / record.file
            expected = int(np.prod(record.shape, dtype=np.int64)) * 4
            try:
                size = path.stat().st_size
            except OSError as e:
                raise DatasetError(f"cannot read {path}: {e}") from e
            if size != expected:
                raise DatasetError(f"{path} holds {size} bytes, manifest declares {expected}")
            if expected == 0:
                self._blobs[key] = np.zeros(record.shape, dtype="<f4")
            else:
                self._blobs[key] = np.memmap(
                    path, dtype="<f4", mode="r", shape=tuple(record.shape)
                )
        return self._blobs[key]

    def verify(self):
        """Check every blob against the sha256 recorded in the manifest."""
        for record in self.manifest.splits.values():
            for blob in record.blobs.values():
                digest = hashlib.sha256((self.root / blob.file).read_bytes()).hexdigest()
                if digest != blob.sha256:
                    raise DatasetError(f"{blob.file} does not match its manifest digest")

    def __len__(self) -> int:  # noqa: D105
        return sum(self.manifest.counts.values())

    def size(self, split: str) -> int:
        """Return the number of objects in a split."""
        return len(self._split(split).object_ids)

    def clouds(self, split: str) -> np.ndarray:
        """Return the (N, P, 3) coordinates of a split."""
        return self._blob(split, "points")

    def labels(self, split: str) -> np.ndarray:
        """Return the class labels of a split."""
        return np.asarray(self._split(split).labels, dtype=np.int64)

    def object_ids(self, split: str) -> np.ndarray:
        """Return the object ids of a split."""
        return np.asarray(self._split(split).object_ids, dtype=np.int64)

    def point_cloud(self, split: str, i: int) -> PointCloud:
        """Return the i-th cloud of a split."""
        rec = self._split(split)
        return PointCloud(
            points=np.asarray(self.clouds(split)[i]),
            object_id=rec.object_ids[i],
            label=rec.labels[i],
        )

    def view_images(self, split: str, i: int, view_indices: list[int]) -> np.ndarray:
        """Return the (V, R, R) views of the i-th object at the given view indices."""
        if self.manifest.views_rendered:
            return np.asarray(self._blob(split, "views")[i, view_indices])
        return render_points(self.clouds(split)[i], self.rig, self.resolution, view_indices)

    def view_set(self, split: str, i: int) -> ViewSet:
        """Return all views of the i-th object of a split."""
        oid = self._split(split).object_ids[i]
        if not self.manifest.views_rendered:
            return render_views(self.point_cloud(split, i), self.rig, self.resolution)
        images = self.view_images(split, i, list(range(self.n_views)))
        views = [
            ViewImage(pixels=img[..., None], view_index=k, object_id=oid)
            for k, img in enumerate(images)
        ]
        return ViewSet(object_id=oid, views=views)


def _make_object(
    tree: SeedTree, class_id: int, oid: int, n_points: int, rig: CameraRig, resolution: int
) -> tuple[np.ndarray, np.ndarray]:
    rng = tree.child(DATA).stream(f"object-{oid}")
    cloud = generate_object(sample_spec(class_id, rng), n_points, rng, object_id=oid)
    return cloud.points, render_points(cloud.points, rig, resolution)


def build_dataset(
    out_dir: str | Path,
    *,
    classes: int = 8,
    per_class: int = 100,
    n_points: int = 1024,
    resolution: int = 64,
    tree: SeedTree,
    rig: CameraRig | None = None,
    workers: int = 1,
) -> DatasetHandle:
    """Generate a procedural dataset with a stratified 80/20 split.

    Args:
        out_dir:    Directory to write into (created if missing).
        classes:    Number of classes K; class k uses the k-th generator kind.
        per_class:  Instances per class, at least 2 so both splits are populated.
        n_points:   Points per cloud.
        resolution: Side length of rendered views.
        tree:       Seed tree; objects draw from the `data` subtree.
        rig:        (Optional) Camera rig; defaults to the 24-view ring.
        workers:    (Optional) Threads used to generate objects.
    """
    if per_class < 2:
        raise ValueError(f"per_class must be at least 2, got {per_class}")
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    kind_for_class(classes - 1)
    if n_points < MIN_GENERATED_POINTS:
        raise ValueError(f"n_points must be at least {MIN_GENERATED_POINTS}, got {n_points}")
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")

    rig = rig or CameraRig()
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create {root}: {e}") from e

    labels = np.repeat(np.arange(classes), per_class)
    oids = np.arange(classes * per_class)

    def make(oid: int):
        return _make_object(tree, int(labels[oid]), int(oid), n_points, rig, resolution)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        made = list(pool.map(make, oids))
    points = np.stack([p for p, _ in made])
    views = np.stack([v for _, v in made])

    train, test = stratified_split(labels, tree.child(DATA).stream("split"))
    splits = {}
    for name, pos in (("train", train), ("test", test)):
        splits[name] = SplitRecord(
            object_ids=oids[pos].tolist(),
            labels=labels[pos].tolist(),
            blobs={
                "points": _write_blob(root, f"{name}-points.bin", points[pos]),
                "views": _write_blob(root, f"{name}-views.bin", views[pos]),
            },
        )

    manifest = DatasetManifest(
        source="procedural",
        seed=tree.root_seed,
        classes=classes,
        per_class=per_class,
        n_points=n_points,
        resolution=resolution,
        n_views=rig.n_views,
        views_rendered=True,
        counts={"train": len(train), "test": len(test)},
        splits=splits,
    )
    _write_manifest(root, manifest)
    logger.info(
        "wrote %d objects to %s (%d train / %d test)", len(oids), root, len(train), len(test)
    )
    return DatasetHandle(root, rig=rig)


def _read_archive(path: Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        with h5py.File(path, "r") as f:
            if "data" not in f:
                raise DatasetError(f"{path}: no 'data' array")
            if "label" not in f:
                raise DatasetError(f"{path}: missing label table")
            data = np.asarray(f["data"][...], dtype=np.float64)
            labels = np.asarray(f["label"][...])
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e

    if data.ndim != 3 or data.shape[2] != 3:
        raise DatasetError(f"{path}: expected point arrays shaped (N, P, 3), got {data.shape}")
    labels = labels.reshape(-1)
    if labels.shape[0] != data.shape[0]:
        raise DatasetError(f"{path}: {data.shape[0]} clouds but {labels.shape[0]} labels")
    return data, labels.astype(np.int64)


def _shards(archive: Path) -> dict[str, list[Path]]:
    if archive.is_file():
        return {"all": [archive]}
    if not archive.is_dir():
        raise DatasetError(f"{archive} does not exist")
    shards: dict[str, list[Path]] = {"train": [], "test": []}
    for p in sorted(archive.glob("*.h5")):
        if "train" in p.name:
            shards["train"].append(p)
        elif "test" in p.name:
            shards["test"].append(p)
        else:
            raise DatasetError(f"cannot tell which split {p.name} belongs to")
    if not shards["train"] or not shards["test"]:
        raise DatasetError(f"{archive} needs both *train*.h5 and *test*.h5 shards")
    return shards


def ingest_external(
    archive: str | Path,
    out_dir: str | Path,
    *,
    n_points: int = 1024,
    resolution: int = 64,
    tree: SeedTree,
) -> DatasetHandle:
    """Convert a ModelNet-style HDF5 archive into a dataset directory.

    Every cloud is subsampled to `n_points` without replacement (original
    order kept) and normalized. No views are stored.

    Args:
        archive:    An .h5 file, or a directory of `*train*.h5` / `*test*.h5` shards.
        out_dir:    Directory to write into.
        n_points:   Points kept per cloud.
        resolution: Resolution used when views are rendered on the fly.
        tree:       Seed tree; subsampling draws from the `data` subtree.
    """
    if resolution not in RESOLUTIONS:
        raise ValueError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")
    shards = _shards(Path(archive))
    parts = {name: [_read_archive(p) for p in paths] for name, paths in shards.items()}
    for name, paths in shards.items():
        for path, (clouds, _) in zip(paths, parts[name]):
            if clouds.shape[1] < n_points:
                raise DatasetError(
                    f"{path.name} clouds have {clouds.shape[1]} points, {n_points} requested"
                )
        if len({clouds.shape[1] for clouds, _ in parts[name]}) > 1:
            raise DatasetError(f"the {name} shards disagree on points per cloud")
    data = {k: np.concatenate([d for d, _ in v]) for k, v in parts.items()}
    labels = {k: np.concatenate([lab for _, lab in v]) for k, v in parts.items()}

    if "all" in data:
        train, test = stratified_split(labels["all"], tree.child(DATA).stream("split"))
        data = {"train": data["all"][train], "test": data["all"][test]}
        labels = {"train": labels["all"][train], "test": labels["all"][test]}

    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create {root}: {e}") from e

    splits = {}
    next_id = 0
    for name in SPLITS:
        clouds = []
        for raw in data[name]:
            rng = tree.child(DATA).stream(f"object-{next_id}")
            keep = np.sort(rng.choice(raw.shape[0], size=n_points, replace=False))
            clouds.append(normalize_cloud(raw[keep], object_id=next_id).points)
            next_id += 1
        points = np.stack(clouds) if clouds else np.zeros((0, n_points, 3))
        splits[name] = SplitRecord(
            object_ids=list(range(next_id - len(clouds), next_id)),
            labels=labels[name].tolist(),
            blobs={"points": _write_blob(root, f"{name}-points.bin", points)},
        )

    classes = int(np.unique(np.concatenate([labels["train"], labels["test"]])).size)
    manifest = DatasetManifest(
        source="hdf5",
        seed=tree.root_seed,
        classes=classes,
        n_points=n_points,
        resolution=resolution,
        views_rendered=False,
        counts={name: len(splits[name].object_ids) for name in SPLITS},
        splits=splits,
    )
    _write_manifest(root, manifest)
    logger.info("ingested %d clouds from %s into %s", next_id, archive, root)
    return DatasetHandle(root)
