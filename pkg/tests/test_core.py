import numpy as np
import pytest
import torch

from mmpoint.core import (
    EmbeddingBatch,
    PointCloud,
    SeedTree,
    ViewImage,
    ViewSet,
    array_digest,
    augment_2d_level,
    normalize_cloud,
    space_tag,
)
from mmpoint.errors import CloudError


def test_seed_tree_same_name_same_sequence():
    a = SeedTree(1234).child("data").stream("object-0").normal(size=16)
    b = SeedTree(1234).child("data").stream("object-0").normal(size=16)
    assert np.array_equal(a, b)


def test_seed_tree_request_order_does_not_matter():
    tree = SeedTree(5)
    first = tree.stream("a").integers(0, 1 << 30, size=4)
    tree.stream("b").integers(0, 1 << 30, size=4)
    again = tree.stream("a").integers(0, 1 << 30, size=4)
    assert np.array_equal(first, again)


@pytest.mark.parametrize(
    "left,right",
    [
        (SeedTree(1).stream("x"), SeedTree(2).stream("x")),
        (SeedTree(1).stream("x"), SeedTree(1).stream("y")),
        (SeedTree(1).child("a").stream("x"), SeedTree(1).child("b").stream("x")),
    ],
)
def test_seed_tree_distinct_streams(left, right):
    assert not np.array_equal(left.normal(size=8), right.normal(size=8))


def test_seed_tree_torch_seed():
    seed = SeedTree(9).seed("init")
    assert seed == SeedTree(9).seed("init")
    assert 0 <= seed < 2**63
    assert seed != SeedTree(9).seed("other")


def test_stream_names():
    assert augment_2d_level(3) == "augment-2d-level-3"
    assert space_tag(None) == "intra"
    assert space_tag(2) == "cross-level-2"


def test_normalize_gaussian_cloud():
    raw = np.random.default_rng(0).normal(loc=3.0, scale=2.0, size=(1024, 3))
    cloud = normalize_cloud(raw, object_id=4, label=1)
    assert np.linalg.norm(cloud.points.mean(axis=0)) < 1e-6
    assert abs(np.linalg.norm(cloud.points, axis=1).max() - 1.0) < 1e-6
    assert cloud.is_normalized()
    assert (cloud.object_id, cloud.label, cloud.n) == (4, 1, 1024)


def test_normalize_fixed_point():
    half = np.random.default_rng(1).normal(size=(256, 3))
    half /= np.linalg.norm(half, axis=1, keepdims=True)
    sphere = np.concatenate([half, -half])
    cloud = normalize_cloud(sphere)
    assert np.allclose(cloud.points, sphere, atol=1e-12)


def test_normalize_preserves_order():
    raw = np.random.default_rng(2).normal(size=(32, 3))
    cloud = normalize_cloud(raw)
    expected = raw - raw.mean(axis=0)
    expected /= np.linalg.norm(expected, axis=1).max()
    assert np.allclose(cloud.points, expected)


@pytest.mark.parametrize(
    "raw,match",
    [
        (np.ones((32, 3)), "degenerate|zero"),
        (np.zeros((4, 3)), "at least 8"),
        (np.zeros((32, 2)), "shape"),
        (np.r_[np.random.default_rng(0).normal(size=(31, 3)), [[np.nan, 0, 0]]], "non-finite"),
    ],
)
def test_normalize_rejects(raw, match):
    with pytest.raises(CloudError, match=match):
        normalize_cloud(raw)


def test_point_cloud_is_read_only():
    cloud = normalize_cloud(np.random.default_rng(0).normal(size=(16, 3)))
    with pytest.raises(ValueError):
        cloud.points[0, 0] = 5.0


def test_point_cloud_rejects_too_few_points():
    with pytest.raises(ValueError):
        PointCloud(points=np.zeros((3, 3)), object_id=0)


def test_view_image_validation():
    view = ViewImage(pixels=np.zeros((16, 16)), view_index=23, object_id=0)
    assert view.pixels.shape == (16, 16, 1)
    assert view.to_tensor().shape == (1, 16, 16)
    with pytest.raises(ValueError):
        ViewImage(pixels=np.full((16, 16), 1.5), view_index=0, object_id=0)
    with pytest.raises(ValueError):
        ViewImage(pixels=np.zeros((8, 8)), view_index=0, object_id=0)
    with pytest.raises(ValueError):
        ViewImage(pixels=np.zeros((16, 16)), view_index=24, object_id=0)


def test_view_set_rejects_duplicate_indices():
    view = ViewImage(pixels=np.zeros((16, 16)), view_index=3, object_id=0)
    with pytest.raises(ValueError):
        ViewSet(object_id=0, views=[view, view])
    with pytest.raises(ValueError):
        ViewSet(object_id=0, views=[])


def test_view_set_subsample():
    views = [ViewImage(pixels=np.zeros((16, 16)), view_index=k, object_id=0) for k in range(4)]
    subset = ViewSet(object_id=0, views=views).subsample([3, 1])
    assert [v.view_index for v in subset.views] == [3, 1]


def test_embedding_batch_checks():
    rows = torch.nn.functional.normalize(torch.randn(4, 8), dim=-1)
    batch = EmbeddingBatch(rows=rows, space_tag="intra")
    assert batch.dim == 8
    batch.check_dim({"intra": 8})
    with pytest.raises(ValueError):
        batch.check_dim({"intra": 16})
    with pytest.raises(ValueError):
        batch.check_dim({"cross-level-1": 8})
    with pytest.raises(ValueError):
        EmbeddingBatch(rows=rows * 2, space_tag="intra")
    with pytest.raises(ValueError):
        EmbeddingBatch(rows=rows[0], space_tag="intra")


def test_array_digest():
    a = np.arange(6, dtype=np.float32)
    assert array_digest(a) == array_digest(torch.arange(6, dtype=torch.float32))
    assert array_digest(a) != array_digest(a.reshape(2, 3))
    assert array_digest(a) != array_digest(a.astype(np.float64))
