import numpy as np
import pytest
import torch
from torch import nn
from torch.func import functional_call

from mmpoint.config import EncoderConfig, ProjectionConfig, RunConfig
from mmpoint.core import ViewImage, normalize_cloud
from mmpoint.encoders import (
    ImageEncoder,
    PointEncoder,
    edge_features,
    encode_image,
    encode_points,
    knn,
)
from mmpoint.heads import HeadBank


@pytest.fixture
def encoder_config(test_config: RunConfig) -> EncoderConfig:
    return test_config.encoder


@pytest.fixture
def points() -> torch.Tensor:
    torch.manual_seed(0)
    return torch.randn(2, 64, 3)


def disk(resolution: int = 32, radius: float = 10.0) -> np.ndarray:
    centres = np.arange(resolution) - (resolution - 1) / 2
    yy, xx = np.meshgrid(centres, centres, indexing="ij")
    return (xx**2 + yy**2 <= radius**2).astype(np.float32)


def test_knn_includes_self():
    x = torch.randn(1, 20, 3)
    idx = knn(x, 4)
    assert idx.shape == (1, 20, 4)
    assert torch.equal(idx[0, :, 0], torch.arange(20))


def test_edge_features_match_neighbour_lookup():
    torch.manual_seed(3)
    x = torch.randn(2, 12, 5)
    out = edge_features(x, 4)
    assert out.shape == (2, 10, 12, 4)

    idx = knn(x, 4)
    for b in range(2):
        for i in range(12):
            for j in range(4):
                neighbour = x[b, idx[b, i, j]]
                assert torch.allclose(out[b, :5, i, j], x[b, i])
                assert torch.allclose(out[b, 5:, i, j], neighbour - x[b, i])


def test_backward_memory_scales_with_neighbours():
    enc = PointEncoder(EncoderConfig(k_nn=8, point_widths=(16, 32), norm_groups=4))
    x = torch.randn(2, 256, 3)
    saved = []

    def pack(t: torch.Tensor) -> torch.Tensor:
        saved.append(t.numel())
        return t

    with torch.autograd.graph.saved_tensors_hooks(pack, lambda t: t):
        _, g = enc(x)
    g.sum().backward()

    # A dense (B, n, n, d) neighbour tensor would be 2 * 256 * 256 * 16 elements.
    assert max(saved) <= 2 * 256 * 8 * 2 * 32


def test_point_encoder_shapes(encoder_config, points):
    net = PointEncoder(encoder_config)
    per_point, pooled = net(points)
    assert per_point.shape == (2, 64, 32)
    assert pooled.shape == (2, 64)
    assert net.out_dim == 64


def test_encode_points(encoder_config):
    cloud = normalize_cloud(np.random.default_rng(0).normal(size=(128, 3)))
    feature = encode_points(cloud, PointEncoder(encoder_config))
    assert feature.per_point.shape == (128, 32)
    assert feature.global_.shape == (1, 64)
    assert torch.isfinite(feature.global_).all()


@torch.no_grad()
def test_point_encoder_is_permutation_invariant(encoder_config, points):
    net = PointEncoder(encoder_config).eval()
    _, reference = net(points)
    gen = torch.Generator().manual_seed(1)
    for _ in range(100):
        perm = torch.randperm(points.shape[1], generator=gen)
        _, pooled = net(points[:, perm])
        assert (pooled - reference).abs().max() < 1e-5


@torch.no_grad()
def test_point_encoder_sees_outliers(encoder_config, points):
    net = PointEncoder(encoder_config).eval()
    moved = points.clone()
    moved[0, 0] = torch.tensor([6.0, 6.0, 6.0])
    _, a = net(points)
    _, b = net(moved)
    assert not torch.allclose(a[0], b[0])
    assert torch.allclose(a[1], b[1])


@pytest.mark.parametrize("shape", [(2, 64, 4), (64, 3)])
def test_point_encoder_rejects_shape(encoder_config, shape):
    with pytest.raises(ValueError, match="coordinates"):
        PointEncoder(encoder_config)(torch.zeros(shape))


def test_point_encoder_needs_k_points(encoder_config):
    with pytest.raises(ValueError, match="k_nn=8"):
        PointEncoder(encoder_config)(torch.randn(1, 5, 3))


def test_image_encoder_shapes(encoder_config):
    net = ImageEncoder(encoder_config)
    assert net(torch.rand(3, 1, 32, 32)).shape == (3, 32)
    assert net(torch.rand(3, 3, 32, 32)).shape == (3, 32)
    assert net.out_dim == 32


@torch.no_grad()
def test_zero_images_share_a_feature(encoder_config):
    net = ImageEncoder(encoder_config).eval()
    a = net(torch.zeros(1, 1, 32, 32))
    b = net(torch.zeros(1, 1, 32, 32))
    assert torch.isfinite(a).all()
    assert torch.equal(a, b)


@torch.no_grad()
def test_symmetric_disk_survives_flip(encoder_config):
    net = ImageEncoder(encoder_config).eval()
    view = ViewImage(pixels=disk(), view_index=0, object_id=0)
    flipped = ViewImage(pixels=disk()[:, ::-1], view_index=0, object_id=0)
    a = encode_image(view, net).vector
    b = encode_image(flipped, net).vector
    assert a.shape == (1, 32)
    assert (a - b).abs().max() < 1e-4


def test_image_encoder_rejects_resolution(encoder_config):
    with pytest.raises(ValueError, match="resolution"):
        ImageEncoder(encoder_config)(torch.rand(1, 1, 64, 64))


def test_image_encoder_rejects_channels(encoder_config):
    with pytest.raises(ValueError, match="channels"):
        ImageEncoder(encoder_config)(torch.rand(1, 2, 32, 32))


def test_encoders_are_pure_in_eval_mode(encoder_config, points):
    net = PointEncoder(encoder_config).eval()
    with torch.no_grad():
        assert torch.equal(net(points)[1], net(points)[1])


class ScalarLoss(nn.Module):
    """A scalar loss that touches the point encoder and every head."""

    def __init__(self, enc: EncoderConfig):
        super().__init__()
        self.net = PointEncoder(enc)
        self.heads = HeadBank(
            ProjectionConfig(d_intra=3, d_cross=[4, 5]),
            point_dim=enc.point_dim,
            image_dim=enc.image_dim,
        )
        self.image_feature = torch.randn(1, enc.image_dim)
        self.weights = [torch.randn(1, d) for d in (3, 3, 4, 5, 4, 5)]

    def forward(self, cloud: torch.Tensor) -> torch.Tensor:
        _, pooled = self.net(cloud)
        outputs = [
            self.heads.project_intra(pooled).rows,
            self.heads.project_intra(self.image_feature, "image").rows,
            *(z.rows for z in self.heads.project_cross_point(pooled)),
            *(self.heads.project_cross_view(self.image_feature, j).rows for j in (1, 2)),
        ]
        return sum((z * w).sum() for z, w in zip(outputs, self.weights))


def test_parameter_gradients_match_finite_differences():
    enc = EncoderConfig(
        k_nn=4, point_widths=(4, 4), image_widths=(4, 6), resolution=32, norm_groups=2
    )
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        objective = ScalarLoss(enc).double()
        objective.image_feature = objective.image_feature.double()
        objective.weights = [w.double() for w in objective.weights]
        cloud = torch.randn(1, 8, 3, dtype=torch.float64)

    names = [name for name, _ in objective.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for p in objective.parameters())

    def loss(*flat):
        return functional_call(objective, dict(zip(names, flat)), (cloud,))

    assert torch.autograd.gradcheck(loss, params, eps=1e-6, atol=1e-6, rtol=1e-4)
