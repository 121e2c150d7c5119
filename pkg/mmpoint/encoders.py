"""Point and image backbones.

`PointEncoder` is a dynamic-graph edge-convolution network: every layer
rebuilds a k-NN graph in its current feature space, maps the edge feature
concat(x_i, x_j - x_i) with a shared pointwise layer and takes the max over
neighbours. The global feature concatenates max- and mean-pooling over points.

`ImageEncoder` is a small stack of stride-2 convolutions followed by global
average pooling.

Typical usage:

    from mmpoint.config import EncoderConfig
    from mmpoint.encoders import PointEncoder, encode_points

    net = PointEncoder(EncoderConfig())
    feature = encode_points(cloud, net)
    feature.global_.shape  # (1, 256)
"""

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict
from torch import nn

from mmpoint.config import EncoderConfig
from mmpoint.core import PointCloud, ViewImage


def knn(x: torch.Tensor, k: int) -> torch.Tensor:
    """Return the indices of the k nearest neighbours of every point.

    Args:
        x: Features of shape (B, n, d).
        k: Neighbours per point; the point itself is included.

    Returns:
        A (B, n, k) index tensor.
    """
    inner = x @ x.transpose(1, 2)
    sq = (x * x).sum(dim=-1, keepdim=True)
    neg_dist = 2 * inner - sq - sq.transpose(1, 2)
    return neg_dist.topk(k=k, dim=-1).indices


def edge_features(x: torch.Tensor, k: int) -> torch.Tensor:
    """Return concat(x_i, x_j - x_i) over the k-NN graph, shaped (B, 2d, n, k)."""
    B, n, d = x.shape
    idx = knn(x.detach(), k)
    # Row lookup on the flattened batch; the gradient is a (B * n, d) scatter.
    idx_base = torch.arange(B, device=x.device).view(-1, 1, 1) * n
    flat = (idx + idx_base).view(-1)
    neighbours = x.reshape(B * n, d)[flat].view(B, n, k, d)
    centre = x.unsqueeze(2).expand(B, n, k, d)
    return torch.cat((centre, neighbours - centre), dim=-1).permute(0, 3, 1, 2)


def _norm(groups: int, width: int) -> nn.Module:
    if groups <= 0:
        return nn.Identity()
    return nn.GroupNorm(groups, width)


class EdgeConvBlock(nn.Module):
    """One dynamic edge-convolution layer."""

    def __init__(self, d_in: int, d_out: int, k: int, norm_groups: int):
        """Construct the layer.

        Args:
            d_in:        Input feature width.
            d_out:       Output feature width.
            k:           Neighbours per point.
            norm_groups: GroupNorm groups; 0 disables normalization.
        """
        super().__init__()
        self.k = k
        self.conv = nn.Conv2d(2 * d_in, d_out, kernel_size=1, bias=norm_groups <= 0)
        self.norm = _norm(norm_groups, d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Map (B, n, d_in) features to (B, n, d_out)."""
        e = F.leaky_relu(self.norm(self.conv(edge_features(x, self.k))), negative_slope=0.2)
        return e.max(dim=-1).values.transpose(1, 2)


class PointEncoder(nn.Module):
    """Dynamic-graph edge-convolution point backbone."""

    def __init__(self, config: EncoderConfig):
        """Construct the point backbone from an encoder config."""
        super().__init__()
        self.k = config.k_nn
        widths = (3, *config.point_widths)
        self.blocks = nn.ModuleList(
            EdgeConvBlock(widths[i], widths[i + 1], config.k_nn, config.norm_groups)
            for i in range(len(config.point_widths))
        )
        self.out_dim = config.point_dim

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode a batch of clouds.

        Args:
            x: Coordinates of shape (B, n, 3).

        Returns:
            The per-point features (B, n, d_p) and the global features (B, D).
        """
        if x.ndim != 3 or x.shape[-1] != 3:
            raise ValueError(f"expected (B, n, 3) coordinates, got {tuple(x.shape)}")
        if x.shape[1] < self.k:
            raise ValueError(f"a cloud of {x.shape[1]} points is smaller than k_nn={self.k}")
        for block in self.blocks:
            x = block(x)
        return x, torch.cat((x.max(dim=1).values, x.mean(dim=1)), dim=-1)


class ImageEncoder(nn.Module):
    """Strided convolutional image backbone with global average pooling."""

    def __init__(self, config: EncoderConfig):
        """Construct the image backbone from an encoder config."""
        super().__init__()
        self.channels = config.image_channels
        self.resolution = config.resolution
        layers: list[nn.Module] = []
        c_in = config.image_channels
        for w in config.image_widths:
            layers += [
                nn.Conv2d(
                    c_in, w, kernel_size=3, stride=2, padding=1, bias=config.norm_groups <= 0
                ),
                _norm(config.norm_groups, w),
                nn.ReLU(inplace=True),
            ]
            c_in = w
        self.stages = nn.Sequential(*layers)
        self.out_dim = config.image_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Encode a (B, C, H, W) batch into (B, C_out) features.

        Single-channel input is broadcast to the configured channel count.
        """
        if x.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) images, got {tuple(x.shape)}")
        if x.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(
                f"image resolution {tuple(x.shape[-2:])} does not match the configured "
                f"{self.resolution}x{self.resolution}"
            )
        if x.shape[1] == 1 and self.channels > 1:
            x = x.expand(-1, self.channels, -1, -1)
        elif x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        return self.stages(x).mean(dim=(-2, -1))


class PointFeature(BaseModel):
    """Pre-projection features of one cloud."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    per_point: torch.Tensor
    global_: torch.Tensor


class ImageFeature(BaseModel):
    """Pre-projection feature of one view."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    vector: torch.Tensor


def _dtype(module: nn.Module) -> torch.dtype:
    return next(module.parameters()).dtype


def encode_points(cloud: PointCloud, encoder: PointEncoder) -> PointFeature:
    """Encode one cloud; returns per-point (n, d_p) and global (1, D) features."""
    x = torch.as_tensor(cloud.points, dtype=_dtype(encoder)).unsqueeze(0)
    per_point, pooled = encoder(x)
    return PointFeature(per_point=per_point[0], global_=pooled)


def encode_image(view: ViewImage, encoder: ImageEncoder) -> ImageFeature:
    """Encode one view into a (1, C) feature."""
    x = view.to_tensor().to(_dtype(encoder)).unsqueeze(0)
    return ImageFeature(vector=encoder(x))
