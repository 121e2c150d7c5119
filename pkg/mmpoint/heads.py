"""Projection heads that map backbone features into the contrastive spaces.

A `HeadBank` holds one intra-modal head per modality and one cross-modal head
pair (point side, view side) per view level. Level j heads project into a
space of width `d_cross[j]`; no parameters are shared between levels.

Two toggles change the routing for ablations:

  - `multi_mlp=False`: every level goes through the level-1 cross pair.
  - `decoupled_intra=False`: the intra-modal loss reuses the level-1 point
    cross head instead of its own head.
"""

import torch
import torch.nn.functional as F
from torch import nn

from mmpoint.config import ProjectionConfig, Toggles, validate_config
from mmpoint.core import EmbeddingBatch, space_tag

MODALITIES = ("point", "image")


class ProjectionHead(nn.Module):
    """Two-layer MLP (hidden width = input width) followed by L2 normalization."""

    def __init__(self, d_in: int, d_out: int):
        """Construct the head."""
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        self.net = nn.Sequential(nn.Linear(d_in, d_in), nn.ReLU(), nn.Linear(d_in, d_out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Project (B, d_in) features to unit-norm (B, d_out) rows."""
        if x.shape[-1] != self.d_in:
            raise ValueError(f"head expects features of width {self.d_in}, got {x.shape[-1]}")
        return F.normalize(self.net(x), dim=-1)


class HeadBank(nn.Module):
    """The intra-modal heads and the per-level cross-modal heads of both encoders."""

    def __init__(
        self,
        config: ProjectionConfig,
        *,
        point_dim: int,
        image_dim: int,
        toggles: Toggles | None = None,
    ):
        """Construct the heads.

        Args:
            config:    Projection dims; checked with `validate_config`.
            point_dim: Width D of the global point feature.
            image_dim: Width C of the image feature.
            toggles:   (Optional) Ablation switches; defaults to the full scheme.
        """
        super().__init__()
        validate_config(config)
        self.config = config
        self.toggles = toggles or Toggles()
        self.intra_P = ProjectionHead(point_dim, config.d_intra)
        self.intra_I = ProjectionHead(image_dim, config.d_intra)
        self.cross_P = nn.ModuleList(ProjectionHead(point_dim, d) for d in config.d_cross)
        self.cross_I = nn.ModuleList(ProjectionHead(image_dim, d) for d in config.d_cross)

    @property
    def m(self) -> int:
        """Return the number of view levels."""
        return self.config.m

    def registry(self) -> dict[str, int]:
        """Return the embedding width registered for each space tag."""
        dims = {space_tag(None): self.intra_space_dim}
        for j in range(1, self.m + 1):
            dims[space_tag(j)] = self.config.d_cross[self._route(j) - 1]
        return dims

    @property
    def intra_space_dim(self) -> int:
        """Return the width of the space the intra-modal loss runs in."""
        if self.toggles.decoupled_intra:
            return self.config.d_intra
        return self.config.d_cross[0]

    def _route(self, level: int) -> int:
        if not 1 <= level <= self.m:
            raise ValueError(f"level must be in [1, {self.m}], got {level}")
        return level if self.toggles.multi_mlp else 1

    def active_heads(self) -> list[str]:
        """Return the names of the heads that take part in the objective."""
        names = ["intra_P"] if self.toggles.decoupled_intra else []
        levels = sorted({self._route(j) for j in range(1, self.m + 1)})
        names += [f"cross_P.{j - 1}" for j in levels] + [f"cross_I.{j - 1}" for j in levels]
        return names

    def _embed(self, rows: torch.Tensor, tag: str) -> EmbeddingBatch:
        batch = EmbeddingBatch(rows=rows, space_tag=tag)
        batch.check_dim(self.registry())
        return batch

    def project_intra(self, features: torch.Tensor, modality: str = "point") -> EmbeddingBatch:
        """Project global features into the intra-modal space.

        Args:
            features: A (B, D) point or (B, C) image feature batch.
            modality: (Optional) `point` or `image`.

        Raises:
            ValueError: if a head's output width differs from its registered dim.
        """
        if modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
        if modality == "image":
            head = self.intra_I if self.toggles.decoupled_intra else self.cross_I[0]
        else:
            head = self.intra_P if self.toggles.decoupled_intra else self.cross_P[0]
        return self._embed(head(features), space_tag(None))

    def project_cross_point(self, features: torch.Tensor) -> list[EmbeddingBatch]:
        """Project point features into every level's cross-modal space."""
        return [
            self._embed(self.cross_P[self._route(j) - 1](features), space_tag(j))
            for j in range(1, self.m + 1)
        ]

    def project_cross_view(self, features: torch.Tensor, level: int) -> EmbeddingBatch:
        """Project image features of the views assigned to `level` (1-based)."""
        head = self.cross_I[self._route(level) - 1]
        return self._embed(head(features), space_tag(level))
