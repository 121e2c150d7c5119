"""Contrastive objectives over unit-norm embedding batches.

Every loss here is built on `pairwise_contrast`, a symmetric in-batch
contrastive loss whose denominator, for anchor a_i, sums over the other rows
of its own batch and over every row of the opposite batch:

    l(A, B, i) = -log( exp(a_i.b_i / tau) /
                       (sum_{k != i} exp(a_i.a_k / tau) + sum_k exp(a_i.b_k / tau)) )

    L(A, B) = 1/(2n) * sum_i [ l(A, B, i) + l(B, A, i) ]

Typical usage:

    from mmpoint.losses import loss_inter_plus, loss_intra

    intra = loss_intra(z1, z2, tau=0.1)
    inter, per_level = loss_inter_plus(zp1, zp2, views, tau=0.1)
"""

import math
from typing import Sequence

import torch
from pydantic import BaseModel, Field, model_validator

from mmpoint.core import EmbeddingBatch, check_unit_rows

Embeddings = EmbeddingBatch | torch.Tensor


def _rows(x: Embeddings) -> torch.Tensor:
    return x.rows if isinstance(x, EmbeddingBatch) else x


def _anchor_loss(a: torch.Tensor, b: torch.Tensor, tau: float) -> torch.Tensor:
    n = a.shape[0]
    self_mask = torch.eye(n, dtype=torch.bool, device=a.device)
    same = (a @ a.T / tau).masked_fill(self_mask, float("-inf"))
    cross = a @ b.T / tau
    logits = torch.cat((same, cross), dim=1)
    return (torch.logsumexp(logits, dim=1) - cross.diagonal()).sum()


def pairwise_contrast(a: Embeddings, b: Embeddings, tau: float) -> torch.Tensor:
    """Return the symmetric in-batch contrastive loss between two aligned batches.

    Row i of `a` and row i of `b` form the positive pair; every other row of
    either batch is a negative.

    Args:
        a:   A (B, d) batch of unit-norm rows.
        b:   A (B, d) batch of unit-norm rows in the same space.
        tau: Temperature, > 0.

    Raises:
        ValueError: on a non-positive temperature, mismatched shapes or spaces,
            or rows that are not unit-norm.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if isinstance(a, EmbeddingBatch) and isinstance(b, EmbeddingBatch):
        if a.space_tag != b.space_tag:
            raise ValueError(f"cannot contrast {a.space_tag} against {b.space_tag}")
    ra, rb = _rows(a), _rows(b)
    if ra.ndim != 2 or ra.shape != rb.shape:
        raise ValueError(
            f"batches must share shape (B, d), got {tuple(ra.shape)} and {tuple(rb.shape)}"
        )
    check_unit_rows(ra)
    check_unit_rows(rb)
    n = ra.shape[0]
    return (_anchor_loss(ra, rb, tau) + _anchor_loss(rb, ra, tau)) / (2 * n)


def loss_intra(z1: Embeddings, z2: Embeddings, tau: float) -> torch.Tensor:
    """Contrast the two augmented point-cloud variants in the intra-modal space."""
    return pairwise_contrast(z1, z2, tau)


def loss_inter(z_points: Embeddings, h_views: Embeddings, tau: float) -> torch.Tensor:
    """Contrast point embeddings against view embeddings within one level space."""
    if _rows(z_points).shape[-1] != _rows(h_views).shape[-1]:
        raise ValueError(
            f"point and view embeddings differ in width: "
            f"{_rows(z_points).shape[-1]} vs {_rows(h_views).shape[-1]}"
        )
    return pairwise_contrast(z_points, h_views, tau)


def loss_inter_plus(
    z_points_1: Sequence[Embeddings],
    z_points_2: Sequence[Embeddings],
    views: Sequence[Embeddings],
    tau: float,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Sum the cross-modal loss over all view levels and both point variants.

    Args:
        z_points_1: First variant projected at every level, levels 1..m.
        z_points_2: Second variant projected at every level, levels 1..m.
        views:      The level-j view batch projected by the level-j head, for j = 1..m.
        tau:        Temperature.

    Returns:
        The total and the per-level terms loss_inter(Z1_j, V_j) + loss_inter(Z2_j, V_j).
    """
    m = len(views)
    if m == 0 or len(z_points_1) != m or len(z_points_2) != m:
        raise ValueError(
            f"need one point batch per view level, got {len(z_points_1)}, "
            f"{len(z_points_2)} and {m} views"
        )
    per_level = []
    for z1, z2, v in zip(z_points_1, z_points_2, views):
        per_level.append(loss_inter(z1, v, tau) + loss_inter(z2, v, tau))
    total = per_level[0]
    for term in per_level[1:]:
        total = total + term
    return total, per_level


def mi_lower_bound(loss: float | torch.Tensor, k: int) -> float | torch.Tensor:
    """Return the mutual-information lower bound log(k) - loss, with k negatives."""
    if k < 1:
        raise ValueError(f"the number of negatives must be at least 1, got {k}")
    return math.log(k) - loss


def negatives_count(batch_size: int) -> int:
    """Return the negatives per anchor used for the bound, 2B - 2 (at least 1)."""
    return max(2 * batch_size - 2, 1)


class LossReport(BaseModel):
    """The loss components of one training step."""

    intra: float = Field(..., ge=0)
    inter_per_level: list[float]
    overall: float
    mi_bound: float
    tau: float = Field(..., gt=0)
    k: int = Field(..., ge=1)
    lambda_intra: float = 1.0
    lambda_inter: float = 1.0

    @model_validator(mode="after")
    def _check_finite(self) -> "LossReport":
        values = [self.intra, *self.inter_per_level, self.overall, self.mi_bound]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("loss report holds non-finite values")
        if any(v < 0 for v in self.inter_per_level):
            raise ValueError("contrastive terms must be non-negative")
        return self

    @classmethod
    def from_components(
        cls,
        intra: float,
        inter_per_level: list[float],
        *,
        tau: float,
        batch_size: int,
        lambda_intra: float = 1.0,
        lambda_inter: float = 1.0,
    ) -> "LossReport":
        """Build a report, computing the overall loss and the bound from the parts.

        The bound uses the mean of the 2m symmetric cross-modal terms.
        """
        k = negatives_count(batch_size)
        mean_inter = sum(inter_per_level) / (2 * len(inter_per_level))
        return cls(
            intra=intra,
            inter_per_level=inter_per_level,
            overall=lambda_intra * intra + lambda_inter * sum(inter_per_level),
            mi_bound=mi_lower_bound(mean_inter, k),
            tau=tau,
            k=k,
            lambda_intra=lambda_intra,
            lambda_inter=lambda_inter,
        )

    @property
    def m(self) -> int:
        """Return the number of view levels."""
        return len(self.inter_per_level)

    def recomputed_overall(self) -> float:
        """Return lambda_intra * intra + lambda_inter * sum(inter), from the stored parts."""
        return self.lambda_intra * self.intra + self.lambda_inter * sum(self.inter_per_level)

    def row(self, step: int) -> list:
        """Return the loss-history CSV row for this report."""
        return [step, self.intra, *self.inter_per_level, self.overall, self.mi_bound]


def history_header(m: int) -> list[str]:
    """Return the loss-history CSV header for m levels."""
    return ["step", "intra", *(f"inter_level_{j}" for j in range(1, m + 1)), "overall", "mi_bound"]
