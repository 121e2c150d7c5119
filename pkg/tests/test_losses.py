import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from mmpoint.config import ProjectionConfig
from mmpoint.core import EmbeddingBatch
from mmpoint.heads import HeadBank
from mmpoint.losses import (
    LossReport,
    history_header,
    loss_inter,
    loss_inter_plus,
    loss_intra,
    mi_lower_bound,
    negatives_count,
    pairwise_contrast,
)


def unit_rows(rng: np.random.Generator, n: int, d: int) -> torch.Tensor:
    x = rng.normal(size=(n, d))
    return torch.from_numpy(x / np.linalg.norm(x, axis=1, keepdims=True))


def brute_force(a: torch.Tensor, b: torch.Tensor, tau: float) -> float:
    """Enumerate every anchor, positive and negative explicitly."""
    a, b = a.tolist(), b.tolist()
    n = len(a)

    def sim(u, v):
        return math.exp(sum(x * y for x, y in zip(u, v)) / tau)

    total = 0.0
    for x, y in ((a, b), (b, a)):
        for i in range(n):
            denom = sum(sim(x[i], x[k]) for k in range(n) if k != i)
            denom += sum(sim(x[i], y[k]) for k in range(n))
            total -= math.log(sim(x[i], y[i]) / denom)
    return total / (2 * n)


def test_single_pair_is_zero():
    rng = np.random.default_rng(0)
    a, b = unit_rows(rng, 1, 4), unit_rows(rng, 1, 4)
    assert pairwise_contrast(a, b, 0.1).item() == 0.0


def test_orthogonal_pair_closed_form():
    a = torch.eye(2, dtype=torch.float64)
    loss = pairwise_contrast(a, a.clone(), 0.5)
    assert abs(loss.item() - math.log(1 + 2 * math.exp(-2))) < 1e-9
    assert loss.item() == pytest.approx(0.2395, abs=1e-4)


@pytest.mark.parametrize("n", [2, 3, 4, 8])
def test_high_temperature_limit(n):
    rng = np.random.default_rng(n)
    loss = pairwise_contrast(unit_rows(rng, n, 5), unit_rows(rng, n, 5), 1e6)
    assert abs(loss.item() - math.log(2 * n - 1)) < 1e-3


def test_three_rows_match_brute_force():
    rng = np.random.default_rng(3)
    a, b = unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)
    assert abs(pairwise_contrast(a, b, 0.5).item() - brute_force(a, b, 0.5)) < 1e-9


def test_batch_order_does_not_matter():
    rng = np.random.default_rng(4)
    a, b = unit_rows(rng, 6, 8), unit_rows(rng, 6, 8)
    perm = torch.from_numpy(rng.permutation(6))
    assert abs(pairwise_contrast(a, b, 0.1) - pairwise_contrast(a[perm], b[perm], 0.1)) < 1e-6


def test_symmetric_in_arguments():
    rng = np.random.default_rng(5)
    a, b = unit_rows(rng, 4, 3), unit_rows(rng, 4, 3)
    assert pairwise_contrast(a, b, 0.2).item() == pairwise_contrast(b, a, 0.2).item()


def test_aligned_batches_score_lower():
    rng = np.random.default_rng(6)
    a = unit_rows(rng, 4, 8)
    noisy = torch.nn.functional.normalize(a + 0.05 * unit_rows(rng, 4, 8), dim=-1)
    unrelated = unit_rows(rng, 4, 8)
    assert pairwise_contrast(a, noisy, 0.1) < pairwise_contrast(a, unrelated, 0.1)


def test_terms_are_non_negative():
    rng = np.random.default_rng(7)
    for n in range(1, 6):
        assert pairwise_contrast(unit_rows(rng, n, 3), unit_rows(rng, n, 3), 0.1).item() >= 0


@pytest.mark.parametrize("tau", [0.0, -0.1, float("nan")])
def test_rejects_temperature(tau):
    a = torch.eye(2, dtype=torch.float64)
    with pytest.raises(ValueError, match="temperature"):
        pairwise_contrast(a, a, tau)


def test_rejects_shape_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="shape"):
        pairwise_contrast(unit_rows(rng, 3, 4), unit_rows(rng, 2, 4), 0.1)


def test_rejects_non_unit_rows():
    with pytest.raises(ValueError, match="unit-norm"):
        pairwise_contrast(2 * torch.eye(2), torch.eye(2), 0.1)


def test_rejects_space_mismatch():
    a = EmbeddingBatch(rows=torch.eye(2), space_tag="cross-level-1")
    b = EmbeddingBatch(rows=torch.eye(2), space_tag="cross-level-2")
    with pytest.raises(ValueError, match="cannot contrast"):
        loss_inter(a, b, 0.1)


def test_inter_rejects_width_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="width"):
        loss_inter(unit_rows(rng, 2, 4), unit_rows(rng, 2, 5), 0.1)


def test_single_level_is_twice_inter():
    rng = np.random.default_rng(8)
    z, v = unit_rows(rng, 4, 6), unit_rows(rng, 4, 6)
    total, per_level = loss_inter_plus([z], [z.clone()], [v], 0.1)
    assert len(per_level) == 1
    assert abs(total.item() - 2 * loss_inter(z, v, 0.1).item()) < 1e-12


def test_two_levels_sum_four_terms():
    rng = np.random.default_rng(9)
    z1 = [unit_rows(rng, 2, 3), unit_rows(rng, 2, 5)]
    z2 = [unit_rows(rng, 2, 3), unit_rows(rng, 2, 5)]
    views = [unit_rows(rng, 2, 3), unit_rows(rng, 2, 5)]
    total, per_level = loss_inter_plus(z1, z2, views, 0.5)
    expected = sum(brute_force(z[j], views[j], 0.5) for z in (z1, z2) for j in range(2))
    assert abs(total.item() - expected) < 1e-6
    assert abs(sum(t.item() for t in per_level) - total.item()) < 1e-12


def test_inter_plus_needs_matching_levels():
    rng = np.random.default_rng(0)
    z = unit_rows(rng, 2, 3)
    with pytest.raises(ValueError, match="one point batch per view level"):
        loss_inter_plus([z, z], [z], [z, z], 0.1)
    with pytest.raises(ValueError):
        loss_inter_plus([], [], [], 0.1)


@settings(max_examples=200, deadline=None)
@given(
    n=st.integers(1, 4),
    d=st.integers(1, 8),
    m=st.integers(1, 3),
    tau=st.sampled_from([0.1, 0.5, 1.0]),
    seed=st.integers(0, 2**32 - 1),
)
def test_losses_match_brute_force(n, d, m, tau, seed):
    rng = np.random.default_rng(seed)
    a, b = unit_rows(rng, n, d), unit_rows(rng, n, d)
    assert abs(pairwise_contrast(a, b, tau).item() - brute_force(a, b, tau)) < 1e-6
    assert abs(loss_intra(a, b, tau).item() - brute_force(a, b, tau)) < 1e-6
    assert abs(loss_inter(a, b, tau).item() - brute_force(a, b, tau)) < 1e-6

    z1 = [unit_rows(rng, n, d) for _ in range(m)]
    z2 = [unit_rows(rng, n, d) for _ in range(m)]
    views = [unit_rows(rng, n, d) for _ in range(m)]
    total, _ = loss_inter_plus(z1, z2, views, tau)
    expected = sum(brute_force(z[j], views[j], tau) for z in (z1, z2) for j in range(m))
    assert abs(total.item() - expected) < 1e-6


def test_inter_plus_gradients():
    rng = np.random.default_rng(10)
    dims = (3, 4)
    inputs = tuple(
        unit_rows(rng, 3, d).requires_grad_(True) for _ in range(3) for d in dims
    )

    def total(*rows):
        z1, z2, views = rows[0:2], rows[2:4], rows[4:6]
        return loss_inter_plus(list(z1), list(z2), list(views), 0.5)[0]

    assert torch.autograd.gradcheck(total, inputs, eps=1e-7, atol=1e-7, rtol=1e-4)


def test_dropping_a_level_frees_its_heads():
    torch.manual_seed(0)
    bank = HeadBank(ProjectionConfig(d_intra=16, d_cross=[24, 32, 40]), point_dim=64, image_dim=32)
    points_1, points_2 = torch.randn(4, 64), torch.randn(4, 64)
    images = [torch.randn(4, 32) for _ in range(3)]

    def receiving(levels: int) -> int:
        bank.zero_grad(set_to_none=True)
        z1 = bank.project_cross_point(points_1)[:levels]
        z2 = bank.project_cross_point(points_2)[:levels]
        views = [bank.project_cross_view(images[j], j + 1) for j in range(levels)]
        loss_inter_plus(z1, z2, views, 0.1)[0].backward()
        return sum(
            p.numel() for p in bank.parameters() if p.grad is not None and p.grad.abs().sum() > 0
        )

    assert receiving(3) > receiving(2) > receiving(1)


@pytest.mark.parametrize(
    "loss,k,expected",
    [(2.0, 1024, 4.9315), (0.0, 1, 0.0), (1.0, 6, 0.7918)],
)
def test_mi_lower_bound(loss, k, expected):
    assert mi_lower_bound(loss, k) == pytest.approx(expected, abs=1e-4)


def test_mi_lower_bound_needs_negatives():
    with pytest.raises(ValueError, match="at least 1"):
        mi_lower_bound(1.0, 0)


@pytest.mark.parametrize("batch,k", [(1, 1), (2, 2), (4, 6), (32, 62)])
def test_negatives_count(batch, k):
    assert negatives_count(batch) == k


def test_loss_report_composition():
    report = LossReport.from_components(
        1.0, [0.5, 0.7], tau=0.1, batch_size=4, lambda_intra=0.5, lambda_inter=2.0
    )
    assert report.m == 2
    assert report.k == 6
    assert report.overall == pytest.approx(0.5 * 1.0 + 2.0 * 1.2)
    assert report.recomputed_overall() == pytest.approx(report.overall)
    assert report.mi_bound == pytest.approx(math.log(6) - 1.2 / 4)
    assert report.row(3) == [3, 1.0, 0.5, 0.7, report.overall, report.mi_bound]
    assert history_header(2) == [
        "step",
        "intra",
        "inter_level_1",
        "inter_level_2",
        "overall",
        "mi_bound",
    ]


@pytest.mark.parametrize(
    "intra,inter",
    [(float("nan"), [0.5]), (1.0, [float("inf")]), (1.0, [-0.1]), (-1.0, [0.5])],
)
def test_loss_report_rejects(intra, inter):
    with pytest.raises(ValidationError):
        LossReport.from_components(intra, inter, tau=0.1, batch_size=4)
