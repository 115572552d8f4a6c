import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from opendas.errors import ShapeError, ValidationError
from opendas.objectives import (LossConfig, TripletBatch, cross_entropy, lambda_at,
                                stage2_loss, triplet_loss)


def _line_triplet(d_pos, d_neg, dtype=torch.float64):
    """Anchor at 0, positive and negative on the first axis at the given distances."""
    z = torch.zeros(1, 3, dtype=dtype)
    pos, neg = z.clone(), z.clone()
    pos[0, 0], neg[0, 0] = d_pos, -d_neg
    return TripletBatch(z, pos, neg)


def test_cross_entropy_frozen_value():
    # log(e + e^2 + e^3) - 3
    value = cross_entropy(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64), 2)
    assert value.item() == pytest.approx(0.40760596444437555, abs=1e-12)


def test_cross_entropy_batch_mean():
    logits = torch.tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]], dtype=torch.float64)
    value = cross_entropy(logits, torch.tensor([2, 1]))
    assert value.item() == pytest.approx((0.40760596444437555 + math.log(3)) / 2, abs=1e-12)


def test_cross_entropy_errors():
    with pytest.raises(ValidationError):
        cross_entropy(torch.tensor([1.0, float("nan")]), 0)
    with pytest.raises(ValidationError):
        cross_entropy(torch.tensor([1.0, 2.0]), 2)


@pytest.mark.parametrize("d_pos,d_neg,mu,expected", [
    (1.0, 2.0, 1.5, 0.5),
    (1.0, 2.5, 1.5, 0.0),
    (1.0, 3.0, 1.5, 0.0),
    (0.7, 0.7, 1.5, 1.5),
    (0.0, 0.0, 0.25, 0.25),
])
def test_triplet_analytic(d_pos, d_neg, mu, expected):
    assert triplet_loss(_line_triplet(d_pos, d_neg), mu).item() == pytest.approx(expected, abs=1e-9)


def test_triplet_mean_over_batch():
    a = _line_triplet(1.0, 2.0)
    b = _line_triplet(1.0, 3.0)
    batch = TripletBatch(torch.cat([a.anchors, b.anchors]), torch.cat([a.positives, b.positives]),
                         torch.cat([a.negatives, b.negatives]))
    assert triplet_loss(batch, 1.5).item() == pytest.approx(0.25, abs=1e-12)


def test_triplet_subgradient_zero_at_hinge():
    batch = _line_triplet(1.0, 2.5)
    batch.anchors.requires_grad_(True)
    triplet_loss(batch, 1.5).backward()
    assert torch.count_nonzero(batch.anchors.grad) == 0


def test_triplet_shape_mismatch():
    with pytest.raises(ShapeError):
        TripletBatch(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(1, 3))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=9, max_size=9),
       st.floats(0.01, 3.0))
def test_triplet_nonnegative_and_bounded(xs, mu):
    t = torch.tensor(xs, dtype=torch.float64).view(3, 1, 3)
    batch = TripletBatch(t[0], t[1], t[2])
    loss = triplet_loss(batch, mu).item()
    d_pos = torch.dist(t[0], t[1]).item()
    assert 0.0 <= loss <= d_pos + mu + 1e-9


def test_lambda_schedule_endpoints_and_monotone():
    cfg = LossConfig()
    values = [lambda_at(s, 99, cfg) for s in range(100)]
    assert values[0] == 2.0 and values[-1] == 5.0
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert lambda_at(33, 66, cfg) == pytest.approx(3.5)


def test_lambda_schedule_errors():
    with pytest.raises(ValidationError):
        lambda_at(5, 4, LossConfig())
    with pytest.raises(ValidationError):
        lambda_at(0, 0, LossConfig())


def test_loss_config_validation():
    with pytest.raises(ValidationError):
        LossConfig(margin_mu=0).validate()
    with pytest.raises(ValidationError):
        LossConfig(lambda_min=3, lambda_max=2).validate()
    LossConfig(lambda_min=0, lambda_max=0).validate()


def test_stage2_loss_combines_terms():
    logits = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
    trip = _line_triplet(1.0, 2.0)
    cfg = LossConfig()
    total = stage2_loss(logits, torch.tensor([2]), trip, 3.0, cfg)
    assert total.item() == pytest.approx(0.40760596444437555 + 3.0 * 0.5, abs=1e-12)
    ce_only = stage2_loss(logits, torch.tensor([2]), trip, 0.0, cfg)
    assert ce_only.item() == pytest.approx(0.40760596444437555, abs=1e-12)
    with pytest.raises(ValidationError):
        stage2_loss(logits, torch.tensor([2]), trip, -1.0, cfg)
