import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from crossres.supervision import (
    EmptySupervisionError, PredictionHead, PredictionMap, ce_loss, compute_prototypes,
    confidence_mask, mask_statistics, masked_ce_loss, predict_head, total_loss,
)


def pm_from_probs(probs):
    """PredictionMap whose softmax reproduces ``probs`` (B, C, H, W)."""
    return PredictionMap(torch.log(torch.as_tensor(probs, dtype=torch.float64)))


def test_head_outputs_distribution():
    head = PredictionHead(5, 4)
    pred = predict_head(torch.randn(2, 5, 3, 3), head)
    assert torch.allclose(pred.probs.sum(1), torch.ones(2, 3, 3), atol=1e-5)


def test_head_zero_is_uniform():
    head = PredictionHead(5, 4)
    torch.nn.init.zeros_(head.weight)
    torch.nn.init.zeros_(head.bias)
    pred = predict_head(torch.zeros(1, 5, 2, 2), head)
    assert torch.allclose(pred.probs, torch.full((1, 4, 2, 2), 0.25))


def test_hard_is_argmax():
    logits = torch.tensor([[2.0, 1.0], [0.0, 3.0]])  # two pixels, two classes
    pred = PredictionMap(logits.reshape(1, 2, 2, 1).permute(0, 2, 1, 3).reshape(1, 2, 2, 1))
    oracle = [int(np.argmax(row)) for row in logits.numpy()]
    assert pred.hard.flatten().tolist() == oracle == [0, 1]
    tie = PredictionMap(torch.zeros(1, 3, 1, 1))
    assert tie.hard.item() == 0


def test_ce_one_hot_and_uniform():
    probs = torch.zeros(1, 3, 1, 2, dtype=torch.float64)
    probs[0, 1, 0, 0] = 1
    probs[0, 2, 0, 1] = 1
    logits = torch.where(probs > 0, torch.tensor(0.0, dtype=torch.float64), torch.tensor(-1e9, dtype=torch.float64))
    assert ce_loss(PredictionMap(logits), torch.tensor([[[1, 2]]])) == 0
    uniform = PredictionMap(torch.zeros(1, 5, 2, 2, dtype=torch.float64))
    assert ce_loss(uniform, torch.zeros(1, 2, 2, dtype=torch.long)).item() == pytest.approx(math.log(5), abs=1e-15)


def test_ce_two_pixel_case():
    probs = torch.tensor([[0.7, 0.2], [0.3, 0.8]], dtype=torch.float64).reshape(1, 2, 1, 2)
    loss = ce_loss(pm_from_probs(probs), torch.zeros(1, 1, 2, dtype=torch.long))
    assert loss.item() == pytest.approx(-(math.log(0.7) + math.log(0.2)) / 2, rel=1e-12)


def test_ce_ignores_and_rejects_empty():
    pred = pm_from_probs(torch.tensor([[0.7, 0.2], [0.3, 0.8]]).reshape(1, 2, 1, 2))
    assert ce_loss(pred, torch.tensor([[[0, -1]]])).item() == pytest.approx(-math.log(0.7))
    with pytest.raises(EmptySupervisionError, match="empty supervision"):
        ce_loss(pred, torch.full((1, 1, 2), -1))


def test_prototypes():
    F = torch.randn(2, 3, 4, 4)
    proto = compute_prototypes(F, torch.full((2, 4, 4), 2), 4)
    assert proto.present_ids == [2]
    assert torch.allclose(proto.proto[2].float(), F.mean((0, 2, 3)), atol=1e-6)
    F = torch.tensor([[1.0, 0.0], [0.0, 1.0]]).T.reshape(1, 2, 1, 2)
    proto = compute_prototypes(F, torch.zeros(1, 1, 2, dtype=torch.long), 3)
    assert proto.proto[0].tolist() == [0.5, 0.5]
    assert proto.present.tolist() == [True, False, False]


def test_mask_parallel_and_orthogonal():
    protos = compute_prototypes(torch.tensor([1.0, 0.0]).reshape(1, 2, 1, 1), torch.zeros(1, 1, 1, dtype=torch.long), 2)
    F = torch.tensor([[3.0, 0.0], [0.0, 2.0]]).T.reshape(1, 2, 1, 2)
    m = confidence_mask(F, torch.zeros(1, 1, 2, dtype=torch.long), protos, 0.9)
    assert m.tolist() == [[[True, False]]]


def test_mask_absent_class_and_zero_feature():
    F = torch.tensor([[1.0, 1.0], [0.0, 0.0]]).reshape(1, 2, 1, 2)
    hard = torch.tensor([[[0, 0]]])
    protos = compute_prototypes(F, hard, 3)
    assert confidence_mask(F, torch.tensor([[[1, 0]]]), protos, -1.0).tolist() == [[[False, True]]]
    F[0, :, 0, 1] = 0
    assert confidence_mask(F, hard, protos, -1.0).tolist() == [[[True, False]]]


def brute_cosine_mask(F, hard, protos, tau):
    B, D, H, W = F.shape
    out = np.zeros((B, H, W), bool)
    for b in range(B):
        for i in range(H):
            for j in range(W):
                c = int(hard[b, i, j])
                if not protos.present[c]:
                    continue
                f = F[b, :, i, j].double().numpy()
                p = protos.proto[c].numpy()
                nf, np_ = np.sqrt((f * f).sum()), np.sqrt((p * p).sum())
                if nf == 0 or np_ == 0:
                    continue
                out[b, i, j] = (f @ p) / (nf * np_) >= tau
    return out


@pytest.mark.parametrize("tau", [-1.0, 0.0, 0.5, 0.9])
def test_mask_matches_brute_force(tau):
    torch.manual_seed(0)
    F = torch.relu(torch.randn(2, 4, 5, 5))
    hard = torch.randint(0, 4, (2, 5, 5))
    hard[0, 0, 0] = 3
    protos = compute_prototypes(F, torch.where(hard == 3, torch.zeros_like(hard), hard), 4)
    m = confidence_mask(F, hard, protos, tau)
    np.testing.assert_array_equal(m.numpy(), brute_cosine_mask(F, hard, protos, tau))
    if tau == -1.0:
        feature_nonzero = F.norm(dim=1) > 0
        np.testing.assert_array_equal(m.numpy(), (protos.present[hard] & feature_nonzero).numpy())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3), st.floats(-1, 1), st.floats(-1, 1))
def test_mask_scale_invariance_and_monotonicity(seed, scale, t1, t2):
    g = torch.Generator().manual_seed(seed)
    F = torch.randn(2, 6, 4, 4, generator=g)
    hard = torch.randint(0, 3, (2, 4, 4), generator=g)
    tau = 0.3
    m = confidence_mask(F, hard, compute_prototypes(F, hard, 3), tau)
    m_scaled = confidence_mask(F * scale, hard, compute_prototypes(F * scale, hard, 3), tau)
    assert torch.equal(m, m_scaled)
    lo, hi = sorted((t1, t2))
    protos = compute_prototypes(F, hard, 3)
    m_lo, m_hi = confidence_mask(F, hard, protos, lo), confidence_mask(F, hard, protos, hi)
    assert not (m_hi & ~m_lo).any()


def test_mask_rejects_bad_tau():
    with pytest.raises(ValueError):
        confidence_mask(torch.zeros(1, 1, 1, 1), torch.zeros(1, 1, 1, dtype=torch.long),
                        compute_prototypes(torch.zeros(1, 1, 1, 1), torch.zeros(1, 1, 1, dtype=torch.long), 1), 1.5)


def test_masked_ce_cases():
    torch.manual_seed(0)
    pred = PredictionMap(torch.randn(2, 3, 4, 4, dtype=torch.float64))
    pseudo = torch.randint(0, 3, (2, 4, 4))
    full = masked_ce_loss(pred, pseudo, torch.ones(2, 4, 4, dtype=torch.bool))
    assert abs(full.item() - ce_loss(pred, pseudo).item()) < 1e-9
    assert masked_ce_loss(pred, pseudo, torch.zeros(2, 4, 4, dtype=torch.bool)) is None
    two = pm_from_probs(torch.tensor([[0.5, 0.9], [0.5, 0.1]]).reshape(1, 2, 1, 2))
    loss = masked_ce_loss(two, torch.zeros(1, 1, 2, dtype=torch.long), torch.tensor([[[True, False]]]))
    assert loss.item() == pytest.approx(-math.log(0.5))


def test_masked_ce_gradient_matches_finite_differences():
    torch.manual_seed(3)
    logits = torch.randn(1, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    pseudo = torch.tensor([[[0, 2], [1, 1]]])
    mask = torch.tensor([[[True, False], [True, True]]])
    masked_ce_loss(PredictionMap(logits), pseudo, mask).backward()
    analytic = logits.grad.clone()
    h = 1e-6
    numeric = torch.zeros_like(analytic)
    base = logits.detach()
    for idx in np.ndindex(*base.shape):
        plus, minus = base.clone(), base.clone()
        plus[idx] += h
        minus[idx] -= h
        numeric[idx] = (masked_ce_loss(PredictionMap(plus), pseudo, mask)
                        - masked_ce_loss(PredictionMap(minus), pseudo, mask)) / (2 * h)
    # masked-out pixel (0, 1) gets exactly zero gradient
    assert torch.all(analytic[0, :, 0, 1] == 0)
    rel = (analytic - numeric).abs().max() / numeric.abs().max()
    assert rel < 1e-4


def test_ce_non_negative():
    torch.manual_seed(0)
    for _ in range(20):
        pred = PredictionMap(torch.randn(1, 4, 3, 3) * 5)
        assert ce_loss(pred, torch.randint(0, 4, (1, 3, 3))) >= 0


def test_total_loss():
    assert total_loss(torch.tensor(2.0), torch.tensor(4.0), 1.0) == 2.0
    assert total_loss(2.0, 4.0, 0.5) == 3.0
    assert total_loss(2.0, None, 0.5) == 1.0
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, 1.5)


def test_mask_statistics():
    mask = torch.tensor([[[True, False], [True, True]]])
    hard = torch.tensor([[[0, 0], [1, 1]]])
    stats = mask_statistics(mask, hard, 3)
    assert stats["kept_fraction"] == 0.75
    assert stats["per_class_kept"] == {0: 0.5, 1: 1.0}
