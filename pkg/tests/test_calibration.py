import logging
import math

import numpy as np
import pytest
import torch

import oracles
from cbmt.calibration import (CalibrationStats, accumulate_stats, bce_loss, calibrated_bce, class_weights,
                              finalize_epoch, weighted_bce)
from cbmt.pseudo import informative_pixel_mask, make_pseudo_labels


def _stats_from(fg_losses, bg_losses):
    losses = torch.tensor(list(fg_losses) + list(bg_losses), dtype=torch.float64)[:, None]
    labels = torch.tensor([1.0] * len(fg_losses) + [0.0] * len(bg_losses), dtype=torch.float64)[:, None]
    return accumulate_stats(CalibrationStats.empty(1), losses, labels)


def test_bce_examples():
    losses, _ = bce_loss(torch.tensor([1.0]), torch.tensor([1.0]))
    assert losses.item() < 1e-6
    losses, _ = bce_loss(torch.tensor([0.5], dtype=torch.float64), torch.tensor([0.0]))
    assert losses.item() == pytest.approx(0.6931471805599453, rel=1e-12)
    pos, _ = bce_loss(torch.tensor([0.5]), torch.tensor([1.0]))
    neg, _ = bce_loss(torch.tensor([0.5]), torch.tensor([0.0]))
    assert pos.item() == neg.item()


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        bce_loss(torch.rand(2, 2), torch.rand(2, 3))


def test_accumulate_example():
    stats = finalize_epoch(_stats_from([0.5, 0.3], [0.1, 0.1, 0.6]))
    assert stats.eta_fg[0] == pytest.approx(0.4)
    assert stats.eta_bg[0] == pytest.approx(0.8 / 3)
    assert stats.bg_weight[0] == pytest.approx(1.5)


def test_symmetric_losses_give_unit_weight():
    assert finalize_epoch(_stats_from([0.7], [0.7])).bg_weight[0] == pytest.approx(1.0)


def test_empty_keep_mask_leaves_stats_unchanged():
    s0 = CalibrationStats.empty(2)
    s1 = accumulate_stats(s0, torch.rand(4, 4, 2), torch.ones(4, 4, 2), torch.zeros(4, 4, 2, dtype=torch.bool))
    for name in ("sum_fg_loss", "count_fg", "sum_bg_loss", "count_bg"):
        np.testing.assert_array_equal(getattr(s0, name), getattr(s1, name))


def test_finalize_from_sums():
    s = CalibrationStats.empty(1)
    s = s.merge(type(s)(np.array([0.8]), np.array([2]), np.array([0.6]), np.array([3]), s.eta_fg, s.eta_bg,
                        s.bg_weight, 0, s.finalized))
    out = finalize_epoch(s)
    assert out.bg_weight[0] == pytest.approx(2.0)
    assert out.epoch == 1
    assert out.count_fg[0] == 0 and out.sum_bg_loss[0] == 0


def test_warm_start_weight_is_one():
    np.testing.assert_array_equal(class_weights(CalibrationStats.empty(2), [0, 1]), [1.0, 1.0])


def test_missing_foreground_keeps_previous_weight(caplog):
    first = finalize_epoch(_stats_from([0.8], [0.4]))
    assert first.bg_weight[0] == pytest.approx(2.0)
    with caplog.at_level(logging.WARNING):
        second = finalize_epoch(accumulate_stats(first, torch.tensor([[0.3]]), torch.tensor([[0.0]])))
    assert second.bg_weight[0] == pytest.approx(2.0)
    assert "no usable statistics" in caplog.text


def test_unknown_class_is_an_error():
    with pytest.raises(ValueError):
        class_weights(CalibrationStats.empty(2), [2])


def test_calibrated_with_unit_weight_equals_bce(rng):
    p = torch.from_numpy(rng.uniform(0, 1, (8, 8, 2)))
    y = make_pseudo_labels(p, 0.75)
    _, plain = bce_loss(p, y)
    calibrated = calibrated_bce(p, y, CalibrationStats.empty(2), [1])
    assert calibrated.item() == pytest.approx(plain.item(), rel=1e-12)


def test_calibrated_background_example():
    s = finalize_epoch(_stats_from([0.6], [0.4]))
    loss = calibrated_bce(torch.tensor([[0.5]], dtype=torch.float64), torch.tensor([[0.0]]), s, [0])
    assert loss.item() == pytest.approx(1.5 * math.log(2), rel=1e-12)
    assert loss.item() == pytest.approx(1.0397, abs=1e-4)


@pytest.mark.parametrize("w", [0.1, 1.0, 7.0])
def test_foreground_term_ignores_weight(w):
    p = torch.tensor([[0.3], [0.9]], dtype=torch.float64)
    y = torch.ones(2, 1, dtype=torch.float64)
    assert weighted_bce(p, y, [w]).item() == pytest.approx(bce_loss(p, y)[1].item(), rel=1e-14)


def test_stats_match_brute_force_loop(rng):
    for trial in range(10):
        p = rng.uniform(0, 1, (8, 8, 2))
        tp = torch.from_numpy(p)
        y = make_pseudo_labels(tp, 0.75)
        keep = informative_pixel_mask(tp, y, 0.75, 0.2)
        losses, _ = bce_loss(tp, y)
        got = finalize_epoch(accumulate_stats(CalibrationStats.empty(2), losses, y, keep))
        for k, (ef, eb, nf, nb) in enumerate(oracles.eta_stats(p, y.numpy(), keep.numpy())):
            if nf and nb:
                assert got.eta_fg[k] == pytest.approx(ef, rel=1e-10)
                assert got.eta_bg[k] == pytest.approx(eb, rel=1e-10)
                assert got.bg_weight[k] == pytest.approx(ef / eb, rel=1e-10)


def test_merge_is_associative(rng):
    parts = []
    for _ in range(3):
        p = torch.from_numpy(rng.uniform(0, 1, (4, 4, 2)))
        y = make_pseudo_labels(p, 0.5)
        parts.append(accumulate_stats(CalibrationStats.empty(2), bce_loss(p, y)[0], y))
    a = parts[0].merge(parts[1]).merge(parts[2])
    b = parts[0].merge(parts[1].merge(parts[2]))
    np.testing.assert_allclose(a.sum_fg_loss, b.sum_fg_loss, rtol=1e-14)
    np.testing.assert_array_equal(a.count_bg, b.count_bg)


def test_background_scaling(rng):
    fg = rng.uniform(0.1, 1, 5)
    bg = rng.uniform(0.1, 1, 7)
    base = finalize_epoch(_stats_from(fg, bg))
    scaled = finalize_epoch(_stats_from(fg, 3 * bg))
    assert scaled.eta_fg[0] == pytest.approx(base.eta_fg[0], rel=1e-14)
    assert scaled.bg_weight[0] == pytest.approx(base.bg_weight[0] / 3, rel=1e-12)


def test_gradient_matches_finite_differences(rng):
    p = torch.from_numpy(rng.uniform(0.05, 0.95, (8, 8, 2))).requires_grad_(True)
    y = make_pseudo_labels(p.detach(), 0.75)
    w = [1.0, 0.37]
    loss = weighted_bce(p, y, w)
    (grad,) = torch.autograd.grad(loss, p)
    h = 1e-4
    num = np.zeros(p.shape)
    base = p.detach().numpy()
    for idx in np.ndindex(*p.shape):
        up, dn = base.copy(), base.copy()
        up[idx] += h
        dn[idx] -= h
        num[idx] = (oracles.calibrated_bce(up, y.numpy(), w) - oracles.calibrated_bce(dn, y.numpy(), w)) / (2 * h)
    np.testing.assert_allclose(grad.numpy(), num, rtol=1e-5)
