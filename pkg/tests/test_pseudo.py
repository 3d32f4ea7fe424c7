import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from cbmt.datamodel import FilterMode
from cbmt.pseudo import informative_pixel_mask, make_pseudo_labels

probs_arrays = arrays(np.float64, (4, 5, 2), elements=st.floats(0, 1))


def test_threshold_examples():
    assert make_pseudo_labels(torch.tensor([0.8, 0.3]), 0.75).tolist() == [1.0, 0.0]
    assert make_pseudo_labels(torch.tensor([0.75]), 0.75).tolist() == [0.0]
    assert make_pseudo_labels(torch.zeros(3, 3, 2), 0.75).sum() == 0


@pytest.mark.parametrize("gamma", [0.0, 1.0, -0.1, 1.5])
def test_gamma_out_of_range(gamma):
    with pytest.raises(ValueError):
        make_pseudo_labels(torch.rand(2, 2), gamma)


@given(probs_arrays, st.floats(0.01, 0.99))
def test_labels_match_brute_force(p, gamma):
    got = make_pseudo_labels(torch.from_numpy(p), gamma).numpy()
    np.testing.assert_array_equal(got, oracles.pseudo_labels(p, gamma))


@given(probs_arrays, st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_raising_gamma_never_adds_foreground(p, gamma, delta):
    low = make_pseudo_labels(torch.from_numpy(p), gamma)
    high = make_pseudo_labels(torch.from_numpy(p), min(gamma + delta, 0.99))
    assert not ((high == 1) & (low == 0)).any()


def _keep(p, y, alpha, mode, gamma=0.75):
    return bool(informative_pixel_mask(torch.tensor([p], dtype=torch.float64), torch.tensor([y], dtype=torch.float64),
                                       gamma, alpha, mode)[0])


def test_default_mode_examples():
    mode = FilterMode.DISTANCE_FROM_LABEL
    assert not _keep(0.96, 1.0, 0.2, mode)  # 0.04/0.25 = 0.16
    assert not _keep(0.03, 0.0, 0.2, mode)  # 0.03/0.75 = 0.04
    assert _keep(0.30, 0.0, 0.2, mode)  # 0.30/0.75 = 0.40


def test_literal_mode_boundary_is_excluded():
    assert not _keep(0.80, 1.0, 0.2, FilterMode.LITERAL_PAPER_FORMULA)
    assert not _keep(0.80, 1.0, 0.2, "literal_paper_formula")
    # float32 rounding of the same boundary
    m = informative_pixel_mask(torch.tensor([0.8]), torch.tensor([1.0]), 0.75, 0.2, FilterMode.LITERAL_PAPER_FORMULA)
    assert not m.item()


def test_literal_mode_keeps_confident_pixels():
    assert _keep(0.99, 1.0, 0.2, FilterMode.LITERAL_PAPER_FORMULA)
    assert not _keep(0.99, 1.0, 0.2, FilterMode.DISTANCE_FROM_LABEL)


@pytest.mark.parametrize("mode", list(FilterMode))
def test_alpha_zero_keeps_everything(mode):
    p = torch.tensor([0.0, 1.0, 0.75, 0.5, 0.9999])
    y = make_pseudo_labels(p, 0.75)
    assert informative_pixel_mask(p, y, 0.75, 0.0, mode).all()


def test_filter_errors():
    p = torch.rand(3, 2)
    with pytest.raises(ValueError):
        informative_pixel_mask(p, make_pseudo_labels(p, 0.75), 0.75, 1.0)
    with pytest.raises(ValueError):
        informative_pixel_mask(p, torch.zeros(2, 3), 0.75, 0.2)


@settings(max_examples=50)
@given(probs_arrays, st.floats(0.0, 0.9), st.floats(0.0, 0.09))
def test_kept_set_shrinks_with_alpha(p, alpha, delta):
    p = torch.from_numpy(p)
    y = make_pseudo_labels(p, 0.75)
    small = informative_pixel_mask(p, y, 0.75, alpha)
    large = informative_pixel_mask(p, y, 0.75, alpha + delta)
    assert not (large & ~small).any()
