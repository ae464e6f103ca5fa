import math

import numpy as np
import pytest

from sparsevox.boxes import Box3D
from sparsevox.elimination import (EliminationConfig, ScoreHead, focal_loss,
                                   label_tokens, pad_tokens, topk_select)
from sparsevox.embedding import EmbeddedTokenSet
from sparsevox.exceptions import ConfigError
from sparsevox.numerics import Tensor
from sparsevox.numerics import autodiff as ad


def unit_box(yaw=0.0):
    return Box3D(center=(0, 0, 0), size=(2, 2, 2), yaw=yaw)


def test_label_inside_dilated_extent():
    labels = label_tokens(np.array([[1.4, 0, 0]]), [unit_box()], dilation=1.5)
    assert labels[0] == 1.0


def test_label_outside_dilated_extent():
    labels = label_tokens(np.array([[1.6, 0, 0]]), [unit_box()], dilation=1.5)
    assert labels[0] == 0.0


def test_label_yaw_aware():
    box = Box3D(center=(0, 0, 0), size=(4, 1, 2), yaw=math.pi / 2)
    # box long axis now along y: (0, 1.8, 0) inside, (1.8, 0, 0) outside
    labels = label_tokens(np.array([[0, 1.8, 0], [1.8, 0, 0]]), [box], dilation=1.0)
    assert labels.tolist() == [1.0, 0.0]


def test_label_no_boxes():
    assert label_tokens(np.zeros((4, 3)), [], 1.5).tolist() == [0.0] * 4


def test_focal_gamma0_is_half_bce(rng):
    p = rng.uniform(0.05, 0.95, 16)
    y = (rng.uniform(size=16) < 0.5).astype(float)
    got = focal_loss(Tensor(p), y, gamma=0.0, alpha=0.5).item()
    bce = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    assert got == pytest.approx(0.5 * bce, rel=1e-12)


def test_focal_direct_value():
    got = focal_loss(Tensor([0.5]), np.array([1.0]), gamma=2.0, alpha=0.25).item()
    assert got == pytest.approx(0.25 * 0.25 * 0.6931471805599453, rel=1e-9)


def test_focal_perfect_predictions_vanish():
    p = np.array([1 - 1e-7, 1e-7, 1 - 1e-7])
    y = np.array([1.0, 0.0, 1.0])
    assert focal_loss(Tensor(p), y).item() < 1e-12


def _tokens(rng, m, d=6):
    coords = np.unique(rng.integers(0, 20, size=(m + 12, 3)), axis=0)[:m]
    return EmbeddedTokenSet(Tensor(rng.normal(size=(m, d))),
                            coords.astype(float), coords, np.ones(m, bool))


def test_topk_keep_all_is_identity(rng):
    toks = _tokens(rng, 7)
    out = topk_select(toks, rng.uniform(size=7), 7)
    assert out is toks


def test_topk_order_preserved():
    rng = np.random.default_rng(0)
    toks = _tokens(rng, 3)
    out = topk_select(toks, np.array([0.9, 0.1, 0.5]), 2)
    assert np.array_equal(out.coords_idx, toks.coords_idx[[0, 2]])
    assert np.array_equal(out.tokens.data, toks.tokens.data[[0, 2]])


def test_topk_tie_breaks_by_low_index(rng):
    toks = _tokens(rng, 4)
    out = topk_select(toks, np.array([0.5, 0.5, 0.5, 0.5]), 2)
    assert np.array_equal(out.coords_idx, toks.coords_idx[[0, 1]])


def test_topk_multiset_matches_sort_oracle(rng):
    for _ in range(25):
        m = int(rng.integers(2, 40))
        k = int(rng.integers(1, m + 1))
        scores = rng.uniform(size=m)
        toks = _tokens(rng, m)
        out = topk_select(toks, scores, k)
        keep_rows = [np.flatnonzero((toks.coords_idx == c).all(axis=1))[0]
                     for c in out.coords_idx]
        assert sorted(scores[keep_rows]) == pytest.approx(sorted(scores)[-k:])


def test_pad_tokens_mask(rng):
    toks = _tokens(rng, 3)
    out = pad_tokens(toks, 5)
    assert len(out) == 5
    assert out.valid.tolist() == [True] * 3 + [False] * 2
    assert np.array_equal(out.tokens.data[3:], np.zeros((2, toks.d_model)))


def test_elimination_config_validation():
    with pytest.raises(ConfigError):
        EliminationConfig(k=0)
    with pytest.raises(ConfigError):
        EliminationConfig(k=2.5)
    with pytest.raises(ConfigError):
        EliminationConfig(dilation=0.9)
    assert EliminationConfig(k=0.5).resolve_k(11) == 6
    assert EliminationConfig(k=256.0).resolve_k(11) == 256


def test_score_head_outputs_probabilities(rng):
    head = ScoreHead(8, rng)
    p = head(Tensor(rng.normal(size=(10, 8))))
    assert p.shape == (10,)
    assert (p.data > 0).all() and (p.data < 1).all()


def test_score_head_gradcheck(rng):
    from _gradcheck import check_gradients

    head = ScoreHead(5, rng)
    x = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    y = (rng.uniform(size=6) < 0.3).astype(float)
    err = check_gradients(lambda: focal_loss(head(x), y),
                          [x] + [p.tensor for p in head.parameters()])
    assert err < 1e-5
