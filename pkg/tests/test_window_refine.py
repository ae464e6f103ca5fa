import numpy as np
import pytest

from sparsevox.embedding import EmbeddedTokenSet
from sparsevox.numerics import Tensor
from sparsevox.window_refine import (DeepFusionModule, SetAttentionLayer,
                                     partition)


def _emb(coords, feats):
    coords = np.asarray(coords, dtype=np.int64)
    return EmbeddedTokenSet(Tensor(np.asarray(feats, dtype=np.float64)),
                            coords.astype(np.float64), coords,
                            np.ones(len(coords), dtype=bool))


def window_id(coord, shape, shift):
    return tuple((np.asarray(coord) + shift) // np.asarray(shape))


def test_single_window_single_set(rng):
    coords = rng.integers(0, 4, size=(6, 3))
    coords = np.unique(coords, axis=0)
    part = partition(coords, (24, 24, 11), (0, 0, 0), 0, set_size=72)
    assert part.set_count == 1
    assert sorted(part.sets[0].tolist()) == list(range(len(coords)))


def test_window_boundary_floor_division():
    assert window_id((24, 0, 0), (24, 24, 11), (0, 0, 0)) == (1, 0, 0)
    assert window_id((23, 0, 0), (24, 24, 11), (0, 0, 0)) == (0, 0, 0)
    coords = np.array([[23, 0, 0], [24, 0, 0]])
    part = partition(coords, (24, 24, 11), (0, 0, 0), 0, set_size=72)
    assert part.set_count == 2


def test_shift_moves_cell_between_windows():
    assert window_id((13, 0, 0), (24, 24, 11), (0, 0, 0))[0] == 0
    assert window_id((13, 0, 0), (24, 24, 11), (12, 12, 0))[0] == 1


def test_partition_is_disjoint_cover(rng):
    coords = np.unique(rng.integers(0, 30, size=(200, 3)), axis=0)
    part = partition(coords, (8, 8, 4), (4, 4, 0), 1, set_size=5)
    seen = np.concatenate(part.sets)
    assert sorted(seen.tolist()) == list(range(len(coords)))
    for s in part.sets:
        assert len(s) <= 5
        wids = {window_id(coords[i], (8, 8, 4), (4, 4, 0)) for i in s}
        assert len(wids) == 1


def test_refine_single_token_keeps_coords(rng):
    dfm = DeepFusionModule(12, blocks=1, window_shape=(4, 4, 4), set_size=4,
                           shift=(2, 2, 0), ffn_dim=12, rng=rng)
    emb = _emb([[1, 2, 3]], rng.normal(size=(1, 12)))
    out = dfm.refine(emb)
    assert np.array_equal(out.coords_idx, emb.coords_idx)
    assert out.tokens.shape == (1, 12)


def test_tokens_in_different_windows_do_not_interact(rng):
    dfm = DeepFusionModule(12, blocks=1, window_shape=(4, 4, 4), set_size=8,
                           shift=(0, 0, 0), ffn_dim=12, rng=rng)
    feats = rng.normal(size=(2, 12))
    emb_a = _emb([[0, 0, 0], [9, 9, 0]], feats)
    out_a = dfm.refine(emb_a).tokens.data
    changed = feats.copy()
    changed[1] += 5.0  # only the second token's features change
    emb_b = _emb([[0, 0, 0], [9, 9, 0]], changed)
    out_b = dfm.refine(emb_b).tokens.data
    assert np.array_equal(out_a[0], out_b[0])
    assert not np.array_equal(out_a[1], out_b[1])


def test_refine_preserves_m_and_coords(rng):
    dfm = DeepFusionModule(12, blocks=2, window_shape=(4, 4, 4), set_size=4,
                           shift=(2, 2, 0), ffn_dim=24, rng=rng)
    coords = np.unique(rng.integers(0, 12, size=(40, 3)), axis=0)
    emb = _emb(coords, rng.normal(size=(len(coords), 12)))
    out = dfm.refine(emb)
    assert len(out) == len(emb)
    assert np.array_equal(out.coords_idx, emb.coords_idx)


def test_refine_permutation_equivariant(rng):
    dfm = DeepFusionModule(12, blocks=1, window_shape=(4, 4, 4), set_size=4,
                           shift=(2, 2, 0), ffn_dim=12, rng=rng)
    coords = np.unique(rng.integers(0, 10, size=(25, 3)), axis=0)
    feats = rng.normal(size=(len(coords), 12))
    base = dfm.refine(_emb(coords, feats)).tokens.data
    perm = rng.permutation(len(coords))
    out = dfm.refine(_emb(coords[perm], feats[perm])).tokens.data
    assert np.array_equal(out, base[perm])


def test_uniform_attention_closed_form(rng):
    """Zeroed q/k (uniform weights), identity v/o, zeroed FFN: the sub-layer
    reduces to LN(LN(x + set_mean(x)))."""
    d = 6
    layer = SetAttentionLayer(d, d, rng)
    layer.wq.w.data[:] = 0.0
    layer.wq.b.data[:] = 0.0
    layer.wk.w.data[:] = 0.0
    layer.wk.b.data[:] = 0.0
    layer.wv.w.data = np.eye(d)
    layer.wv.b.data[:] = 0.0
    layer.wo.w.data = np.eye(d)
    layer.wo.b.data[:] = 0.0
    layer.ffn1.w.data[:] = 0.0
    layer.ffn1.b.data[:] = 0.0
    layer.ffn2.w.data[:] = 0.0
    layer.ffn2.b.data[:] = 0.0

    x = rng.normal(size=(5, d))
    sets = [np.array([0, 2]), np.array([1, 3, 4])]
    out = layer(Tensor(x), sets, set_size=4).data

    def ln(v):
        mu = v.mean(axis=-1, keepdims=True)
        var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5)

    expect = np.zeros_like(x)
    for s in sets:
        mixed = x[s] + x[s].mean(axis=0, keepdims=True)
        expect[s] = ln(ln(mixed))
    assert np.allclose(out, expect, atol=1e-12)


def test_block_gradcheck_small(rng):
    from _gradcheck import check_gradients
    from sparsevox.numerics import autodiff as ad

    dfm = DeepFusionModule(6, blocks=1, window_shape=(4, 4, 4), set_size=3,
                           shift=(2, 2, 0), ffn_dim=6, rng=rng)
    coords = np.unique(rng.integers(0, 8, size=(12, 3)), axis=0)[:8]
    feats = Tensor(rng.normal(size=(len(coords), 6)), requires_grad=True)
    probe = Tensor(rng.normal(size=(len(coords), 6)))

    def loss():
        emb = EmbeddedTokenSet(feats, coords.astype(float), coords,
                               np.ones(len(coords), bool))
        return ad.mean(ad.mul(dfm.refine(emb).tokens, probe))

    params = [feats] + [p.tensor for p in dfm.blocks[0].sublayers[0].parameters()]
    assert check_gradients(loss, params) < 1e-4
