import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ltfuse.data import synth_balanced
from ltfuse.errors import FormatError, InsufficientSamplesError, MissingFeatureError
from ltfuse.features import (FeatureStore, manifest_path, normalize_resize, pca_reduce, pool_latent,
                             resize_bilinear, store_roundtrip, synth_provider)
from ltfuse.train import linear_probe
from oracles import pca_scores_oracle

finite = st.floats(-100, 100, allow_nan=False)


def _random_map(rng):
    c = int(rng.integers(1, 9))
    while True:
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        if 2 <= h * w <= 64:
            return rng.standard_normal((c, h, w)) * rng.uniform(0.1, 10)


def test_pca_two_point_example():
    fmap = np.array([[[1.0, 3.0]], [[2.0, 6.0]]])
    scores, degenerate = pca_reduce(fmap)
    assert not degenerate
    np.testing.assert_allclose(scores.ravel(), [-math.sqrt(5), math.sqrt(5)], atol=1e-12)


def test_pca_constant_map_is_degenerate():
    scores, degenerate = pca_reduce(np.full((3, 2, 2), 5.0))
    assert degenerate
    assert scores.shape == (1, 2, 2) and not scores.any()


def test_pca_single_channel_is_centred_input():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((1, 3, 4))
    scores, _ = pca_reduce(m)
    centred = m - m.mean()
    sign = np.sign(scores.ravel() @ centred.ravel())
    np.testing.assert_allclose(scores, sign * centred, atol=1e-12)


def test_pca_needs_two_positions():
    with pytest.raises(InsufficientSamplesError):
        pca_reduce(np.ones((3, 1, 1)))


def test_pca_matches_covariance_oracle():
    rng = np.random.default_rng(11)
    for _ in range(100):
        fmap = _random_map(rng)
        ours, _ = pca_reduce(fmap)
        ref, _ = pca_scores_oracle(fmap)
        err = min(np.abs(ours - ref).max(), np.abs(ours + ref).max())
        assert err < 1e-8


def test_pca_variance_optimal():
    rng = np.random.default_rng(5)
    for _ in range(20):
        fmap = _random_map(rng)
        c = fmap.shape[0]
        x = fmap.reshape(c, -1).T
        x = x - x.mean(axis=0)
        best = pca_reduce(fmap)[0].var()
        dirs = rng.standard_normal((100, c))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        assert np.all((x @ dirs.T).var(axis=0) <= best * (1 + 1e-10) + 1e-12)


def test_pca_sign_convention():
    rng = np.random.default_rng(2)
    fmap = rng.standard_normal((4, 3, 3))
    a, _ = pca_reduce(fmap)
    b, _ = pca_reduce(fmap.copy())
    np.testing.assert_array_equal(a, b)


def test_normalize_examples():
    np.testing.assert_allclose(normalize_resize(np.array([[[2.0, 4.0]]]), 1, 2), [[[0.0, 1.0]]])
    assert not normalize_resize(np.full((1, 3, 3), 7.0), 2, 2).any()


def test_bilinear_single_centre_sample():
    m = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert resize_bilinear(m, 1, 1)[0, 0] == pytest.approx(1.5)
    # After min-max scaling to [0, 1] the same centre sample sits at 1.5 / 3.
    assert normalize_resize(m[None], 1, 1)[0, 0, 0] == pytest.approx(0.5)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.just(1), st.integers(1, 6), st.integers(1, 6)), elements=finite),
       st.integers(1, 9), st.integers(1, 9))
def test_normalize_resize_in_unit_interval(m, h, w):
    out = normalize_resize(m, h, w)
    assert out.shape == (1, h, w)
    assert out.min() >= 0.0 and out.max() <= 1.0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.just(1), st.integers(1, 6), st.integers(1, 6)), elements=finite))
def test_same_shape_resize_is_identity(m):
    once = normalize_resize(m, m.shape[1], m.shape[2])
    np.testing.assert_allclose(normalize_resize(once, m.shape[1], m.shape[2]), once, atol=1e-12)


def test_pool_examples():
    np.testing.assert_array_equal(pool_latent(np.ones((3, 2, 2))), [1, 1, 1])
    assert pool_latent(np.array([[[0.0, 1.0], [2.0, 3.0]]]))[0] == 1.5
    assert pool_latent(np.array([[[4.25]]]))[0] == 4.25


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4), st.integers(1, 4)), elements=finite),
       st.randoms(use_true_random=False))
def test_pool_commutes_with_channel_permutation(m, rnd):
    perm = list(range(m.shape[0]))
    rnd.shuffle(perm)
    np.testing.assert_allclose(pool_latent(m[perm]), pool_latent(m)[perm])


def test_store_roundtrip_bytes():
    rng = np.random.default_rng(0)
    fmap = rng.standard_normal((4, 3, 3)).astype(np.float32)
    back = store_roundtrip(FeatureStore(), 7, fmap)
    assert back.tobytes() == fmap.tobytes()


def test_store_missing_id():
    store = FeatureStore()
    store.put(1, np.zeros((1, 1, 1)))
    with pytest.raises(MissingFeatureError):
        store.get(2)
    assert store.missing([1, 2, 3]) == [2, 3]


def _saved_store(tmp_path):
    store = FeatureStore()
    for i in range(3):
        store.put(i, np.full((2, 2, 2), float(i)))
    path = tmp_path / "f.ltff"
    store.save(path)
    return path


def test_store_file_roundtrip(tmp_path):
    path = _saved_store(tmp_path)
    back = FeatureStore.open(path)
    assert back.ids() == [0, 1, 2]
    assert back.get(2)[0, 0, 0] == 2.0


def test_store_rejects_overlapping_offsets(tmp_path):
    path = _saved_store(tmp_path)
    mp = manifest_path(path)
    doc = json.loads(mp.read_text())
    doc["records"]["1"]["offset"] = doc["records"]["0"]["offset"] + 4
    mp.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="overlapping"):
        FeatureStore.open(path)


def test_store_rejects_bad_magic(tmp_path):
    path = _saved_store(tmp_path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    manifest_path(path).unlink()
    with pytest.raises(FormatError, match="bad magic"):
        FeatureStore.open(path)


def test_store_rejects_checksum_mismatch(tmp_path):
    path = _saved_store(tmp_path)
    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="checksum"):
        FeatureStore.open(path)


def test_provider_bijection_and_determinism():
    ds = synth_balanced(3, 4)
    a = synth_provider(ds, d_sam=5, seed=2)
    b = synth_provider(ds, d_sam=5, seed=2)
    assert len(a) == len(ds)
    assert a.ids() == sorted(ds.ids.tolist())
    assert a.checksum == b.checksum
    assert synth_provider(ds, d_sam=5, seed=3).checksum != a.checksum


def _probe_accuracy(signal, seed):
    k = 10
    tr = synth_balanced(k, 200, split="train", seed=seed)
    va = synth_balanced(k, 40, split="val", seed=seed, id_offset=len(tr))
    store = synth_provider(tr, signal_strength=signal, seed=seed)
    synth_provider(va, signal_strength=signal, seed=seed, store=store)
    xt = np.stack([pool_latent(f) for f in store.stack(tr.ids)])
    xv = np.stack([pool_latent(f) for f in store.stack(va.ids)])
    pred = linear_probe(xt, tr.labels, xv, k)
    return 100.0 * np.mean(pred == va.labels)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_provider_without_signal_is_chance(seed):
    assert abs(_probe_accuracy(0.0, seed) - 10.0) <= 5.0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_provider_strong_signal_is_separable(seed):
    assert _probe_accuracy(1.0, seed) > 90.0
