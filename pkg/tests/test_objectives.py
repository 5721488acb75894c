import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnlab.model import DegenerateEmbeddingError
from unlearnlab.objectives import (
    FingerprintMismatchError,
    GradientSnapshot,
    PairBatch,
    fd_check,
    forget_loss,
    grad,
    grads_flat,
    loss_and_grad,
    retain_loss,
    snapshot,
)

from helpers import embedding_model, tiny_batch, tiny_model


def test_single_pair_contrastive_is_zero():
    m = embedding_model(2)
    b = PairBatch([[1.0, 0.0]], [[0.3, 0.7]], [0])
    value, g = loss_and_grad(m, b, "retain")
    assert value == 0.0
    assert not grads_flat(g).any()


def test_orthogonal_pair_contrastive_value():
    # two pairs, tau = 1: image i matches text i, cross terms are 0
    m = embedding_model(2, tau=1.0)
    b = PairBatch(np.eye(2), np.eye(2), [0, 1])
    assert retain_loss(m, b) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)


def test_identical_embeddings_give_log2():
    m = embedding_model(2, tau=1.0)
    b = PairBatch([[1.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]], [0, 0])
    assert retain_loss(m, b) == pytest.approx(math.log(2), abs=1e-15)


@pytest.mark.parametrize("text,expected", [([1.0, 0.0], 0.0), ([-1.0, 0.0], 2.0), ([0.0, 1.0], 1.0)])
def test_forget_loss_examples(text, expected):
    m = embedding_model(2)
    assert forget_loss(m, PairBatch([[2.0, 0.0]], [text], [0])) == pytest.approx(expected, abs=1e-15)


def test_degenerate_input_raises():
    m = embedding_model(2)
    with pytest.raises(DegenerateEmbeddingError):
        forget_loss(m, PairBatch([[0.0, 0.0]], [[1.0, 0.0]], [0]))


def test_unknown_loss_kind():
    with pytest.raises(ValueError):
        grad(tiny_model(0), tiny_batch(0), "hinge")


@pytest.mark.parametrize("kind", ["forget", "retain"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(kind, seed):
    assert fd_check(tiny_model(seed), tiny_batch(seed, n=5), kind) < 1e-5


def test_forget_gradient_invariant_to_duplication():
    m, b = tiny_model(3), tiny_batch(3, n=3)
    g1 = grads_flat(grad(m, b, "forget"))
    g2 = grads_flat(grad(m, b.repeat(3), "forget"))
    np.testing.assert_allclose(g1, g2, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ["forget", "retain"])
def test_chunked_matches_full_batch(kind):
    m, b = tiny_model(4), tiny_batch(4, n=11)
    full = grads_flat(grad(m, b, kind))
    chunked = grads_flat(grad(m, b, kind, chunk_size=4))
    assert np.abs(full - chunked).max() <= 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_forget_loss_is_mean_of_parts(seed, n1, n2):
    m = tiny_model(seed % 50)
    a, b = tiny_batch(seed, n=n1), tiny_batch(seed + 1, n=n2)
    whole = forget_loss(m, a.concat(b))
    assert whole == pytest.approx((n1 * forget_loss(m, a) + n2 * forget_loss(m, b)) / (n1 + n2), abs=1e-12)
    assert 0.0 <= whole <= 2.0


def test_snapshot_shapes_and_determinism():
    m = tiny_model(0)
    f, r = tiny_batch(0, n=3), tiny_batch(1, n=6)
    s1, s2 = snapshot(m, f, r), snapshot(m, f, r)
    assert s1.layer_names == m.layer_names
    assert (s1.n_forget, s1.n_retain) == (3, 6)
    for name in m.layer_names:
        w, b = m.get_layer(name)
        assert s1.forget[name][0].shape == w.shape and s1.retain[name][1].shape == b.shape
        for x, y in zip(s1.forget[name] + s1.retain[name], s2.forget[name] + s2.retain[name]):
            assert x.tobytes() == y.tobytes()
    s1.check(m)
    with pytest.raises(FingerprintMismatchError):
        s1.check(tiny_model(1))


def test_snapshot_round_trip(tmp_path):
    m = tiny_model(2)
    s = snapshot(m, tiny_batch(2, n=3), tiny_batch(3, n=4))
    s.save(tmp_path / "g.snap")
    back = GradientSnapshot.load(tmp_path / "g.snap")
    assert back.fingerprint == s.fingerprint and back.layer_names == s.layer_names
    assert grads_flat(back.forget).tobytes() == grads_flat(s.forget).tobytes()
    assert grads_flat(back.retain).tobytes() == grads_flat(s.retain).tobytes()


def test_pair_batch_validation():
    with pytest.raises(ValueError):
        PairBatch(np.ones((2, 3)), np.ones((3, 3)), [0, 1])
    with pytest.raises(ValueError):
        PairBatch(np.ones((1, 3)), np.ones((1, 3)), [-1])
