"""Loss values against brute-force loop oracles and stated invariances."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osrkit.losses import cross_entropy, dtae_loss, ii_loss, rotnet_loss, triplet_loss


# ---------------------------------------------------------------- dtae

def _dtae_oracle(originals, recons, origin_index):
    """Scalar triple loop over (view, origin, pixel)."""
    total = 0.0
    for row in range(recons.shape[0]):
        x = originals[origin_index[row]]
        r = recons[row]
        for i in range(x.shape[0]):
            for j in range(x.shape[1]):
                total += 0.5 * float(x[i, j, 0] - r[i, j, 0]) ** 2
    return total


def test_dtae_perfect_reconstruction_is_zero():
    rng = np.random.default_rng(0)
    originals = rng.random((3, 4, 4, 1))
    origin = np.tile(np.arange(3), 4)
    lv = dtae_loss(originals, originals[origin], origin)
    assert lv.scalar == 0.0
    assert lv.raw_sum == 0.0


def test_dtae_single_pixel_error_raw_half():
    originals = np.zeros((1, 4, 4, 1))
    origin = np.zeros(4, dtype=int)
    recons = np.zeros((4, 4, 4, 1))
    recons[2, 1, 3, 0] = 1.0  # one view off by 1 in one pixel
    lv = dtae_loss(originals, recons, origin)
    assert lv.raw_sum == pytest.approx(0.5)
    assert lv.scalar == pytest.approx(0.5)  # N = 1


def test_dtae_matches_loop_oracle():
    rng = np.random.default_rng(42)
    originals = rng.random((4, 5, 5, 1))
    origin = np.tile(np.arange(4), 4)
    recons = rng.random((16, 5, 5, 1))
    lv = dtae_loss(originals, recons, origin)
    oracle = _dtae_oracle(originals, recons, origin)
    assert lv.raw_sum == pytest.approx(oracle, abs=1e-6)
    assert lv.scalar == pytest.approx(oracle / 4.0, abs=1e-6)


def test_dtae_rejects_wrong_view_count():
    originals = np.zeros((3, 4, 4, 1))
    with pytest.raises(ValueError, match="4N"):
        dtae_loss(originals, np.zeros((9, 4, 4, 1)), np.tile(np.arange(3), 3))


# ---------------------------------------------------------------- cross-entropy

def test_cross_entropy_uniform_logits():
    lv = cross_entropy(np.zeros((5, 4)), np.array([0, 1, 2, 3, 0]))
    assert lv.scalar == pytest.approx(np.log(4.0), abs=1e-9)


def test_cross_entropy_confident_correct_goes_to_zero():
    logits = np.zeros((3, 4))
    labels = np.array([1, 2, 0])
    logits[np.arange(3), labels] = 50.0
    assert cross_entropy(logits, labels).scalar < 1e-12


def test_cross_entropy_matches_direct_oracle():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((5, 3))
    labels = rng.integers(0, 3, size=5)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    oracle = float(np.mean([-np.log(probs[i, labels[i]]) for i in range(5)]))
    assert cross_entropy(logits, labels).scalar == pytest.approx(oracle, abs=1e-6)


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(ValueError, match="range"):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


@given(shift=st.floats(-50, 50), seed=st.integers(0, 500))
@settings(max_examples=30, deadline=None)
def test_cross_entropy_shift_invariance(shift, seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((4, 5))
    labels = rng.integers(0, 5, size=4)
    base = cross_entropy(logits, labels).scalar
    shifted = cross_entropy(logits + shift, labels).scalar
    assert shifted == pytest.approx(base, abs=1e-6)


def test_rotnet_equals_cross_entropy():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((8, 4))
    ids = rng.integers(0, 4, size=8)
    assert rotnet_loss(logits, ids).scalar == cross_entropy(logits, ids).scalar


def test_rotnet_uniform_is_ln4():
    assert rotnet_loss(np.zeros((6, 4)), np.zeros(6, dtype=int)).scalar == pytest.approx(
        np.log(4.0))


def test_rotnet_rejects_wrong_width():
    with pytest.raises(ValueError, match="4 logits"):
        rotnet_loss(np.zeros((4, 3)), np.zeros(4, dtype=int))


# ---------------------------------------------------------------- ii loss

def _ii_oracle(z, labels):
    classes = sorted(set(labels.tolist()))
    mu = {c: z[labels == c].mean(axis=0) for c in classes}
    intra = 0.0
    for j in range(len(z)):
        d = z[j] - mu[labels[j]]
        intra += float(d @ d)
    intra /= len(z)
    inter = min(float((mu[a] - mu[b]) @ (mu[a] - mu[b]))
                for i, a in enumerate(classes) for b in classes[i + 1:])
    return intra - inter


def test_ii_two_collapsed_classes():
    p, q = np.array([1.0, 0.0]), np.array([0.0, 2.0])
    z = np.stack([p, p, q, q])
    labels = np.array([0, 0, 1, 1])
    expected = -float((p - q) @ (p - q))
    assert ii_loss(z, labels).scalar == pytest.approx(expected, abs=1e-9)


def test_ii_means_two_apart_in_1d():
    z = np.array([[0.0], [0.0], [2.0], [2.0]])
    labels = np.array([0, 0, 1, 1])
    assert ii_loss(z, labels).scalar == pytest.approx(-4.0, abs=1e-12)


def test_ii_matches_loop_oracle():
    rng = np.random.default_rng(8)
    z = rng.standard_normal((12, 6))
    labels = np.repeat(np.arange(3), 4)
    assert ii_loss(z, labels).scalar == pytest.approx(_ii_oracle(z, labels), abs=1e-6)


def test_ii_requires_two_classes():
    with pytest.raises(ValueError, match="2 classes"):
        ii_loss(np.zeros((4, 6)), np.zeros(4, dtype=int))


@given(seed=st.integers(0, 300))
@settings(max_examples=25, deadline=None)
def test_ii_translation_invariance(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((9, 6))
    labels = np.repeat(np.arange(3), 3)
    offset = rng.standard_normal(6) * 10
    base = ii_loss(z, labels).scalar
    moved = ii_loss(z + offset, labels).scalar
    assert moved == pytest.approx(base, abs=1e-6)


# ---------------------------------------------------------------- triplet loss

def _triplet_oracle(z, labels, margin):
    total, count = 0.0, 0
    n = len(z)
    for a in range(n):
        for p in range(n):
            if p == a or labels[p] != labels[a]:
                continue
            for q in range(n):
                if labels[q] == labels[a]:
                    continue
                d_ap = float((z[a] - z[p]) @ (z[a] - z[p]))
                d_an = float((z[a] - z[q]) @ (z[a] - z[q]))
                hinge = d_ap - d_an + margin
                if hinge > 0:
                    total += hinge
                    count += 1
    return total / count if count else 0.0


def test_triplet_all_margins_satisfied_is_zero():
    z = np.array([[0.0, 0], [0.01, 0], [10, 0], [10.01, 0]])
    labels = np.array([0, 0, 1, 1])
    assert triplet_loss(z, labels, margin=0.2).scalar == 0.0


def test_triplet_single_triplet_at_boundary():
    # one anchor-positive pair at distance 0, negative at squared distance 1
    z = np.array([[0.0], [0.0], [1.0]])
    labels = np.array([0, 0, 1])
    # hinge = 0 - 1 + 0.2 < 0 for every valid triplet
    assert triplet_loss(z, labels, margin=0.2).scalar == 0.0


def test_triplet_matches_exhaustive_oracle():
    rng = np.random.default_rng(13)
    z = rng.standard_normal((10, 6)) * 0.5
    labels = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2, 2])
    got = triplet_loss(z, labels, margin=0.2).scalar
    assert got == pytest.approx(_triplet_oracle(z, labels, 0.2), abs=1e-6)


def test_triplet_requires_valid_triplet():
    z = np.zeros((3, 2))
    with pytest.raises(ValueError, match="triplet"):
        triplet_loss(z, np.array([0, 1, 2]), margin=0.2)  # no positive pairs


@given(seed=st.integers(0, 300))
@settings(max_examples=25, deadline=None)
def test_triplet_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((8, 6))
    labels = np.repeat(np.arange(2), 4)
    # random rigid rotation via QR
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    base = triplet_loss(z, labels, margin=0.2).scalar
    rotated = triplet_loss(z @ q, labels, margin=0.2).scalar
    assert rotated == pytest.approx(base, abs=1e-6)


def test_loss_values_finite_and_nonnegative_where_required():
    rng = np.random.default_rng(21)
    originals = rng.random((2, 4, 4, 1))
    recons = rng.random((8, 4, 4, 1))
    origin = np.tile(np.arange(2), 4)
    assert dtae_loss(originals, recons, origin).scalar >= 0.0
    logits = rng.standard_normal((6, 3))
    assert cross_entropy(logits, rng.integers(0, 3, 6)).scalar >= 0.0
    z = rng.standard_normal((8, 6))
    assert triplet_loss(z, np.repeat(np.arange(2), 4), 0.2).scalar >= 0.0
