"""Training objectives: reconstruction, rotation/classification cross-entropy,
and the two representation losses (intra/inter and triplet).

Every loss returns a LossValue carrying the optimizer-facing scalar and the
gradient with respect to its primary input, so the training loop can feed
the gradient straight into a network backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LossValue:
    scalar: float
    grad: np.ndarray | None = None
    per_sample: np.ndarray | None = None
    raw_sum: float | None = None


def dtae_loss(originals: np.ndarray, reconstructions: np.ndarray,
              origin_index: np.ndarray) -> LossValue:
    """Detransformation reconstruction loss.

    Each reconstruction row must match the *untransformed* source image it
    originated from, per `origin_index`. The raw value is half the total
    squared error over all views and pixels; the optimizer-facing scalar is
    the raw value divided by the number of source images, so the learning
    rate is independent of batch size.
    """
    n = originals.shape[0]
    if reconstructions.shape[0] != origin_index.shape[0]:
        raise ValueError("origin_index length must match reconstruction count")
    if reconstructions.shape[0] != 4 * n:
        raise ValueError(
            f"expected 4N={4 * n} reconstructions for N={n} originals, "
            f"got {reconstructions.shape[0]}")
    targets = originals[origin_index]
    diff = reconstructions.astype(np.float64) - targets.astype(np.float64)
    sq = diff * diff
    raw = 0.5 * float(sq.sum())
    per_origin = np.zeros(n, dtype=np.float64)
    np.add.at(per_origin, origin_index, 0.5 * sq.reshape(sq.shape[0], -1).sum(axis=1))
    grad = (diff / n).astype(reconstructions.dtype)
    return LossValue(scalar=raw / n, grad=grad, per_sample=per_origin, raw_sum=raw)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> LossValue:
    """Mean negative log-likelihood with log-sum-exp stabilisation."""
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    logp = _log_softmax(logits.astype(np.float64))
    per_sample = -logp[np.arange(n), labels]
    probs = np.exp(logp)
    probs[np.arange(n), labels] -= 1.0
    grad = (probs / n).astype(logits.dtype)
    return LossValue(scalar=float(per_sample.mean()), grad=grad, per_sample=per_sample)


def rotnet_loss(logits: np.ndarray, transform_ids: np.ndarray) -> LossValue:
    """Rotation-prediction objective: cross-entropy against transform ids."""
    if logits.shape[1] != 4:
        raise ValueError(f"rotation head must emit 4 logits, got {logits.shape[1]}")
    return cross_entropy(logits, transform_ids)


def ii_loss(representations: np.ndarray, labels: np.ndarray) -> LossValue:
    """Intra-class spread minus minimum inter-class separation.

    Spread is the mean squared distance of each point to its batch class
    mean; separation is the smallest squared distance between any two batch
    class means. Requires at least two classes in the batch.
    """
    z = representations.astype(np.float64)
    labels = np.asarray(labels)
    n = z.shape[0]
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    c = len(classes)
    if c < 2:
        raise ValueError("ii loss needs at least 2 classes in the batch")
    mu = np.zeros((c, z.shape[1]), dtype=np.float64)
    np.add.at(mu, inverse, z)
    mu /= counts[:, None]
    centered = z - mu[inverse]
    intra = float((centered * centered).sum() / n)
    # pairwise squared distances between class means
    d2 = ((mu[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
    iu = np.triu_indices(c, k=1)
    pair_flat = int(np.argmin(d2[iu]))
    a, b = iu[0][pair_flat], iu[1][pair_flat]
    inter = float(d2[a, b])
    grad = (2.0 / n) * centered
    # subgradient of the min through the closest pair of means
    dmu = mu[a] - mu[b]
    grad[inverse == a] -= (2.0 / counts[a]) * dmu
    grad[inverse == b] += (2.0 / counts[b]) * dmu
    return LossValue(scalar=intra - inter, grad=grad.astype(representations.dtype))


def triplet_loss(representations: np.ndarray, labels: np.ndarray,
                 margin: float = 0.2) -> LossValue:
    """Batch-all triplet objective with squared Euclidean distances.

    Averages max(0, d(a,p) - d(a,n) + margin) over all valid in-batch
    triplets that have a strictly positive hinge value; zero when every
    triplet already satisfies the margin.
    """
    z = representations.astype(np.float64)
    labels = np.asarray(labels)
    n = z.shape[0]
    same = labels[:, None] == labels[None, :]
    pos_pair = same & ~np.eye(n, dtype=bool)
    neg_pair = ~same
    if not (pos_pair.any(axis=1) & neg_pair.any(axis=1)).any():
        raise ValueError("no valid (anchor, positive, negative) triplet in batch")
    sq_norm = (z * z).sum(axis=1)
    d2 = sq_norm[:, None] + sq_norm[None, :] - 2.0 * (z @ z.T)
    np.maximum(d2, 0.0, out=d2)
    # hinge[a, p, n] over valid triplets
    hinge = d2[:, :, None] - d2[:, None, :] + margin
    valid = pos_pair[:, :, None] & neg_pair[:, None, :]
    active = valid & (hinge > 0.0)
    count = int(active.sum())
    if count == 0:
        return LossValue(scalar=0.0, grad=np.zeros_like(representations))
    total = float(hinge[active].sum())
    # pairwise multiplicities of active triplets
    w_ap = active.sum(axis=2).astype(np.float64)   # [a, p] over negatives
    w_an = active.sum(axis=1).astype(np.float64)   # [a, n] over positives
    grad = np.zeros_like(z)
    # d_ap terms: +2(z_a - z_p) on the anchor, +2(z_p - z_a) on the positive
    grad += 2.0 * (w_ap.sum(axis=1)[:, None] * z - w_ap @ z)
    grad += 2.0 * (w_ap.T.sum(axis=1)[:, None] * z - w_ap.T @ z)
    # -d_an terms: -2(z_a - z_n) on the anchor, -2(z_n - z_a) on the negative
    grad -= 2.0 * (w_an.sum(axis=1)[:, None] * z - w_an @ z)
    grad -= 2.0 * (w_an.T.sum(axis=1)[:, None] * z - w_an.T @ z)
    grad /= count
    return LossValue(scalar=total / count, grad=grad.astype(representations.dtype))
