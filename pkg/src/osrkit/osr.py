"""Open-set inference: outlier score, class probability, decision rule.

A test representation is scored by its squared distance to the nearest
class prototype. Scores strictly above the stored threshold are rejected
as unknown; everything else gets the argmax class probability, which comes
from the classification head when one exists ('head' mode) or from a
softmax over negative squared prototype distances ('distance' mode).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .train import PrototypeSet

MODES = ("head", "distance")


@dataclass
class OsrPrediction:
    outlier_score: float
    class_probs: np.ndarray  # (C,) simplex
    decision: int            # 0..C-1 known, C = unknown

    @property
    def is_unknown(self) -> bool:
        return self.decision == len(self.class_probs)


def _as_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z[None, :] if z.ndim == 1 else z


def squared_distances(z: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    """(N, C) squared Euclidean distances to each prototype."""
    rows = _as_rows(z)
    diff = rows[:, None, :] - protos.mu[None, :, :]
    return (diff * diff).sum(axis=2)


def outlier_score(z: np.ndarray, protos: PrototypeSet) -> float | np.ndarray:
    """Minimum squared distance to any class prototype; scalar for a single
    representation, vector for a batch."""
    if protos.num_classes == 0:
        raise ValueError("empty prototype set")
    scores = squared_distances(z, protos).min(axis=1)
    return float(scores[0]) if np.asarray(z).ndim == 1 else scores


def class_probability(protos: PrototypeSet, z: np.ndarray | None = None,
                      logits: np.ndarray | None = None,
                      mode: str = "distance") -> np.ndarray:
    """Class probabilities over the known classes.

    'head' mode softmaxes classification logits; 'distance' mode softmaxes
    negative squared prototype distances (computed via log-sum-exp).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "head":
        if logits is None:
            raise ValueError("'head' mode needs classification logits")
        scores = np.asarray(logits, dtype=np.float64)
        single = scores.ndim == 1
        scores = scores[None, :] if single else scores
    else:
        if z is None:
            raise ValueError("'distance' mode needs representations")
        single = np.asarray(z).ndim == 1
        scores = -squared_distances(z, protos)
    shifted = scores - scores.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(shifted - logz)
    return probs[0] if single else probs


def predict(protos: PrototypeSet, z: np.ndarray,
            logits: np.ndarray | None = None,
            mode: str = "distance") -> OsrPrediction:
    """Decision for a single representation: unknown iff the outlier score
    strictly exceeds the threshold, else the argmax class (smallest index
    wins exact ties)."""
    score = outlier_score(z, protos)
    probs = class_probability(protos, z=z, logits=logits, mode=mode)
    if score > protos.threshold:
        decision = protos.num_classes
    else:
        decision = int(np.argmax(probs))
    return OsrPrediction(outlier_score=float(score), class_probs=probs, decision=decision)


def predict_batch(protos: PrototypeSet, z: np.ndarray,
                  logits: np.ndarray | None = None,
                  mode: str = "distance") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised decisions: (scores (N,), probs (N,C), decisions (N,))."""
    z = _as_rows(z)
    scores = outlier_score(z, protos)
    probs = class_probability(protos, z=z, logits=logits, mode=mode)
    decisions = probs.argmax(axis=1)
    decisions[scores > protos.threshold] = protos.num_classes
    return scores, probs, decisions
