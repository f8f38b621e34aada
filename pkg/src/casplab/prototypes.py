"""Class-mean prototypes and the append-only cosine classifier built from them."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PrototypeError",
    "PrototypeMatrix",
    "compute_prototypes",
    "cosine_scores",
    "classify",
    "classify_batch",
    "append_session",
    "softmax_scores",
]


class PrototypeError(ValueError):
    pass


@dataclass
class PrototypeMatrix:
    """Prototype rows keyed by dense global class ids (row i holds class i)."""

    rows: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.float32))
    class_ids: list[int] = field(default_factory=list)
    session_of: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.class_ids)

    @property
    def dim(self) -> int:
        return self.rows.shape[1] if len(self) else 0

    def index_table(self) -> np.ndarray:
        """[K, 2] table of (class id, session) pairs."""
        return np.array(list(zip(self.class_ids, self.session_of)), dtype=np.int64).reshape(-1, 2)

    def classes_of_sessions(self, sessions) -> list[int]:
        wanted = set(sessions)
        return [c for c, s in zip(self.class_ids, self.session_of) if s in wanted]


def compute_prototypes(features: np.ndarray, labels, class_ids) -> np.ndarray:
    """Mean feature of each requested class, in ``class_ids`` order."""
    features = np.asarray(features)
    labels = np.asarray(labels)
    class_ids = list(class_ids)
    index = {c: i for i, c in enumerate(class_ids)}
    sums = np.zeros((len(class_ids), features.shape[1]), dtype=np.float64)
    counts = np.zeros(len(class_ids), dtype=np.int64)
    sel = np.array([lab in index for lab in labels.tolist()], dtype=bool)
    rows = np.array([index[lab] for lab in labels[sel].tolist()], dtype=np.intp)
    np.add.at(sums, rows, features[sel].astype(np.float64))
    np.add.at(counts, rows, 1)
    empty = [c for c, n in zip(class_ids, counts) if n == 0]
    if empty:
        raise PrototypeError(f"classes with zero samples: {empty}")
    return (sums / counts[:, None]).astype(np.float32)


def cosine_scores(features: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarity of each feature against each row, in float64.

    Zero-norm features or rows get similarity 0; the second return value
    flags affected queries. Each score depends only on its own (feature,
    row) pair, so adding rows never changes existing scores.
    """
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    w = np.asarray(rows, dtype=np.float64)
    dots = np.sum(f[:, None, :] * w[None, :, :], axis=-1)
    ff = np.sum(f * f, axis=-1)[:, None]
    ww = np.sum(w * w, axis=-1)[None, :]
    denom = np.sqrt(ff * ww)
    zero = denom == 0
    scores = np.where(zero, 0.0, dots / np.where(zero, 1.0, denom))
    return scores, zero.any(axis=1)


def softmax_scores(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify_batch(features: np.ndarray, W: PrototypeMatrix, restrict=None) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class ids and score matrix for a batch of features.

    ``restrict`` limits the argmax to a subset of class ids. Ties go to the
    lowest class id.
    """
    if len(W) == 0:
        raise PrototypeError("prototype matrix is empty")
    scores, flagged = cosine_scores(features, W.rows)
    if flagged.any():
        warnings.warn("zero-norm feature or prototype; similarity set to 0", RuntimeWarning, stacklevel=2)
    ids = np.asarray(W.class_ids)
    cols = np.arange(len(ids)) if restrict is None else np.flatnonzero(np.isin(ids, list(restrict)))
    sub = scores[:, cols]
    best = sub.max(axis=1, keepdims=True)
    cand = np.where(sub == best, ids[cols][None, :], np.iinfo(np.int64).max)
    return cand.min(axis=1), scores


def classify(feature: np.ndarray, W: PrototypeMatrix) -> tuple[int, np.ndarray]:
    pred, scores = classify_batch(np.asarray(feature)[None, :], W)
    return int(pred[0]), scores[0]


def append_session(W: PrototypeMatrix, new_rows: np.ndarray, class_ids, session: int) -> PrototypeMatrix:
    """A new matrix with the old rows untouched and ``new_rows`` tagged ``session``."""
    class_ids = [int(c) for c in class_ids]
    new_rows = np.asarray(new_rows, dtype=np.float32)
    if new_rows.ndim != 2 or new_rows.shape[0] != len(class_ids):
        raise PrototypeError("need one row per new class id")
    clash = set(class_ids) & set(W.class_ids) or len(set(class_ids)) != len(class_ids)
    if clash:
        raise PrototypeError(f"class id collision: {sorted(set(class_ids) & set(W.class_ids)) or class_ids}")
    expected = list(range(len(W), len(W) + len(class_ids)))
    if class_ids != expected:
        raise PrototypeError(f"class ids must continue the dense sequence {expected}, got {class_ids}")
    if len(W) and new_rows.shape[1] != W.dim:
        raise PrototypeError(f"row width {new_rows.shape[1]} != {W.dim}")
    rows = new_rows.copy() if len(W) == 0 else np.concatenate([W.rows, new_rows], axis=0)
    return PrototypeMatrix(rows, W.class_ids + class_ids, W.session_of + [session] * len(class_ids))
