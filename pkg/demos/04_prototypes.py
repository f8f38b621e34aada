"""Class-mean prototypes, cosine classification and append-only growth."""

import numpy as np

from casplab.prototypes import PrototypeMatrix, append_session, classify, classify_batch, compute_prototypes
from casplab.rng import Rng

rng = Rng(0)
centers = rng.normal((5, 16)) * 3.0
feats = np.repeat(centers, 10, axis=0) + rng.normal((50, 16))
labels = np.repeat(np.arange(5), 10)

W = append_session(PrototypeMatrix(), compute_prototypes(feats[:30], labels[:30], range(3)), range(3), 0)
query = rng.normal((20, 16)) + centers[rng.integers(0, 3, size=20)]
pred, before = classify_batch(query, W)
print("session 0 predictions", pred.tolist())

W = append_session(W, compute_prototypes(feats[30:], labels[30:], [3, 4]), [3, 4], 1)
_, after = classify_batch(query, W)
print("old-class scores unchanged after append:", np.array_equal(after[:, :3], before))
print("classes per session", W.index_table().tolist())

tie = append_session(PrototypeMatrix(), np.eye(2, dtype=np.float32), [0, 1], 0)
print("tie between classes 0 and 1 goes to", classify(np.array([1.0, 1.0]), tie)[0])
