"""FSCIL session planning: disjoint class assignment and N-way K-shot splits."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..rng import Rng
from .data import Dataset

__all__ = ["Protocol", "SessionPlan", "plan_sessions", "check_disjoint"]


@dataclass(frozen=True)
class Protocol:
    pretrain_count: int = 40
    base_count: int = 20
    sessions: int = 5
    ways: int = 4
    shots: int = 5
    train_fraction: float = 0.75

    @property
    def classes_needed(self) -> int:
        return self.pretrain_count + self.base_count + self.sessions * self.ways


@dataclass
class SessionPlan:
    """Class assignment and record indices for pretraining and every session.

    ``session_classes[t]`` holds dataset class ids introduced in session t
    (t = 0 is the base session). FSCIL labels are dense: base classes map to
    0..base_count-1 and each later session continues the sequence.
    """

    protocol: Protocol
    pretrain_classes: list[int]
    session_classes: list[list[int]]
    pretrain_train: np.ndarray
    pretrain_test: np.ndarray
    session_train: list[np.ndarray]
    session_test: list[np.ndarray]
    label_of: dict[int, int] = field(default_factory=dict)

    @property
    def num_sessions(self) -> int:
        return len(self.session_classes)

    def labels_for(self, dataset: Dataset, idx: np.ndarray) -> np.ndarray:
        return np.array([self.label_of[c] for c in dataset.labels[idx].tolist()], dtype=np.int64)

    def pretrain_labels_for(self, dataset: Dataset, idx: np.ndarray) -> np.ndarray:
        pos = {c: i for i, c in enumerate(self.pretrain_classes)}
        return np.array([pos[c] for c in dataset.labels[idx].tolist()], dtype=np.int64)

    def session_labels(self, t: int) -> list[int]:
        return [self.label_of[c] for c in self.session_classes[t]]

    def eval_pool(self, t: int) -> np.ndarray:
        """Test records of every class seen in sessions 0..t."""
        return np.concatenate(self.session_test[: t + 1])

    def session_of_label(self) -> dict[int, int]:
        return {self.label_of[c]: t for t, cs in enumerate(self.session_classes) for c in cs}


def check_disjoint(groups: dict[str, list[int]]) -> None:
    seen: dict[int, str] = {}
    for name, classes in groups.items():
        for c in classes:
            if c in seen:
                raise ValueError(f"class {c} appears in both {seen[c]} and {name}")
            seen[c] = name


def plan_sessions(
    dataset: Dataset,
    protocol: Protocol | None = None,
    seed: int = 0,
    assignment: dict[str, list] | None = None,
) -> SessionPlan:
    """Assign classes to pretraining, the base session and T incremental sessions.

    Pretraining takes the lowest ``pretrain_count`` class ids (a fixed
    protocol order, so every seed shares one pretrained backbone); ``seed``
    shuffles the remaining classes into the base and incremental sessions.
    ``assignment`` may instead name classes explicitly (keys ``pretrain``,
    ``base``, ``sessions``). Each incremental class keeps K of its training
    records, drawn from a stream seeded by the session id.
    """
    protocol = protocol or Protocol()
    classes = dataset.classes
    if assignment is None:
        if protocol.classes_needed > len(classes):
            raise ValueError(
                f"protocol needs {protocol.classes_needed} classes, dataset has {len(classes)}"
            )
        p, b, n = protocol.pretrain_count, protocol.base_count, protocol.ways
        pretrain, rest = classes[:p], classes[p:]
        rest = [rest[i] for i in Rng(seed, "plan.classes").permutation(len(rest))]
        sessions = [rest[:b]]
        for t in range(protocol.sessions):
            sessions.append(rest[b + t * n : b + (t + 1) * n])
    else:
        pretrain = list(assignment.get("pretrain", []))
        sessions = [list(assignment["base"])] + [list(s) for s in assignment.get("sessions", [])]
        missing = set(pretrain).union(*sessions) - set(classes)
        if missing:
            raise ValueError(f"classes not in dataset: {sorted(missing)}")
        if any(len(s) != protocol.ways for s in sessions[1:]):
            raise ValueError(f"every incremental session must have {protocol.ways} classes")
    groups = {"pretrain": pretrain, "base": sessions[0]}
    groups.update({f"session {t}": s for t, s in enumerate(sessions) if t > 0})
    check_disjoint(groups)

    label_of = {}
    for s in sessions:
        for c in s:
            label_of[c] = len(label_of)

    def split(c):
        return dataset.split_indices(c, protocol.train_fraction)

    pre_tr = [split(c)[0] for c in pretrain]
    pre_te = [split(c)[1] for c in pretrain]
    session_train, session_test = [], []
    for t, cs in enumerate(sessions):
        tr, te = [], []
        for c in cs:
            a, b_ = split(c)
            if t > 0:
                if len(a) < protocol.shots:
                    raise ValueError(f"class {c} has {len(a)} training records, fewer than K={protocol.shots}")
                pick = Rng(seed, f"plan.kshot.{t}").stream(f"class{c}").choice(len(a), protocol.shots)
                a = a[np.sort(pick)]
            tr.append(a)
            te.append(b_)
        session_train.append(np.concatenate(tr) if tr else np.zeros(0, dtype=np.intp))
        session_test.append(np.concatenate(te) if te else np.zeros(0, dtype=np.intp))

    def cat(parts):
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.intp)

    return SessionPlan(
        protocol=protocol,
        pretrain_classes=pretrain,
        session_classes=sessions,
        pretrain_train=cat(pre_tr),
        pretrain_test=cat(pre_te),
        session_train=session_train,
        session_test=session_test,
        label_of=label_of,
    )
