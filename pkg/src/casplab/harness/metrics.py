from __future__ import annotations

from dataclasses import asdict, dataclass

__all__ = ["SessionMetrics", "compute_metrics"]


@dataclass
class SessionMetrics:
    per_session: list[float]
    a_b: float
    a_n: float | None
    a_l: float
    a_avg: float
    a_n_last_session_only: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _acc(counts) -> float | None:
    correct = sum(c for c, _ in counts)
    total = sum(n for _, n in counts)
    return correct / total if total else None


def compute_metrics(
    per_session_acc: list[float],
    per_class_acc_last: dict[int, tuple[int, int]] | None = None,
    session_of: dict[int, int] | None = None,
) -> SessionMetrics:
    """Base, novel, last and average accuracy from a finished run.

    ``per_class_acc_last`` maps class label -> (correct, total) on the final
    evaluation pool and ``session_of`` maps class label -> introducing
    session. A_N pools every class introduced after the base session; the
    final-session-only variant is reported alongside.
    """
    if not per_session_acc:
        raise ValueError("need at least one evaluated session")
    accs = [float(a) for a in per_session_acc]
    last = len(accs) - 1
    a_n = a_n_last = None
    if per_class_acc_last and session_of and last > 0:
        a_n = _acc([v for k, v in per_class_acc_last.items() if session_of[k] >= 1])
        a_n_last = _acc([v for k, v in per_class_acc_last.items() if session_of[k] == last])
    return SessionMetrics(
        per_session=accs,
        a_b=accs[0],
        a_n=a_n,
        a_l=accs[-1],
        a_avg=sum(accs) / len(accs),
        a_n_last_session_only=a_n_last,
    )
