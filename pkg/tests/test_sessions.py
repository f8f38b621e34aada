import numpy as np
import pytest

from casplab.harness.data import GlyphSpec, generate_synthetic_dataset
from casplab.harness.metrics import compute_metrics
from casplab.harness.sessions import Protocol, check_disjoint, plan_sessions


@pytest.fixture(scope="module")
def ds():
    return generate_synthetic_dataset(0, GlyphSpec(per_class=12, size=16))


class TestPlan:
    def test_default_protocol(self, ds):
        plan = plan_sessions(ds, seed=3)
        used = plan.pretrain_classes + [c for s in plan.session_classes for c in s]
        assert len(used) == len(set(used)) == 80
        assert plan.num_sessions == 6
        assert len(plan.session_train[3]) == 20
        assert all(len(plan.session_train[t]) == 4 * 5 for t in range(1, 6))

    def test_pretrain_classes_fixed(self, ds):
        a, b = plan_sessions(ds, seed=0), plan_sessions(ds, seed=1)
        assert a.pretrain_classes == b.pretrain_classes == list(range(40))
        assert a.session_classes != b.session_classes

    def test_dense_labels(self, ds):
        plan = plan_sessions(ds, seed=0)
        assert sorted(plan.label_of.values()) == list(range(40))
        assert plan.session_labels(0) == list(range(20))
        assert plan.session_labels(2) == [24, 25, 26, 27]

    def test_eval_pool_is_union(self, ds):
        plan = plan_sessions(ds, seed=0)
        pool = plan.eval_pool(2)
        assert set(pool.tolist()) == set(np.concatenate(plan.session_test[:3]).tolist())
        classes = set(ds.labels[pool].tolist())
        assert classes == set(c for s in plan.session_classes[:3] for c in s)

    def test_no_sessions(self, ds):
        plan = plan_sessions(ds, Protocol(sessions=0), seed=0)
        assert plan.num_sessions == 1

    def test_kshot_stable_when_sessions_added(self, ds):
        a = plan_sessions(ds, Protocol(pretrain_count=40, sessions=3), seed=4)
        b = plan_sessions(ds, Protocol(pretrain_count=40, sessions=5), seed=4)
        assert a.session_classes[0] == b.session_classes[0]
        for t in range(1, 4):
            if a.session_classes[t] == b.session_classes[t]:
                np.testing.assert_array_equal(a.session_train[t], b.session_train[t])

    def test_train_test_disjoint(self, ds):
        plan = plan_sessions(ds, seed=0)
        for t in range(plan.num_sessions):
            assert not set(plan.session_train[t].tolist()) & set(plan.session_test[t].tolist())

    def test_insufficient_classes(self, ds):
        with pytest.raises(ValueError, match="needs"):
            plan_sessions(ds, Protocol(sessions=20))

    def test_overlapping_assignment(self, ds):
        with pytest.raises(ValueError, match="appears in both"):
            plan_sessions(ds, Protocol(ways=2), assignment={"pretrain": [0, 1], "base": [1, 2], "sessions": [[3, 4]]})

    def test_explicit_assignment(self, ds):
        plan = plan_sessions(
            ds, Protocol(ways=2, shots=3), assignment={"pretrain": [0], "base": [5, 6], "sessions": [[7, 8]]}
        )
        assert plan.session_classes == [[5, 6], [7, 8]]
        assert len(plan.session_train[1]) == 6

    def test_check_disjoint(self):
        check_disjoint({"a": [1, 2], "b": [3]})
        with pytest.raises(ValueError):
            check_disjoint({"a": [1], "b": [1]})


class TestMetrics:
    def test_example(self):
        m = compute_metrics([0.9, 0.8, 0.7])
        assert m.a_b == 0.9 and m.a_l == 0.7
        assert m.a_avg == pytest.approx(0.8, abs=1e-15)

    def test_single_session(self):
        m = compute_metrics([0.6])
        assert m.a_b == m.a_l == m.a_avg == 0.6 and m.a_n is None

    def test_novel_pools_all_post_base(self):
        per_class = {0: (9, 10), 1: (8, 10), 2: (3, 10), 3: (1, 10)}
        session_of = {0: 0, 1: 0, 2: 1, 3: 2}
        m = compute_metrics([0.9, 0.7, 0.5], per_class, session_of)
        assert m.a_n == pytest.approx(0.2)
        assert m.a_n_last_session_only == pytest.approx(0.1)

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_metrics([])
