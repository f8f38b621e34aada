import math

import numpy as np
import pytest

from casplab.config import resolve
from casplab.harness.errors import DivergenceError
from casplab.harness.experiment import (
    FrozenStateError,
    make_plan,
    pretrain,
    run_fscil,
    state_hash,
    summarize_runs,
    toggle_label,
)
from casplab.harness.training import (
    Adam,
    build_prompts,
    cosine_lr,
    evaluate_pool,
    pretrain_backbone,
    run_incremental_session,
    train_base_session,
)
from casplab.prototypes import classify_batch
from casplab.tensor import Tensor

from conftest import small_config


def run(small_setup, seed=0, **sections):
    ds, _, pre = small_setup
    return run_fscil(ds, resolve(small_config(**sections), seed), pre.backbone)


class TestSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 1e-2) == 1e-2
        assert abs(cosine_lr(100, 100, 1e-2)) < 1e-18
        assert cosine_lr(50, 100, 1e-2) == pytest.approx(5e-3, abs=1e-18)

    def test_monotone(self):
        lrs = [cosine_lr(s, 40, 1.0) for s in range(41)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_adam_first_step(self):
        p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
        p.grad = np.array([0.5, -3.0], dtype=np.float32)
        Adam([p]).step(0.1)
        # bias-corrected first step moves each coordinate by lr * sign(g)
        np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-5)


class TestPretrain:
    def test_frozen_and_deterministic(self, small_setup):
        ds, res, pre = small_setup
        assert pre.backbone.frozen
        again = pretrain(ds, res)
        assert abs(again.losses[-1] - pre.losses[-1]) < 1e-6
        assert state_hash(again.backbone, None) == state_hash(pre.backbone, None)

    def test_empty_split(self, small_setup):
        ds, res, _ = small_setup
        plan = make_plan(ds, res)
        plan.pretrain_train = plan.pretrain_train[:0]
        with pytest.raises(ValueError, match="empty pretrain"):
            pretrain_backbone(ds, plan, res.model, res.pretrain)

    def test_base_training_leaves_backbone_untouched(self, small_setup):
        ds, res, pre = small_setup
        before = state_hash(pre.backbone, None)
        plan = make_plan(ds, res)
        train_base_session(ds, plan, pre.backbone, res.model, build_prompts(res.model, res.train), res.mixup, res.train)
        assert state_hash(pre.backbone, None) == before

    def test_unfrozen_backbone_rejected(self, small_setup):
        from casplab.rng import Rng
        from casplab.vit import init_backbone

        ds, res, _ = small_setup
        bb = init_backbone(res.model, Rng(0))
        with pytest.raises(ValueError, match="frozen"):
            train_base_session(ds, make_plan(ds, res), bb, res.model, build_prompts(res.model, res.train), res.mixup, res.train)


class TestBaseSession:
    def test_lambda_zero_matches_mtm_off(self, small_setup):
        a = run(small_setup, mtm={"lambda_mix": 0.0})
        b = run(small_setup, mtm={"enabled": False})
        for (na, ta), (nb, tb) in zip(a.prompts.named_tensors(), b.prompts.named_tensors()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)
        assert a.metrics.per_session == b.metrics.per_session

    def test_all_off_is_head_only(self, small_setup):
        r = run(small_setup, train={"cagp": False, "pcap": False, "cdap": False}, mtm={"enabled": False})
        assert r.label == "baseline"
        assert r.prompts.trainable_tensors() == []

    def test_divergence_guard(self, small_setup):
        with np.errstate(all="ignore"), pytest.raises(DivergenceError):
            run(small_setup, train={"learning_rate": 1e30})

    def test_labels(self, small_setup):
        _, res, _ = small_setup
        assert toggle_label(res) == "cagp+pcap+cdap+mtm"


class TestIncremental:
    def test_prototype_count_and_hashes(self, small_setup):
        r = run(small_setup)
        assert len(r.prototypes) == 4 + 2 * 3
        assert [row.n_classes for row in r.rows] == [4, 7, 10]
        assert len(set(r.session_hashes)) == 1
        assert r.metrics.a_avg == pytest.approx(sum(r.metrics.per_session) / 3, abs=1e-15)

    def test_rerun_session_identical(self, small_setup):
        ds, res, pre = small_setup
        r = run(small_setup)
        plan = make_plan(ds, res)
        W0 = r.prototypes
        base_rows = type(W0)(W0.rows[:4], W0.class_ids[:4], W0.session_of[:4])
        a = run_incremental_session(ds, plan, 1, pre.backbone, res.model, r.prompts, base_rows)[1]
        b = run_incremental_session(ds, plan, 1, pre.backbone, res.model, r.prompts, base_rows)[1]
        assert a.overall_acc == b.overall_acc == r.rows[1].overall_acc

    def test_old_class_accuracy_preserved(self, small_setup):
        ds, res, pre = small_setup
        r = run(small_setup)
        plan = make_plan(ds, res)
        W = r.prototypes
        W1 = type(W)(W.rows[:7], W.class_ids[:7], W.session_of[:7])
        old = list(range(7))
        before = evaluate_pool(ds, plan, 1, pre.backbone, res.model, r.prompts, W1)
        after = evaluate_pool(ds, plan, 1, pre.backbone, res.model, r.prompts, W, restrict=old)
        assert before.per_class == after.per_class

    def test_session_out_of_range(self, small_setup):
        ds, res, pre = small_setup
        r = run(small_setup)
        with pytest.raises(IndexError):
            run_incremental_session(ds, make_plan(ds, res), 3, pre.backbone, res.model, r.prompts, r.prototypes)

    def test_frozen_state_violation_detected(self, small_setup, monkeypatch):
        import casplab.harness.experiment as ex

        real = ex.run_incremental_session

        def tamper(ds, plan, t, backbone, cfg, prompts, W):
            next(iter(prompts.named_tensors()))[1].data[...] += 1.0
            return real(ds, plan, t, backbone, cfg, prompts, W)

        monkeypatch.setattr(ex, "run_incremental_session", tamper)
        with pytest.raises(FrozenStateError):
            run(small_setup)

    def test_seed_determinism(self, small_setup):
        a, b = run(small_setup, seed=3), run(small_setup, seed=3)
        assert a.metrics == b.metrics
        assert a.session_hashes == b.session_hashes

    def test_summary(self, small_setup):
        runs = [run(small_setup, seed=s) for s in (0, 1)]
        s = summarize_runs(runs)
        assert s["seeds"] == [0, 1]
        vals = [r.metrics.a_avg for r in runs]
        assert s["a_avg"]["mean"] == pytest.approx(np.mean(vals)) and s["a_avg"]["values"] == vals
        assert len(s["per_session"]) == 3 and all(math.isfinite(v) for v in s["per_session"])
