"""End-to-end FSCIL runs: pretrain, base session, incremental sessions, artifacts."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import Resolved
from ..prompts import PromptSet
from ..prototypes import PrototypeMatrix
from ..rng import Rng
from ..vit import BackboneParams
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Dataset, cdsf_bytes, generate_synthetic_dataset
from .metrics import SessionMetrics, compute_metrics
from .sessions import SessionPlan, plan_sessions
from .training import (
    PretrainResult,
    SessionRow,
    build_prompts,
    evaluate_pool,
    pretrain_backbone,
    run_incremental_session,
    train_base_session,
)

log = logging.getLogger(__name__)

__all__ = [
    "FrozenStateError",
    "RunResult",
    "build_dataset",
    "dataset_digest",
    "make_plan",
    "pretrain",
    "run_fscil",
    "state_hash",
    "toggle_label",
    "write_run",
    "write_summary",
    "write_pretrain",
    "load_pretrained",
    "summarize_runs",
    "csv_text",
    "read_metrics_csv",
]

CSV_HEADER = ["session", "overall_acc", "base_acc", "novel_acc", "n_classes"]
METRIC_KEYS = ("a_b", "a_n", "a_l", "a_avg", "a_n_last_session_only")


class FrozenStateError(RuntimeError):
    """A backbone or prompt tensor changed during an incremental session."""


def build_dataset(res: Resolved) -> Dataset:
    return generate_synthetic_dataset(res.data_seed, res.glyphs)


def dataset_digest(ds: Dataset) -> str:
    return hashlib.sha256(cdsf_bytes(ds)).hexdigest()


def make_plan(ds: Dataset, res: Resolved) -> SessionPlan:
    return plan_sessions(ds, res.protocol, seed=res.seed)


def state_hash(backbone: BackboneParams, prompts: PromptSet | None) -> str:
    """SHA-256 over the names and raw bytes of every backbone and prompt tensor."""
    h = hashlib.sha256()
    named = list(backbone.named_tensors())
    if prompts is not None:
        named += list(prompts.named_tensors())
    for name, t in named:
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def toggle_label(res: Resolved) -> str:
    on = [n for n in ("cagp", "pcap", "cdap", "mtm") if getattr(res.train, n)]
    return "+".join(on) if on else "baseline"


def pretrain(ds: Dataset, res: Resolved) -> PretrainResult:
    return pretrain_backbone(ds, make_plan(ds, res), res.model, res.pretrain)


def write_pretrain(path, result: PretrainResult, res: Resolved) -> bytes:
    ck = Checkpoint.from_run(
        result.backbone,
        config={"config": res.config, "seed": res.seed},
        rng_state=Rng(res.pretrain.seed, "pretrain").state(),
    )
    return save_checkpoint(path, ck)


def load_pretrained(path, res: Resolved) -> BackboneParams:
    return load_checkpoint(path).backbone(res.model)


@dataclass
class RunResult:
    seed: int
    label: str
    config: dict
    rows: list[SessionRow]
    metrics: SessionMetrics
    backbone: BackboneParams
    prompts: PromptSet
    prototypes: PrototypeMatrix
    session_hashes: list[str] = field(default_factory=list)
    base_losses: list[float] = field(default_factory=list)

    def summary(self, csv_name: str | None = None) -> dict:
        out = {"seed": self.seed, "label": self.label, "config": self.config}
        out.update({k: getattr(self.metrics, k) for k in METRIC_KEYS})
        out["per_session"] = self.metrics.per_session
        out["frozen_hash"] = self.session_hashes[-1] if self.session_hashes else None
        if csv_name is not None:
            out["csv"] = csv_name
        return out

    def checkpoint(self) -> Checkpoint:
        return Checkpoint.from_run(
            self.backbone,
            self.prompts,
            self.prototypes,
            config={"config": self.config, "seed": self.seed},
            rng_state=Rng(self.seed, "base").state(),
        )


def run_fscil(
    ds: Dataset,
    res: Resolved,
    backbone: BackboneParams,
    resume: Checkpoint | None = None,
) -> RunResult:
    """Base session then every incremental session, checking the frozen-state hash.

    With ``resume`` the stored prompts and base prototypes replace base
    training; the incremental sessions are rerun from there.
    """
    plan = make_plan(ds, res)
    prompts = build_prompts(res.model, res.train)
    losses: list[float] = []
    if resume is None:
        base = train_base_session(ds, plan, backbone, res.model, prompts, res.mixup, res.train)
        W, losses = base.prototypes, base.losses
    else:
        resume.prompts(prompts)
        stored = resume.prototypes()
        keep = [i for i, s in enumerate(stored.session_of) if s == 0]
        W = PrototypeMatrix(stored.rows[keep].copy(), [stored.class_ids[i] for i in keep], [0] * len(keep))
    prompts.eval()

    rows = [evaluate_pool(ds, plan, 0, backbone, res.model, prompts, W)]
    hashes = [state_hash(backbone, prompts)]
    for t in range(1, plan.num_sessions):
        W, row = run_incremental_session(ds, plan, t, backbone, res.model, prompts, W)
        hashes.append(state_hash(backbone, prompts))
        if hashes[-1] != hashes[0]:
            raise FrozenStateError(f"backbone/prompt tensors changed during session {t}")
        rows.append(row)
        log.info("seed %d session %d acc %.4f", res.seed, t, row.overall_acc)
    metrics = compute_metrics([r.overall_acc for r in rows], rows[-1].per_class, plan.session_of_label())
    return RunResult(
        seed=res.seed,
        label=toggle_label(res),
        config=res.config,
        rows=rows,
        metrics=metrics,
        backbone=backbone,
        prompts=prompts,
        prototypes=W,
        session_hashes=hashes,
        base_losses=losses,
    )


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def csv_text(result: RunResult) -> str:
    buf = io.StringIO()
    echo = json.dumps({"config": result.config, "seed": result.seed}, sort_keys=True)
    buf.write(f"# {echo}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in result.rows:
        w.writerow([r.session, _fmt(r.overall_acc), _fmt(r.base_acc), _fmt(r.novel_acc), r.n_classes])
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
    return list(reader)


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_run(result: RunResult, out_dir, stem: str | None = None) -> dict[str, Path]:
    """Write ``<stem>.csv``, ``<stem>.json`` and ``<stem>.casp`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"seed{result.seed}"
    paths = {"csv": out / f"{stem}.csv", "json": out / f"{stem}.json", "checkpoint": out / f"{stem}.casp"}
    paths["csv"].write_text(csv_text(result))
    paths["json"].write_text(_json_text(result.summary(paths["csv"].name)))
    save_checkpoint(paths["checkpoint"], result.checkpoint())
    return paths


def summarize_runs(results: list[RunResult]) -> dict:
    """Mean and population std of each metric across seeds."""
    out = {"seeds": [r.seed for r in results], "label": results[0].label, "config": results[0].config}
    for key in METRIC_KEYS:
        vals = [getattr(r.metrics, key) for r in results]
        if any(v is None for v in vals):
            out[key] = None
            continue
        arr = np.array(vals, dtype=np.float64)
        out[key] = {"mean": float(arr.mean()), "std": float(arr.std()), "values": [float(v) for v in vals]}
    per = np.array([r.metrics.per_session for r in results], dtype=np.float64)
    out["per_session"] = per.mean(0).tolist()
    return out


def write_summary(results: list[RunResult], out_dir) -> Path:
    path = Path(out_dir) / "summary.json"
    path.write_text(_json_text(summarize_runs(results)))
    return path
