"""A seconds-scale FSCIL run: pretrain, base session, two incremental sessions, report.

The default protocol is the same code path with larger settings; see the
README for the command-line equivalent.
"""

import sys
import tempfile
from pathlib import Path

from casplab.config import default_config, merge_config, resolve
from casplab.harness.experiment import build_dataset, pretrain, run_fscil, write_run
from casplab.report import Series, ablation_table, render_svg

small = {
    "data": {"classes": 14, "per_class": 12, "size": 16, "source_classes": 4},
    "protocol": {"pretrain_count": 4, "base_count": 4, "sessions": 2, "ways": 3, "shots": 3},
    "model": {"image_size": 16, "patch_size": 8, "dim": 16, "depth": 2, "heads": 2, "mlp_ratio": 2},
    "pretrain": {"epochs": 5, "batch_size": 16},
    "train": {"epochs": 5, "batch_size": 8},
    "mtm": {"split_layer": 1},
}
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="casplab_demo_"))
config = merge_config(default_config(), small)
res = resolve(config, seed=0)
ds = build_dataset(res)
pre = pretrain(ds, res)
print(f"pretrain held-out accuracy {pre.heldout_acc:.3f}")

summaries = []
for toggles in ({"cagp": False, "pcap": False, "cdap": False}, {}):
    cfg = merge_config(config, {"train": toggles, "mtm": {"enabled": bool(not toggles)}})
    result = run_fscil(ds, resolve(cfg, 0), pre.backbone)
    write_run(result, out, stem=result.label)
    summaries.append(result.summary())
    print(result.label, "per-session accuracy", [round(a, 3) for a in result.metrics.per_session])

print(ablation_table(summaries))
series = [Series(s["label"], list(range(len(s["per_session"]))), s["per_session"]) for s in summaries]
(out / "sessions.svg").write_text(render_svg(series, title="Accuracy per session"))
print("outputs in", out)
