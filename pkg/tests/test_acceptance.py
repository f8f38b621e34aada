"""Acceptance criteria 1-11, one pass/fail test each.

The criterion 8 ablation and the determinism check run the default protocol
end to end and take a few minutes; everything else is seconds.
"""

import csv
import json
import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from casplab import tensor as T
from casplab.cli import main
from casplab.config import default_config, merge_config, resolve
from casplab.harness.checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint
from casplab.harness.data import cdsf_bytes, read_cdsf
from casplab.harness.experiment import build_dataset, load_pretrained, run_fscil, state_hash
from casplab.mixup import MixupHook, mix_labels, one_hot, soft_cross_entropy
from casplab.prompts import PromptSet, trainable_param_count
from casplab.prototypes import PrototypeMatrix, append_session, classify, classify_batch, compute_prototypes
from casplab.rng import Rng
from casplab.tensor import Tensor
from casplab.vit import VitConfig, forward_features, init_backbone, mhsa

pytestmark = pytest.mark.acceptance

ALL_OFF = "cagp=off,pcap=off,cdap=off,mtm=off"
CAGP_ONLY = "cagp=on,pcap=off,cdap=off,mtm=off"


def rows_of(path):
    return [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return str(path)


@pytest.fixture(scope="session")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pretrain")
    t0 = time.perf_counter()
    assert main(["pretrain", "--out", str(out)]) == 0
    elapsed = time.perf_counter() - t0
    return out / "pretrain.casp", json.loads((out / "pretrain.json").read_text()), elapsed


@pytest.fixture(scope="session")
def ablation(pretrained, tmp_path_factory):
    ckpt, _, pre_time = pretrained
    root = tmp_path_factory.mktemp("ablation")
    t0 = time.perf_counter()
    summaries = {}
    for name, toggle in (("off", ALL_OFF), ("cagp", CAGP_ONLY), ("all", "")):
        out = root / name
        args = ["fscil", "--pretrained", str(ckpt), "--seeds", "5", "--out", str(out)]
        assert main(args + (["--toggle", toggle] if toggle else [])) == 0
        summaries[name] = json.loads((out / "summary.json").read_text())
    return root, summaries, pre_time + time.perf_counter() - t0


def test_c01_gradient_oracle(capsys):
    t0 = time.perf_counter()
    code = main(["gradcheck", "--tol", "1e-3"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    assert code == 0, out
    assert "gradcheck PASS" in out
    assert "pretrain" in out and "base" in out
    assert elapsed < 60.0


def test_c02_zero_prompt_equivalence():
    cfg = VitConfig()
    bb = init_backbone(cfg, Rng(0, "init"))
    bb.freeze()
    prompts = PromptSet(cfg.depth, cfg.dim, dropout_rate=0.1).eval()
    imgs = Rng(1).uniform((100, 1, 32, 32), -1.0, 1.0)
    with T.no_grad():
        plain = forward_features(imgs, bb, cfg).data
        prompted = forward_features(imgs, bb, cfg, prompts, rng=Rng(2)).data
    assert np.abs(plain - prompted).max() < 1e-6


def test_c03_injection_locality():
    cfg = VitConfig()
    bb = init_backbone(cfg, Rng(0, "init"))
    x = Tensor(Rng(1).normal((4, cfg.num_patches + 1, cfg.dim)))
    z = T.zeros(cfg.dim)
    delta = Tensor(Rng(2).normal(cfg.dim))
    for layer in bb.layers:
        base, q_only, k_only = {}, {}, {}
        mhsa(x, layer, cfg, record=base)
        mhsa(x, layer, cfg, (delta, z, z), record=q_only)
        mhsa(x, layer, cfg, (z, delta, z), record=k_only)
        dq = q_only["logits"] - base["logits"]
        assert (dq[:, :, 1:, :] == 0).all() and (dq[:, :, 0, :] != 0).any()
        dk = k_only["logits"] - base["logits"]
        assert (dk[:, :, :, 1:] == 0).all() and (dk[:, :, :, 0] != 0).any()


@pytest.mark.slow
def test_c04_mtm_identities(pretrained, tmp_path):
    cfg = VitConfig()
    bb = init_backbone(cfg, Rng(0, "init"))
    imgs = Rng(1).uniform((6, 1, 32, 32), -1.0, 1.0)
    head = Tensor(Rng(2).normal((cfg.dim, 5)))
    y = np.array([0, 1, 2, 3, 4, 0])
    targets = one_hot(y, 5)
    unmixed = float(T.cross_entropy(forward_features(imgs, bb, cfg) @ head, y).data)
    perm = Rng(3).permutation(6)
    for layer in range(cfg.depth + 1):
        for hook in (MixupHook(layer, perm, 1.0), MixupHook(layer, np.arange(6), 0.37)):
            mixed = soft_cross_entropy(forward_features(imgs, bb, cfg, mixup_hook=hook) @ head, hook.labels(targets))
            assert abs(float(mixed.data) - unmixed) < 1e-5
    rng = Rng(4)
    for _ in range(200):
        soft = mix_labels(one_hot(rng.integers(0, 9, size=16), 9), rng.permutation(16), float(rng.uniform()))
        assert np.abs(soft.sum(axis=1) - 1.0).max() < 1e-6

    ckpt = pretrained[0]
    short = {"train": {"epochs": 3}}
    lam0 = write_config(tmp_path / "lam0.json", mtm={"lambda_mix": 0.0}, **short)
    off = write_config(tmp_path / "off.json", **short)
    assert main(["fscil", "--config", lam0, "--pretrained", str(ckpt), "--out", str(tmp_path / "a")]) == 0
    assert main(["fscil", "--config", off, "--toggle", "mtm=off", "--pretrained", str(ckpt), "--out", str(tmp_path / "b")]) == 0
    assert rows_of(tmp_path / "a" / "seed0.csv") == rows_of(tmp_path / "b" / "seed0.csv")
    ta = load_checkpoint(tmp_path / "a" / "seed0.casp").tensors
    tb = load_checkpoint(tmp_path / "b" / "seed0.casp").tensors
    for name in ta:
        if name.startswith(("cagp.", "cdap.", "prototypes")):
            assert ta[name].tobytes() == tb[name].tobytes(), name


def test_c05_prototype_oracle():
    rng = Rng(0)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(1, 6))
        m = int(rng.integers(k, 30))
        f = rng.normal((m, 8)).astype(np.float32)
        y = np.concatenate([np.arange(k), rng.integers(0, k, size=m - k)])
        naive = np.zeros((k, 8))
        counts = np.zeros(k)
        for i in range(m):
            naive[y[i]] += f[i].astype(np.float64)
            counts[y[i]] += 1
        naive /= counts[:, None]
        worst = max(worst, float(np.abs(compute_prototypes(f, y, range(k)) - naive).max()))
    assert worst < 1e-6

    W = append_session(PrototypeMatrix(), rng.normal((20, 16)), range(20), 0)
    feats = rng.normal((200, 16))
    pred, before = classify_batch(feats, W)
    for c in (1e-3, 0.3, 1.0, 7.5, 2.0, 1e4):
        assert (classify_batch(feats * c, W)[0] == pred).all()
    f0 = feats[0]
    assert classify(f0 * 4.0, W)[1].tobytes() == classify(f0, W)[1].tobytes()

    W2 = append_session(W, rng.normal((5, 16)), range(20, 25), 1)
    after = classify_batch(feats, W2)[1]
    assert after[:, :20].tobytes() == before.tobytes()


def test_c06_parameter_accounting():
    vit_b = VitConfig(image_size=224, patch_size=16, channels=3, dim=768, depth=12, heads=12)
    cagp, _ = trainable_param_count(vit_b)
    assert cagp == 27_648
    assert trainable_param_count(VitConfig())[1] == 832


@pytest.mark.slow
def test_c07_frozen_session_invariant(pretrained):
    ckpt = pretrained[0]
    res = resolve(merge_config(default_config(), {"train": {"epochs": 2}}), 0)
    ds = build_dataset(res)
    backbone = load_pretrained(ckpt, res)
    before = state_hash(backbone, None)
    result = run_fscil(ds, res, backbone)
    assert len(result.session_hashes) == 6
    assert len(set(result.session_hashes)) == 1
    assert state_hash(backbone, None) == before


@pytest.mark.slow
def test_c08_ablation_direction(ablation):
    _, s, elapsed = ablation
    for name in s:
        assert s[name]["seeds"] == [0, 1, 2, 3, 4]
    a_n_off, a_n_cagp = s["off"]["a_n"]["mean"], s["cagp"]["a_n"]["mean"]
    a_avg_cagp, a_avg_all = s["cagp"]["a_avg"]["mean"], s["all"]["a_avg"]["mean"]
    print(f"A_N off {a_n_off:.4f} cagp {a_n_cagp:.4f}; A_avg cagp {a_avg_cagp:.4f} all {a_avg_all:.4f}; {elapsed:.0f}s")
    assert a_n_cagp > a_n_off
    assert a_avg_all >= a_avg_cagp
    assert elapsed < 600.0


@pytest.mark.slow
def test_c09_determinism(ablation, pretrained, tmp_path):
    root = ablation[0]
    assert main(["fscil", "--pretrained", str(pretrained[0]), "--seed", "0", "--out", str(tmp_path)]) == 0
    for name in ("seed0.csv", "seed0.json"):
        assert (tmp_path / name).read_bytes() == (root / "all" / name).read_bytes(), name


@pytest.mark.slow
def test_c10_format_roundtrips(pretrained, tmp_path, capsys):
    ckpt = pretrained[0]
    raw = ckpt.read_bytes()
    assert checkpoint_bytes(parse_checkpoint(raw)) == raw
    (tmp_path / "again.casp").write_bytes(checkpoint_bytes(load_checkpoint(ckpt)))
    assert (tmp_path / "again.casp").read_bytes() == raw

    assert main(["gen-data", "--out", str(tmp_path)]) == 0
    data_path = tmp_path / "dataset.cdsf"
    ds = read_cdsf(data_path)
    ref = build_dataset(resolve(default_config(), 0))
    assert ds.images.tobytes() == ref.images.tobytes()
    assert ds.labels.tolist() == ref.labels.tolist()
    assert cdsf_bytes(ds) == data_path.read_bytes()

    for good, name in ((raw, "bad.casp"), (data_path.read_bytes(), "bad.cdsf")):
        bad = bytearray(good)
        bad[:4] = b"\0BAD"
        (tmp_path / name).write_bytes(bytes(bad))
    capsys.readouterr()
    assert main(["fscil", "--pretrained", str(tmp_path / "bad.casp"), "--out", str(tmp_path)]) == 2
    assert "bad magic" in capsys.readouterr().err
    assert main(["pretrain", "--data", str(tmp_path / "bad.cdsf"), "--out", str(tmp_path)]) == 2
    assert "bad magic" in capsys.readouterr().err


@pytest.mark.slow
def test_c11_sweep_sanity(pretrained, tmp_path):
    cfg = write_config(tmp_path / "short.json", train={"epochs": 3})
    args = ["sweep", "--config", cfg, "--pretrained", str(pretrained[0]), "--jobs", "2"]
    args += ["--lambda-mix", "0,0.05,0.5", "--split-layer", "0,2", "--out", str(tmp_path)]
    assert main(args) == 0
    with open(tmp_path / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    grid = [r for r in rows if not r["control"]]
    control = [r for r in rows if r["control"] == "mtm_off"]
    assert len(grid) == 6 and len(control) == 1
    metrics = ("a_b", "a_n", "a_l", "a_avg")
    for r in grid:
        if float(r["lambda_mix"]) == 0.0:
            assert [r[m] for m in metrics] == [control[0][m] for m in metrics]

    assert main(["report", str(tmp_path / "sweep.csv"), "--out", str(tmp_path / "report")]) == 0
    root = ET.fromstring((tmp_path / "report" / "sweep.svg").read_text())
    ns = "{http://www.w3.org/2000/svg}"
    points = sum(len(p.get("points").split()) for p in root.iter(f"{ns}polyline"))
    assert points == 6
    assert len(list(root.iter(f"{ns}circle"))) == 6
