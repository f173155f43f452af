import contextlib
import csv
import io
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest
import torch

from mrissl import cli
from mrissl.checkpoint import load_checkpoint
from mrissl.config import load_config
from mrissl.data import load_manifest, write_volume
from mrissl.models import ModelConfig
from mrissl.phantoms import phantom_case
from mrissl.training import FinetuneConfig, NumericFailure, new_finetune_state

SMALL_MODEL = {"preset": "toy", "image_size": 16, "widths": [4, 8, 8], "head_hidden": 8, "disc_width": 4,
               "disc_layers": 2, "transformer": {"layers": 1, "heads": 2, "nd": 8, "hidden": 16, "patch": 1,
                                                 "downsample_factor": 2}}
CONFIG = {"data": {"train_manifest": "man_train.json", "test_manifest": "man_test.json", "slice_size": 16,
                   "sequence": "T1"},
          "model": SMALL_MODEL, "pretrain": {"epochs": 1, "batch": 4}, "finetune": {"epochs": 2, "batch": 8}}


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def error_of(err: str) -> dict:
    lines = [ln for ln in err.splitlines() if ln.startswith("{")]
    assert len(lines) == 1, err
    return json.loads(lines[0])


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for i, cls in enumerate(["glioma", "meningioma", "no_tumor", "glioma"]):
        for v in phantom_case(f"case{i}", cls, shape=(32, 32, 16), seed=i):
            write_volume(root / "vols" / f"case{i}" / v.sequence, v)
    (root / "cfg.json").write_text(json.dumps(CONFIG))
    code, out, err = run("ingest", "--volumes", root / "vols", "--out", root / "man.json", "--tumor-k", 2,
                         "--healthy-k", 2, "--config", root / "cfg.json", "--seed", 3)
    assert code == 0, err
    code, _, err = run("pretrain", "--config", root / "cfg.json", "--out", root / "g.ckpt")
    assert code == 0, err
    code, _, err = run("finetune", "--config", root / "cfg.json", "--init", root / "g.ckpt",
                       "--out", root / "c.ckpt", "--seed", 1)
    assert code == 0, err
    return root


# ---------------------------------------------------------------- ingest

def test_ingest_counts_and_table(ws):
    train, test = load_manifest(ws / "man_train.json"), load_manifest(ws / "man_test.json")
    # 4 cases, 2 healthy each + 2 tumor for the 3 tumor cases, times 3 sequences
    assert len(train) + len(test) == 3 * (4 * 2 + 3 * 2)
    for m in (train, test):
        keys = {}
        for r in m.records:
            keys.setdefault(r.pair_key, set()).add(r.sequence)
        assert all(s == {"T1", "T2", "FLAIR"} for s in keys.values())
    code, out, _ = run("ingest", "--volumes", ws / "vols", "--out", ws / "again" / "m.json", "--tumor-k", 2,
                       "--healthy-k", 2, "--config", ws / "cfg.json", "--seed", 3)
    assert code == 0
    assert "no_tumor" in out and "Total" in out and "Train" in out and "Test" in out


def test_ingest_same_seed_same_bytes(ws, tmp_path):
    for d in ("a", "b"):
        run("ingest", "--volumes", ws / "vols", "--out", tmp_path / d / "m.json", "--tumor-k", 2,
            "--healthy-k", 2, "--config", ws / "cfg.json", "--seed", 5)
    for name in ("m_train.json", "m_test.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    blobs = sorted(p.name for p in (tmp_path / "a").rglob("*") if p.is_file())
    for name in blobs:
        pa = next((tmp_path / "a").rglob(name))
        pb = next((tmp_path / "b").rglob(name))
        assert pa.read_bytes() == pb.read_bytes(), name


def test_ingest_shortfall_names_case(ws, tmp_path):
    code, _, err = run("ingest", "--volumes", ws / "vols", "--out", tmp_path / "m.json", "--tumor-k", 50,
                       "--config", ws / "cfg.json")
    e = error_of(err)
    assert code == 3 and e["code"] == 3 and e["error"] == "data"
    assert "case" in e["message"]


def test_ingest_malformed_sidecar_names_file(ws, tmp_path):
    vols = tmp_path / "vols"
    shutil.copytree(ws / "vols" / "case0", vols / "case0")
    (vols / "case0" / "T1.json").write_text("{broken")
    code, _, err = run("ingest", "--volumes", vols, "--out", tmp_path / "m.json", "--tumor-k", 1,
                       "--healthy-k", 1, "--config", ws / "cfg.json")
    assert code == 3
    assert "T1.json" in error_of(err)["message"]


def test_ingest_uses_data_root_env(ws, tmp_path, monkeypatch):
    monkeypatch.setenv("MRISSL_DATA_ROOT", str(ws / "vols"))
    code, _, err = run("ingest", "--out", tmp_path / "m.json", "--tumor-k", 2, "--healthy-k", 2,
                       "--config", ws / "cfg.json")
    assert code == 0, err
    monkeypatch.delenv("MRISSL_DATA_ROOT")
    code, _, err = run("ingest", "--out", tmp_path / "m.json")
    assert code == 2 and "MRISSL_DATA_ROOT" in error_of(err)["message"]


# ---------------------------------------------------------------- pretrain / finetune

def test_pretrain_artifacts(ws):
    ck = load_checkpoint(ws / "g.ckpt")
    assert ck.manifest["kind"] == "generator"
    assert ck.manifest["experiment"] == load_config(ws / "cfg.json").to_dict()
    assert ck.manifest["config_digest"] == load_config(ws / "cfg.json").digest
    rows = list(csv.reader(open(ws / "g_runlog.csv")))
    assert rows[0][0] == "step" and len(rows) > 1
    log = json.loads((ws / "g_runlog.json").read_text())
    assert log["config_digest"] == ck.manifest["config_digest"]


def test_pretrain_resume_and_max_steps(ws, tmp_path):
    code, _, err = run("pretrain", "--config", ws / "cfg.json", "--out", tmp_path / "a.ckpt", "--max-steps", 1)
    assert code == 0, err
    code, _, err = run("pretrain", "--config", ws / "cfg.json", "--out", tmp_path / "b.ckpt",
                       "--resume", tmp_path / "a.ckpt")
    assert code == 0, err
    full = load_checkpoint(ws / "g.ckpt")
    resumed = load_checkpoint(tmp_path / "b.ckpt")
    assert resumed.manifest["step"] == full.manifest["step"]
    for k, v in full.tensors.items():
        assert torch.allclose(v, resumed.tensors[k], atol=1e-6), k


def test_finetune_same_seed_same_bytes(ws, tmp_path):
    code, _, _ = run("finetune", "--config", ws / "cfg.json", "--init", ws / "g.ckpt",
                     "--out", tmp_path / "c.ckpt", "--seed", 1)
    assert code == 0
    assert (tmp_path / "c.ckpt").read_bytes() == (ws / "c.ckpt").read_bytes()
    assert (tmp_path / "c_runlog.csv").read_bytes() == (ws / "c_runlog.csv").read_bytes()


def test_finetune_init_equals_transfer_at_step0(ws, tmp_path):
    code, _, err = run("finetune", "--config", ws / "cfg.json", "--init", ws / "g.ckpt",
                       "--out", tmp_path / "c0.ckpt", "--seed", 4, "--max-steps", 0)
    assert code == 0, err
    ck = load_checkpoint(tmp_path / "c0.ckpt")
    assert ck.manifest["step"] == 0
    model_cfg = ModelConfig.from_dict(ck.manifest["model"])
    ref = new_finetune_state(model_cfg, FinetuneConfig(**ck.manifest["finetune"]), load_checkpoint(ws / "g.ckpt"))
    ref_sd = ref.classifier.state_dict()
    got = {k: v for k, v in ck.tensors.items() if not k.startswith("optim.")}
    assert set(got) == set(ref_sd)
    for k in got:
        assert torch.equal(got[k], ref_sd[k]), k


def test_finetune_fresh_differs_from_init(ws, tmp_path):
    run("finetune", "--config", ws / "cfg.json", "--init", "fresh", "--out", tmp_path / "f.ckpt",
        "--max-steps", 0)
    run("finetune", "--config", ws / "cfg.json", "--init", ws / "g.ckpt", "--out", tmp_path / "t.ckpt",
        "--max-steps", 0)
    f, t = load_checkpoint(tmp_path / "f.ckpt").tensors, load_checkpoint(tmp_path / "t.ckpt").tensors
    assert not torch.equal(f["art.1.res.conv1.weight"], t["art.1.res.conv1.weight"])
    assert torch.equal(f["head.fc2.weight"], t["head.fc2.weight"])


def test_finetune_incompatible_init_is_config_error(ws, tmp_path):
    other = dict(CONFIG, model=dict(SMALL_MODEL, widths=[4, 8, 16]))
    (tmp_path / "o.json").write_text(json.dumps(other))
    for name in ("man_train.json", "man_test.json", "man_train_slices", "man_test_slices"):
        src = ws / name
        (shutil.copytree if src.is_dir() else shutil.copy)(src, tmp_path / name)
    code, _, err = run("finetune", "--config", tmp_path / "o.json", "--init", ws / "g.ckpt",
                       "--out", tmp_path / "x.ckpt")
    e = error_of(err)
    assert code == 2 and e["error"] == "config" and "art." in e["message"]
    code, _, err = run("finetune", "--config", ws / "cfg.json", "--init", ws / "c.ckpt", "--out", tmp_path / "y")
    assert code == 2 and "not a generator" in error_of(err)["message"]


def test_numeric_failure_exit_4_with_dump(ws, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericFailure("non-finite loss at step 3: {'total': nan}", {"step": 3, "losses": {"total": "nan"}})
    monkeypatch.setattr(cli, "run_pretrain", boom)
    code, _, err = run("pretrain", "--config", ws / "cfg.json", "--out", tmp_path / "g.ckpt")
    e = error_of(err)
    assert code == 4 and e == {"error": "numeric", "code": 4, "message": "non-finite loss at step 3: {'total': nan}"}
    assert json.loads((tmp_path / "g_failure.json").read_text())["step"] == 3


# ---------------------------------------------------------------- synthesize

def test_synthesize_train_writes_n_plus_augmented(ws, tmp_path):
    code, out, err = run("synthesize", "--ckpt", ws / "g.ckpt", "--manifest", ws / "man_train.json",
                         "--out", tmp_path / "s", "--config", ws / "cfg.json")
    assert code == 0, err
    train = load_manifest(ws / "man_train.json")
    n_src = len(train.subset("T1", "real"))
    syn = load_manifest(tmp_path / "s" / "synthetic.json")
    assert len(syn) == n_src and all(r.provenance == "synthetic" and r.sequence == "T2" for r in syn.records)
    assert len(list((tmp_path / "s" / "synthetic_slices").iterdir())) == n_src
    aug = load_manifest(tmp_path / "s" / "augmented.json")
    base = train.subset("T2", "real")
    tumor = sum(r.class_label in ("glioma", "meningioma") for r in base.records)
    assert len(aug) == len(base) + tumor
    assert aug.per_class_counts["no_tumor"] == base.per_class_counts["no_tumor"]


def test_synthesize_test_manifest_not_augmented(ws, tmp_path):
    code, out, _ = run("synthesize", "--ckpt", ws / "g.ckpt", "--manifest", ws / "man_test.json",
                       "--out", tmp_path / "s")
    assert code == 0
    assert not (tmp_path / "s" / "augmented.json").exists()
    assert (tmp_path / "s" / "synthetic.json").exists()


def test_synthesize_deterministic(ws, tmp_path):
    for d in ("a", "b"):
        run("synthesize", "--ckpt", ws / "g.ckpt", "--manifest", ws / "man_test.json", "--out", tmp_path / d)
    for p in (tmp_path / "a").rglob("*"):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


# ---------------------------------------------------------------- evaluate / report

def test_evaluate_synth_layout(ws, tmp_path):
    code, out, err = run("evaluate", "--ckpt", ws / "g.ckpt", "--manifest", ws / "man_test.json",
                         "--task", "synth", "--out", tmp_path / "r")
    assert code == 0, err
    header = out.splitlines()[0].split()
    assert header == ["Task", "PSNR", "SSIM", "MSE"]
    assert "±" in out.splitlines()[1]
    doc = json.loads((tmp_path / "r.json").read_text())
    assert set(doc["summary"]) == {"psnr", "ssim", "mse"}
    assert doc["n"] == len(doc["per_image"]["psnr"]) > 0
    assert (tmp_path / "r_samples.png").exists()


def test_evaluate_classify_layout(ws, tmp_path):
    code, out, err = run("evaluate", "--ckpt", ws / "c.ckpt", "--manifest", ws / "man_test.json",
                         "--task", "classify", "--sequence", "T1", "--out", tmp_path / "r")
    assert code == 0, err
    assert out.splitlines()[0].split() == ["Model", "Accuracy", "Precision", "Recall", "F1"]
    doc = json.loads((tmp_path / "r.json").read_text())
    assert {"accuracy", "precision", "recall", "f1", "confusion"} <= set(doc)
    assert (tmp_path / "r_confusion.png").exists()
    again = tmp_path / "again"
    run("evaluate", "--ckpt", ws / "c.ckpt", "--manifest", ws / "man_test.json", "--task", "classify",
        "--sequence", "T1", "--out", again)
    assert again.with_suffix(".json").read_bytes() == (tmp_path / "r.json").read_bytes()


def test_evaluate_wrong_checkpoint_kind(ws):
    code, _, err = run("evaluate", "--ckpt", ws / "g.ckpt", "--manifest", ws / "man_test.json",
                       "--task", "classify")
    assert code == 3 and "not a classifier" in error_of(err)["message"]


def test_evaluate_dump_activations(ws, tmp_path):
    code, _, err = run("evaluate", "--ckpt", ws / "c.ckpt", "--manifest", ws / "man_test.json",
                       "--task", "classify", "--sequence", "T1", "--dump-activations", tmp_path / "act")
    assert code == 0, err
    idx = json.loads((tmp_path / "act" / "index.json").read_text())
    assert idx["tensors"][-1]["name"] == "output"
    assert idx["tensors"][-1]["shape"] == [1, 4]


@pytest.mark.parametrize("fmt", ["table", "json", "csv"])
def test_report_formats(ws, tmp_path, fmt):
    code, out, err = run("report", "--runlog", ws / "c_runlog", "--format", fmt, "--figures", tmp_path)
    assert code == 0, err
    if fmt == "json":
        doc = json.loads(out)
        assert doc["kind"] == "finetune" and doc["epochs"]
    elif fmt == "csv":
        rows = list(csv.reader(io.StringIO(out)))
        assert rows[0] == ["epoch", "step", "loss", "accuracy", "precision", "recall", "f1"]
        assert len(rows) == 1 + 2
    else:
        assert "finetune run" in out
    figs = [ln.split(" ", 1)[1] for ln in err.splitlines() if ln.startswith("figure ")]
    assert len(figs) == 3 and all(Path(p).exists() for p in figs)


def test_report_pretrain_summary(ws):
    code, out, _ = run("report", "--runlog", ws / "g_runlog.csv", "--format", "csv", "--no-figures")
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0][0] == "column"
    assert {r[0] for r in rows[1:]} == {"l_pix", "l_rec", "l_adv_G", "l_adv_D", "total"}


def test_report_missing_and_corrupt(tmp_path):
    code, _, err = run("report", "--runlog", tmp_path / "nope")
    assert code == 3 and error_of(err)["error"] == "data"
    (tmp_path / "bad.json").write_text("{}")
    code, _, err = run("report", "--runlog", tmp_path / "bad")
    assert code == 3


# ---------------------------------------------------------------- errors and entry point

def test_config_errors_list_every_key(ws, tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"pretrain": {"lrate": 1, "epoch": 2}, "extra": {}}))
    code, _, err = run("pretrain", "--config", tmp_path / "bad.json", "--out", tmp_path / "g.ckpt")
    e = error_of(err)
    assert code == 2 and e["error"] == "config"
    for key in ("pretrain.lrate", "pretrain.epoch", "extra"):
        assert key in e["message"]


def test_missing_files_are_data_errors(ws, tmp_path):
    code, _, err = run("evaluate", "--ckpt", tmp_path / "none.ckpt", "--manifest", ws / "man_test.json",
                       "--task", "synth")
    assert code == 3
    cfg = dict(CONFIG, data=dict(CONFIG["data"], train_manifest="nowhere.json"))
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, _, err = run("pretrain", "--config", tmp_path / "c.json", "--out", tmp_path / "g.ckpt")
    assert code == 3 and "nowhere.json" in error_of(err)["message"]


def test_corrupt_checkpoint_is_data_error(ws, tmp_path):
    blob = bytearray((ws / "g.ckpt").read_bytes())
    blob[-20] ^= 0xFF
    (tmp_path / "g.ckpt").write_bytes(bytes(blob))
    code, _, err = run("synthesize", "--ckpt", tmp_path / "g.ckpt", "--manifest", ws / "man_test.json",
                       "--out", tmp_path / "s")
    assert code == 3 and error_of(err)["error"] == "data"


def test_usage_errors_are_single_json_line():
    code, out, err = run("evaluate", "--task", "bogus")
    assert code == 2 and out == ""
    assert error_of(err)["error"] == "config"
    code, _, err = run()
    assert code == 2


def test_config_command(tmp_path):
    code, out, _ = run("config")
    assert code == 0 and set(json.loads(out)) == {"data", "model", "pretrain", "finetune", "metrics", "io"}
    (tmp_path / "c.json").write_text(out)
    code, out, _ = run("config", "--check", tmp_path / "c.json")
    assert code == 0 and json.loads(out)["valid"] is True


def test_console_script_subprocess(tmp_path):
    exe = shutil.which("mrissl")
    cmd = [exe] if exe else [sys.executable, "-m", "mrissl.cli"]
    proc = subprocess.run(cmd + ["report", "--runlog", str(tmp_path / "x")], capture_output=True, text=True)
    assert proc.returncode == 3
    assert json.loads(proc.stderr.strip())["code"] == 3
    proc = subprocess.run(cmd + ["config"], capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["model"]["preset"] == "full"
