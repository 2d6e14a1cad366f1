import json

import numpy as np
import pytest

from crossmetric import checkpoint, config
from crossmetric.cli import main
from crossmetric.pipeline import read_summary, verify_manifest

TINY = {
    "dataset": {"synthetic": {"classes": 4, "docs_per_class": 20, "latent_dim": 4,
                              "image_dim": 12, "text_dim": 10}},
    "pretrain": {"max_iterations": 20, "learning_rate": 0.01, "batch_size": 16},
    "finetune": {"max_iterations": 20, "learning_rate": 0.01, "batch_size": 16},
    "metric": {"max_iterations": 20, "learning_rate": 0.01, "batch_size": 16},
    "pair_count": 200,
    "seed": 3,
}


def _write(tmp_path, name="cfg.json", **overrides):
    doc = json.loads(json.dumps(TINY))
    for key, value in overrides.items():
        node = doc
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = _write(tmp)
    assert main(["train", "--config", cfg, "--out", str(tmp / "with")]) == 0
    assert main(["eval", "--out", str(tmp / "with")]) == 0
    assert main(["train", "--config", cfg, "--out", str(tmp / "without"),
                 "--set", "skip_pretrain=true"]) == 0
    assert main(["eval", "--out", str(tmp / "without")]) == 0
    return tmp


# synth

def test_synth_writes_files_and_is_byte_identical(tmp_path):
    cfg = _write(tmp_path)
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["images.csv", "latents.csv", "manifest.json", "texts.csv"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_synth_rejects_one_class(tmp_path, capsys):
    code = main(["synth", "--out", str(tmp_path), "--set", "dataset.synthetic.classes=1"])
    assert code == 1
    assert "at least 2 classes" in capsys.readouterr().err


def test_unknown_override_key(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "pretrain.lr=1"]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_train_from_synth_manifest(tmp_path):
    cfg = _write(tmp_path)
    main(["synth", "--config", cfg, "--out", str(tmp_path / "data")])
    cfg2 = _write(tmp_path, "cfg2.json", **{"dataset.manifest": str(tmp_path / "data" / "manifest.json")})
    assert main(["train", "--config", cfg2, "--out", str(tmp_path / "run")]) == 0
    assert main(["eval", "--out", str(tmp_path / "run")]) == 0


# train

def test_train_layout(trained):
    run = trained / "with"
    for rel in ("config.json", "preprocess.json", "run_manifest.json",
                "checkpoints/pathway_pretrained.ckpt", "checkpoints/pathway.ckpt",
                "checkpoints/metric.ckpt", "history/pretrain.csv", "history/finetune.csv",
                "history/metric.csv"):
        assert (run / rel).exists(), rel
    assert all(verify_manifest(run).values())


def test_manifest_detects_tampering(tmp_path):
    cfg = _write(tmp_path)
    main(["train", "--config", cfg, "--out", str(tmp_path / "r")])
    (tmp_path / "r" / "history" / "metric.csv").write_text("iteration,loss\n0,1\n")
    ok = verify_manifest(tmp_path / "r")
    assert not ok["history_metric"] and ok["metric"]


def test_skip_pretrain_arm(trained):
    assert (trained / "without" / "history" / "pretrain.csv").read_text().strip() == "iteration,loss"
    assert len((trained / "with" / "history" / "pretrain.csv").read_text().splitlines()) == 21


def test_zero_learning_rate_keeps_initialization(tmp_path):
    overrides = {f"{s}.learning_rate": 0.0 for s in ("pretrain", "finetune", "metric")}
    a = _write(tmp_path, "a.json", **overrides)
    b = _write(tmp_path, "b.json", **overrides, **{f"{s}.max_iterations": 1
                                                   for s in ("pretrain", "finetune", "metric")})
    main(["train", "--config", a, "--out", str(tmp_path / "a")])
    main(["train", "--config", b, "--out", str(tmp_path / "b")])
    for name in ("pathway_pretrained", "pathway", "metric"):
        ra = (tmp_path / "a" / "checkpoints" / f"{name}.ckpt").read_bytes()
        assert ra == (tmp_path / "b" / "checkpoints" / f"{name}.ckpt").read_bytes()
    pre = checkpoint.load(tmp_path / "a" / "checkpoints" / "pathway_pretrained.ckpt")
    post = checkpoint.load(tmp_path / "a" / "checkpoints" / "pathway.ckpt")
    assert all(np.array_equal(x.weights, y.weights) for (_, x), (_, y) in zip(pre, post))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_stage_failure_exits_nonzero(tmp_path, capsys):
    cfg = _write(tmp_path, **{"pretrain.learning_rate": 1e300})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 1
    assert "stage 'pretrain' failed" in capsys.readouterr().err


def test_missing_manifest(tmp_path, capsys):
    cfg = _write(tmp_path, **{"dataset.manifest": str(tmp_path / "nope.json")})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "r")]) == 1
    assert "stage 'data' failed" in capsys.readouterr().err


# eval

def test_eval_summary_structure(trained):
    s = read_summary(trained / "with")
    assert set(s) == {"metric", "cosine"}
    for by_task in s.values():
        assert list(by_task) == ["Image->Text", "Text->Image", "Average"]
        assert by_task["Average"] == pytest.approx((by_task["Image->Text"] + by_task["Text->Image"]) / 2,
                                                   abs=1e-12)
    lines = (trained / "with" / "eval" / "summary.csv").read_text().splitlines()
    assert len(lines) == 1 + 6


def test_eval_writes_pr_files(trained):
    for scorer in ("metric", "cosine"):
        for task in ("i2t", "t2i"):
            rows = (trained / "with" / "eval" / f"pr_{scorer}_{task}.csv").read_text().splitlines()
            assert rows[0] == "recall,precision" and len(rows) == 101


def test_eval_dimension_mismatch(trained, tmp_path, capsys):
    run = trained / "with"
    cfg = config.load(run / "config.json")
    cfg.dataset.synthetic.image_dim = 13
    path = tmp_path / "bad.json"
    config.save(path, cfg)
    assert main(["eval", "--config", str(path), "--out", str(run)]) == 1
    assert "13" in capsys.readouterr().err


def test_eval_without_run(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path)]) == 1


def test_baseline_only(tmp_path):
    cfg = _write(tmp_path, baseline_only=True)
    main(["train", "--config", cfg, "--out", str(tmp_path / "r")])
    main(["eval", "--out", str(tmp_path / "r")])
    assert list(read_summary(tmp_path / "r")) == ["cosine"]


# report

def test_report_two_tables(trained, tmp_path):
    assert main(["report", "--out", str(trained), "--report-dir", str(tmp_path / "a")]) == 0
    text = (tmp_path / "a" / "report.txt").read_text()
    assert "cosine similarity vs metric network" in text
    assert "with and without contrastive pretraining" in text
    assert "without pretrain (without)" in text
    for fig in ("pr_curves.png", "map.png", "loss_with.png", "loss_without.png"):
        assert (tmp_path / "a" / fig).stat().st_size > 0


def test_report_is_byte_identical(trained, tmp_path):
    main(["report", "--out", str(trained), "--report-dir", str(tmp_path / "a")])
    main(["report", "--out", str(trained), "--report-dir", str(tmp_path / "b")])
    assert (tmp_path / "a" / "report.txt").read_bytes() == (tmp_path / "b" / "report.txt").read_bytes()


def test_report_missing_arm(trained, tmp_path):
    import shutil
    shutil.copytree(trained / "with", tmp_path / "runs" / "one")
    shutil.copytree(trained / "with", tmp_path / "runs" / "two")
    build = main(["report", "--out", str(tmp_path / "runs")])
    assert build == 0
    text = (tmp_path / "runs" / "report.txt").read_text()
    assert "notice: pretraining comparison skipped" in text
    assert "with and without" not in text


def test_report_without_runs(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 1


def test_seed_override(tmp_path):
    cfg = _write(tmp_path)
    main(["synth", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "5"])
    main(["synth", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "6"])
    assert (tmp_path / "a" / "images.csv").read_bytes() != (tmp_path / "b" / "images.csv").read_bytes()
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["split"]["seed"] == 5
