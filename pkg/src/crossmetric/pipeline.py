"""End-to-end runs: train the three stages, evaluate, and summarise.

A run directory looks like::

    run/
      config.json            snapshot of the configuration used
      preprocess.json        train-split standardization statistics
      checkpoints/           pathway_pretrained, pathway, metric (+ refiners)
      history/               per-iteration loss of each stage
      eval/                  summary.csv, ap_*.csv, pr_*.csv
      run_manifest.json      checksums, paths and timings
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from . import config as config_mod
from .config import PipelineConfig
from .data import (
    CrossMediaDataset,
    IntraModalityRefiner,
    Standardizer,
    generate_synthetic,
    intra_modality_refine,
    load_dataset,
    save_dataset,
    split_dataset,
    standardize,
)
from .evaluation import TASKS, RetrievalReport, cosine_baseline, evaluate_both
from .metricnet import MetricNetwork, default_pair_count, logit_grid, sample_pairs, train_metric
from .nn import DenseLayer, ShapeError, make_rng
from .pathway import PathwayNetwork, extract_shared_representation, finetune, pretrain

log = logging.getLogger(__name__)

# independent random streams per stage, so ablation arms share everything else
STREAM_SPLIT, STREAM_INIT, STREAM_REFINE, STREAM_PRETRAIN, STREAM_FINETUNE, STREAM_PAIRS, STREAM_METRIC = range(7)

SCORERS = ("metric", "cosine")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name: str, timings: dict[str, float]):
    t0 = time.perf_counter()
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = round(time.perf_counter() - t0, 3)


def sha256(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(x: float) -> str:
    return "%.17g" % x


# ---------------------------------------------------------------------------
# data


def build_dataset(cfg: PipelineConfig) -> CrossMediaDataset:
    """Load the manifest, or generate the synthetic set, and make sure it is split."""
    split_rng = make_rng(cfg.seed, STREAM_SPLIT)
    if cfg.dataset.manifest:
        ds = load_dataset(cfg.dataset.manifest, rng=split_rng)
    else:
        ds = generate_synthetic(cfg.dataset.synthetic).dataset
    if not ds.splits:
        ds = split_dataset(ds, split_rng, fractions=cfg.dataset.split_fractions)
    return ds


@dataclass
class Preprocessor:
    standardizer: Standardizer
    image_refiner: IntraModalityRefiner | None = None
    text_refiner: IntraModalityRefiner | None = None

    def apply(self, ds: CrossMediaDataset) -> CrossMediaDataset:
        ds = self.standardizer.apply(ds)
        if self.image_refiner is not None and self.text_refiner is not None:
            ds = ds.with_features(self.image_refiner.transform(ds.images.features),
                                  self.text_refiner.transform(ds.texts.features))
        return ds


def _refiner_layers(r: IntraModalityRefiner) -> list[tuple[str, DenseLayer]]:
    return [("refine.hidden", r.hidden), ("refine.head", r.head)]


def _load_refiner(path: Path) -> IntraModalityRefiner:
    layers = dict(checkpoint.load(path, "refiner"))
    r = IntraModalityRefiner.__new__(IntraModalityRefiner)
    r.hidden, r.head, r.history = layers["refine.hidden"], layers["refine.head"], []
    return r


def load_preprocessor(run_dir: Path) -> Preprocessor:
    std = Standardizer.from_dict(json.loads((run_dir / "preprocess.json").read_text()))
    ckpt = run_dir / "checkpoints"
    if (ckpt / "refine_image.ckpt").exists():
        return Preprocessor(std, _load_refiner(ckpt / "refine_image.ckpt"),
                            _load_refiner(ckpt / "refine_text.ckpt"))
    return Preprocessor(std)


# ---------------------------------------------------------------------------
# training


def _write_history(path: Path, history: list[float]) -> None:
    lines = ["iteration,loss"] + [f"{i},{_fmt(v)}" for i, v in enumerate(history)]
    path.write_text("\n".join(lines) + "\n")


def read_history(path: str | os.PathLike) -> np.ndarray:
    rows = Path(path).read_text().splitlines()[1:]
    return np.array([float(r.split(",")[1]) for r in rows])


def train(cfg: PipelineConfig, out_dir: str | os.PathLike | None = None) -> Path:
    """Standardize, optionally refine, pretrain, fine-tune, then fit the metric network."""
    config_mod.validate(cfg)
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    for sub in ("checkpoints", "history"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    artifacts: dict[str, str] = {}

    config_mod.save(out / "config.json", cfg)
    artifacts["config"] = "config.json"

    with stage("data", timings):
        ds = build_dataset(cfg)
        ds, std = standardize(ds)
        (out / "preprocess.json").write_text(json.dumps(std.to_dict()) + "\n")
        artifacts["preprocess"] = "preprocess.json"

    if cfg.use_intra_refine:
        with stage("refine", timings):
            rng = make_rng(cfg.seed, STREAM_REFINE)
            rc = cfg.refine.to_refine()
            img, r_img = intra_modality_refine(ds, "image", rc, rng)
            txt, r_txt = intra_modality_refine(ds, "text", rc, rng)
            ds = ds.with_features(img, txt)
            for name, r in (("refine_image", r_img), ("refine_text", r_txt)):
                checkpoint.save(out / "checkpoints" / f"{name}.ckpt", "refiner", _refiner_layers(r))
                artifacts[name] = f"checkpoints/{name}.ckpt"

    train_split = ds.split("train")
    net = PathwayNetwork.create(
        ds.images.dim, ds.texts.dim, make_rng(cfg.seed, STREAM_INIT),
        activation=cfg.hidden_activation, output_activation=cfg.output_activation,
    )
    margins = cfg.margins.to_margins()

    with stage("pretrain", timings):
        history = [] if cfg.skip_pretrain else pretrain(
            net, train_split, cfg.pretrain.to_sgd(), margins, make_rng(cfg.seed, STREAM_PRETRAIN))
        _write_history(out / "history" / "pretrain.csv", history)
        checkpoint.save(out / "checkpoints" / "pathway_pretrained.ckpt", "pathway", net.named_layers())

    with stage("finetune", timings):
        history = finetune(net, train_split, cfg.finetune.to_sgd(), margins,
                           make_rng(cfg.seed, STREAM_FINETUNE))
        _write_history(out / "history" / "finetune.csv", history)
        checkpoint.save(out / "checkpoints" / "pathway.ckpt", "pathway", net.named_layers())

    artifacts["pathway_pretrained"] = "checkpoints/pathway_pretrained.ckpt"
    artifacts["pathway"] = "checkpoints/pathway.ckpt"
    for name in ("pretrain", "finetune"):
        artifacts[f"history_{name}"] = f"history/{name}.csv"

    if not cfg.baseline_only:
        with stage("metric", timings):
            rep = extract_shared_representation(net, train_split)
            count = cfg.pair_count or default_pair_count(len(train_split))
            pairs = sample_pairs(rep, count, make_rng(cfg.seed, STREAM_PAIRS))
            mnet = MetricNetwork.create(make_rng(cfg.seed, STREAM_INIT + 100))
            history = train_metric(mnet, rep, pairs, cfg.metric.to_sgd(),
                                   make_rng(cfg.seed, STREAM_METRIC))
            _write_history(out / "history" / "metric.csv", history)
            checkpoint.save(out / "checkpoints" / "metric.ckpt", "metric", mnet.named_layers())
            artifacts["metric"] = "checkpoints/metric.ckpt"
            artifacts["history_metric"] = "history/metric.csv"

    write_manifest(out, {"config": config_mod.to_dict(cfg), "artifacts": artifacts,
                         "timings": {"train": timings}})
    return out


# ---------------------------------------------------------------------------
# manifest


def write_manifest(run_dir: Path, content: dict) -> None:
    path = run_dir / "run_manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    for key, value in content.items():
        if isinstance(value, dict) and isinstance(manifest.get(key), dict):
            manifest[key].update(value)
        else:
            manifest[key] = value
    manifest["checksums"] = {
        name: sha256(run_dir / rel) for name, rel in sorted(manifest.get("artifacts", {}).items())
    }
    write_atomic(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def verify_manifest(run_dir: str | os.PathLike) -> dict[str, bool]:
    """Recompute every recorded checksum; maps artifact name to whether it still matches."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "run_manifest.json").read_text())
    return {name: sha256(run_dir / manifest["artifacts"][name]) == digest
            for name, digest in manifest["checksums"].items()}


# ---------------------------------------------------------------------------
# evaluation


def load_run(run_dir: Path, cfg: PipelineConfig):
    pathway = PathwayNetwork.from_named_layers(
        checkpoint.load(run_dir / "checkpoints" / "pathway.ckpt", "pathway"))
    metric_path = run_dir / "checkpoints" / "metric.ckpt"
    metric = (MetricNetwork.from_named_layers(checkpoint.load(metric_path, "metric"))
              if metric_path.exists() and not cfg.baseline_only else None)
    return pathway, metric


def score_run(
    cfg: PipelineConfig, run_dir: str | os.PathLike, split: str = "test"
) -> dict[str, dict[str, RetrievalReport]]:
    """Retrieval reports for every available scorer, keyed ``scorer -> task``."""
    run_dir = Path(run_dir)
    ds = build_dataset(cfg)
    ds = load_preprocessor(run_dir).apply(ds)
    pathway, metric = load_run(run_dir, cfg)
    if ds.images.dim != pathway.image_dim or ds.texts.dim != pathway.text_dim:
        raise ShapeError(
            f"checkpoint expects {pathway.image_dim}/{pathway.text_dim}-d inputs but the "
            f"dataset has {ds.images.dim}/{ds.texts.dim}"
        )
    rep = extract_shared_representation(pathway, ds.split(split))
    reports = {"cosine": cosine_baseline(rep)}
    if metric is not None:
        h = logit_grid(metric, rep.image_embeddings, rep.text_embeddings)
        # rank on h1 - h0: same order as the softmax score, without saturation ties
        reports["metric"] = evaluate_both(h[..., 1] - h[..., 0], rep.image_labels,
                                          rep.text_labels, "metric")
    return {s: reports[s] for s in SCORERS if s in reports}


def summary_rows(reports: dict[str, dict[str, RetrievalReport]]) -> list[tuple[str, str, float]]:
    rows = []
    for scorer, by_task in reports.items():
        maps = [by_task[t].map for t in TASKS]
        rows += [(scorer, TASKS[t], m) for t, m in zip(TASKS, maps)]
        rows.append((scorer, "Average", float(np.mean(maps))))
    return rows


def evaluate(cfg: PipelineConfig | None, run_dir: str | os.PathLike) -> Path:
    """Score the test split and write summary, per-query AP and PR files."""
    run_dir = Path(run_dir)
    if cfg is None:
        cfg = config_mod.load(run_dir / "config.json")
    timings: dict[str, float] = {}
    with stage("eval", timings):
        reports = score_run(cfg, run_dir)
    ev = run_dir / "eval"
    ev.mkdir(exist_ok=True)
    artifacts = {}

    lines = ["scorer,task,map"] + [f"{s},{t},{_fmt(m)}" for s, t, m in summary_rows(reports)]
    (ev / "summary.csv").write_text("\n".join(lines) + "\n")
    artifacts["eval_summary"] = "eval/summary.csv"
    for scorer, by_task in reports.items():
        for task, rep in by_task.items():
            ap_lines = ["query,ap"] + [f"{q},{_fmt(a)}" for q, a in enumerate(rep.ap)]
            (ev / f"ap_{scorer}_{task}.csv").write_text("\n".join(ap_lines) + "\n")
            pr_lines = ["recall,precision"] + [
                f"{r:.2f},{_fmt(p)}" for r, p in zip(rep.pr_recall, rep.pr_precision)]
            (ev / f"pr_{scorer}_{task}.csv").write_text("\n".join(pr_lines) + "\n")
            artifacts[f"eval_ap_{scorer}_{task}"] = f"eval/ap_{scorer}_{task}.csv"
            artifacts[f"eval_pr_{scorer}_{task}"] = f"eval/pr_{scorer}_{task}.csv"
    write_manifest(run_dir, {"artifacts": artifacts, "timings": {"eval": timings}})
    return ev


def read_summary(run_dir: str | os.PathLike) -> dict[str, dict[str, float]]:
    """``scorer -> task name -> MAP`` from ``eval/summary.csv``."""
    out: dict[str, dict[str, float]] = {}
    for line in (Path(run_dir) / "eval" / "summary.csv").read_text().splitlines()[1:]:
        scorer, task, value = line.split(",")
        out.setdefault(scorer, {})[task] = float(value)
    return out


def read_pr(run_dir: str | os.PathLike, scorer: str, task: str) -> tuple[np.ndarray, np.ndarray]:
    rows = (Path(run_dir) / "eval" / f"pr_{scorer}_{task}.csv").read_text().splitlines()[1:]
    arr = np.array([[float(x) for x in r.split(",")] for r in rows])
    return arr[:, 0], arr[:, 1]


# ---------------------------------------------------------------------------
# synthetic dataset on disk


def synth(cfg: PipelineConfig, out_dir: str | os.PathLike) -> Path:
    """Write the configured synthetic dataset (features, latents, manifest)."""
    data = generate_synthetic(cfg.dataset.synthetic)
    extra = {
        "split": {"seed": cfg.dataset.synthetic.seed, "fractions": list(cfg.dataset.split_fractions)},
        "synthetic": config_mod.to_dict(cfg.dataset.synthetic),
    }
    return save_dataset(out_dir, data.dataset, latents=data.latents, extra=extra)

