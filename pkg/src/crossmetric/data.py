"""Cross-media datasets: feature files, document-level splits, preprocessing,
and the synthetic generator used for desk-scale experiments.

A dataset holds paired documents: row ``r`` of the image matrix and row ``r``
of the text matrix are the two halves of document ``r`` (its pair id).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .nn import (
    DenseLayer,
    LayerGrad,
    SgdConfig,
    ShapeError,
    dense_backward,
    dense_forward,
    make_rng,
    predict,
    sgd_step,
)

log = logging.getLogger(__name__)

MODALITIES = ("image", "text")
SPLITS = ("train", "validation", "test")
MANIFEST_FORMAT = "crossmetric-dataset/1"


class ParseError(ValueError):
    pass


class SplitError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class LabeledSample:
    features: np.ndarray
    label: int
    modality: str
    pair_id: int


@dataclass
class FeatureSet:
    """All samples of one modality as a feature matrix plus labels."""

    modality: str
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.features[i], int(self.labels[i]), self.modality, i)

    def __iter__(self) -> Iterator[LabeledSample]:
        return (self[i] for i in range(len(self)))

    @property
    def dim(self) -> int:
        return self.features.shape[1]


# ---------------------------------------------------------------------------
# feature files: "#modality,dim" header, then "label,v1,...,vd" per sample


def save_features(path: str | os.PathLike, fs: FeatureSet) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(f"#{fs.modality},{fs.dim}\n")
        for label, row in zip(fs.labels, fs.features):
            fh.write(str(int(label)) + "," + ",".join("%.17g" % v for v in row) + "\n")


def load_features(
    path: str | os.PathLike,
    modality: str | None = None,
    expected_dim: int | None = None,
    num_classes: int | None = None,
) -> FeatureSet:
    """Parse a feature file.  Errors carry the 1-based line number."""
    path = Path(path)
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ParseError(f"{path}:1: missing '#modality,dim' header")
    try:
        file_modality, dim_text = lines[0][1:].split(",")
        dim = int(dim_text)
    except ValueError:
        raise ParseError(f"{path}:1: malformed header {lines[0]!r}") from None
    if modality is not None and file_modality != modality:
        raise ParseError(f"{path}:1: file holds {file_modality!r} features, expected {modality!r}")
    if expected_dim is not None and dim != expected_dim:
        raise ParseError(f"{path}:1: declared dimension {dim}, expected {expected_dim}")

    labels, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != dim + 1:
            raise ParseError(f"{path}:{lineno}: expected {dim} values, found {len(fields) - 1}")
        try:
            label = int(fields[0])
            values = [float(x) for x in fields[1:]]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise ParseError(f"{path}:{lineno}: unknown label {label}")
        if not all(np.isfinite(values)):
            raise ParseError(f"{path}:{lineno}: non-finite value")
        labels.append(label)
        rows.append(values)
    features = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    return FeatureSet(file_modality, features, np.array(labels, dtype=np.int64))


# ---------------------------------------------------------------------------
# datasets and splits


@dataclass
class SplitView:
    """The rows of one split, both modalities."""

    images: np.ndarray
    texts: np.ndarray
    image_labels: np.ndarray
    text_labels: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class CrossMediaDataset:
    images: FeatureSet
    texts: FeatureSet
    class_names: list[str]
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if len(self.images) != len(self.texts):
            raise ShapeError(
                f"{len(self.images)} images but {len(self.texts)} texts; every document needs both"
            )

    @property
    def num_docs(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> SplitView:
        idx = self.splits[name]
        return SplitView(
            self.images.features[idx],
            self.texts.features[idx],
            self.images.labels[idx],
            self.texts.labels[idx],
        )

    def with_features(self, images: np.ndarray, texts: np.ndarray) -> "CrossMediaDataset":
        return CrossMediaDataset(
            FeatureSet("image", images, self.images.labels),
            FeatureSet("text", texts, self.texts.labels),
            list(self.class_names),
            dict(self.splits),
        )


def split_dataset(
    dataset: CrossMediaDataset,
    rng: np.random.Generator,
    fractions: Sequence[float] | None = None,
    counts: Sequence[int] | None = None,
) -> CrossMediaDataset:
    """Randomly assign whole documents to train/validation/test.

    Give either ``counts`` (summing to the document count) or ``fractions``;
    with fractions the test split takes the remainder.
    """
    n = dataset.num_docs
    if counts is None:
        if fractions is None:
            raise ValueError("give fractions or counts")
        if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
            raise ValueError("fractions must be three values summing to 1")
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        counts = (n_train, n_val, n - n_train - n_val)
    if len(counts) != 3 or sum(counts) != n or min(counts) < 0:
        raise SplitError(f"split counts {tuple(counts)} do not sum to {n} documents")

    order = rng.permutation(n)
    bounds = np.cumsum([0, *counts])
    splits = {name: order[bounds[i] : bounds[i + 1]] for i, name in enumerate(SPLITS)}
    _check_train_coverage(dataset, splits["train"])
    return CrossMediaDataset(dataset.images, dataset.texts, list(dataset.class_names), splits)


def _check_train_coverage(dataset: CrossMediaDataset, train: np.ndarray) -> None:
    for fs in (dataset.images, dataset.texts):
        missing = set(range(dataset.num_classes)) - set(fs.labels[train].tolist())
        if missing:
            names = ", ".join(dataset.class_names[c] for c in sorted(missing))
            raise SplitError(f"class(es) {names} have no {fs.modality} sample in the train split")


# ---------------------------------------------------------------------------
# preprocessing


@dataclass
class Standardizer:
    image_mean: np.ndarray
    image_std: np.ndarray
    text_mean: np.ndarray
    text_std: np.ndarray

    VARIANCE_FLOOR = 1e-8

    @classmethod
    def fit(cls, train: SplitView) -> "Standardizer":
        def stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            var = np.maximum(x.var(axis=0), cls.VARIANCE_FLOOR)
            return x.mean(axis=0), np.sqrt(var)

        im, isd = stats(train.images)
        tm, tsd = stats(train.texts)
        return cls(im, isd, tm, tsd)

    def apply(self, dataset: CrossMediaDataset) -> CrossMediaDataset:
        return dataset.with_features(
            (dataset.images.features - self.image_mean) / self.image_std,
            (dataset.texts.features - self.text_mean) / self.text_std,
        )

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(**{k: np.array(d[k], dtype=np.float64) for k in
                      ("image_mean", "image_std", "text_mean", "text_std")})


def standardize(dataset: CrossMediaDataset) -> tuple[CrossMediaDataset, Standardizer]:
    """Zero-mean, unit-variance features using train-split statistics only."""
    if len(dataset.splits.get("train", ())) == 0:
        raise SplitError("standardization needs a non-empty train split")
    stats = Standardizer.fit(dataset.split("train"))
    return stats.apply(dataset), stats


@dataclass
class RefineConfig:
    hidden_dim: int = 1024
    learning_rate: float = 0.01
    weight_decay: float = 0.004
    batch_size: int = 64
    max_iterations: int = 2000


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


class IntraModalityRefiner:
    """One-hidden-layer softmax classifier whose hidden layer becomes the feature."""

    def __init__(self, in_dim: int, num_classes: int, hidden_dim: int, rng: np.random.Generator):
        self.hidden = DenseLayer.create(in_dim, hidden_dim, "relu", rng)
        self.head = DenseLayer.create(hidden_dim, num_classes, "identity", rng)
        self.history: list[float] = []

    def fit(self, x: np.ndarray, labels: np.ndarray, config: RefineConfig, rng: np.random.Generator):
        sgd = SgdConfig(config.learning_rate, config.weight_decay, config.batch_size,
                        config.max_iterations)
        for it in range(config.max_iterations):
            idx = rng.integers(0, len(x), size=config.batch_size)
            xb = x[idx]
            h = dense_forward(self.hidden, xb)
            logits = dense_forward(self.head, h)
            loss, g = _softmax_xent(logits, labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"refiner diverged at iteration {it}: loss={loss}")
            self.history.append(loss)
            gw2, gb2, gh = dense_backward(self.head, h, g, output=logits)
            gw1, gb1, _ = dense_backward(self.hidden, xb, gh, output=h)
            sgd_step([self.hidden, self.head], [LayerGrad(gw1, gb1), LayerGrad(gw2, gb2)], sgd)
        return self

    def transform(self, x: np.ndarray) -> np.ndarray:
        return predict([self.hidden], x)

    def accuracy(self, x: np.ndarray, labels: np.ndarray) -> float:
        return float((predict([self.hidden, self.head], x).argmax(axis=1) == labels).mean())


def intra_modality_refine(
    dataset: CrossMediaDataset,
    modality: str,
    config: RefineConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, IntraModalityRefiner]:
    """Train a refiner on the train split of one modality; return refined features for every row."""
    fs = dataset.images if modality == "image" else dataset.texts
    train = dataset.splits["train"]
    refiner = IntraModalityRefiner(fs.dim, dataset.num_classes, config.hidden_dim, rng)
    refiner.fit(fs.features[train], fs.labels[train], config, rng)
    return refiner.transform(fs.features), refiner


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticConfig:
    classes: int = 10
    docs_per_class: int = 200
    latent_dim: int = 16
    image_dim: int = 64
    text_dim: int = 64
    cluster_spread: float = 1.0
    modality_noise: float = 0.5
    tie_maps: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.classes < 2:
            raise ValueError("synthetic data needs at least 2 classes")
        for name in ("docs_per_class", "latent_dim", "image_dim", "text_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.cluster_spread > 0 or self.modality_noise < 0:
            raise ValueError("cluster_spread must be positive and modality_noise non-negative")
        if self.tie_maps and self.image_dim != self.text_dim:
            raise ValueError("tie_maps requires image_dim == text_dim")


@dataclass
class SyntheticData:
    dataset: CrossMediaDataset
    latents: np.ndarray
    centers: np.ndarray


def generate_synthetic(config: SyntheticConfig) -> SyntheticData:
    """Gaussian class clusters in a latent space, seen through two noisy linear maps.

    Class centers are standard normal; each document's latent is its class
    center plus ``cluster_spread``-scaled Gaussian noise.  Each modality is a
    fixed random linear map of the latent (entries with variance
    ``1/latent_dim``) plus independent ``modality_noise``-scaled noise.
    Document order is shuffled.
    """
    rng = make_rng(config.seed)
    k, dz = config.classes, config.latent_dim
    n = k * config.docs_per_class
    centers = rng.standard_normal((k, dz))
    labels = rng.permutation(np.repeat(np.arange(k), config.docs_per_class))
    latents = centers[labels] + config.cluster_spread * rng.standard_normal((n, dz))

    scale = 1.0 / np.sqrt(dz)
    map_img = rng.standard_normal((dz, config.image_dim)) * scale
    map_txt = map_img if config.tie_maps else rng.standard_normal((dz, config.text_dim)) * scale
    noise_img = rng.standard_normal((n, config.image_dim))
    noise_txt = rng.standard_normal((n, config.text_dim))
    images = latents @ map_img + config.modality_noise * noise_img
    texts = latents @ map_txt + config.modality_noise * noise_txt

    ds = CrossMediaDataset(
        FeatureSet("image", images, labels.copy()),
        FeatureSet("text", texts, labels.copy()),
        [f"class{c}" for c in range(k)],
    )
    return SyntheticData(ds, latents, centers)


# ---------------------------------------------------------------------------
# manifests


def save_dataset(
    out_dir: str | os.PathLike,
    dataset: CrossMediaDataset,
    latents: np.ndarray | None = None,
    extra: dict | None = None,
) -> Path:
    """Write feature files and a JSON manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_features(out / "images.csv", dataset.images)
    save_features(out / "texts.csv", dataset.texts)
    manifest = {
        "format": MANIFEST_FORMAT,
        "image": "images.csv",
        "text": "texts.csv",
        "classes": list(dataset.class_names),
    }
    if latents is not None:
        save_features(out / "latents.csv", FeatureSet("latent", latents, dataset.images.labels))
        manifest["latent"] = "latents.csv"
    if dataset.splits:
        manifest["splits"] = {k: [int(i) for i in v] for k, v in dataset.splits.items()}
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(
    manifest_path: str | os.PathLike, rng: np.random.Generator | None = None
) -> CrossMediaDataset:
    """Load a manifest.

    Splits come from an explicit ``splits`` mapping, or are drawn from
    ``split: {"seed": s, "counts": [...]}`` / ``{"seed": s, "fractions": [...]}``.
    """
    manifest_path = Path(manifest_path)
    m = json.loads(manifest_path.read_text())
    if m.get("format") != MANIFEST_FORMAT:
        raise ParseError(f"{manifest_path}: unsupported manifest format {m.get('format')!r}")
    base = manifest_path.parent
    classes = list(m["classes"])
    images = load_features(base / m["image"], "image", m.get("image_dim"), len(classes))
    texts = load_features(base / m["text"], "text", m.get("text_dim"), len(classes))
    ds = CrossMediaDataset(images, texts, classes)
    if "splits" in m:
        splits = {k: np.array(m["splits"][k], dtype=np.int64) for k in SPLITS}
        allidx = np.concatenate(list(splits.values()))
        if len(allidx) != ds.num_docs or len(np.unique(allidx)) != ds.num_docs:
            raise SplitError(f"{manifest_path}: splits are not a partition of the documents")
        _check_train_coverage(ds, splits["train"])
        ds.splits = splits
    elif "split" in m:
        spec = m["split"]
        gen = make_rng(spec["seed"]) if "seed" in spec else rng
        if gen is None:
            raise SplitError("split has no seed and no generator was supplied")
        ds = split_dataset(ds, gen, fractions=spec.get("fractions"), counts=spec.get("counts"))
    return ds
