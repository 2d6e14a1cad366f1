"""Learned cross-media similarity.

A small ReLU network reads the concatenation ``[image || text]`` of two
shared-representation embeddings and emits two logits ``(h0, h1)``; the
softmax probability of ``h1`` is the similarity.  Inputs are always ordered
image first, so a single network serves both retrieval directions.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .losses import softmax_cross_entropy, softmax_pair
from .nn import (
    DenseLayer,
    SgdConfig,
    ShapeError,
    predict,
    sgd_step,
    stack_backward,
    stack_forward,
)
from .pathway import EMBED_DIM, SharedRepresentation, TrainingError, sample_label_pairs

PAPER_PAIR_COUNT = 300_000


class PairSample(NamedTuple):
    image_index: int
    text_index: int
    label: int


@dataclass
class PairSet:
    """Column-oriented pair samples; same-label pairs carry label 1."""

    image_index: np.ndarray
    text_index: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return len(self.label)

    def __getitem__(self, k: int) -> PairSample:
        return PairSample(int(self.image_index[k]), int(self.text_index[k]), int(self.label[k]))


@dataclass
class MetricNetwork:
    layers: list[DenseLayer]

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        embed_dim: int = EMBED_DIM,
        hidden_dim: int | None = None,
        depth: int = 3,
    ) -> "MetricNetwork":
        in_dim = 2 * embed_dim
        hidden_dim = in_dim if hidden_dim is None else hidden_dim
        dims = [in_dim] + [hidden_dim] * depth
        layers = [DenseLayer.create(dims[k], dims[k + 1], "relu", rng) for k in range(depth)]
        layers.append(DenseLayer.create(hidden_dim, 2, "identity", rng))
        return cls(layers)

    @property
    def embed_dim(self) -> int:
        return self.layers[0].in_dim // 2

    def named_layers(self) -> list[tuple[str, DenseLayer]]:
        return [(f"metric.{k}", layer) for k, layer in enumerate(self.layers)]

    @classmethod
    def from_named_layers(cls, named: list[tuple[str, DenseLayer]]) -> "MetricNetwork":
        named = sorted(named, key=lambda kv: int(kv[0].split(".")[1]))
        return cls([layer for _, layer in named])

    def copy(self) -> "MetricNetwork":
        return MetricNetwork([layer.copy() for layer in self.layers])


def default_pair_count(train_docs: int) -> int:
    """Paper-scale 300K pairs, capped at ``30 * n^2`` for tiny training sets."""
    return int(min(PAPER_PAIR_COUNT, 30 * train_docs * train_docs))


def sample_pairs(rep: SharedRepresentation, count: int, rng: np.random.Generator) -> PairSet:
    """``ceil(count/2)`` same-label and ``floor(count/2)`` different-label pairs, shuffled."""
    n_pos = (count + 1) // 2
    i, t, same = sample_label_pairs(rep.image_labels, rep.text_labels, n_pos, count - n_pos, rng)
    order = rng.permutation(count)
    return PairSet(i[order], t[order], same[order].astype(np.int64))


def _pair_inputs(rep: SharedRepresentation, pairs: PairSet, idx: np.ndarray) -> np.ndarray:
    return np.hstack([rep.image_embeddings[pairs.image_index[idx]],
                      rep.text_embeddings[pairs.text_index[idx]]])


def metric_objective(net: MetricNetwork, x: np.ndarray, labels: np.ndarray):
    acts = stack_forward(net.layers, x)
    h = acts[-1]
    loss = softmax_cross_entropy(h[:, 0], h[:, 1], labels)
    grads, _ = stack_backward(net.layers, acts, np.column_stack(loss.grads))
    return loss.value, grads


def train_metric(
    net: MetricNetwork,
    rep: SharedRepresentation,
    pairs: PairSet,
    config: SgdConfig,
    rng: np.random.Generator,
) -> list[float]:
    """Minibatch SGD on the pair cross-entropy, sweeping reshuffled epochs of ``pairs``."""
    if rep.image_embeddings.shape[1] != net.embed_dim or rep.text_embeddings.shape[1] != net.embed_dim:
        raise ShapeError(f"metric network expects {net.embed_dim}-d embeddings")
    history = []
    order = rng.permutation(len(pairs))
    pos = 0
    for it in range(config.max_iterations):
        if pos + config.batch_size > len(order):
            order = rng.permutation(len(pairs))
            pos = 0
        idx = order[pos : pos + config.batch_size]
        pos += config.batch_size
        loss, grads = metric_objective(net, _pair_inputs(rep, pairs, idx), pairs.label[idx])
        if not np.isfinite(loss):
            raise TrainingError(f"metric: non-finite loss {loss} at iteration {it}")
        history.append(loss)
        sgd_step(net.layers, grads, config)
    return history


def pair_logits(net: MetricNetwork, images: np.ndarray, texts: np.ndarray) -> np.ndarray:
    """Rows of ``(h0, h1)`` for aligned rows of image and text embeddings."""
    if images.shape != texts.shape or images.shape[-1] != net.embed_dim:
        raise ShapeError(
            f"need matching (n, {net.embed_dim}) image/text embeddings, "
            f"got {images.shape} and {texts.shape}"
        )
    return predict(net.layers, np.hstack([images, texts]))


def score(net: MetricNetwork, image_embedding: np.ndarray, text_embedding: np.ndarray) -> float:
    h = pair_logits(net, np.atleast_2d(image_embedding), np.atleast_2d(text_embedding))
    return softmax_pair(h[0, 0], h[0, 1])


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CROSSMETRIC_THREADS", "1")))
    except ValueError:
        return 1


def logit_grid(
    net: MetricNetwork, image_embs: np.ndarray, text_embs: np.ndarray, threads: int | None = None
) -> np.ndarray:
    """``(h0, h1)`` for every (image, text) pair: shape ``(n_images, n_texts, 2)``.

    Each image row is computed on its own in fixed-size blocks, so the values
    match :func:`score` exactly and do not depend on the thread count.
    """
    threads = _threads() if threads is None else threads
    out = np.empty((len(image_embs), len(text_embs), 2))

    def row(r: int) -> None:
        out[r] = pair_logits(net, np.broadcast_to(image_embs[r], text_embs.shape), text_embs)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(row, range(len(image_embs))))
    else:
        for r in range(len(image_embs)):
            row(r)
    return out


def score_matrix(
    net: MetricNetwork,
    queries: np.ndarray,
    query_modality: str,
    gallery: np.ndarray,
    gallery_modality: str,
    threads: int | None = None,
) -> np.ndarray:
    """Similarity of every query against every gallery item, queries along rows."""
    images, texts = _image_first(queries, query_modality, gallery, gallery_modality)
    h = logit_grid(net, images, texts, threads)
    s = softmax_pair(h[..., 0], h[..., 1])
    return s if query_modality == "image" else s.T


def margin_matrix(
    net: MetricNetwork,
    queries: np.ndarray,
    query_modality: str,
    gallery: np.ndarray,
    gallery_modality: str,
    threads: int | None = None,
) -> np.ndarray:
    """``h1 - h0`` per (query, gallery) pair.

    Orders pairs exactly like :func:`score_matrix` but without the saturation
    of the probability near 0 and 1, so it is what retrieval ranks on.
    """
    images, texts = _image_first(queries, query_modality, gallery, gallery_modality)
    h = logit_grid(net, images, texts, threads)
    d = h[..., 1] - h[..., 0]
    return d if query_modality == "image" else d.T


def _image_first(queries, query_modality, gallery, gallery_modality):
    if {query_modality, gallery_modality} != {"image", "text"}:
        raise ValueError("queries and gallery must come from different modalities")
    return (queries, gallery) if query_modality == "image" else (gallery, queries)
