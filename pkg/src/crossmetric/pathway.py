"""Two-pathway embedding network.

One fully connected stack per modality maps features into a shared 256-d
space.  The stacks are pretrained on cross-media pairs with the contrastive
loss, then fine-tuned with two triplet losses: one anchored on images, one
anchored on texts.  Each triplet loss sits behind its own sigmoid head that
is applied to both modalities, so the top of each stack receives one gradient
contribution from each head and the two are summed.  The heads are only loss
branches; embeddings are always the stack outputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import SplitView
from .losses import Margins, contrastive_loss, triplet_loss
from .nn import (
    DenseLayer,
    LayerGrad,
    SgdConfig,
    ShapeError,
    predict,
    sgd_step,
    stack_backward,
    stack_forward,
)

log = logging.getLogger(__name__)

HIDDEN_DIMS = (1024, 512, 256)
EMBED_DIM = HIDDEN_DIMS[-1]
MAX_RESAMPLE = 100


class SamplingError(ValueError):
    pass


class TrainingError(FloatingPointError):
    pass


class TripletSample(NamedTuple):
    anchor_modality: str
    anchor_index: int
    positive_index: int
    negative_index: int


@dataclass
class SharedRepresentation:
    image_embeddings: np.ndarray
    text_embeddings: np.ndarray
    image_labels: np.ndarray
    text_labels: np.ndarray


@dataclass
class PathwayNetwork:
    image_stack: list[DenseLayer]
    text_stack: list[DenseLayer]
    image_branch: DenseLayer  # head of the image-anchored triplet loss
    text_branch: DenseLayer  # head of the text-anchored triplet loss

    @classmethod
    def create(
        cls,
        image_dim: int,
        text_dim: int,
        rng: np.random.Generator,
        hidden_dims: tuple[int, ...] = HIDDEN_DIMS,
        activation: str = "relu",
        output_activation: str | None = None,
    ) -> "PathwayNetwork":
        """Random network; ``output_activation`` (default: ``activation``) sets the embedding layer."""
        acts = [activation] * len(hidden_dims)
        if output_activation is not None:
            acts[-1] = output_activation

        def stack(in_dim: int) -> list[DenseLayer]:
            dims = (in_dim, *hidden_dims)
            return [DenseLayer.create(dims[k], dims[k + 1], acts[k], rng)
                    for k in range(len(hidden_dims))]

        image_stack = stack(image_dim)
        text_stack = stack(text_dim)
        top = hidden_dims[-1]
        return cls(
            image_stack,
            text_stack,
            DenseLayer.create(top, top, "sigmoid", rng),
            DenseLayer.create(top, top, "sigmoid", rng),
        )

    @property
    def image_dim(self) -> int:
        return self.image_stack[0].in_dim

    @property
    def text_dim(self) -> int:
        return self.text_stack[0].in_dim

    def stack_layers(self) -> list[DenseLayer]:
        return [*self.image_stack, *self.text_stack]

    def all_layers(self) -> list[DenseLayer]:
        return [*self.image_stack, *self.text_stack, self.image_branch, self.text_branch]

    def named_layers(self) -> list[tuple[str, DenseLayer]]:
        return (
            [(f"image_stack.{k}", l) for k, l in enumerate(self.image_stack)]
            + [(f"text_stack.{k}", l) for k, l in enumerate(self.text_stack)]
            + [("image_branch", self.image_branch), ("text_branch", self.text_branch)]
        )

    @classmethod
    def from_named_layers(cls, named: list[tuple[str, DenseLayer]]) -> "PathwayNetwork":
        d = dict(named)

        def stack(prefix: str) -> list[DenseLayer]:
            keys = [k for k in d if k.startswith(prefix)]
            return [d[k] for k in sorted(keys, key=lambda k: int(k[len(prefix):]))]

        image_stack, text_stack = stack("image_stack."), stack("text_stack.")
        return cls(image_stack, text_stack, d["image_branch"], d["text_branch"])

    def copy(self) -> "PathwayNetwork":
        return PathwayNetwork(
            [l.copy() for l in self.image_stack],
            [l.copy() for l in self.text_stack],
            self.image_branch.copy(),
            self.text_branch.copy(),
        )


def forward_image(net: PathwayNetwork, batch: np.ndarray) -> np.ndarray:
    return predict(net.image_stack, batch)


def forward_text(net: PathwayNetwork, batch: np.ndarray) -> np.ndarray:
    return predict(net.text_stack, batch)


def extract_shared_representation(net: PathwayNetwork, split: SplitView) -> SharedRepresentation:
    if split.images.shape[1] != net.image_dim or split.texts.shape[1] != net.text_dim:
        raise ShapeError(
            f"network expects {net.image_dim}/{net.text_dim}-d features, "
            f"split has {split.images.shape[1]}/{split.texts.shape[1]}"
        )
    return SharedRepresentation(
        forward_image(net, split.images),
        forward_text(net, split.texts),
        split.image_labels.copy(),
        split.text_labels.copy(),
    )


# ---------------------------------------------------------------------------
# sampling


def _check_partners(image_labels: np.ndarray, text_labels: np.ndarray) -> None:
    img, txt = set(image_labels.tolist()), set(text_labels.tolist())
    for c in sorted(img ^ txt):
        side = "text" if c in img else "image"
        raise SamplingError(f"class {c} has no {side} partner")
    if len(img) < 2:
        raise SamplingError("pair sampling needs at least two classes")


def sample_label_pairs(
    image_labels: np.ndarray,
    text_labels: np.ndarray,
    n_same: int,
    n_diff: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cross-media index pairs, uniform over all same-label / different-label pairs.

    Returns ``(image_idx, text_idx, same)`` with the same-label pairs first.
    """
    _check_partners(image_labels, text_labels)
    classes = np.unique(image_labels)
    img_by_c = [np.flatnonzero(image_labels == c) for c in classes]
    txt_by_c = [np.flatnonzero(text_labels == c) for c in classes]
    weight = np.array([len(a) * len(b) for a, b in zip(img_by_c, txt_by_c)], dtype=np.float64)

    which = rng.choice(len(classes), size=n_same, p=weight / weight.sum())
    same_i = np.empty(n_same, dtype=np.int64)
    same_t = np.empty(n_same, dtype=np.int64)
    for c in range(len(classes)):
        sel = np.flatnonzero(which == c)
        same_i[sel] = img_by_c[c][rng.integers(0, len(img_by_c[c]), size=len(sel))]
        same_t[sel] = txt_by_c[c][rng.integers(0, len(txt_by_c[c]), size=len(sel))]

    # rejection sampling gives the uniform distribution over different-label pairs
    diff_i = np.empty(0, dtype=np.int64)
    diff_t = np.empty(0, dtype=np.int64)
    while len(diff_i) < n_diff:
        need = n_diff - len(diff_i)
        ci = rng.integers(0, len(image_labels), size=2 * need + 8)
        ct = rng.integers(0, len(text_labels), size=2 * need + 8)
        keep = image_labels[ci] != text_labels[ct]
        diff_i = np.concatenate([diff_i, ci[keep][:need]])
        diff_t = np.concatenate([diff_t, ct[keep][:need]])

    same = np.concatenate([np.ones(n_same, dtype=bool), np.zeros(n_diff, dtype=bool)])
    return np.concatenate([same_i, diff_i]), np.concatenate([same_t, diff_t]), same


def sample_contrastive_pairs(
    split: SplitView, rng: np.random.Generator, batch_size: int
) -> list[tuple[int, int, bool]]:
    """A 1:1 mix of same-label and different-label (image, text) pairs."""
    n_same = (batch_size + 1) // 2
    i, t, same = sample_label_pairs(split.image_labels, split.text_labels,
                                    n_same, batch_size - n_same, rng)
    return list(zip(i.tolist(), t.tolist(), same.tolist()))


def sample_triplets_online(
    image_labels: np.ndarray, text_labels: np.ndarray, rng: np.random.Generator
) -> list[TripletSample]:
    """One triplet per batch element, positives and negatives from the other modality.

    Images anchor ``(I+, T+, T-)`` triplets and texts anchor ``(T+, I+, I-)``;
    indices refer to rows of the current minibatch.
    """
    triplets: list[TripletSample] = []
    for modality, anchors, others in (
        ("image", image_labels, text_labels),
        ("text", text_labels, image_labels),
    ):
        for a, label in enumerate(anchors):
            pos = np.flatnonzero(others == label)
            neg = np.flatnonzero(others != label)
            if len(pos) == 0 or len(neg) == 0:
                raise SamplingError(
                    f"{modality} anchor {a} (label {label}) lacks a positive or negative in the batch"
                )
            triplets.append(TripletSample(
                modality, a, int(pos[rng.integers(len(pos))]), int(neg[rng.integers(len(neg))])
            ))
    return triplets


def _triplet_ready(labels: np.ndarray) -> bool:
    # docs are sampled as pairs, so every anchor has its own partner as a positive;
    # a negative exists whenever the batch spans two classes
    return len(np.unique(labels)) >= 2


def _sample_doc_batch(split: SplitView, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    for _ in range(MAX_RESAMPLE):
        idx = rng.integers(0, len(split), size=batch_size)
        if _triplet_ready(split.image_labels[idx]) and _triplet_ready(split.text_labels[idx]):
            return idx
    raise SamplingError(f"no usable minibatch after {MAX_RESAMPLE} attempts")


# ---------------------------------------------------------------------------
# objectives


def contrastive_objective(
    net: PathwayNetwork,
    images: np.ndarray,
    texts: np.ndarray,
    same: np.ndarray,
    lam: float,
) -> tuple[float, list[LayerGrad]]:
    """Mean contrastive loss over a pair batch and the gradients of both stacks."""
    acts_i = stack_forward(net.image_stack, images)
    acts_t = stack_forward(net.text_stack, texts)
    loss = contrastive_loss(acts_i[-1], acts_t[-1], same, lam)
    gi, _ = stack_backward(net.image_stack, acts_i, loss.grads[0])
    gt, _ = stack_backward(net.text_stack, acts_t, loss.grads[1])
    return loss.value, gi + gt


def _triplet_arrays(triplets: list[TripletSample]) -> dict[str, tuple[np.ndarray, ...]]:
    out = {}
    for modality in ("image", "text"):
        rows = [t for t in triplets if t.anchor_modality == modality]
        cols = list(zip(*rows))[1:]
        out[modality] = tuple(np.array(col, dtype=np.int64) for col in cols)
    return out


@dataclass
class TripletGrads:
    value: float
    image_loss: float
    text_loss: float
    grads: list[LayerGrad]  # image stack, text stack, image branch, text branch
    image_top: np.ndarray  # d objective / d image stack output
    text_top: np.ndarray


def double_triplet_objective(
    net: PathwayNetwork,
    images: np.ndarray,
    texts: np.ndarray,
    triplets: list[TripletSample],
    margins: Margins,
) -> TripletGrads:
    """Image-anchored plus text-anchored triplet loss, each behind its own sigmoid head."""
    acts_i = stack_forward(net.image_stack, images)
    acts_t = stack_forward(net.text_stack, texts)
    e_i, e_t = acts_i[-1], acts_t[-1]
    idx = _triplet_arrays(triplets)

    top_i = np.zeros_like(e_i)
    top_t = np.zeros_like(e_t)
    branch_grads = []
    values = []
    # image head scores (I+, T+, T-) with margin alpha; text head (T+, I+, I-) with beta
    for head, (anchor_emb, other_emb, top_anchor, top_other), key, margin in (
        (net.image_branch, (e_i, e_t, top_i, top_t), "image", margins.alpha),
        (net.text_branch, (e_t, e_i, top_t, top_i), "text", margins.beta),
    ):
        a_idx, p_idx, n_idx = idx[key]
        both = np.vstack([anchor_emb, other_emb])
        acts = stack_forward([head], both)
        z = acts[-1]
        z_anchor, z_other = z[: len(anchor_emb)], z[len(anchor_emb):]
        loss = triplet_loss(z_anchor[a_idx], z_other[p_idx], z_other[n_idx], margin)
        values.append(loss.value)
        gz_anchor = np.zeros_like(z_anchor)
        gz_other = np.zeros_like(z_other)
        np.add.at(gz_anchor, a_idx, loss.grads[0])
        np.add.at(gz_other, p_idx, loss.grads[1])
        np.add.at(gz_other, n_idx, loss.grads[2])
        (g_head,), g_both = stack_backward([head], acts, np.vstack([gz_anchor, gz_other]))
        branch_grads.append(g_head)
        # each stack top accumulates one contribution per head
        top_anchor += g_both[: len(anchor_emb)]
        top_other += g_both[len(anchor_emb):]

    gi, _ = stack_backward(net.image_stack, acts_i, top_i)
    gt, _ = stack_backward(net.text_stack, acts_t, top_t)
    return TripletGrads(values[0] + values[1], values[0], values[1],
                        gi + gt + branch_grads, top_i, top_t)


# ---------------------------------------------------------------------------
# training loops


def _abort_if_bad(stage: str, it: int, loss: float) -> None:
    if not np.isfinite(loss):
        raise TrainingError(f"{stage}: non-finite loss {loss} at iteration {it}")


def pretrain(
    net: PathwayNetwork,
    train: SplitView,
    config: SgdConfig,
    margins: Margins,
    rng: np.random.Generator,
) -> list[float]:
    """Contrastive pretraining of both stacks; returns the per-iteration loss."""
    history = []
    layers = net.stack_layers()
    n_same = (config.batch_size + 1) // 2
    for it in range(config.max_iterations):
        i, t, same = sample_label_pairs(train.image_labels, train.text_labels,
                                        n_same, config.batch_size - n_same, rng)
        loss, grads = contrastive_objective(net, train.images[i], train.texts[t], same, margins.lam)
        _abort_if_bad("pretrain", it, loss)
        history.append(loss)
        sgd_step(layers, grads, config)
    return history


def finetune(
    net: PathwayNetwork,
    train: SplitView,
    config: SgdConfig,
    margins: Margins,
    rng: np.random.Generator,
) -> list[float]:
    """Double-triplet fine-tuning of stacks and heads; returns the per-iteration loss."""
    history = []
    layers = net.all_layers()
    for it in range(config.max_iterations):
        idx = _sample_doc_batch(train, config.batch_size, rng)
        triplets = sample_triplets_online(train.image_labels[idx], train.text_labels[idx], rng)
        out = double_triplet_objective(net, train.images[idx], train.texts[idx], triplets, margins)
        _abort_if_bad("finetune", it, out.value)
        history.append(out.value)
        sgd_step(layers, out.grads, config)
    return history


def margin_satisfaction(
    net: PathwayNetwork,
    split: SplitView,
    margins: Margins,
    rng: np.random.Generator,
    count: int = 2000,
) -> float:
    """Fraction of random cross-media triplets whose distance gap meets the margin.

    Gaps ``|a-n|^2 - |a-p|^2`` are measured where the triplet losses act: image
    anchors through the image head (margin alpha), text anchors through the
    text head (margin beta).  Half of ``count`` triplets go to each anchor type.
    """
    e_i = forward_image(net, split.images)
    e_t = forward_text(net, split.texts)
    hits = 0
    half = count // 2
    for head, anchors, a_lab, others, o_lab, margin in (
        (net.image_branch, e_i, split.image_labels, e_t, split.text_labels, margins.alpha),
        (net.text_branch, e_t, split.text_labels, e_i, split.image_labels, margins.beta),
    ):
        za, zo = predict([head], anchors), predict([head], others)
        a = rng.integers(0, len(anchors), size=half)
        p = np.empty(half, dtype=np.int64)
        n = np.empty(half, dtype=np.int64)
        for k, ai in enumerate(a):
            pos = np.flatnonzero(o_lab == a_lab[ai])
            neg = np.flatnonzero(o_lab != a_lab[ai])
            p[k] = pos[rng.integers(len(pos))]
            n[k] = neg[rng.integers(len(neg))]
        dp = ((za[a] - zo[p]) ** 2).sum(axis=1)
        dn = ((za[a] - zo[n]) ** 2).sum(axis=1)
        hits += int((dn - dp >= margin).sum())
    return hits / (2 * half)
