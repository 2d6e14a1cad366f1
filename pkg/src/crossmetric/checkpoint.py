"""Plain-text checkpoints.

Layout::

    crossmetric-checkpoint 1
    kind pathway
    layers 8
    layer image_stack.0 1024 64 relu
    ...
    end
    W image_stack.0
    <one weight row per line, 17 significant digits>
    b image_stack.0
    <bias values on one line>
    ...

Values use ``%.17g`` so parsing restores every double bit for bit.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .nn import DenseLayer

FORMAT_TAG = "crossmetric-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _fmt(values) -> str:
    return " ".join("%.17g" % v for v in values)


def dumps(kind: str, named_layers: list[tuple[str, DenseLayer]]) -> str:
    lines = [f"{FORMAT_TAG} {FORMAT_VERSION}", f"kind {kind}", f"layers {len(named_layers)}"]
    for name, layer in named_layers:
        lines.append(f"layer {name} {layer.out_dim} {layer.in_dim} {layer.activation}")
    lines.append("end")
    for name, layer in named_layers:
        lines.append(f"W {name}")
        lines.extend(_fmt(row) for row in layer.weights)
        lines.append(f"b {name}")
        lines.append(_fmt(layer.bias))
    return "\n".join(lines) + "\n"


def loads(text: str, kind: str | None = None) -> list[tuple[str, DenseLayer]]:
    lines = text.splitlines()
    pos = 0

    def take(expect: str | None = None) -> list[str]:
        nonlocal pos
        if pos >= len(lines):
            raise CheckpointError("unexpected end of checkpoint")
        parts = lines[pos].split()
        pos += 1
        if expect is not None and (not parts or parts[0] != expect):
            raise CheckpointError(f"line {pos}: expected {expect!r}, got {lines[pos - 1]!r}")
        return parts

    tag = take(FORMAT_TAG)
    if len(tag) != 2 or tag[1] != str(FORMAT_VERSION):
        raise CheckpointError(f"unsupported checkpoint version {tag[1:]}")
    file_kind = take("kind")[1]
    if kind is not None and file_kind != kind:
        raise CheckpointError(f"checkpoint holds a {file_kind!r} network, expected {kind!r}")
    count = int(take("layers")[1])
    header = []
    for _ in range(count):
        _, name, out_dim, in_dim, act = take("layer")
        header.append((name, int(out_dim), int(in_dim), act))
    take("end")

    layers = []
    for name, out_dim, in_dim, act in header:
        if take("W")[1:] != [name]:
            raise CheckpointError(f"line {pos}: weights for {name!r} out of order")
        try:
            w = np.array([[float(v) for v in take()] for _ in range(out_dim)], dtype=np.float64)
            if take("b")[1:] != [name]:
                raise CheckpointError(f"line {pos}: bias for {name!r} out of order")
            b = np.array([float(v) for v in take()], dtype=np.float64)
        except ValueError as exc:
            raise CheckpointError(f"line {pos}: {exc}") from None
        if w.shape != (out_dim, in_dim) or b.shape != (out_dim,):
            raise CheckpointError(f"layer {name!r}: parameter count disagrees with the header")
        layers.append((name, DenseLayer(w, b, act)))
    return layers


def save(path: str | os.PathLike, kind: str, named_layers: list[tuple[str, DenseLayer]]) -> None:
    Path(path).write_text(dumps(kind, named_layers), encoding="ascii")


def load(path: str | os.PathLike, kind: str | None = None) -> list[tuple[str, DenseLayer]]:
    return loads(Path(path).read_text(encoding="ascii"), kind)
