"""Flat-parameter plumbing shared by the trajectory predictor and the MDN.

All trainable weights live in one flat float64 vector so that the continual
trainer can treat gradients as plain vectors. A Layout maps named segments
(weight matrices, bias vectors) into that flat vector.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "trajcl-params"
CHECKPOINT_VERSION = 1


class Layout:
    """Named segments inside a flat parameter vector."""

    def __init__(self, segments):
        # segments: iterable of (name, shape)
        self.segments = [(str(name), tuple(int(d) for d in shape)) for name, shape in segments]
        self._index = {}
        offset = 0
        for name, shape in self.segments:
            if name in self._index:
                raise ValueError(f"duplicate segment name {name!r}")
            size = int(np.prod(shape)) if shape else 1
            self._index[name] = (offset, offset + size, shape)
            offset += size
        self.size = offset

    def view(self, values: np.ndarray, name: str) -> np.ndarray:
        """Writable view of one segment, reshaped to its declared shape."""
        start, end, shape = self._index[name]
        return values[start:end].reshape(shape)

    def shape_of(self, name: str) -> tuple:
        return self._index[name][2]

    def __eq__(self, other) -> bool:
        return isinstance(other, Layout) and self.segments == other.segments

    def __repr__(self) -> str:
        return f"Layout({self.segments!r})"


@dataclass
class ParameterVector:
    """All trainable parameters of one model as a flat vector."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise ValueError(
                f"parameter vector has length {self.values.shape} "
                f"but layout requires ({self.layout.size},)"
            )

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    def view(self, name: str) -> np.ndarray:
        return self.layout.view(self.values, name)


@dataclass
class GradientVector:
    """Flat gradient aligned with a ParameterVector layout."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise ValueError("gradient length does not match layout")

    def view(self, name: str) -> np.ndarray:
        return self.layout.view(self.values, name)


def init_params(layout: Layout, seed: int) -> ParameterVector:
    """Uniform [-a, a] init with a = sqrt(6/(fan_in+fan_out)) for matrices, zero biases."""
    rng = np.random.default_rng(seed)
    values = np.zeros(layout.size, dtype=np.float64)
    for name, shape in layout.segments:
        if len(shape) == 2:
            fan_in, fan_out = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            layout.view(values, name)[...] = rng.uniform(-a, a, size=shape)
        # 1-d segments (biases) stay zero
    return ParameterVector(values, layout)


def save_params(params: ParameterVector, path, meta: dict | None = None) -> None:
    """Write a lossless JSON checkpoint (floats round-trip exactly via repr)."""
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layout": [[name, list(shape)] for name, shape in params.layout.segments],
        "values": params.values.tolist(),
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(blob, sort_keys=True))


def load_params(path) -> tuple[ParameterVector, dict]:
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a parameter checkpoint: {path}")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    layout = Layout([(name, tuple(shape)) for name, shape in blob["layout"]])
    values = np.asarray(blob["values"], dtype=np.float64)
    return ParameterVector(values, layout), blob.get("meta", {})


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def affine_backward(x, w, d_out, dw, db):
    """Accumulate gradients of y = x @ w + b into dw/db; return dx."""
    dw += x.T @ d_out
    db += d_out.sum(axis=0)
    return d_out @ w.T


def logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = m.squeeze(axis) + np.log(np.sum(np.exp(a - m), axis=axis))
    return out
