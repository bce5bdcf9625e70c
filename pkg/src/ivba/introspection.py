"""Introspection model: per-cell context descriptors -> feature cost in (0, 1).

A logistic-squashed linear model trained by full-batch gradient descent on
the masked mean squared error between its predictions and GP costmap labels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, TrainingDataError
from .labelgen import CostMap


@dataclass
class ContextGrid:
    """Descriptor per costmap cell, ``descriptors[r, c, :]``."""

    frame_id: int
    descriptors: np.ndarray  # (rows, cols, D)
    cell_size: int
    width: int
    height: int

    def __post_init__(self) -> None:
        self.descriptors = np.asarray(self.descriptors, dtype=float)
        if self.descriptors.ndim != 3:
            raise ValueError("descriptors must be a (rows, cols, D) array")
        if not np.all(np.isfinite(self.descriptors)):
            raise ValueError("descriptors must be finite")

    @property
    def dim(self) -> int:
        return self.descriptors.shape[2]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class IntrospectionModel:
    weights: np.ndarray
    bias: float = 0.0
    squashing: str = "logistic"
    training: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.squashing != "logistic":
            raise ConfigurationError(f"unsupported squashing {self.squashing!r}")

    @classmethod
    def zeros(cls, dim: int) -> IntrospectionModel:
        return cls(np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def predict(self, descriptors: np.ndarray) -> np.ndarray:
        d = np.asarray(descriptors, dtype=float)
        if d.shape[-1] != self.dim:
            raise ConfigurationError(f"descriptor dimension {d.shape[-1]} != model dimension {self.dim}")
        return _sigmoid(d @ self.weights + self.bias)

    def to_json(self) -> str:
        doc = {
            "format": "ivba-introspection-v1",
            "dim": self.dim,
            "squashing": self.squashing,
            "weights": [float(w) for w in self.weights],
            "bias": float(self.bias),
            "training": self.training,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> IntrospectionModel:
        doc = json.loads(text)
        if doc.get("format") != "ivba-introspection-v1":
            raise ConfigurationError("not an introspection model file")
        model = cls(np.array(doc["weights"], dtype=float), float(doc["bias"]), doc["squashing"], doc.get("training", {}))
        if model.dim != doc["dim"]:
            raise ConfigurationError("weight vector length does not match declared dim")
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> IntrospectionModel:
        return cls.from_json(Path(path).read_text())


@dataclass
class TrainConfig:
    epochs: int = 2000
    learning_rate: float = 0.1
    l2: float = 0.0
    seed: int = 0
    init_scale: float = 0.01


def stack_dataset(dataset: Sequence[tuple[ContextGrid, CostMap]]) -> tuple[np.ndarray, np.ndarray]:
    """Masked cells of all pairs as ``(X (n, D), y (n,))``."""
    Xs, ys = [], []
    dims = {ctx.dim for ctx, _ in dataset}
    if len(dims) > 1:
        raise ConfigurationError(f"inconsistent descriptor dimensions {sorted(dims)}")
    for ctx, cm in dataset:
        if ctx.descriptors.shape[:2] != cm.values.shape:
            raise ConfigurationError(
                f"frame {ctx.frame_id}: context grid {ctx.descriptors.shape[:2]} "
                f"does not match costmap grid {cm.values.shape}"
            )
        m = cm.mask
        Xs.append(ctx.descriptors[m])
        ys.append(cm.values[m])
    D = dims.pop() if dims else 0
    X = np.concatenate(Xs) if Xs else np.zeros((0, D))
    y = np.concatenate(ys) if ys else np.zeros(0)
    return X, y


def masked_mse(model: IntrospectionModel, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((model.predict(X) - y) ** 2))


def fit(X: np.ndarray, y: np.ndarray, config: TrainConfig | None = None,
        model_init: IntrospectionModel | None = None) -> IntrospectionModel:
    """Full-batch gradient descent on the mean squared error."""
    config = config or TrainConfig()
    n, D = X.shape
    if n == 0:
        raise TrainingDataError("no masked cells to train on")
    if model_init is None:
        rng = np.random.default_rng(config.seed)
        w = rng.normal(0.0, config.init_scale, D) if config.init_scale > 0 else np.zeros(D)
        b = 0.0
    else:
        if model_init.dim != D:
            raise ConfigurationError(f"initial model dimension {model_init.dim} != data dimension {D}")
        w, b = model_init.weights.copy(), float(model_init.bias)
    curve = []
    lr = config.learning_rate
    for _ in range(config.epochs):
        p = _sigmoid(X @ w + b)
        r = p - y
        curve.append(float(np.mean(r * r)))
        gz = (2.0 / n) * r * p * (1.0 - p)
        w = w - lr * (X.T @ gz + 2.0 * config.l2 * w)
        b = b - lr * float(np.sum(gz))
    p = _sigmoid(X @ w + b)
    final = float(np.mean((p - y) ** 2))
    meta = {
        "epochs": config.epochs,
        "learning_rate": config.learning_rate,
        "l2": config.l2,
        "seed": config.seed,
        "n_cells": int(n),
        "final_loss": final,
        "loss_curve": curve,
    }
    return IntrospectionModel(w, b, "logistic", meta)


def train(dataset: Sequence[tuple[ContextGrid, CostMap]], config: TrainConfig | None = None,
          model_init: IntrospectionModel | None = None) -> IntrospectionModel:
    if not dataset:
        raise TrainingDataError("empty training set")
    X, y = stack_dataset(dataset)
    if X.shape[0] == 0:
        raise TrainingDataError("every costmap mask is empty")
    return fit(X, y, config, model_init)


def predict_costmap(model: IntrospectionModel, context: ContextGrid) -> CostMap:
    vals = model.predict(context.descriptors)
    shape = vals.shape
    return CostMap(
        width=context.width,
        height=context.height,
        cell_size=context.cell_size,
        values=vals,
        uncertainty=np.zeros(shape),
        mask=np.ones(shape, dtype=bool),
        mask_threshold=math.inf,
        frame_id=context.frame_id,
    )
