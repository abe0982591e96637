"""Mini-batch Adam training with early stopping on validation MSE."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..mesh import Graph
from .model import GUNetModel

log = logging.getLogger(__name__)

NORMALIZATION_MODES = ("raw", "perSampleMaxAbs")


class TrainingError(RuntimeError):
    """Training diverged or was given unusable data."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 4
    patience_epochs: int = 50
    max_epochs: int = 500
    rng_seed: int = 0
    normalization_mode: str = "perSampleMaxAbs"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    time_limit_seconds: float | None = None
    # multiply the learning rate by lr_decay_factor after this many epochs
    # without a new best validation MSE; None keeps it constant
    lr_decay_patience: int | None = None
    lr_decay_factor: float = 0.5

    def validate(self) -> None:
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning rate must be finite and nonnegative")
        if self.patience_epochs < 1:
            raise ValueError("patience must be at least one epoch")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch size must be positive and max_epochs nonnegative")
        if self.lr_decay_patience is not None and self.lr_decay_patience < 1:
            raise ValueError("lr_decay_patience must be at least one epoch")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.normalization_mode not in NORMALIZATION_MODES:
            raise ValueError(f"normalization mode must be one of {NORMALIZATION_MODES}")

    def to_dict(self) -> dict:
        return {
            "learningRate": self.learning_rate, "batchSize": self.batch_size,
            "patienceEpochs": self.patience_epochs, "maxEpochs": self.max_epochs,
            "rngSeed": self.rng_seed, "normalizationMode": self.normalization_mode,
            "lrDecayPatience": self.lr_decay_patience, "lrDecayFactor": self.lr_decay_factor,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(
            learning_rate=float(data.get("learningRate", 1e-3)),
            batch_size=int(data.get("batchSize", 4)),
            patience_epochs=int(data.get("patienceEpochs", 50)),
            max_epochs=int(data.get("maxEpochs", 500)),
            rng_seed=int(data.get("rngSeed", 0)),
            normalization_mode=data.get("normalizationMode", "perSampleMaxAbs"),
            lr_decay_patience=None if data.get("lrDecayPatience") is None else int(data["lrDecayPatience"]),
            lr_decay_factor=float(data.get("lrDecayFactor", 0.5)),
        )


@dataclass
class TrainingData:
    """Inputs and targets as ``(samples, nodes)`` arrays on one graph."""

    graph: Graph
    X_train: np.ndarray
    Y_train: np.ndarray
    X_val: np.ndarray
    Y_val: np.ndarray


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)
    initial_val_mse: float = float("nan")
    best_epoch: int = 0
    best_val_mse: float = float("nan")
    stopped_early: bool = False
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "trainLoss": list(self.train_loss), "valMSE": list(self.val_mse),
            "learningRate": list(self.learning_rate),
            "initialValMSE": self.initial_val_mse, "bestEpoch": self.best_epoch,
            "bestValMSE": self.best_val_mse, "stoppedEarly": self.stopped_early,
        }


def _scale(x: np.ndarray, mode: str) -> float:
    if mode == "perSampleMaxAbs":
        m = float(np.abs(x).max())
        return m if m > 0 else 1.0
    return 1.0


def predict(model: GUNetModel, graph: Graph, x: np.ndarray, mode: str = "raw") -> np.ndarray:
    """Post-processed nodal image for one LD input ``x``."""
    s = _scale(x, mode)
    out = model.forward(np.asarray(x, dtype=float)[:, None] / s, graph.adjacency, graph.normalized_adjacency)
    return out[:, 0] * s


def sample_loss_and_grad(model: GUNetModel, graph: Graph, x: np.ndarray, y: np.ndarray, mode: str = "raw"):
    """Nodal MSE of one sample and its parameter gradient."""
    s = _scale(x, mode)
    out, state = model.forward(x[:, None] / s, graph.adjacency, graph.normalized_adjacency, keep_cache=True)
    r = out[:, 0] * s - y
    loss = float(np.mean(r * r))
    dout = (2.0 * s / len(r)) * r[:, None]
    grads, _ = model.backward(dout, state)
    return loss, grads


def mean_mse(model: GUNetModel, graph: Graph, X: np.ndarray, Y: np.ndarray, mode: str = "raw") -> float:
    return float(np.mean([np.mean((predict(model, graph, x, mode) - y) ** 2) for x, y in zip(X, Y)]))


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        if self.lr == 0:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train(model: GUNetModel, data: TrainingData, config: TrainConfig | None = None):
    """Train a copy of ``model``; returns ``(best_model, history)``.

    Gradients within a batch are summed in sample order and averaged, and
    the shuffling stream is seeded from ``config.rng_seed``, so the result is
    a pure function of the inputs.
    """
    config = config or TrainConfig()
    config.validate()
    if len(data.X_train) == 0 or len(data.X_val) == 0:
        raise TrainingError("training and validation splits must both be nonempty")
    mode = config.normalization_mode
    graph = data.graph
    t0 = time.perf_counter()
    work = model.copy()
    opt = Adam(work.params, config.learning_rate, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.rng_seed)
    history = TrainHistory()
    best = work.copy()
    best_val = mean_mse(work, graph, data.X_val, data.Y_val, mode)
    history.initial_val_mse = history.best_val_mse = best_val
    since_best = since_decay = 0
    n = len(data.X_train)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            total = None
            batch_losses = []
            for i in batch:
                loss, grads = sample_loss_and_grad(work, graph, data.X_train[i], data.Y_train[i], mode)
                batch_losses.append(loss)
                if total is None:
                    total = grads
                else:
                    for k in total:
                        total[k] += grads[k]
            for k in total:
                total[k] /= len(batch)
            batch_loss = math.fsum(batch_losses)
            if not math.isfinite(batch_loss):
                raise TrainingError(f"training loss became non-finite in epoch {epoch}")
            opt.step(work.params, total)
            losses.append(batch_loss / len(batch))
        val = mean_mse(work, graph, data.X_val, data.Y_val, mode)
        if not math.isfinite(val):
            raise TrainingError(f"validation MSE became non-finite in epoch {epoch}")
        # fsum makes the epoch loss independent of the shuffled batch order
        history.train_loss.append(math.fsum(losses) / len(losses))
        history.val_mse.append(val)
        history.learning_rate.append(opt.lr)
        if val < best_val:
            best_val, best, since_best, since_decay = val, work.copy(), 0, 0
            history.best_epoch, history.best_val_mse = epoch, val
        else:
            since_best += 1
            since_decay += 1
            if config.lr_decay_patience is not None and since_decay >= config.lr_decay_patience:
                opt.lr *= config.lr_decay_factor
                since_decay = 0
                log.debug("learning rate lowered to %.3e", opt.lr)
        log.debug("epoch %d train %.4e val %.4e", epoch, history.train_loss[-1], val)
        if since_best >= config.patience_epochs:
            history.stopped_early = True
            break
        if config.time_limit_seconds is not None and time.perf_counter() - t0 > config.time_limit_seconds:
            log.warning("training stopped by the time limit after epoch %d", epoch)
            break
    history.seconds = time.perf_counter() - t0
    return best, history
