"""RNNPool + single fully-connected head, trained with momentum SGD."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, ShapeError, TrainingError
from ..pool import RnnPoolParams, rnnpool_backward_batch, rnnpool_forward_cached
from .datasets import SynthDataset


@dataclass
class ProbeModel:
    pool: RnnPoolParams
    head_w: np.ndarray     # (4*h2, outputs)
    head_b: np.ndarray

    def __post_init__(self):
        if self.head_w.shape[0] != self.pool.out_dim:
            raise ShapeError(f"head expects {self.head_w.shape[0]} inputs, "
                             f"pool produces {self.pool.out_dim}")

    @classmethod
    def create(cls, image_size: int, outputs: int, h1: int, h2: int, channels: int = 1,
               seed=0, dtype=np.float32, gate_bias: float = 2.0) -> "ProbeModel":
        """Random model whose update gates start biased towards keeping the state."""
        rng = np.random.default_rng(seed)
        pool = RnnPoolParams.random(channels, h1, h2, image_size, image_size, rng=rng,
                                    dtype=dtype)
        pool.rnn1.b_z[:] = gate_bias
        pool.rnn2.b_z[:] = gate_bias
        w = rng.standard_normal((4 * h2, outputs)) / np.sqrt(4 * h2)
        return cls(pool, w.astype(dtype), np.zeros(outputs, dtype=dtype))

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for tag, cell in (("1", self.pool.rnn1), ("2", self.pool.rnn2)):
            for k, v in cell.params().items():
                out[k + tag] = v
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def features(self, x: np.ndarray) -> np.ndarray:
        return rnnpool_forward_cached(self.pool, x)[0]

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.features(x) @ self.head_w + self.head_b


def _loss_and_grad(logits, y, multilabel):
    n = len(logits)
    if multilabel:
        p = 1.0 / (1.0 + np.exp(-logits))
        loss = np.mean(np.sum(np.logaddexp(0, logits) - y * logits, axis=1))
        return loss, (p - y) / n
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -np.mean(logp[np.arange(n), y])
    g = np.exp(logp)
    g[np.arange(n), y] -= 1
    return loss, g / n


def loss_and_grads(model: ProbeModel, x, y, multilabel: bool):
    """Mean loss over the batch and gradients for every parameter in model.params()."""
    feats, cache = rnnpool_forward_cached(model.pool, x)
    logits = feats @ model.head_w + model.head_b
    loss, dlogits = _loss_and_grad(logits, y, multilabel)
    grads, _ = rnnpool_backward_batch(model.pool, cache, dlogits @ model.head_w.T)
    out = grads.flat()
    out["head_w"] = feats.T @ dlogits
    out["head_b"] = dlogits.sum(axis=0)
    return float(loss), out


def predict(model: ProbeModel, x, multilabel: bool, batch: int = 256) -> np.ndarray:
    outs = [model.logits(x[i:i + batch]) for i in range(0, len(x), batch)]
    logits = np.concatenate(outs) if outs else np.zeros((0, model.head_w.shape[1]))
    return (logits > 0).astype(np.int64) if multilabel else logits.argmax(axis=1)


def accuracy(model: ProbeModel, data: SynthDataset) -> float:
    """Fraction of images whose prediction is fully correct (all labels for multilabel)."""
    x = data.as_float().astype(model.head_w.dtype)
    pred = predict(model, x, data.multilabel)
    if data.multilabel:
        return float(np.mean(np.all(pred == data.labels, axis=1)))
    return float(np.mean(pred == data.labels))


@dataclass
class ProbeResult:
    curve: list                       # test accuracy after each epoch
    final_test_accuracy: float
    losses: list = field(default_factory=list)   # mean training loss per epoch
    model: ProbeModel | None = None


def train_probe(model: ProbeModel, data: SynthDataset, test: SynthDataset, lr: float = 0.2,
                momentum: float = 0.9, epochs: int = 10, seed=0, batch_size: int = 64,
                weight_decay: float = 4e-5, lr_decay: float = 1.0, clip_norm: float | None = 1.0,
                callback=None) -> ProbeResult:
    """Momentum SGD on cross-entropy (multiclass) or per-label logistic loss (multilabel).

    `model` is updated in place. The learning rate is multiplied by lr_decay
    after every epoch. Gradients are rescaled to a global norm of at most
    clip_norm (None disables this), which keeps the long recurrences stable.
    """
    rng = np.random.default_rng(seed)
    dtype = model.head_w.dtype
    x_all = data.as_float().astype(dtype)
    y_all = data.labels
    multilabel = data.multilabel
    params = model.params()
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    curve, losses = [], []
    for epoch in range(epochs):
        order = rng.permutation(len(x_all))
        total, seen = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            info = {"epoch": epoch, "step": start // batch_size, "lr": lr,
                    "last_loss": total / max(seen, 1)}
            try:
                loss, grads = loss_and_grads(model, x_all[idx], y_all[idx], multilabel)
            except NumericError as exc:
                raise TrainingError(f"training diverged: {exc}", info) from exc
            if not np.isfinite(loss):
                raise TrainingError("loss diverged", info)
            scale = 1.0
            if clip_norm is not None:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if norm > clip_norm:
                    scale = clip_norm / norm
            for k, p in params.items():
                g = grads[k] * scale + weight_decay * p
                velocity[k] = momentum * velocity[k] - lr * g
                p += velocity[k].astype(dtype)
            total += loss * len(idx)
            seen += len(idx)
        losses.append(total / max(seen, 1))
        try:
            curve.append(accuracy(model, test))
        except NumericError as exc:
            raise TrainingError(f"training diverged: {exc}", {"epoch": epoch, "lr": lr,
                                                              "last_loss": losses[-1]}) from exc
        if callback:
            callback(epoch, losses[-1], curve[-1])
        lr *= lr_decay
    return ProbeResult(curve, curve[-1] if curve else accuracy(model, test), losses, model)
