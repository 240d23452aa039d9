"""CIFAR-10 binary reader and the single-shot (32x32 -> 1x1) pooling comparison."""
from __future__ import annotations

import os

import numpy as np

from ..errors import TrainingError
from .datasets import SynthDataset
from .train import ProbeModel, accuracy, train_probe

RECORD = 1 + 32 * 32 * 3
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
METHODS = ("rnnpool", "strided-conv", "maxpool", "avgpool")


def read_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Images (N, 32, 32, 3) uint8 and labels (N,) from one binary batch file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw or len(raw) % RECORD:
        whole = len(raw) // RECORD * RECORD
        raise OSError(f"{path}: {len(raw)} bytes is not a whole number of {RECORD}-byte "
                      f"records; trailing data starts at byte offset {whole}")
    arr = np.frombuffer(raw, np.uint8).reshape(-1, RECORD)
    labels = arr[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise OSError(f"{path}: label {labels[bad[0]]} out of range at byte offset "
                      f"{bad[0] * RECORD}")
    images = arr[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def load_cifar10(path):
    """Return (train_images, train_labels, test_images, test_labels) from the binary release."""
    if os.path.isdir(os.path.join(path, "cifar-10-batches-bin")):
        path = os.path.join(path, "cifar-10-batches-bin")
    missing = [f for f in TRAIN_FILES + (TEST_FILE,) if not os.path.exists(os.path.join(path, f))]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 files missing under {path}: {', '.join(missing)}")
    parts = [read_batch(os.path.join(path, f)) for f in TRAIN_FILES]
    x_tr = np.concatenate([p[0] for p in parts])
    y_tr = np.concatenate([p[1] for p in parts])
    x_te, y_te = read_batch(os.path.join(path, TEST_FILE))
    return x_tr, y_tr, x_te, y_te


class _PoolHead:
    """Fixed pooling (or a strided conv) to 128 channels, ReLU, then FC to 10."""

    def __init__(self, method, rng, dtype=np.float32):
        d_in = 32 * 32 * 3 if method == "strided-conv" else 3
        self.method = method
        self.w1 = (rng.standard_normal((d_in, 128)) * np.sqrt(2.0 / d_in)).astype(dtype)
        self.b1 = np.zeros(128, dtype)
        self.w2 = (rng.standard_normal((128, 10)) / np.sqrt(128)).astype(dtype)
        self.b2 = np.zeros(10, dtype)

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def _pool(self, x):
        if self.method == "strided-conv":
            return x.reshape(len(x), -1)
        if self.method == "maxpool":
            return x.max(axis=(1, 2))
        return x.mean(axis=(1, 2))

    def forward(self, x):
        f = self._pool(x)
        a = f @ self.w1 + self.b1
        h = np.maximum(a, 0)
        return f, a, h, h @ self.w2 + self.b2

    def loss_and_grads(self, x, y):
        f, a, h, logits = self.forward(x)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        n = len(x)
        loss = -np.mean(logp[np.arange(n), y])
        d = np.exp(logp)
        d[np.arange(n), y] -= 1
        d /= n
        dh = d @ self.w2.T * (a > 0)
        return float(loss), {"w2": h.T @ d, "b2": d.sum(0), "w1": f.T @ dh, "b1": dh.sum(0)}


def _train_head(head, x, y, epochs, lr, seed, batch=64, momentum=0.9, wd=4e-5):
    rng = np.random.default_rng(seed)
    params = head.params()
    vel = {k: np.zeros_like(v) for k, v in params.items()}
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch):
            idx = order[start:start + batch]
            loss, grads = head.loss_and_grads(x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError("loss diverged", {"epoch": epoch, "method": head.method})
            for k, p in params.items():
                vel[k] = momentum * vel[k] - lr * (grads[k] + wd * p)
                p += vel[k]
        lr *= 0.9


def single_shot_pool_compare(path, seed=0, epochs: int = 10, train_limit: int | None = None,
                             lr_rnnpool: float = 0.2, lr_pool: float = 0.01) -> dict[str, float]:
    """Test accuracy of each pooling head trained on CIFAR-10 with a 32x32 patch and stride."""
    x_tr, y_tr, x_te, y_te = load_cifar10(path)
    if train_limit:
        x_tr, y_tr = x_tr[:train_limit], y_tr[:train_limit]
    xf_tr = x_tr.astype(np.float32) / 255.0
    xf_te = x_te.astype(np.float32) / 255.0
    rng = np.random.default_rng(seed)
    results = {}
    names = tuple(str(i) for i in range(10))
    train = SynthDataset(x_tr, y_tr, "cifar10", names)
    test = SynthDataset(x_te, y_te, "cifar10", names)
    model = ProbeModel.create(32, 10, 32, 32, channels=3, seed=seed)
    train_probe(model, train, test, lr=lr_rnnpool, epochs=epochs, seed=seed, lr_decay=0.9)
    results["rnnpool"] = accuracy(model, test)
    for method in METHODS[1:]:
        head = _PoolHead(method, rng)
        _train_head(head, xf_tr, y_tr, epochs, lr_pool, seed)
        pred = head.forward(xf_te)[3].argmax(axis=1)
        results[method] = float(np.mean(pred == y_te))
    return results
