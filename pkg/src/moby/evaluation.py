"""Frozen-backbone evaluation: linear probe with an lr grid, and a k-NN probe."""
import csv
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import STREAM_PROBE, center_crop, probe_policy, substream
from .errors import ConfigError
from .nn import Parameter
from .optim import SGD

DEFAULT_LR_GRID = (0.5, 0.75, 1.0, 1.25)


def parameter_digest(module):
    """SHA-256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, arr in module.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def extract_features(backbone, images, batch_size=256):
    """Eval-mode pooled features of already-normalised images, as float64."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(backbone(images[i:i + batch_size], 0.0, False).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, backbone.num_features))


def center_crop_images(dataset, stats):
    s = dataset.image_size
    return np.stack([stats.apply(center_crop(img, s)) for img in dataset.images]).astype(np.float32)


def augmented_images(dataset, stats, seed, copy_index):
    policy = probe_policy()
    return np.stack([
        stats.apply(policy.apply(img, substream(seed, copy_index, i, STREAM_PROBE)))
        for i, img in enumerate(dataset.images)
    ]).astype(np.float32)


def top1_accuracy(logits, labels):
    """Fraction of rows whose argmax equals the label; ties go to the lowest index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ConfigError("top1_accuracy needs at least one row")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def _unit_rows(x):
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def knn_predict(train_features, train_labels, test_features, k=20, tau=0.07, num_classes=None):
    """Cosine-similarity k-NN with exp(sim / tau) vote weights."""
    train = _unit_rows(np.asarray(train_features, dtype=np.float64))
    test = _unit_rows(np.asarray(test_features, dtype=np.float64))
    train_labels = np.asarray(train_labels)
    num_classes = num_classes or int(train_labels.max()) + 1
    k = min(k, len(train))
    preds = np.empty(len(test), dtype=np.int64)
    for start in range(0, len(test), 512):
        sims = test[start:start + 512] @ train.T
        nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        weights = np.exp(np.take_along_axis(sims, nearest, axis=1) / tau)
        votes = np.zeros((len(sims), num_classes))
        np.add.at(votes, (np.arange(len(sims))[:, None], train_labels[nearest]), weights)
        preds[start:start + 512] = np.argmax(votes, axis=1)
    return preds


def knn_probe(backbone, train_set, test_set, stats, k=20, tau=0.07):
    train_f = extract_features(backbone, center_crop_images(train_set, stats))
    test_f = extract_features(backbone, center_crop_images(test_set, stats))
    preds = knn_predict(train_f, train_set.labels, test_f, k, tau, train_set.num_classes)
    return float(np.mean(preds == test_set.labels))


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    lr: float
    epochs: int
    warmup_epochs: float

    def logits(self, features):
        return features @ self.weight.T + self.bias


@dataclass
class EvalReport:
    top1: dict = field(default_factory=dict)
    knn_top1: float = None

    @property
    def best_lr(self):
        return max(self.top1, key=lambda lr: (self.top1[lr], -lr)) if self.top1 else None

    @property
    def best_top1(self):
        return max(self.top1.values()) if self.top1 else None

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lr", "top1", "knn_top1"])
            for lr, acc in self.top1.items():
                writer.writerow([repr(lr), repr(acc), "" if self.knn_top1 is None else repr(self.knn_top1)])

    def summary(self):
        lines = [f"  lr={lr:<6g} top1={acc * 100:6.2f}%" for lr, acc in self.top1.items()]
        if self.top1:
            lines.append(f"  best lr={self.best_lr:g} top1={self.best_top1 * 100:.2f}%")
        if self.knn_top1 is not None:
            lines.append(f"  k-NN top1={self.knn_top1 * 100:.2f}%")
        return "\n".join(lines)


def probe_lr(step, total_steps, warmup_steps, base_lr):
    """Linear warm-up, then cosine decay to zero."""
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def fit_linear_classifier(train_features, train_labels, lr, epochs=100, batch_size=256,
                          warmup_fraction=0.05, momentum=0.9, seed=0, num_classes=None):
    """SGD on softmax cross-entropy over fixed features, weight decay 0.

    ``train_features`` is either one ``[n, D]`` array or a list of them, one
    per augmented copy; epoch ``e`` uses copy ``e % len(list)``.
    """
    copies = train_features if isinstance(train_features, (list, tuple)) else [train_features]
    labels = np.asarray(train_labels)
    n, dim = copies[0].shape
    num_classes = num_classes or int(labels.max()) + 1
    weight = Parameter(np.zeros((num_classes, dim)))
    bias = Parameter(np.zeros(num_classes))
    opt = SGD([("weight", weight), ("bias", bias)], lr=lr, momentum=momentum)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total = epochs * steps_per_epoch
    warmup = int(round(warmup_fraction * epochs)) * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        feats = copies[epoch % len(copies)]
        order = np.random.default_rng([seed, epoch, 0x11E4]).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.lr = probe_lr(step, total, warmup, lr)
            x = T.Tensor(feats[idx])
            logits = T.matmul(x, weight.transpose(1, 0)) + bias
            loss = T.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            step += 1
    return LinearProbe(weight.data.copy(), bias.data.copy(), lr, epochs, warmup_fraction * epochs)


def train_linear_probe(backbone, train_set, test_set, stats, grid=DEFAULT_LR_GRID, epochs=100,
                       batch_size=256, aug_copies=4, seed=0, knn_k=20, knn_tau=0.07, knn=True):
    """Linear evaluation of a frozen backbone over an lr grid.

    Features of ``aug_copies`` crop+flip augmented copies of the training set
    are extracted once and cycled over epochs (``aug_copies=0`` trains on
    center crops).  Test accuracy always uses center crops.
    Returns ``(best_probe, EvalReport)``.
    """
    if train_set.labels is None or test_set.labels is None:
        raise ConfigError("linear evaluation needs labelled train and test sets")
    if not grid:
        raise ConfigError("lr grid must not be empty")
    num_classes = max(train_set.num_classes, test_set.num_classes)
    train_center = extract_features(backbone, center_crop_images(train_set, stats))
    test_center = extract_features(backbone, center_crop_images(test_set, stats))
    if aug_copies:
        train_feats = [extract_features(backbone, augmented_images(train_set, stats, seed, c))
                       for c in range(aug_copies)]
    else:
        train_feats = [train_center]
    report = EvalReport()
    probes = {}
    for lr in grid:
        probe = fit_linear_classifier(train_feats, train_set.labels, lr, epochs, batch_size,
                                      seed=seed, num_classes=num_classes)
        report.top1[float(lr)] = top1_accuracy(probe.logits(test_center), test_set.labels)
        probes[float(lr)] = probe
    if knn:
        preds = knn_predict(train_center, train_set.labels, test_center, knn_k, knn_tau, num_classes)
        report.knn_top1 = float(np.mean(preds == test_set.labels))
    return probes[report.best_lr], report
