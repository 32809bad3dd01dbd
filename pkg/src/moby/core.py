"""MoBY: asymmetric online/target encoders, key queues and the contrastive step."""
import copy
import math
import warnings

import numpy as np

from . import tensor as T
from .backbone import build_backbone, check_drop_rate
from .errors import ConfigError, ContractError, NumericalError
from .nn import BatchNorm, Linear, Module
from .tensor import Tensor

UNIT_NORM_TOL = 1e-3


class MLPHead(Module):
    """linear -> batch norm -> ReLU -> linear.  Used as projector and predictor."""

    def __init__(self, in_dim, hidden_dim, out_dim, rng, dtype=np.float64):
        self.fc1 = Linear(in_dim, hidden_dim, rng, dtype=dtype)
        self.bn = BatchNorm(hidden_dim, dtype=dtype)
        self.fc2 = Linear(hidden_dim, out_dim, rng, dtype=dtype)

    def __call__(self, x, training=True):
        return self.fc2(T.relu(self.bn(self.fc1(x), training)))


class Encoder(Module):
    """Backbone followed by heads; ``predictor`` is None on the target side."""

    def __init__(self, backbone, projector, predictor=None):
        self.backbone = backbone
        self.projector = projector
        self.predictor = predictor

    def __call__(self, images, drop_path_rate, training=True, rng=None):
        z = self.projector(self.backbone(images, drop_path_rate, training, rng), training)
        if self.predictor is not None:
            z = self.predictor(z, training)
        return z


class EncoderPair(Module):
    """Online (trained) and target (moving-average) encoders.

    The target starts as an exact copy of the online backbone and projector
    and never requires gradients.  ``correspondence`` maps every target
    parameter name to the online parameter it tracks.
    """

    def __init__(self, backbone_cfg, rng, proj_hidden=512, proj_out=128,
                 online_drop_path=0.1, target_drop_path=0.0, dtype=np.float64):
        check_drop_rate(online_drop_path)
        check_drop_rate(target_drop_path)
        backbone = build_backbone(backbone_cfg, rng, dtype=dtype)
        dim = backbone.num_features
        projector = MLPHead(dim, proj_hidden, proj_out, rng, dtype=dtype)
        predictor = MLPHead(proj_out, proj_hidden, proj_out, rng, dtype=dtype)
        self.online = Encoder(backbone, projector, predictor)
        self.target = Encoder(copy.deepcopy(backbone), copy.deepcopy(projector))
        self.target.requires_grad_(False)
        self.online_drop_path = online_drop_path
        self.target_drop_path = target_drop_path
        online = dict(self.online.named_parameters("online."))
        self.correspondence = {}
        for name, _ in self.target.named_parameters("target."):
            src = "online." + name[len("target."):]
            if src not in online:
                raise ContractError(f"target parameter {name} has no online counterpart")
            self.correspondence[name] = src
        self._pairs = [(p_t, online[self.correspondence[n]])
                       for n, p_t in self.target.named_parameters("target.")]

    @property
    def dtype(self):
        return self.online.backbone.dtype

    def online_parameters(self):
        return list(self.online.named_parameters("online."))

    def target_parameters(self):
        return list(self.target.named_parameters("target."))

    def momentum_update(self, m):
        """target <- m * target + (1 - m) * online, parameter by parameter."""
        for p_t, p_o in self._pairs:
            p_t.data = m * p_t.data + (1.0 - m) * p_o.data


class KeyQueue:
    """Fixed-capacity FIFO of unit-norm key rows (negatives)."""

    def __init__(self, capacity, dim, dtype=np.float64):
        if capacity <= 0:
            raise ConfigError(f"queue capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.storage = np.zeros((self.capacity, dim), dtype=dtype)
        self.cursor = 0
        self.fill = 0

    def __len__(self):
        return self.fill

    def negatives(self):
        """Stored rows, in storage order (order does not affect the loss)."""
        return self.storage[: self.fill] if self.fill < self.capacity else self.storage

    def contents(self):
        """Stored rows from oldest to newest."""
        if self.fill < self.capacity:
            return self.storage[: self.fill].copy()
        return np.roll(self.storage, -self.cursor, axis=0)

    def enqueue(self, keys):
        keys = keys.data if isinstance(keys, Tensor) else np.asarray(keys)
        b = keys.shape[0]
        if b > self.capacity:
            raise ConfigError(f"cannot enqueue {b} keys into a queue of capacity {self.capacity}")
        idx = (self.cursor + np.arange(b)) % self.capacity
        self.storage[idx] = keys
        self.cursor = int((self.cursor + b) % self.capacity)
        self.fill = min(self.fill + b, self.capacity)
        return self


def _check_unit_rows(x, what):
    norms = np.sqrt((x * x).sum(axis=-1))
    if x.size and np.max(np.abs(norms - 1.0)) > UNIT_NORM_TOL:
        raise ContractError(f"{what} rows must be unit-normalised (max |norm - 1| = "
                            f"{np.max(np.abs(norms - 1.0)):.3g})")


def contrastive_loss(q, k_plus, queue, tau):
    """-log softmax of the positive among [q.k+, q.k_i] / tau, averaged over rows.

    ``k_plus`` and the queue rows are constants: no gradient reaches them.
    With an empty queue the positive is the only candidate and the loss is 0.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    k = k_plus.data if isinstance(k_plus, Tensor) else np.asarray(k_plus)
    negatives = queue.negatives() if isinstance(queue, KeyQueue) else np.asarray(queue)
    _check_unit_rows(q.data, "query")
    _check_unit_rows(k, "key")
    _check_unit_rows(negatives, "queue")
    l_pos = (q * Tensor(k.astype(q.dtype, copy=False))).sum(axis=1, keepdims=True)
    if len(negatives):
        l_neg = T.matmul(q, Tensor(np.ascontiguousarray(negatives.T, dtype=q.dtype)))
        logits = T.concat([l_pos, l_neg], axis=1)
    else:
        logits = l_pos
    labels = np.zeros(q.shape[0], dtype=np.int64)
    return T.cross_entropy(logits / tau, labels)


def momentum_at_step(step, total_steps, start=0.99):
    """Cosine ramp of the EMA coefficient from ``start`` to 1."""
    if step > total_steps:
        warnings.warn(f"step {step} beyond schedule length {total_steps}; momentum clamped to 1")
        return 1.0
    if step < 0:
        raise ConfigError(f"step must be non-negative, got {step}")
    if total_steps <= 0:
        return 1.0
    return 1.0 - (1.0 - start) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0


class MomentumSchedule:
    def __init__(self, start=0.99, total_steps=1):
        if not 0.0 <= start <= 1.0:
            raise ConfigError(f"momentum start must lie in [0, 1], got {start}")
        self.start = start
        self.total_steps = total_steps

    def __call__(self, step):
        return momentum_at_step(step, self.total_steps, self.start)


def _online_features(pair, views, rng):
    return T.l2_normalize(pair.online(views, pair.online_drop_path, True, rng))


def _target_features(pair, views, rng):
    with T.no_grad():
        return T.l2_normalize(pair.target(views, pair.target_drop_path, True, rng)).data


def moby_loss(pair, v1, v2, queue1, queue2, tau, rng=None):
    """Symmetric loss of one batch, without touching the queues.

    Returns ``(loss, k1, k2)`` where ``k1``/``k2`` are the normalised target
    keys of the two views.
    """
    q1 = _online_features(pair, v1, rng)
    q2 = _online_features(pair, v2, rng)
    k1 = _target_features(pair, v1, rng)
    k2 = _target_features(pair, v2, rng)
    loss = contrastive_loss(q1, k2, queue2, tau) + contrastive_loss(q2, k1, queue1, tau)
    return loss, k1, k2


def training_step(views, pair, queues, optimizer, schedule, step, tau=0.2, rng=None):
    """One MoBY iteration; returns a metrics dict.

    Order: forward both branches, loss, enqueue keys, backward, optimiser
    step on online parameters, EMA update of the target with m(step).
    """
    v1, v2 = views
    queue1, queue2 = queues
    loss, k1, k2 = moby_loss(pair, v1, v2, queue1, queue2, tau, rng)
    if not np.isfinite(loss.data):
        raise NumericalError(f"non-finite loss at step {step} (first produced by "
                             f"{T.first_nonfinite_op(loss)})", op=T.first_nonfinite_op(loss))
    queue2.enqueue(k2)
    queue1.enqueue(k1)
    pair.online.zero_grad()
    T.backward(loss)
    optimizer.step()
    m = schedule(step)
    pair.momentum_update(m)
    return {
        "step": step,
        "loss": float(loss.data),
        "momentum": m,
        "queue_fill": queue1.fill,
        "lr": optimizer.lr,
    }


def target_grads_absent(pair):
    """True when no target parameter holds a non-zero gradient."""
    return all(p.grad is None or not np.any(p.grad) for _, p in pair.target_parameters())

