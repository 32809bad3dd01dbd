import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moby import tensor as T
from moby.backbone import BackboneConfig
from moby.core import (
    EncoderPair, KeyQueue, MomentumSchedule, contrastive_loss, momentum_at_step, moby_loss,
    target_grads_absent, training_step,
)
from moby.errors import ConfigError, ContractError, NumericalError
from moby.optim import AdamW
from moby.tensor import Tensor

TINY = BackboneConfig(image_size=16, patch_size=4, embed_dim=8, depths=[1, 1], num_heads=[2, 2],
                      window_size=2, mlp_ratio=2.0)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def make_pair(seed=0, **kw):
    kw.setdefault("proj_hidden", 16)
    kw.setdefault("proj_out", 8)
    return EncoderPair(TINY, np.random.default_rng(seed), **kw)


def filled_queue(rows):
    q = KeyQueue(len(rows), rows.shape[1])
    q.enqueue(rows)
    return q


def mp_loss(q, k, negatives, tau):
    """-log softmax of the positive, row by row, at 50 significant digits."""
    mpmath.mp.dps = 50
    total = mpmath.mpf(0)
    for i in range(len(q)):
        logits = [mpmath.fsum(mpmath.mpf(float(a)) * mpmath.mpf(float(b)) for a, b in zip(q[i], k[i]))]
        for row in negatives:
            logits.append(mpmath.fsum(mpmath.mpf(float(a)) * mpmath.mpf(float(b)) for a, b in zip(q[i], row)))
        logits = [l / mpmath.mpf(tau) for l in logits]
        total += -(logits[0] - mpmath.log(mpmath.fsum(mpmath.exp(l) for l in logits)))
    return float(total / len(q))


# --------------------------------------------------------------------------
# contrastive loss

def test_loss_positive_equals_query_orthogonal_queue():
    tau, K = 0.2, 8
    q = np.zeros((1, 16)); q[0, 0] = 1.0
    negatives = np.eye(16)[1:1 + K]
    loss = contrastive_loss(Tensor(q), q, filled_queue(negatives), tau)
    expected = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + K))
    assert abs(float(loss.data) - expected) < 1e-12


def test_loss_uniform_logits_is_log_k_plus_one():
    K = 4096
    q = np.zeros((2, 4)); q[:, 0] = 1.0
    loss = contrastive_loss(Tensor(q), q, filled_queue(np.tile(q[:1], (K, 1))), 0.2)
    assert abs(float(loss.data) - math.log(K + 1)) < 1e-9
    assert round(float(loss.data), 3) == 8.318


def test_loss_matches_high_precision_oracle():
    rng = np.random.default_rng(11)
    q, k, neg = unit_rows(rng, 8, 16), unit_rows(rng, 8, 16), unit_rows(rng, 32, 16)
    loss = contrastive_loss(Tensor(q), k, filled_queue(neg), 0.2)
    assert abs(float(loss.data) - mp_loss(q, k, neg, 0.2)) < 1e-10


def test_loss_uses_current_fill_only():
    rng = np.random.default_rng(2)
    q, k, neg = unit_rows(rng, 4, 8), unit_rows(rng, 4, 8), unit_rows(rng, 5, 8)
    queue = KeyQueue(32, 8).enqueue(neg)
    a = float(contrastive_loss(Tensor(q), k, queue, 0.2).data)
    assert abs(a - mp_loss(q, k, neg, 0.2)) < 1e-10


def test_cold_start_loss_is_zero():
    rng = np.random.default_rng(3)
    q = unit_rows(rng, 4, 8)
    loss = contrastive_loss(Tensor(q), unit_rows(rng, 4, 8), KeyQueue(16, 8), 0.2)
    assert float(loss.data) == 0.0


@pytest.mark.parametrize("tau", [0.0, -0.1])
def test_loss_rejects_bad_temperature(tau):
    rng = np.random.default_rng(0)
    q = unit_rows(rng, 2, 4)
    with pytest.raises(ConfigError):
        contrastive_loss(Tensor(q), q, filled_queue(q), tau)


def test_loss_rejects_unnormalised_rows():
    rng = np.random.default_rng(0)
    q = unit_rows(rng, 2, 4)
    with pytest.raises(ContractError):
        contrastive_loss(Tensor(q * 1.01), q, filled_queue(q), 0.2)
    with pytest.raises(ContractError):
        contrastive_loss(Tensor(q), q * 0.9, filled_queue(q), 0.2)
    with pytest.raises(ContractError):
        contrastive_loss(Tensor(q), q, filled_queue(q * 2), 0.2)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31), tau=st.floats(0.05, 1.0), fill=st.integers(1, 40))
def test_loss_positive_and_bounded_below(seed, tau, fill):
    rng = np.random.default_rng(seed)
    q, k, neg = unit_rows(rng, 3, 6), unit_rows(rng, 3, 6), unit_rows(rng, fill, 6)
    loss = float(contrastive_loss(Tensor(q), k, filled_queue(neg), tau).data)
    bound = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + fill * math.exp(-1 / tau)))
    assert loss > 0
    assert loss >= bound - 1e-12


def test_loss_gradient_reaches_query_only():
    rng = np.random.default_rng(4)
    q = Tensor(unit_rows(rng, 3, 5), requires_grad=True)
    k = Tensor(unit_rows(rng, 3, 5), requires_grad=True)
    T.backward(contrastive_loss(q, k, filled_queue(unit_rows(rng, 6, 5)), 0.2))
    assert q.grad is not None and np.any(q.grad)
    assert k.grad is None


# --------------------------------------------------------------------------
# queue

def test_queue_fifo_example():
    rows = np.eye(6)
    q = KeyQueue(4, 6).enqueue(rows[:4]).enqueue(rows[4:])
    np.testing.assert_array_equal(q.contents(), rows[2:6])
    assert len(q) == 4


def test_queue_rejects_oversized_batch():
    with pytest.raises(ConfigError):
        KeyQueue(4, 3).enqueue(np.ones((5, 3)))
    with pytest.raises(ConfigError):
        KeyQueue(0, 3)


@pytest.mark.parametrize("K,b", [(4096, 64), (10, 3), (8, 8), (7, 2)])
def test_queue_fill_reaches_capacity(K, b):
    q = KeyQueue(K, 2)
    steps = math.ceil(K / b)
    for i in range(steps):
        assert q.fill == min(i * b, K)
        q.enqueue(np.ones((b, 2)))
    assert q.fill == K
    q.enqueue(np.ones((b, 2)))
    assert q.fill == K


@pytest.mark.parametrize("K,b", [(12, 4), (10, 3), (5, 5)])
def test_queue_age(K, b):
    q = KeyQueue(K, 1)
    q.enqueue(np.full((b, 1), -1.0))
    marked = np.full((b, 1), 7.0)
    q.enqueue(marked)
    life = 0
    while np.any(q.contents() == 7.0):
        q.enqueue(np.zeros((b, 1)))
        life += 1
    assert life == math.ceil(K / b)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31), K=st.integers(1, 50))
def test_queue_property_random_sequences(seed, K):
    rng = np.random.default_rng(seed)
    q = KeyQueue(K, 5)
    model = []
    for _ in range(40):
        rows = unit_rows(rng, int(rng.integers(1, K + 1)), 5)
        removed = max(0, len(model) + len(rows) - K)
        oldest = model[:removed]
        q.enqueue(rows)
        model = (model + list(rows))[-K:]
        np.testing.assert_array_equal(q.contents(), np.array(model))
        assert all(not any(np.array_equal(o, m) for m in model) for o in oldest)
        assert q.fill == len(model) <= K
        assert np.max(np.abs(np.linalg.norm(q.negatives(), axis=1) - 1)) < 1e-6


# --------------------------------------------------------------------------
# momentum schedule

def test_momentum_examples():
    assert momentum_at_step(0, 100) == 0.99
    assert momentum_at_step(100, 100) == 1.0
    assert abs(momentum_at_step(50, 100) - 0.995) < 1e-15


def test_momentum_monotone_and_bounded():
    sched = MomentumSchedule(0.99, 1000)
    ms = np.array([sched(s) for s in range(1001)])
    assert np.all(np.diff(ms) >= 0)
    assert ms.min() >= 0.99 and ms.max() <= 1.0


def test_momentum_clamps_past_end():
    with pytest.warns(UserWarning):
        assert momentum_at_step(101, 100) == 1.0


def test_momentum_rejects_bad_start():
    with pytest.raises(ConfigError):
        MomentumSchedule(1.5, 10)


# --------------------------------------------------------------------------
# encoder pair and training step

def test_target_starts_as_exact_copy():
    pair = make_pair()
    online = dict(pair.online_parameters())
    for name, p in pair.target_parameters():
        src = online[pair.correspondence[name]]
        assert p is not src
        np.testing.assert_array_equal(p.data, src.data)
        assert not p.requires_grad
    assert not any("predictor" in src for src in pair.correspondence.values())
    assert any(n.startswith("online.predictor") for n, _ in pair.online_parameters())


def test_drop_path_rates_are_asymmetric_by_default():
    pair = make_pair()
    assert (pair.online_drop_path, pair.target_drop_path) == (0.1, 0.0)
    with pytest.raises(ConfigError):
        make_pair(online_drop_path=1.0)


def _views(seed, b=4):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((b, 3, 16, 16)), rng.standard_normal((b, 3, 16, 16))


def _setup(K=16, seed=0, **kw):
    pair = make_pair(seed, **kw)
    queues = (KeyQueue(K, 8), KeyQueue(K, 8))
    opt = AdamW(pair.online_parameters())
    return pair, queues, opt


def test_training_step_ema_is_exact():
    pair, queues, opt = _setup()
    sched = MomentumSchedule(0.99, 10)
    old_target = {n: p.data.copy() for n, p in pair.target_parameters()}
    metrics = training_step(_views(1), pair, queues, opt, sched, 3, rng=np.random.default_rng(0))
    m = metrics["momentum"]
    assert m == sched(3)
    online = dict(pair.online_parameters())
    for name, p in pair.target_parameters():
        expected = m * old_target[name] + (1 - m) * online[pair.correspondence[name]].data
        assert np.max(np.abs(p.data - expected)) < 1e-12


def test_training_step_stop_gradient():
    pair, queues, opt = _setup()
    training_step(_views(1), pair, queues, opt, MomentumSchedule(0.99, 10), 0, rng=np.random.default_rng(0))
    assert target_grads_absent(pair)
    assert all(p.grad is None for _, p in pair.target_parameters())
    assert all(p.grad is not None for _, p in pair.online_parameters())
    assert isinstance(queues[0].storage, np.ndarray)


def test_training_step_metrics_and_enqueue_order():
    pair, queues, opt = _setup(K=16)
    v1, v2 = _views(2)
    rng_state = np.random.default_rng(0)
    with T.no_grad():
        expected_loss, _, _ = moby_loss(pair, v1, v2, *queues, 0.2, np.random.default_rng(0))
    metrics = training_step((v1, v2), pair, queues, opt, MomentumSchedule(0.99, 10), 0, rng=rng_state)
    assert metrics["loss"] == float(expected_loss.data) == 0.0  # empty queues at step 0
    assert metrics["queue_fill"] == 4 and queues[1].fill == 4
    assert metrics["lr"] == 1e-3 and metrics["step"] == 0


def test_symmetric_loss():
    pair, queues, _ = _setup(online_drop_path=0.0)
    rng = np.random.default_rng(5)
    for q in queues:
        q.enqueue(unit_rows(rng, 10, 8))
    v1, v2 = _views(3)
    with T.no_grad():
        a, k1, k2 = moby_loss(pair, v1, v2, queues[0], queues[1], 0.2)
        b, k2b, k1b = moby_loss(pair, v2, v1, queues[1], queues[0], 0.2)
    assert float(a.data) == float(b.data)
    np.testing.assert_array_equal(k1, k1b)


def test_duplicated_views_match_direct_oracle():
    pair, queues, _ = _setup(online_drop_path=0.0)
    rng = np.random.default_rng(6)
    for q in queues:
        q.enqueue(unit_rows(rng, 12, 8))
    v, _ = _views(4)
    with T.no_grad():
        loss, k1, k2 = moby_loss(pair, v, v, queues[0], queues[1], 0.2)
        q = pair.online(v, 0.0, True).data
        k = pair.target(v, 0.0, True).data
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    k = k / np.linalg.norm(k, axis=1, keepdims=True)
    expected = mp_loss(q, k, queues[1].negatives(), 0.2) + mp_loss(q, k, queues[0].negatives(), 0.2)
    assert abs(float(loss.data) - expected) < 1e-10


def test_ema_contracts_by_m_with_frozen_online():
    pair = make_pair()
    rng = np.random.default_rng(7)
    for _, p in pair.target_parameters():
        p.data = p.data + rng.standard_normal(p.shape)

    def dist():
        online = dict(pair.online_parameters())
        return math.sqrt(sum(np.sum((p.data - online[pair.correspondence[n]].data) ** 2)
                             for n, p in pair.target_parameters()))

    m = 0.9
    d = dist()
    for _ in range(5):
        pair.momentum_update(m)
        d_new = dist()
        assert abs(d_new / d - m) < 1e-12
        d = d_new


def test_nan_loss_names_first_op():
    pair, queues, opt = _setup()
    v1, v2 = _views(1)
    v1[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError) as info:
        training_step((v1, v2), pair, queues, opt, MomentumSchedule(0.99, 10), 0)
    assert info.value.op
    assert info.value.op in str(info.value)


def test_smoke_training_decreases_trailing_loss():
    from moby.data import channel_stats, default_policies, iterate_view_batches, synthetic_shapes
    ds = synthetic_shapes(4, 128, size=16, seed=7)
    stats = channel_stats(ds)
    pair = make_pair(1)
    queues = (KeyQueue(32, 8), KeyQueue(32, 8))
    opt = AdamW(pair.online_parameters(), lr=1e-3)
    sched = MomentumSchedule(0.99, 200)
    losses = []
    epoch = 0
    while len(losses) < 200:
        for v1, v2, _ in iterate_view_batches(ds, 32, 0, epoch, default_policies(), stats):
            if len(losses) == 200:
                break
            m = training_step((v1, v2), pair, queues, opt, sched, len(losses), rng=np.random.default_rng(len(losses)))
            losses.append(m["loss"])
        epoch += 1
    losses = np.array(losses)
    assert losses[-50:].mean() < losses[:50].mean()
