"""
One MoBY step, piece by piece
=============================

Two augmented views go through the online encoder (with predictor) and the
target encoder (no gradients).  Each query is contrasted with the other
view's key and with the opposite queue.
"""

import numpy as np

from moby.backbone import BackboneConfig
from moby.core import EncoderPair, KeyQueue, MomentumSchedule, target_grads_absent, training_step
from moby.data import channel_stats, default_policies, iterate_view_batches, synthetic_shapes
from moby.optim import AdamW

data = synthetic_shapes(num_classes=8, count=256, seed=7)
stats = channel_stats(data)
v1, v2, idx = next(iterate_view_batches(data, 32, seed=0, epoch=0, policies=default_policies(), stats=stats))
print("views", v1.shape, "from images", idx[:6], "...")

pair = EncoderPair(BackboneConfig(), np.random.default_rng(0), dtype=np.float32)
print("online parameters:", sum(p.size for _, p in pair.online_parameters()))
print("target parameters:", sum(p.size for _, p in pair.target_parameters()), "(no predictor)")

queues = KeyQueue(128, 128, np.float32), KeyQueue(128, 128, np.float32)
opt = AdamW(pair.online_parameters())
schedule = MomentumSchedule(0.99, total_steps=8)

# step 0 sees empty queues, so the positive is the only logit and the loss is 0
for step in range(8):
    views = next(iterate_view_batches(data, 32, 0, step, default_policies(), stats))[:2]
    m = training_step(views, pair, queues, opt, schedule, step, tau=0.2, rng=np.random.default_rng(step))
    print(f"step {step}  loss {m['loss']:.3f}  momentum {m['momentum']:.5f}  queue {m['queue_fill']}")

print("target gradients absent:", target_grads_absent(pair))
