"""
A small pre-training run, start to finish
=========================================

Pre-train on synthetic shapes for a few epochs, then compare the k-NN
accuracy of the online backbone before and after.  This is a shortened
version of the desk run; expect a few minutes on one core.

    python demos/04_desk_pretrain.py [out_dir]
"""

import sys
import tempfile

import numpy as np

from moby.evaluation import knn_probe
from moby.experiment import ExperimentConfig, Pretrainer, prepare_data, read_metrics, run_pretrain

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="moby-desk-")
config = ExperimentConfig(dataset_size=2000, epochs=10, precision="f32", output_dir=out)
data = prepare_data(config)
train, test, stats = data
print(f"{len(train)} train / {len(test)} test images, {config.num_classes} shape classes")

before = knn_probe(Pretrainer(config, data).pair.online.backbone, train, test, stats)
print(f"k-NN top-1 with the random initial backbone: {before:.3f}")


def log(m):
    if m["step"] % 50 == 0:
        print(f"  step {m['step']:>4}  loss {m['loss']:.3f}  momentum {m['momentum']:.4f}  "
              f"queue {m['queue_fill']}")


trainer = run_pretrain(config, data=data, log=log)
after = knn_probe(trainer.pair.online.backbone, train, test, stats)
print(f"k-NN top-1 after {trainer.step} steps: {after:.3f}   (chance {1 / config.num_classes:.3f})")

# the queue only fills after a few steps, so compare per-epoch means
losses = np.array([float(r["loss"]) for r in read_metrics(f"{out}/metrics.csv")])
per_epoch = losses[: len(losses) // config.epochs * config.epochs].reshape(config.epochs, -1)
print("mean loss per epoch:", np.round(per_epoch.mean(1), 3))
print("metrics, timings and final checkpoint are in", out)
