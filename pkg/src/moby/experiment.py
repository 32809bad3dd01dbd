"""Experiment configs, checkpoints, pre-training runs and ablation sweeps."""
import csv
import dataclasses
import io
import struct
import time
import traceback
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, build_backbone
from .core import EncoderPair, KeyQueue, MomentumSchedule, training_step
from .data import NormStats, channel_stats, default_policies, iterate_view_batches, load_dataset
from .errors import ConfigError, FormatError, ShapeError
from .evaluation import knn_probe, train_linear_probe
from .optim import AdamW

CHECKPOINT_MAGIC = b"MBCK"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("step", "loss", "momentum", "queue_fill", "lr")

# non-binding top-1 (%) references, 100-epoch ImageNet-1K linear evaluation
IMAGENET_REFERENCE = {
    "tau": {0.07: 62.7, 0.1: 67.7, 0.2: 70.9, 0.3: 70.8},
    "queue_size": {1024: 71.0, 2048: 70.8, 4096: 70.9, 8192: 71.0, 16384: 70.8},
    "momentum_start": {0.99: 70.9, 0.993: 70.7, 0.996: 70.5, 0.999: 67.6},
    "drop_path": {(0.05, 0.0): 70.9, (0.1, 0.0): 70.9, (0.2, 0.0): 70.9, (0.1, 0.1): 69.0},
    "norm_before_mlp": {"layer_norm": 70.9, "batch_norm": 72.0},
}


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _float_list(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _bool(text):
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    # backbone
    variant: str = "swin_lite"
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 48
    depths: list = dataclasses.field(default_factory=lambda: [2, 2])
    num_heads: list = dataclasses.field(default_factory=lambda: [3, 6])
    window_size: int = 4
    mlp_ratio: float = 4.0
    norm_before_mlp: str = "layer_norm"
    # heads and objective
    proj_hidden: int = 512
    proj_out: int = 128
    tau: float = 0.2
    queue_size: int = 4096
    momentum_start: float = 0.99
    online_drop_path: float = 0.1
    target_drop_path: float = 0.0
    # optimisation
    lr: float = 0.001
    weight_decay: float = 0.05
    exclude_norm_bias: bool = False
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0
    precision: str = "f64"
    # data
    dataset: str = "synthetic_shapes"
    dataset_size: int = 5000
    num_classes: int = 8
    data_seed: int = 7
    test_fraction: float = 0.2
    solarize: bool = True
    # outputs
    output_dir: str = "runs/default"
    checkpoint_every: int = 0
    # evaluation
    probe_epochs: int = 100
    probe_lrs: list = dataclasses.field(default_factory=lambda: [0.5, 0.75, 1.0, 1.25])
    probe_batch_size: int = 256
    probe_aug_copies: int = 4
    knn_k: int = 20
    knn_tau: float = 0.07

    def backbone_config(self):
        return BackboneConfig(self.variant, self.image_size, self.patch_size, self.embed_dim,
                              list(self.depths), list(self.num_heads), self.window_size,
                              self.mlp_ratio, self.norm_before_mlp, 0.0)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def validate(self):
        def need(ok, name, rule):
            if not ok:
                raise ConfigError(f"{name}={getattr(self, name)!r}: {rule}")

        need(self.tau > 0, "tau", "must be positive")
        need(self.queue_size > 0, "queue_size", "must be positive")
        need(0.0 <= self.momentum_start <= 1.0, "momentum_start", "must lie in [0, 1]")
        need(0.0 <= self.online_drop_path < 1.0, "online_drop_path", "must lie in [0, 1)")
        need(0.0 <= self.target_drop_path < 1.0, "target_drop_path", "must lie in [0, 1)")
        need(self.lr > 0, "lr", "must be positive")
        need(self.weight_decay >= 0, "weight_decay", "must be non-negative")
        need(self.batch_size >= 2, "batch_size", "must be at least 2")
        need(self.epochs >= 0, "epochs", "must be non-negative")
        need(self.precision in ("f32", "f64"), "precision", "must be f32 or f64")
        need(self.proj_hidden > 0 and self.proj_out > 0, "proj_hidden", "head sizes must be positive")
        need(self.dataset_size >= 2 * self.batch_size, "dataset_size", "must hold at least two batches")
        need(0.0 < self.test_fraction < 1.0, "test_fraction", "must lie in (0, 1)")
        need(self.checkpoint_every >= 0, "checkpoint_every", "must be non-negative")
        need(self.probe_epochs >= 1, "probe_epochs", "must be at least 1")
        need(len(self.probe_lrs) > 0 and all(lr > 0 for lr in self.probe_lrs), "probe_lrs",
             "must be a non-empty list of positive rates")
        need(self.probe_aug_copies >= 0, "probe_aug_copies", "must be non-negative")
        need(self.knn_k >= 1, "knn_k", "must be at least 1")
        need(self.knn_tau > 0, "knn_tau", "must be positive")
        try:
            self.backbone_config().validate()
        except ConfigError as exc:
            raise ConfigError(f"backbone: {exc}") from None
        return self

    # flat "key = value" text -------------------------------------------

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                value = ",".join(repr(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, **overrides):
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = value
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f for f in fields(cls)}
        defaults = cls()
        parsed = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            default = getattr(defaults, key)
            try:
                if isinstance(default, list):
                    if isinstance(value, str):
                        parse = _float_list if isinstance(default[0], float) else _int_list
                        value = parse(value)
                    else:
                        value = list(value)
                elif isinstance(default, bool):
                    value = _bool(value)
                else:
                    value = type(default)(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: cannot parse {value!r} ({exc})") from None
            parsed[key] = value
        return cls(**parsed).validate()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes).validate()


def load_config(path, **overrides):
    return ExperimentConfig.from_text(Path(path).read_text(), **overrides)


# --------------------------------------------------------------------------
# checkpoints

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


@dataclass
class Checkpoint:
    config: ExperimentConfig
    step: int
    arrays: dict


def save_checkpoint(path, checkpoint):
    buf = io.BytesIO()
    config_bytes = checkpoint.config.to_text().encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(config_bytes)))
    buf.write(config_bytes)
    buf.write(struct.pack("<QI", checkpoint.step, len(checkpoint.arrays)))
    for name, arr in checkpoint.arrays.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ConfigError(f"cannot store {name} with dtype {arr.dtype}")
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(f"checkpoint truncated while reading {what}", offset=len(self.blob))
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    """Parse a checkpoint fully; nothing is applied to any model here."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0)
    version, config_len = r.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    config = ExperimentConfig.from_text(r.take(config_len, "config").decode())
    step, count = r.unpack("<QI", "step")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "entry name")
        name = r.take(name_len, "entry name").decode()
        start = r.pos
        code, ndim = r.unpack("<BB", f"{name} header")
        if code not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}", offset=start)
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = r.take(nbytes, name)
        arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(r.blob):
        raise FormatError("trailing bytes after checkpoint entries", offset=r.pos)
    return Checkpoint(config, step, arrays)


# --------------------------------------------------------------------------
# pre-training

def _dataset_for(config):
    kwargs = {"num_classes": config.num_classes, "count": config.dataset_size,
              "size": config.image_size, "seed": config.data_seed}
    if config.dataset in ("synthetic_shapes", "tiny_natural"):
        return load_dataset(config.dataset, **kwargs)
    return load_dataset(config.dataset)


def prepare_data(config):
    """``(train, test, stats)``; the statistics come from the train split."""
    data = _dataset_for(config)
    if data.image_size != config.image_size:
        raise ConfigError(f"dataset images are {data.image_size}px but image_size={config.image_size}")
    train, test = data.split(config.test_fraction, seed=config.data_seed)
    return train, test, channel_stats(train)


class Pretrainer:
    """All mutable state of one pre-training run."""

    def __init__(self, config, data=None):
        self.config = config.validate()
        self.train_set, self.test_set, self.stats = data or prepare_data(config)
        self.steps_per_epoch = len(self.train_set) // config.batch_size
        if self.steps_per_epoch == 0:
            raise ConfigError("batch_size exceeds the training split")
        self.total_steps = config.epochs * self.steps_per_epoch
        dtype = config.dtype
        self.pair = EncoderPair(config.backbone_config(), np.random.default_rng([config.seed, 0x1417]),
                                config.proj_hidden, config.proj_out, config.online_drop_path,
                                config.target_drop_path, dtype=dtype)
        capacity = min(config.queue_size, len(self.train_set))
        self.queues = (KeyQueue(capacity, config.proj_out, dtype), KeyQueue(capacity, config.proj_out, dtype))
        self.optimizer = AdamW(self.pair.online_parameters(), lr=config.lr,
                               weight_decay=config.weight_decay,
                               exclude_norm_bias=config.exclude_norm_bias)
        self.schedule = MomentumSchedule(config.momentum_start, self.total_steps)
        self.policies = default_policies(config.solarize)
        self.step = 0

    # state <-> checkpoint ---------------------------------------------

    def _model_arrays(self):
        out = {}
        out.update(self.pair.online.state_dict("online."))
        out.update(self.pair.target.state_dict("target."))
        return out

    def checkpoint(self):
        arrays = self._model_arrays()
        for key, arr in self.optimizer.state_arrays().items():
            arrays[f"optim.{key}"] = arr
        for i, q in enumerate(self.queues, 1):
            arrays[f"queue{i}.storage"] = q.storage
            arrays[f"queue{i}.state"] = np.array([q.cursor, q.fill], dtype=np.int64)
        arrays["rng.state"] = np.array([self.config.seed, self.step], dtype=np.int64)
        arrays["norm.mean"] = np.asarray(self.stats.mean, dtype=np.float64)
        arrays["norm.std"] = np.asarray(self.stats.std, dtype=np.float64)
        return Checkpoint(self.config, self.step, {k: np.array(v) for k, v in arrays.items()})

    def restore(self, ckpt):
        """Apply a parsed checkpoint; validates every shape before mutating anything."""
        arrays = ckpt.arrays
        targets = {}
        params = dict(self.pair.online.named_parameters("online."))
        params.update(self.pair.target.named_parameters("target."))
        for name, current in self._model_arrays().items():
            if name not in arrays:
                raise ShapeError(f"checkpoint has no entry for {name}")
            if arrays[name].shape != current.shape:
                raise ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != model shape {current.shape}")
            targets[name] = arrays[name]
        for i, q in enumerate(self.queues, 1):
            if arrays[f"queue{i}.storage"].shape != q.storage.shape:
                raise ShapeError(f"queue{i}: checkpoint shape {arrays[f'queue{i}.storage'].shape} "
                                 f"!= {q.storage.shape}")
        optim = {k[len("optim."):]: v for k, v in arrays.items() if k.startswith("optim.")}
        self.optimizer.load_state_arrays(optim)
        dtype = self.config.dtype
        buffers = {}
        for prefix, enc in (("online.", self.pair.online), ("target.", self.pair.target)):
            buffers.update(_buffer_owners(enc, prefix))
        for name, value in targets.items():
            if name in params:
                params[name].data = value.astype(dtype, copy=True)
            else:
                owner, attr = buffers[name]
                getattr(owner, attr)[...] = value
        for i, q in enumerate(self.queues, 1):
            q.storage[...] = arrays[f"queue{i}.storage"]
            q.cursor, q.fill = (int(v) for v in arrays[f"queue{i}.state"])
        self.stats = NormStats(tuple(float(v) for v in arrays["norm.mean"]),
                               tuple(float(v) for v in arrays["norm.std"]))
        self.step = int(ckpt.step)

    # training ---------------------------------------------------------

    def run(self, until_step=None, on_step=None, checkpoint_dir=None):
        """Train from ``self.step`` to ``until_step`` (default: end of schedule)."""
        stop = self.total_steps if until_step is None else min(until_step, self.total_steps)
        every = self.config.checkpoint_every
        while self.step < stop:
            epoch, batch = divmod(self.step, self.steps_per_epoch)
            n_batches = min(self.steps_per_epoch - batch, stop - self.step)
            batches = iterate_view_batches(self.train_set, self.config.batch_size, self.config.seed,
                                           epoch, self.policies, self.stats, start_batch=batch)
            for _ in range(n_batches):
                v1, v2, _ = next(batches)
                t0 = time.perf_counter()
                rng = np.random.default_rng([self.config.seed, self.step, 0xD9])
                metrics = training_step((v1, v2), self.pair, self.queues, self.optimizer,
                                        self.schedule, self.step, self.config.tau, rng)
                self.step += 1
                metrics["wall_ms"] = (time.perf_counter() - t0) * 1e3
                if on_step is not None:
                    on_step(metrics)
                if checkpoint_dir is not None and every and self.step % every == 0:
                    save_checkpoint(Path(checkpoint_dir) / f"step{self.step:07d}.mbck", self.checkpoint())


def _buffer_owners(module, prefix):
    out = {}
    for name in module.buffer_names:
        out[prefix + name] = (module, name)
    for name, child in module._children():
        if hasattr(child, "buffer_names"):
            out.update(_buffer_owners(child, prefix + name + "."))
    return out


class _MetricsSink:
    """metrics.csv (deterministic columns) plus timing.csv (wall clock)."""

    def __init__(self, out_dir, resume_step=None):
        self.metrics_path = Path(out_dir) / "metrics.csv"
        self.timing_path = Path(out_dir) / "timing.csv"
        if resume_step is None or not self.metrics_path.exists():
            self._reset(self.metrics_path, METRIC_COLUMNS)
            self._reset(self.timing_path, ("step", "wall_ms"))
        else:
            _truncate_rows(self.metrics_path, resume_step)
            if self.timing_path.exists():
                _truncate_rows(self.timing_path, resume_step)
            else:
                self._reset(self.timing_path, ("step", "wall_ms"))

    @staticmethod
    def _reset(path, header):
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(header)

    def __call__(self, m):
        with open(self.metrics_path, "a", newline="") as fh:
            csv.writer(fh).writerow([m["step"], repr(m["loss"]), repr(m["momentum"]), m["queue_fill"], repr(m["lr"])])
        with open(self.timing_path, "a", newline="") as fh:
            csv.writer(fh).writerow([m["step"], f"{m['wall_ms']:.3f}"])


def _truncate_rows(path, step):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < step]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(keep)


def read_metrics(path):
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def run_pretrain(config, resume=None, stop_at_step=None, data=None, log=None):
    """Pre-train and write config.txt, metrics.csv, timing.csv and final.mbck to the output dir.

    ``resume`` is a checkpoint path; its stored config must equal ``config``
    except for ``output_dir``.  Returns the trained :class:`Pretrainer`.
    """
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Pretrainer(config, data)
    ckpt = None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if dataclasses.replace(ckpt.config, output_dir="") != dataclasses.replace(config, output_dir=""):
            raise ConfigError("resume checkpoint was produced by a different configuration")
        trainer.restore(ckpt)
    (out / "config.txt").write_text(config.to_text())
    sink = _MetricsSink(out, resume_step=trainer.step if ckpt is not None else None)

    def on_step(m):
        sink(m)
        if log is not None:
            log(m)

    trainer.run(until_step=stop_at_step, on_step=on_step, checkpoint_dir=out)
    save_checkpoint(out / "final.mbck", trainer.checkpoint())
    return trainer


def backbone_from_checkpoint(ckpt):
    """Rebuild the online backbone of a checkpoint (eval use)."""
    cfg = ckpt.config
    backbone = build_backbone(cfg.backbone_config(), np.random.default_rng(0), dtype=cfg.dtype)
    prefix = "online.backbone."
    params = dict(backbone.named_parameters(prefix))
    buffers = _buffer_owners(backbone, prefix)
    for name in list(params) + list(buffers):
        if name not in ckpt.arrays:
            raise ShapeError(f"checkpoint has no entry for {name}")
        shape = params[name].shape if name in params else getattr(*buffers[name]).shape
        if ckpt.arrays[name].shape != shape:
            raise ShapeError(f"{name}: checkpoint shape {ckpt.arrays[name].shape} != model shape {shape}")
    for name, p in params.items():
        p.data = ckpt.arrays[name].astype(cfg.dtype, copy=True)
    for name, (owner, attr) in buffers.items():
        getattr(owner, attr)[...] = ckpt.arrays[name]
    return backbone


def evaluate(config, backbone, data=None, stats=None, knn=True):
    """Linear probe over ``config.probe_lrs`` plus k-NN on the held-out split."""
    train, test, default_stats = data or prepare_data(config)
    _, report = train_linear_probe(backbone, train, test, stats or default_stats, config.probe_lrs,
                                   config.probe_epochs, config.probe_batch_size,
                                   config.probe_aug_copies, config.seed, config.knn_k,
                                   config.knn_tau, knn=knn)
    return report


# --------------------------------------------------------------------------
# sweeps

SWEEP_AXES = ("tau", "queue_size", "momentum_start", "drop_path", "norm_before_mlp")
AXIS_ALIASES = {"K": "queue_size", "m0": "momentum_start", "dpr": "drop_path", "norm": "norm_before_mlp"}


def parse_sweep_values(axis, text):
    """Comma-separated cell values; drop-path cells are written ``online/target``."""
    axis = AXIS_ALIASES.get(axis, axis)
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ConfigError("sweep needs at least one value")
    try:
        if axis == "drop_path":
            values = []
            for item in items:
                online, target = item.split("/")
                values.append((float(online), float(target)))
        elif axis == "queue_size":
            values = [int(v) for v in items]
        elif axis == "norm_before_mlp":
            values = items
        else:
            values = [float(v) for v in items]
    except ValueError:
        raise ConfigError(f"cannot parse values {text!r} for axis {axis}") from None
    return axis, values


def _cell_changes(axis, value):
    if axis == "drop_path":
        odpr, tdpr = value
        return {"online_drop_path": float(odpr), "target_drop_path": float(tdpr)}
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
    return {axis: value}


def _cell_label(axis, value):
    if axis == "drop_path":
        return f"odpr={value[0]:g} tdpr={value[1]:g}"
    return f"{axis}={value}"


@dataclass
class SweepRow:
    value: object
    linear_top1: float = None
    knn_top1: float = None
    reference_top1: float = None
    error: str = None


@dataclass
class SweepReport:
    axis: str
    rows: list

    def table(self):
        head = f"{'value':<24}{'linear top-1':>14}{'k-NN top-1':>12}{'ImageNet ref.':>14}"
        lines = [f"Ablation over {self.axis} (reference: ImageNet-1K top-1, non-binding)", head, "-" * len(head)]
        for r in self.rows:
            label = _cell_label(self.axis, r.value).split("=", 1)[1] if self.axis != "drop_path" else \
                _cell_label(self.axis, r.value)
            if r.error:
                lines.append(f"{label:<24}  FAILED: {r.error}")
                continue
            ref = "" if r.reference_top1 is None else f"{r.reference_top1:.1f}"
            lin = "" if r.linear_top1 is None else f"{100 * r.linear_top1:.2f}"
            knn = "" if r.knn_top1 is None else f"{100 * r.knn_top1:.2f}"
            lines.append(f"{label:<24}{lin:>14}{knn:>12}{ref:>14}")
        return "\n".join(lines)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["value", "linear_top1", "knn_top1", "reference_top1", "error"])
            for r in self.rows:
                writer.writerow([r.value, r.linear_top1, r.knn_top1, r.reference_top1, r.error or ""])


def run_cell(config, linear=True):
    """Pre-train one config, then probe its online backbone.  Returns (linear, knn) top-1."""
    data = prepare_data(config)
    trainer = run_pretrain(config, data=data)
    backbone = trainer.pair.online.backbone
    if linear:
        report = evaluate(config, backbone, data=data, stats=trainer.stats)
        report.to_csv(Path(config.output_dir) / "eval.csv")
        return report.best_top1, report.knn_top1
    train, test, _ = data
    return None, knn_probe(backbone, train, test, trainer.stats, config.knn_k, config.knn_tau)


def run_sweep(base, axis, values, out_dir=None, linear=True):
    """One pre-train + probe per value; a failing cell is reported, not raised."""
    axis = AXIS_ALIASES.get(axis, axis)
    out_dir = Path(out_dir or base.output_dir)
    rows = []
    reference = IMAGENET_REFERENCE.get(axis, {})
    for i, value in enumerate(values):
        if axis == "drop_path":
            value = tuple(float(v) for v in value)
        row = SweepRow(value, reference_top1=reference.get(value))
        try:
            cell = base.replace(output_dir=str(out_dir / f"cell{i:02d}"), **_cell_changes(axis, value))
            row.linear_top1, row.knn_top1 = run_cell(cell, linear=linear)
        except Exception as exc:  # one cell must not abort the sweep
            row.error = f"{type(exc).__name__}: {exc}"
            (out_dir / f"cell{i:02d}").mkdir(parents=True, exist_ok=True)
            (out_dir / f"cell{i:02d}" / "error.txt").write_text(traceback.format_exc())
        rows.append(row)
    report = SweepReport(axis, rows)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_dir / "sweep.csv")
    (out_dir / "sweep.txt").write_text(report.table() + "\n")
    return report
