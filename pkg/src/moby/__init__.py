"""MoBY self-supervised learning with a Swin-lite backbone, on numpy."""
from .backbone import BackboneConfig, build_backbone
from .core import EncoderPair, KeyQueue, MomentumSchedule, contrastive_loss, momentum_at_step, training_step
from .data import default_policies, load_dataset, synthetic_shapes, tiny_natural
from .errors import ConfigError, ContractError, FormatError, NumericalError, ShapeError
from .evaluation import knn_probe, train_linear_probe
from .experiment import ExperimentConfig, load_checkpoint, run_pretrain, run_sweep, save_checkpoint
from .optim import SGD, AdamW

__version__ = "0.1.0"
