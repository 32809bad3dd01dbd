"""Parameter containers and the small set of layers the models need."""
import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class Parameter(Tensor):
    """A named, trainable leaf tensor.

    Target-encoder copies are Parameters with ``requires_grad=False``.
    """

    __slots__ = ()

    def __init__(self, data, requires_grad=True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


class Module:
    """Base class; parameters and buffers are discovered from attributes.

    Attribute insertion order defines parameter order, so name paths are
    stable for a given architecture.  Attributes listed in ``buffer_names``
    are non-trainable arrays (e.g. running statistics) saved with the weights.
    """

    buffer_names = ()

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{name}.{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix=""):
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def state_dict(self, prefix=""):
        state = {name: p.data for name, p in self.named_parameters(prefix)}
        state.update(self.named_buffers(prefix))
        return state

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag):
        for p in self.parameters():
            p.requires_grad = flag
        return self


def trunc_normal(rng, shape, std=0.02, dtype=np.float64):
    """Normal(0, std) truncated at two standard deviations."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True, dtype=np.float64):
        self.weight = Parameter(trunc_normal(rng, (in_features, out_features), dtype=dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float64):
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x, training=False):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm(Module):
    """Channels-last batch norm; statistics pooled over all leading axes."""

    buffer_names = ("running_mean", "running_var")

    def __init__(self, dim, eps=1e-5, momentum=0.1, dtype=np.float64):
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x, training=False):
        return T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            training, self.momentum, self.eps)


def make_norm(kind, dim, dtype=np.float64):
    if kind == "layer_norm":
        return LayerNorm(dim, dtype=dtype)
    if kind == "batch_norm":
        return BatchNorm(dim, dtype=dtype)
    raise ConfigError(f"unknown norm kind {kind!r}")
