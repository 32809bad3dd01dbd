"""
Reverse-mode autodiff in a few lines
====================================

Every op records its parents and a backward closure; ``backward`` walks the
graph in reverse topological order.
"""

import numpy as np

from moby import tensor as T
from moby.tensor import Tensor

rng = np.random.default_rng(0)

# a tiny softmax classifier
x = Tensor(rng.standard_normal((5, 4)))
W = Tensor(rng.standard_normal((4, 3)) * 0.1, requires_grad=True)
b = Tensor(np.zeros(3), requires_grad=True)
labels = np.array([0, 2, 1, 1, 0])

loss = T.cross_entropy(x @ W + b, labels)
T.backward(loss)
print("loss", float(loss.data))
print("dL/db", b.grad)

# the same gradient by central differences
h = 1e-6
numeric = np.zeros(3)
for i in range(3):
    for sign in (1, -1):
        b2 = b.data.copy()
        b2[i] += sign * h
        numeric[i] += sign * float(T.cross_entropy(Tensor(x.data @ W.data + b2), labels).data) / (2 * h)
print("numeric  ", numeric)

# no_grad builds no graph at all
with T.no_grad():
    y = x @ W
print("recorded under no_grad:", y.requires_grad)

# non-finite values are traced back to the op that made them
with np.errstate(divide="ignore", invalid="ignore"):
    z = T.log(Tensor(np.array([1.0, 0.0, -1.0]), requires_grad=True))
print("first non-finite op:", T.first_nonfinite_op(z))
