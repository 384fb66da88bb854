"""
The tape-based autodiff engine
==============================

Every trainable computation in voxseg is recorded on a Graph: binding a
Parameter yields a tensor node, operations append nodes, and one backward
sweep returns a gradient per bound parameter. This script records a tiny
expression, differentiates it, and confirms the result against a central
finite difference.
"""

import numpy as np

from voxseg.autodiff import Graph, Parameter, mul, tsum
from voxseg.ops import relu, softmax_channel

# a miniature "network": y = sum(softmax(relu(w * x)) * target)
rng = np.random.default_rng(0)
x = rng.standard_normal((1, 3, 2, 2, 2))
target = rng.random((1, 3, 2, 2, 2))
w = Parameter(rng.standard_normal((1, 3, 2, 2, 2)), name="w")

def objective(w_value):
    g = Graph()
    w.data = w_value
    wx = mul(g.param(w), x)
    probs = softmax_channel(relu(wx))
    loss = tsum(mul(probs, target))
    return g, loss

g, loss = objective(w.data.copy())
print(f"recorded {len(g)} tape nodes, loss = {loss.item():.6f}")

grads = g.backward(loss)
analytic = grads[w]
print(f"gradient shape {analytic.shape}, |grad| max {np.abs(analytic).max():.4f}")

# central finite difference on three random coordinates
h = 1e-6
base = w.data.copy()
for _ in range(3):
    idx = tuple(int(rng.integers(0, s)) for s in base.shape)
    bumped = base.copy(); bumped[idx] += h
    _, up = objective(bumped)
    bumped[idx] -= 2 * h
    _, down = objective(bumped)
    fd = (up.item() - down.item()) / (2 * h)
    print(f"  coord {idx}: analytic {analytic[idx]:+.8f}  fd {fd:+.8f}  "
          f"|diff| {abs(analytic[idx] - fd):.2e}")
w.data = base

# parameters bind once per graph: two forwards accumulate into one gradient
g = Graph()
node_a, node_b = g.param(w), g.param(w)
print(f"same Parameter bound twice -> same node: {node_a.nid == node_b.nid}")
