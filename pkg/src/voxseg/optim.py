"""Adam optimization and the one-step training transaction: forward both
tasks on one tape, mean the task losses, backward once (shared-encoder
gradients accumulate), and apply a single Adam update."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradMap, Graph
from .errors import ConfigError, GraphError
from .losses import LossConfig, loss_for, multitask_loss
from .network import MultiTaskNet, forward_fitted
from .ops import softmax_channel


class Adam:
    """Adam with bias correction; moment buffers are keyed by parameter uid
    so state follows parameters across steps."""

    def __init__(self, lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads: GradMap) -> None:
        """Update every parameter in place; every parameter must have a
        gradient (a missing one is a wiring bug, not a zero)."""
        params = list(params)
        for p in params:
            if p not in grads:
                raise GraphError(
                    f"adam_step: no gradient for parameter {p.name or p.uid!r}; "
                    "the loss may not reach it")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p in params:
            g = np.asarray(grads[p], dtype=p.data.dtype)
            m = self.m.get(p.uid)
            if m is None:
                m = np.zeros_like(p.data)
                self.m[p.uid] = m
                self.v[p.uid] = np.zeros_like(p.data)
            v = self.v[p.uid]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            mhat = m / bias1
            vhat = v / bias2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(params, grads: GradMap, state: Adam) -> Adam:
    """Functional spelling of Adam.step; returns the advanced state."""
    state.step(params, grads)
    return state


@dataclass
class StepMetrics:
    task_losses: dict = field(default_factory=dict)
    total_loss: float = 0.0


def train_step(net: MultiTaskNet, batch_kidney, batch_liver,
               loss_cfg: LossConfig, adam: Adam) -> StepMetrics:
    """One optimization step. Each batch is an (image, labels) pair matched
    positionally to the network's task list; pass None for the second batch
    of a single-task network. Both forwards share one tape, the total loss
    is the mean of the task losses, and one backward feeds one Adam step.
    """
    batches = [b for b in (batch_kidney, batch_liver) if b is not None]
    if len(batches) != len(net.tasks):
        raise ConfigError(
            f"train_step: got {len(batches)} batches for {len(net.tasks)} tasks")

    g = Graph()
    metrics = StepMetrics()
    losses = []
    for task, (image, labels) in zip(net.tasks, batches):
        logits = forward_fitted(net, g, g.leaf(image), task.name, mode="train")
        probs = softmax_channel(logits)
        loss = loss_for(loss_cfg, probs, np.asarray(labels), task.num_classes)
        metrics.task_losses[task.name] = loss.item()
        losses.append(loss)
    total = multitask_loss(losses)
    metrics.total_loss = total.item()
    grads = g.backward(total)
    adam.step(net.parameters(), grads)
    return metrics
