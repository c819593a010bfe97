"""Gradient-check harness: package autodiff on one side, finite differences on the other."""

from __future__ import annotations

import numpy as np

from cvm_cervix.tensor import GradTape, Tensor, backward
from oracles import numeric_grad, rel_error

FD_STEP = 1e-5
ACCEPTANCE_LINES: list[str] = []


def gradcheck(fn, arrays, seed=0, floor=1e-6):
    """Max elementwise relative error of d/dx sum(fn(x) * R) over every input entry.

    ``arrays`` are float64 and perturbed in place by the numeric side.
    """
    rng = np.random.default_rng(seed + 10_000)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    probe = fn(*[Tensor(a) for a in arrays]).data
    weights = rng.standard_normal(probe.shape)

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape:
        loss = (fn(*tensors) * Tensor(weights)).sum()
    grads = backward(loss, tape, leaves=tensors)

    def scalar():
        return float((fn(*[Tensor(a) for a in arrays]).data * weights).sum())

    worst = 0.0
    for t, a in zip(tensors, arrays):
        num = numeric_grad(scalar, a, FD_STEP)
        worst = max(worst, float(rel_error(grads[t], num, floor).max(initial=0.0)))
    return worst


def param_gradcheck(model, loss_fn, count=10, seed=0, floor=1e-6):
    """Compare tape gradients with central differences on ``count`` random parameter entries.

    ``loss_fn()`` must rebuild the scalar loss from the model's current weights.
    """
    named = model.named_parameters()
    params = [p for _, p in named]
    with GradTape() as tape:
        loss = loss_fn()
    grads = backward(loss, tape, leaves=params)

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = []
    for _ in range(count):
        name, p = named[rng.integers(len(named))]
        flat = p.data.reshape(-1)
        assert np.shares_memory(flat, p.data)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + FD_STEP
        up = float(loss_fn().data)
        flat[i] = orig - FD_STEP
        down = float(loss_fn().data)
        flat[i] = orig
        num = (up - down) / (2 * FD_STEP)
        err = float(rel_error(grads[p].reshape(-1)[i], num, floor))
        checked.append((name, i, err))
        worst = max(worst, err)
    return worst, checked


def record_criterion(number, title, ok, detail):
    """Print and remember one PASS/FAIL line; the assertion is left to the caller."""
    line = f"criterion {number} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
