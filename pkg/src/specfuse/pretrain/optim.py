"""AdamW with decoupled weight decay, cosine schedules, and EMA updates."""

from __future__ import annotations

import math

import numpy as np

from .. import numerics as nm

__all__ = ["AdamW", "schedules", "ema_update", "make_teacher"]


class AdamW:
    """Decoupled-weight-decay Adam over a flat name -> Tensor dict."""

    def __init__(self, params, config):
        self.config = config
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, params, lr):
        cfg = self.config
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k] = b1 * self.m[k] + (1 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            p.data -= lr * (update + cfg.weight_decay * p.data)
            p.grad = None


def schedules(step, total, config):
    """Learning rate (linear warmup, cosine decay to 0) and EMA momentum."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warmup = max(1, round(config.warmup_frac * total))
    if step <= warmup:
        lr = config.peak_lr * step / warmup
    else:
        frac = (step - warmup) / (total - warmup)
        lr = config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    span = config.ema_end - config.ema_start
    momentum = config.ema_end - span * 0.5 * (1.0 + math.cos(
        math.pi * step / total))
    return {"lr": lr, "momentum": momentum}


def make_teacher(params):
    """Frozen copies of every parameter; shapes mirror the student."""
    return {k: nm.tensor(p.data.copy()) for k, p in params.items()}


def ema_update(teacher, student, m):
    """teacher <- m * teacher + (1 - m) * student, in place."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum {m} outside [0, 1]")
    if set(teacher) != set(student):
        raise nm.ShapeError("teacher/student parameter names differ")
    for k, t in teacher.items():
        s = student[k]
        if t.data.shape != s.data.shape:
            raise nm.ShapeError(f"shape mismatch for {k}")
        t.data *= m
        t.data += (1.0 - m) * s.data
    return teacher
