"""Pretraining loop: batching, the optimizer step, metrics, checkpoints.

Every random decision is keyed by (run seed, purpose, step), so resuming
from a checkpoint replays the exact remaining trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .. import numerics as nm
from ..backbone import init_backbone
from ..configs import LossConfig, OptimConfig, ViewPlan
from .losses import init_projector, student_projection, teacher_target, total_loss
from .optim import AdamW, ema_update, make_teacher, schedules
from .views import GLOBAL, augment_view, build_views

__all__ = ["TrainState", "TrainFault", "init_state", "train_step", "train",
           "save_checkpoint", "load_checkpoint"]


class TrainFault(RuntimeError):
    """A loss component went non-finite; carries the component name."""


@dataclass
class TrainState:
    params: dict
    teacher: dict
    optimizer: AdamW
    groupings: dict
    suite: list
    arch: object
    plan: ViewPlan = field(default_factory=ViewPlan)
    loss_cfg: LossConfig = field(default_factory=LossConfig)
    optim_cfg: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    step: int = 0
    total_steps: int = 1000
    skipped: int = 0


def init_state(seed, suite, arch, total_steps, plan=None, loss_cfg=None,
               optim_cfg=None):
    params = {}
    rng = nm.stream(seed, "init")
    groupings = init_backbone(params, rng, suite, arch)
    init_projector(params, rng, "proj", arch.d_trunk, arch)
    optim_cfg = optim_cfg or OptimConfig()
    return TrainState(
        params=params, teacher=make_teacher(params),
        optimizer=AdamW(params, optim_cfg), groupings=groupings,
        suite=list(suite), arch=arch, plan=plan or ViewPlan(),
        loss_cfg=loss_cfg or LossConfig(), optim_cfg=optim_cfg,
        seed=seed, total_steps=total_steps)


def _embedding_variance(stacked):
    return float(stacked.var(axis=0).mean())


def _grad_norm(params):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def train_step(state, batch):
    """One optimizer step over a batch of MultiSamples; returns metrics."""
    step = state.step
    projections, targets, flat = [], [], []
    for b, sample in enumerate(batch):
        if len(sample.available) < state.plan.global_sensor_count:
            state.skipped += 1
            continue
        views = build_views(sample, state.plan,
                            nm.derive_seed(state.seed, "views", step, b))
        views = [augment_view(v, nm.derive_seed(state.seed, "aug", step, b, i))
                 for i, v in enumerate(views)]
        zs = [student_projection(state.params, state.suite, state.groupings,
                                 v, state.arch) for v in views]
        h = teacher_target(state.teacher, state.suite, state.groupings,
                           [v for v in views if v.role == GLOBAL], state.arch)
        projections.append(zs)
        targets.append(h)
        flat.extend(zs)
    if not projections:
        raise TrainFault("every sample in the batch lacked enough sensors")

    stacked = nm.stack(flat, axis=0)
    loss, inv, reg = total_loss(projections, targets, stacked,
                                state.loss_cfg, state.seed, step)
    for name, value in (("invariance", inv), ("regularizer", reg),
                        ("total", loss)):
        if value is not None and not np.isfinite(value.data):
            raise TrainFault(f"non-finite {name} loss at step {step}")

    nm.backward(loss)
    sched = schedules(step + 1, state.total_steps, state.optim_cfg)
    gnorm = _grad_norm(state.params)
    state.optimizer.step(state.params, sched["lr"])
    ema_update(state.teacher, state.params, sched["momentum"])
    state.step += 1
    return {
        "step": state.step,
        "lr": sched["lr"],
        "momentum": sched["momentum"],
        "loss": float(loss.data),
        "inv": float(inv.data),
        "sigreg": float(reg.data) if reg is not None else 0.0,
        "grad_norm": gnorm,
        "proj_variance": _embedding_variance(stacked.data),
    }


def train(state, samples, n_steps, batch_size=2, metrics_path=None,
          log_every=1):
    """Run n_steps, cycling deterministically through the samples."""
    history = []
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        for _ in range(n_steps):
            order = nm.stream(state.seed, "batch", state.step).permutation(
                len(samples))
            batch = [samples[int(i)] for i in order[:batch_size]]
            metrics = train_step(state, batch)
            history.append(metrics)
            if sink and metrics["step"] % log_every == 0:
                sink.write(json.dumps(metrics) + "\n")
    finally:
        if sink:
            sink.close()
    return history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, state):
    named = {}
    for k, p in state.params.items():
        named[f"student/{k}"] = p.data
    for k, p in state.teacher.items():
        named[f"teacher/{k}"] = p.data
    for k, m in state.optimizer.m.items():
        named[f"opt_m/{k}"] = m
    for k, v in state.optimizer.v.items():
        named[f"opt_v/{k}"] = v
    named["meta/scalars"] = np.array([state.step, state.total_steps,
                                      state.seed, state.optimizer.t,
                                      state.skipped], dtype=np.float64)
    nm.write_tensors(path, named)


def load_checkpoint(path, suite, arch, plan=None, loss_cfg=None,
                    optim_cfg=None):
    named = nm.read_tensors(path)
    meta = named["meta/scalars"]
    step, total_steps, seed, opt_t, skipped = (int(x) for x in meta)
    state = init_state(seed, suite, arch, total_steps, plan=plan,
                       loss_cfg=loss_cfg, optim_cfg=optim_cfg)
    for k, p in state.params.items():
        p.data[...] = named[f"student/{k}"]
    for k, p in state.teacher.items():
        p.data[...] = named[f"teacher/{k}"]
    for k in state.optimizer.m:
        state.optimizer.m[k][...] = named[f"opt_m/{k}"]
        state.optimizer.v[k][...] = named[f"opt_v/{k}"]
    state.optimizer.t = opt_t
    state.step = step
    state.skipped = skipped
    return state
