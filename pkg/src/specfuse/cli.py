"""Command-line entry points.

Commands: gen-data, corpus-sim, pretrain, probe, gradcheck, describe.
Configuration is plain `section.key=value` pairs on the command line; every
key has a default and unknown keys are rejected. Each run echoes its fully
resolved configuration next to its artifacts.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric fault,
5 verification failure.
"""

from __future__ import annotations

import sys
from pathlib import Path

from . import backbone as bb
from . import corpus as cs
from . import downstream as ds
from . import numerics as nm
from . import pretrain as pt
from . import synth
from .configs import LossConfig, OptimConfig, ViewPlan, arch_preset

__all__ = ["main", "parse_config", "ConfigError", "DEFAULTS"]

COMMANDS = ("gen-data", "corpus-sim", "pretrain", "probe", "gradcheck",
            "describe")

DEFAULTS = {
    "scale": "desk",
    "seed": 0,
    "out": "run",
    "data.seed": 1,
    "data.count": 8,
    "data.path": "",
    "pretrain.steps": 50,
    "pretrain.total": 0,          # 0 -> same as steps
    "pretrain.batch": 2,
    "pretrain.resume": "",
    "loss.lam": 0.015,
    "loss.directions": 64,
    "loss.freqs": 17,
    "optim.lr": 1e-5,
    "optim.wd": 0.05,
    "optim.warmup": 0.05,
    "plan.globals": 2,
    "plan.locals": 4,
    "plan.sensors": 4,
    "corpus.locations": 300,
    "corpus.emit_only_target": 0,  # 0 -> keep everything
    "probe.checkpoint": "",
    "probe.count": 6,
    "probe.epochs": 20,
    "probe.classes": 6,
    "probe.width": 32,
    "gradcheck.tolerance": 1e-4,
    "gradcheck.coords": 2,
}


class ConfigError(ValueError):
    """Unknown key, malformed pair, or out-of-range value."""


class VerificationFailure(RuntimeError):
    """A checked numeric bound was exceeded."""


def parse_config(pairs):
    cfg = dict(DEFAULTS)
    for raw in pairs:
        if "=" not in raw:
            raise ConfigError(f"expected key=value, got {raw!r}")
        key, value = raw.split("=", 1)
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        default = DEFAULTS[key]
        try:
            if isinstance(default, bool):
                cfg[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                cfg[key] = int(value)
            elif isinstance(default, float):
                cfg[key] = float(value)
            else:
                cfg[key] = value
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return cfg


def _echo_config(cfg, command, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}"]
    lines += [f"{k}={cfg[k]}" for k in sorted(cfg)]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _loss_cfg(cfg):
    return LossConfig(lam=cfg["loss.lam"],
                      sigreg_directions=cfg["loss.directions"],
                      sigreg_freqs=cfg["loss.freqs"])


def _optim_cfg(cfg):
    return OptimConfig(peak_lr=cfg["optim.lr"], weight_decay=cfg["optim.wd"],
                       warmup_frac=cfg["optim.warmup"])


def _plan(cfg):
    return ViewPlan(n_global=cfg["plan.globals"], n_local=cfg["plan.locals"],
                    global_sensor_count=cfg["plan.sensors"])


def _load_samples(cfg, suite):
    if cfg["data.path"]:
        return synth.read_dataset(cfg["data.path"])
    return synth.make_samples(cfg["data.seed"], suite, cfg["data.count"])


def cmd_gen_data(cfg, out_dir):
    suite = synth.make_sensor_suite(cfg["scale"])
    samples = synth.make_samples(cfg["data.seed"], suite, cfg["data.count"])
    synth.write_dataset(samples, out_dir / "dataset")
    print(f"wrote {len(samples)} locations to {out_dir / 'dataset'}")
    return 0


def cmd_corpus_sim(cfg, out_dir):
    records, entries = cs.build_archive(cfg["data.seed"],
                                        cfg["corpus.locations"])
    targets = {}
    if cfg["corpus.emit_only_target"]:
        targets[("emit",)] = cfg["corpus.emit_only_target"]
    result = cs.run_pipeline(records, entries, targets=targets,
                             seed=cfg["seed"])
    violations = cs.validate_corpus(result, records)
    cs.write_records(out_dir / "raw_records.txt", records)
    kept = [r for recs in result.kept_records.values()
            for rs in recs.values() for r in rs]
    cs.write_records(out_dir / "kept_records.txt", kept)
    summary = cs.summarize(result)
    (out_dir / "summary.txt").write_text(
        summary + f"\nvalidator violations: {len(violations)}\n")
    print(summary)
    if violations:
        raise VerificationFailure(
            f"{len(violations)} corpus rule violations")
    return 0


def cmd_pretrain(cfg, out_dir):
    suite = synth.make_sensor_suite(cfg["scale"])
    arch = arch_preset(cfg["scale"])
    total = cfg["pretrain.total"] or cfg["pretrain.steps"]
    if cfg["pretrain.resume"]:
        state = pt.load_checkpoint(cfg["pretrain.resume"], suite, arch,
                                   plan=_plan(cfg), loss_cfg=_loss_cfg(cfg),
                                   optim_cfg=_optim_cfg(cfg))
        if cfg["pretrain.total"]:
            state.total_steps = total
    else:
        state = pt.init_state(cfg["seed"], suite, arch, total,
                              plan=_plan(cfg), loss_cfg=_loss_cfg(cfg),
                              optim_cfg=_optim_cfg(cfg))
    samples = _load_samples(cfg, suite)
    history = pt.train(state, samples, cfg["pretrain.steps"],
                       batch_size=cfg["pretrain.batch"],
                       metrics_path=str(out_dir / "metrics.jsonl"))
    pt.save_checkpoint(str(out_dir / "checkpoint.bin"), state)
    last = history[-1]
    print(f"step {last['step']}: loss {last['loss']:.6f} "
          f"(inv {last['inv']:.6f}, sigreg {last['sigreg']:.6f})")
    return 0


def cmd_probe(cfg, out_dir):
    suite = synth.make_sensor_suite(cfg["scale"])
    arch = arch_preset(cfg["scale"])
    if cfg["probe.checkpoint"]:
        state = pt.load_checkpoint(cfg["probe.checkpoint"], suite, arch)
        params, groupings = state.params, state.groupings
    else:
        params = {}
        groupings = bb.init_backbone(params, nm.stream(cfg["seed"], "init"),
                                     suite, arch)
    data = ds.make_probe_dataset(cfg["data.seed"], suite,
                                 count=cfg["probe.count"],
                                 n_classes=cfg["probe.classes"])
    head, report = ds.train_probe(data, params, suite, groupings, arch,
                                  n_classes=cfg["probe.classes"],
                                  epochs=cfg["probe.epochs"],
                                  head_width=cfg["probe.width"],
                                  seed=cfg["seed"])
    nm.write_tensors(str(out_dir / "head.bin"),
                     {k: p.data for k, p in head.items()})
    table = ds.evaluation_report(report)
    (out_dir / "evaluation.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_gradcheck(cfg, out_dir):
    """Finite-difference audit of the two training losses.

    Checks the full pretraining objective (through encoder, projector and
    regularizer) and the probe-head objective against central differences
    over a seeded subsample of parameters. The denominator floor sits above
    the cancellation noise of the difference stencil so that exact-zero
    gradient directions are not reported as spurious failures.
    """
    suite = synth.make_sensor_suite(cfg["scale"])
    arch = arch_preset(cfg["scale"])
    plan = ViewPlan(n_global=2, n_local=6, global_sensor_count=4)
    state = pt.init_state(cfg["seed"], suite, arch, 10, plan=plan,
                          loss_cfg=_loss_cfg(cfg))
    sample = synth.make_samples(cfg["data.seed"], suite, 1)[0]
    views = pt.build_views(sample, plan,
                           nm.derive_seed(cfg["seed"], "views", 0, 0))
    views = [pt.augment_view(v, nm.derive_seed(cfg["seed"], "aug", 0, 0, i))
             for i, v in enumerate(views)]
    target = pt.teacher_target(state.teacher, suite, state.groupings,
                               [v for v in views if v.role == pt.GLOBAL],
                               arch)

    def f_pretrain():
        zs = [pt.student_projection(state.params, suite, state.groupings,
                                    v, arch) for v in views]
        loss, _, _ = pt.total_loss([zs], [target], nm.stack(zs, axis=0),
                                   state.loss_cfg, cfg["seed"])
        return loss

    # the objective is O(10), so central differences carry ~1e-10 of
    # cancellation noise; the floor sits two decades above that
    names = sorted(state.params)[::9]
    err_pre = nm.grad_check(f_pretrain, [state.params[n] for n in names],
                            eps=1e-5,
                            max_coords_per_param=cfg["gradcheck.coords"],
                            seed=cfg["seed"], floor=1e-5)
    print(f"pretraining loss: max relative gradient error {err_pre:.3e}")

    data = ds.make_probe_dataset(cfg["data.seed"], suite, count=1,
                                 n_classes=cfg["probe.classes"])
    rasters, labels = data[0]
    with nm.no_grad():
        _, pyr = bb.encode(state.params, suite, state.groupings, rasters,
                           arch)
    head = {}
    ds.init_seg_head(head, nm.stream(cfg["seed"], "seg-head"), "head",
                     [m.dim for m in pyr.maps], cfg["probe.classes"],
                     width=cfg["probe.width"])

    def f_head():
        logits = ds.seg_head_forward(head, "head", pyr)
        return ds._cross_entropy(logits, labels, cfg["probe.classes"])

    err_head = nm.grad_check(f_head, [head[n] for n in sorted(head)],
                             eps=1e-5,
                             max_coords_per_param=cfg["gradcheck.coords"],
                             seed=cfg["seed"], floor=1e-6)
    print(f"probe-head loss:  max relative gradient error {err_head:.3e}")

    err = max(err_pre, err_head)
    (out_dir / "gradcheck.txt").write_text(
        f"pretrain {err_pre:.6e}\nprobe_head {err_head:.6e}\n")
    if err > cfg["gradcheck.tolerance"]:
        raise VerificationFailure(
            f"gradient error {err:.3e} above "
            f"{cfg['gradcheck.tolerance']:.1e}")
    return 0


def cmd_describe(cfg, out_dir):
    suite = synth.make_sensor_suite(cfg["scale"])
    arch = arch_preset(cfg["scale"])
    params = {}
    bb.init_backbone(params, nm.stream(cfg["seed"], "init"), suite, arch)
    report = bb.format_describe(bb.describe(params, suite))
    print(report)
    (out_dir / "describe.txt").write_text(report + "\n")
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "corpus-sim": cmd_corpus_sim,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "gradcheck": cmd_gradcheck,
    "describe": cmd_describe,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(__doc__)
        print("commands:", ", ".join(COMMANDS))
        return 0 if argv else 2
    command, pairs = argv[0], argv[1:]
    try:
        if command not in COMMANDS:
            raise ConfigError(f"unknown command {command!r}")
        cfg = parse_config(pairs)
        if cfg["scale"] not in ("paper", "desk"):
            raise ConfigError(f"unknown scale {cfg['scale']!r}")
        out_dir = Path(cfg["out"])
        _echo_config(cfg, command, out_dir)
        return _HANDLERS[command](cfg, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (synth.DatasetError, nm.ContainerError, FileNotFoundError,
            NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (nm.NumericFault, pt.TrainFault) as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 4
    except VerificationFailure as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
