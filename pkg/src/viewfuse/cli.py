"""Command line front end.

Subcommands: train, eval, ablate, sweep, gen-scenes, inspect-message.

Everything a run emits is a deterministic function of (config, seed) except
the sidecar log, which is the only place timestamps are written. Exit codes
are part of the contract so scripts can branch on the failure class:

    0  success
    2  invalid config or command line (the message names the field)
    3  training hit a non-finite loss
    4  checkpoint fingerprint does not match the config
    5  ablate needs a checkpoint that does not exist (pass --train-missing)
"""

import argparse
import csv
import io
import json
import re
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import comms
from .config import (ConfigError, ExperimentConfig, config_to_dict,
                     fingerprint, load_config, save_config)
from .eval import (EvalReport, LADDER, ablation_ladder, evaluate_scenes,
                   run_fusion, run_late_fusion, run_no_collaboration, sweep)
from .model import (CheckpointError, FingerprintError, PipelineFlags,
                    PipelineModel, TrainingError, load_checkpoint,
                    save_checkpoint, train_step)
from .model import FLAGS_FULL
from .scene import generate_scene, scene_to_dict
from .tensor import Adam

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONFINITE = 3
EXIT_FINGERPRINT = 4
EXIT_MISSING_CHECKPOINT = 5

# rng stream tags for the training schedule; scene generation has its own
TAG_BATCH = 11
TAG_TRAIN_NOISE = 12
TAG_INIT = 7

FLAG_NAMES = ("ifa", "cdqa", "mask", "late_fuse")


def _sidecar_logger(path: Path):
    """Appends timestamped lines; the one output stream allowed wall time."""
    def log(msg: str) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(f"{time.strftime('%Y-%m-%d %H:%M:%S')} {msg}\n")
    return log


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "steps", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if getattr(args, "c_thre", None) is not None:
        cfg = replace(cfg, model=replace(cfg.model, c_thre=args.c_thre))
    if getattr(args, "share_mode", None) is not None:
        cfg = replace(cfg, share_mode=args.share_mode)
    cfg.validate()
    return cfg


def _parse_flags(spec: str) -> PipelineFlags:
    names = [s.strip() for s in spec.split(",") if s.strip()]
    for n in names:
        if n not in FLAG_NAMES:
            raise ConfigError(
                f'unknown flag "{n}" in --flags; pick from {",".join(FLAG_NAMES)}')
    chosen = set(names)
    try:
        return PipelineFlags(ifa="ifa" in chosen, cdqa="cdqa" in chosen,
                             mask="mask" in chosen,
                             late_fuse="late_fuse" in chosen)
    except ValueError as e:
        raise ConfigError(f"--flags: {e}") from None


def _eval_flags(args, cfg: ExperimentConfig) -> PipelineFlags:
    if getattr(args, "flags", None):
        flags = _parse_flags(args.flags)
    else:
        flags = FLAGS_FULL
    if cfg.share_mode == "fullmap" and flags.ifa:
        flags = replace(flags, mask=False)
    return flags


def _parse_values(spec: str, integer: bool = False) -> list:
    """Sweep grids: "a:b:n" is n evenly spaced points, else a comma list."""
    m = re.fullmatch(r"([^:,]+):([^:,]+):(\d+)", spec.strip())
    try:
        if m:
            n = int(m.group(3))
            if n < 1:
                raise ConfigError(f'sweep spec "{spec}" needs at least 1 point')
            vals = np.linspace(float(m.group(1)), float(m.group(2)), n)
            return [int(round(v)) for v in vals] if integer else [float(v) for v in vals]
        vals = [float(s) for s in spec.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f'cannot parse sweep values "{spec}"') from None
    if not vals:
        raise ConfigError(f'cannot parse sweep values "{spec}"')
    return [int(round(v)) for v in vals] if integer else vals


def _train_scenes(cfg: ExperimentConfig) -> list:
    t = cfg.train
    return [generate_scene(cfg.scene, t.scene_seed0 + i)
            for i in range(t.n_scenes)]


def _eval_scenes(cfg: ExperimentConfig) -> list:
    e = cfg.eval
    return [generate_scene(cfg.scene, e.scene_seed0 + i)
            for i in range(e.n_scenes)]


def _fresh_model(cfg: ExperimentConfig) -> PipelineModel:
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.train.seed, TAG_INIT]))
    return PipelineModel(cfg.model, rng)


def _read_loss_rows(path: Path) -> list[str]:
    if not path.exists():
        return []
    lines = path.read_text(encoding="utf-8").splitlines()
    return lines[1:] if lines and lines[0] == "step,loss" else []


def _train_model(cfg: ExperimentConfig, flags: PipelineFlags, out: Path,
                 ckpt_name: str, loss_name: str, log) -> PipelineModel:
    """Train (or resume) one model; writes checkpoint + per-step loss CSV."""
    out.mkdir(parents=True, exist_ok=True)
    fp = fingerprint(cfg)
    model = _fresh_model(cfg)
    opt = Adam(model.params(), lr=cfg.train.lr)
    ckpt = out / ckpt_name
    loss_csv = out / loss_name
    start = 0
    kept: list[str] = []
    if ckpt.exists():
        meta = load_checkpoint(ckpt, model, opt, expect_fingerprint=fp)
        start = int(meta.get("step", 0))
        kept = _read_loss_rows(loss_csv)[:start]
        log(f"resumed {ckpt_name} at step {start}")
    steps = cfg.train.steps
    scenes = _train_scenes(cfg)
    log(f"training {ckpt_name}: steps {start}..{steps}, "
        f"{len(scenes)} scenes, flags {flags}")
    with open(loss_csv, "w", encoding="utf-8", newline="") as fh:
        fh.write("step,loss\n")
        for row in kept:
            fh.write(row + "\n")
        fh.flush()
        seed = cfg.train.seed
        batch = min(cfg.train.batch, len(scenes))
        for step in range(start, steps):
            # per-step streams make a resumed run equal a straight one
            brng = np.random.default_rng(
                np.random.SeedSequence([seed, TAG_BATCH, step]))
            idx = brng.choice(len(scenes), size=batch, replace=False)
            nrng = np.random.default_rng(
                np.random.SeedSequence([seed, TAG_TRAIN_NOISE, step]))
            loss = train_step([scenes[i] for i in idx], model, opt, flags,
                              noise_sigma=cfg.train.noise_sigma,
                              noise_rng=nrng, detector_mode="train")
            fh.write(f"{step},{loss:.17g}\n")
            fh.flush()
            done = step + 1
            if done % cfg.train.checkpoint_every == 0 and done < steps:
                save_checkpoint(ckpt, model, opt, fingerprint=fp, step=done)
            if done % 25 == 0 or done == steps:
                log(f"{ckpt_name} step {done}/{steps} loss {loss:.6f}")
    save_checkpoint(ckpt, model, opt, fingerprint=fp, step=max(steps, start))
    return model


def _load_model(cfg: ExperimentConfig, path: Path) -> PipelineModel:
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    model = _fresh_model(cfg)
    load_checkpoint(path, model, expect_fingerprint=fingerprint(cfg))
    return model


def _safe_name(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.+-]", "_", label)


def format_table(reports: list[EvalReport]) -> str:
    hdr = (f"{'label':<24}{'AP@0.30':>9}{'AP@0.50':>9}{'AP@0.70':>9}"
           f"{'comm_log2':>11}{'bytes':>12}")
    lines = [hdr]
    for r in reports:
        comm = f"{r.comm_log2:11.2f}" if r.comm_log2 is not None else f"{'-':>11}"
        lines.append(f"{r.label:<24}"
                     f"{r.ap[0.30]:9.4f}{r.ap[0.50]:9.4f}{r.ap[0.70]:9.4f}"
                     f"{comm}{r.total_bytes:>12d}")
    return "\n".join(lines)


def _report_csv_rows(reports: list[EvalReport]) -> list[list]:
    rows = [["label", "ap30", "ap50", "ap70", "comm_log2", "total_bytes"]]
    for r in reports:
        comm = "" if r.comm_log2 is None else f"{r.comm_log2:.6f}"
        rows.append([r.label, f"{r.ap[0.30]:.6f}", f"{r.ap[0.50]:.6f}",
                     f"{r.ap[0.70]:.6f}", comm, r.total_bytes])
    return rows


def _write_csv(path: Path, rows: list[list]) -> None:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _save_reports(reports: list[EvalReport], out: Path) -> None:
    for r in reports:
        r.save(out / f"report_{_safe_name(r.label)}.jsonl")


# ---- subcommands ----


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = _sidecar_logger(out / "run.log")
    flags = replace(FLAGS_FULL, mask=cfg.share_mode == "instance")
    _train_model(cfg, flags, out, "checkpoint.npz", "loss.csv", log)
    save_config(cfg, out / "config.json")
    print(f"trained {cfg.train.steps} steps "
          f"(fingerprint {fingerprint(cfg)}, seed {cfg.train.seed})")
    print(f"checkpoint: {out / 'checkpoint.npz'}")
    return EXIT_OK


def _eval_kwargs(cfg: ExperimentConfig, noise_override=None) -> dict:
    e = cfg.eval
    sigma = e.noise_sigma if noise_override is None else noise_override
    return dict(noise_sigma=sigma, eval_seed=e.eval_seed,
                det_thre=e.det_thre, fingerprint=fingerprint(cfg))


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.npz"
    model = _load_model(cfg, ckpt)
    flags = _eval_flags(args, cfg)
    scenes = _eval_scenes(cfg)
    kw = _eval_kwargs(cfg, noise_override=args.noise)
    if args.sweep:
        return _run_sweep(args.sweep[0], args.sweep[1], model, scenes, flags,
                          cfg, out, kw)
    if args.baseline == "none":
        reports = [run_no_collaboration(model, scenes, **kw)]
    elif args.baseline == "late":
        reports = [run_late_fusion(model, scenes, **kw)]
    else:
        reports = [run_fusion(model, scenes, flags, **kw)]
    _save_reports(reports, out)
    print(format_table(reports))
    return EXIT_OK


CLI_SWEEP_AXES = {"noise": "noise_sigma", "c_thre": "c_thre",
                  "agents": "n_agents", "n_agents": "n_agents"}


def _run_sweep(axis_name: str, value_spec: str, model, scenes, flags,
               cfg: ExperimentConfig, out: Path, kw: dict) -> int:
    if axis_name not in CLI_SWEEP_AXES:
        raise ConfigError(
            f'unknown sweep axis "{axis_name}"; '
            f'pick from {",".join(sorted(set(CLI_SWEEP_AXES)))}')
    axis = CLI_SWEEP_AXES[axis_name]
    values = _parse_values(value_spec, integer=axis == "n_agents")
    kw = dict(kw)
    if axis == "noise_sigma":
        kw.pop("noise_sigma", None)   # the sweep sets it per point
    reports = sweep(axis, values, model, scenes, flags, **kw)
    _save_reports(reports, out)
    rows = _report_csv_rows(reports)
    for row, v in zip(rows[1:], values):
        row.insert(0, v)
    rows[0].insert(0, axis)
    _write_csv(out / f"sweep_{_safe_name(axis)}.csv", rows)
    print(format_table(reports))
    return EXIT_OK


def cmd_sweep(args) -> int:
    return cmd_eval(args)


TRAIN_FLAGS = {
    # late fusion exchanges detections only, so its model trains solo
    "late": PipelineFlags(ifa=False, cdqa=False, mask=True),
    "ifa": PipelineFlags(ifa=True, cdqa=False, mask=False),
    "ifa+cdqa": PipelineFlags(ifa=True, cdqa=True, mask=False),
    "ifa+cdqa+mask": PipelineFlags(ifa=True, cdqa=True, mask=True),
}


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = _sidecar_logger(out / "run.log")
    models = {}
    for name, _ in LADDER:
        path = out / f"checkpoint_{_safe_name(name)}.npz"
        if path.exists():
            models[name] = _load_model(cfg, path)
        elif args.train_missing:
            models[name] = _train_model(
                cfg, TRAIN_FLAGS[name], out,
                f"checkpoint_{_safe_name(name)}.npz",
                f"loss_{_safe_name(name)}.csv", log)
        else:
            print(f"missing checkpoint for ladder row '{name}': {path}\n"
                  f"rerun with --train-missing to train it", file=sys.stderr)
            return EXIT_MISSING_CHECKPOINT
    scenes = _eval_scenes(cfg)
    reports = ablation_ladder(models, scenes, **_eval_kwargs(cfg))
    _write_csv(out / "ablation.csv", _report_csv_rows(reports))
    print(format_table(reports))
    return EXIT_OK


def cmd_gen_scenes(args) -> int:
    cfg = _resolve_config(args)
    n = args.n if args.n is not None else cfg.eval.n_scenes
    seed0 = args.seed0 if args.seed0 is not None else cfg.eval.scene_seed0
    path = Path(args.out_file)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(n):
            scene = generate_scene(cfg.scene, seed0 + i)
            fh.write(json.dumps(scene_to_dict(scene), sort_keys=True) + "\n")
    print(f"wrote {n} scenes (seeds {seed0}..{seed0 + n - 1}) to {path}")
    return EXIT_OK


def _hexdump_rows(buf: bytes, layout: list[tuple[int, int, str, str]]) -> str:
    lines = [f"{'offset':<8}{'size':<6}{'field':<14}{'raw':<24}value"]
    for off, size, name, value in layout:
        raw = buf[off:off + size]
        shown = raw[:8].hex(" ") + (" .." if size > 8 else "")
        lines.append(f"0x{off:04x}  {size:<6}{name:<14}{shown:<24}{value}")
    return "\n".join(lines)


def cmd_inspect_message(args) -> int:
    buf = Path(args.path).read_bytes()
    if len(buf) < 4:
        print(f"{args.path}: too short to hold a magic number", file=sys.stderr)
        return EXIT_CONFIG
    magic = buf[:4]
    if magic == comms.INSTANCE_MAGIC:
        m = comms.decode_message(buf)
        pay = m.payload
        layout = [
            (0, 4, "magic", magic.decode("ascii")),
            (4, 1, "version", str(buf[4])),
            (5, 2, "agent_id", str(m.agent_id)),
            (7, 2, "view_id", str(m.view_id)),
            (9, 2, "index", str(m.index)),
            (11, 4, "confidence", f"{m.confidence:g}"),
            (15, 4, "u_min", f"{m.box[0]:g}"),
            (19, 4, "v_min", f"{m.box[1]:g}"),
            (23, 4, "u_max", f"{m.box[2]:g}"),
            (27, 4, "v_max", f"{m.box[3]:g}"),
            (31, 2, "feat_c", str(pay.shape[0])),
            (33, 2, "crop_h", str(pay.shape[1])),
            (35, 2, "crop_w", str(pay.shape[2])),
            (37, 4 * pay.size, "payload",
             f"{pay.size} f32 in [{pay.min():g}, {pay.max():g}]"),
        ]
        print(f"instance message, {len(buf)} bytes")
        print(_hexdump_rows(buf, layout))
        return EXIT_OK
    if magic == comms.DETECTION_MAGIC:
        m = comms.decode_detection(buf)
        names = ("x", "y", "z", "w", "l", "h", "yaw")
        layout = [
            (0, 4, "magic", magic.decode("ascii")),
            (4, 1, "version", str(buf[4])),
            (5, 2, "agent_id", str(m.agent_id)),
            (7, 2, "index", str(m.index)),
        ]
        layout += [(9 + 4 * i, 4, names[i], f"{m.box[i]:g}") for i in range(7)]
        layout.append((37, 4, "confidence", f"{m.confidence:g}"))
        print(f"detection message, {len(buf)} bytes")
        print(_hexdump_rows(buf, layout))
        return EXIT_OK
    print(f"{args.path}: unknown magic {magic!r} "
          f"(expected {comms.INSTANCE_MAGIC!r} or {comms.DETECTION_MAGIC!r})",
          file=sys.stderr)
    return EXIT_CONFIG


def cmd_show_config(args) -> int:
    cfg = _resolve_config(args)
    print(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))
    print(f"# fingerprint: {fingerprint(cfg)}", file=sys.stderr)
    return EXIT_OK


# ---- parser ----


def _add_config_args(p, with_train=False):
    p.add_argument("--config", help="experiment config JSON; defaults apply if omitted")
    p.add_argument("--out", help="override out_dir")
    p.add_argument("--c-thre", dest="c_thre", type=float,
                   help="2D detector confidence threshold override")
    p.add_argument("--share-mode", dest="share_mode",
                   choices=("instance", "fullmap"),
                   help="share detected instances only, or whole feature maps")
    if with_train:
        p.add_argument("--steps", type=int, help="override train.steps")
        p.add_argument("--seed", type=int, help="override train.seed")


def _add_eval_args(p):
    p.add_argument("--checkpoint", help="checkpoint path; default {out_dir}/checkpoint.npz")
    p.add_argument("--baseline", choices=("none", "late", "fused"),
                   default="fused",
                   help="none = ego only, late = detection exchange, "
                        "fused = feature-level collaboration")
    p.add_argument("--flags",
                   help="comma list from ifa,cdqa,mask,late_fuse "
                        "(fused baseline only)")
    p.add_argument("--noise", type=float, default=None,
                   help="collaborator pose noise std, m (overrides eval.noise_sigma)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="viewfuse",
        description="desk-scale multi-agent camera BEV perception")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config")
    _add_config_args(p, with_train=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_args(p, with_train=True)
    _add_eval_args(p)
    p.add_argument("--sweep", nargs=2, metavar=("AXIS", "VALUES"),
                   help="sweep an axis, e.g. --sweep noise 0:0.6:7")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="evaluate along one swept axis")
    _add_config_args(p, with_train=True)
    _add_eval_args(p)
    p.add_argument("--sweep", nargs=2, metavar=("AXIS", "VALUES"),
                   required=True, help="axis and values, e.g. noise 0:0.6:7")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate", help="run the component ladder")
    _add_config_args(p, with_train=True)
    p.add_argument("--train-missing", action="store_true",
                   help="train any ladder checkpoint that is missing")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gen-scenes", help="write a scene corpus as JSONL")
    _add_config_args(p)
    p.add_argument("out_file", help="output JSONL path")
    p.add_argument("--n", type=int, help="scene count; default eval.n_scenes")
    p.add_argument("--seed0", type=int,
                   help="first scene seed; default eval.scene_seed0")
    p.set_defaults(fn=cmd_gen_scenes)

    p = sub.add_parser("inspect-message",
                       help="annotated hex dump of one wire message")
    p.add_argument("path", help="file holding one encoded message")
    p.set_defaults(fn=cmd_inspect_message)

    p = sub.add_parser("show-config",
                       help="print the resolved config and its fingerprint")
    _add_config_args(p, with_train=True)
    p.set_defaults(fn=cmd_show_config)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FingerprintError as e:
        print(f"fingerprint error: {e}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
