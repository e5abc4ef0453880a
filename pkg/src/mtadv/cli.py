"""Command-line front end: ``mtadv <command> [flags]``.

Every command accepts ``--config FILE``: a JSON object with flat keys named
after the long flags (``max-steps`` or ``max_steps``).  Explicit flags win
over file values.  A report JSON written by ``attack`` or ``sweep`` is
itself a valid config file (its ``config`` block is used), which is how a
run is reproduced.

On failure the last line on stderr is ``error: <CODE>: <message>`` and the
exit status is non-zero.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig
from .dataset import generate_dataset, load_directory, save_directory
from .embedder import (
    DEFAULT_ARCH,
    DefenseTransform,
    TrainConfig,
    calibrate_system,
    heldout_eer,
    init_model,
    load_model,
    pair_scores,
    save_model,
    split_subjects,
    train_model,
)
from .errors import ConfigError, MtadvError
from .geometry import check_ma_white, check_st_gray, verify_orderings
from .metrics import DistanceKind, mean_or_nan, roc
from .scenarios import KINDS, ScenarioSpec, run_scenario

# keys that describe how a run executes, not what it computes
_NOT_EMBEDDED = {"command", "config", "out", "threads", "force", "func"}


class UsageError(MtadvError, ValueError):
    code = "USAGE_ERROR"


class CheckFailed(MtadvError):
    code = "CHECK_FAILED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_list(kind):
    def parse(text):
        if isinstance(text, (list, tuple)):
            items = list(text)
        else:
            items = [t for t in str(text).split(",") if t.strip()]
        try:
            return [kind(t) for t in items]
        except ValueError as e:
            raise argparse.ArgumentTypeError(str(e))
    return parse


def _defense(text):
    """``blur:SIGMA`` or ``quantize:BETA[:LEVELS]``."""
    if text in (None, "", "none"):
        return None
    parts = str(text).split(":")
    try:
        if parts[0] in ("blur", "gaussian_blur"):
            return DefenseTransform("gaussian_blur", float(parts[1]) if len(parts) > 1 else 1.0)
        if parts[0] in ("quantize", "soft_quantize"):
            levels = int(parts[2]) if len(parts) > 2 else 8
            return DefenseTransform("soft_quantize", float(parts[1]) if len(parts) > 1 else 30.0, levels)
    except (ValueError, MtadvError) as e:
        raise argparse.ArgumentTypeError(f"bad defense {text!r}: {e}")
    raise argparse.ArgumentTypeError(f"unknown defense {text!r}; use blur:SIGMA or quantize:BETA[:LEVELS]")


def _default_threads() -> int:
    env = os.environ.get("MTADV_THREADS")
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"MTADV_THREADS must be an integer, got {env!r}")
    if n < 1:
        raise ConfigError(f"MTADV_THREADS must be >= 1, got {n}")
    return n


# --- shared flag groups -----------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="JSON file of flag values (flags win)")


def _add_systems(p, models_required=True):
    p.add_argument("--data", required=True, help="benchmark directory of <subject>/<image>.pgm")
    p.add_argument("--models", type=_csv_list(str), required=models_required, help="comma-separated model files")
    p.add_argument("--distance", choices=[k.value for k in DistanceKind], default=DistanceKind.UNIT_L2_HALVED.value)
    p.add_argument("--calib-seed", type=int, default=0, help="seed of the impostor-pair sample")


def _add_attack(p):
    d = AttackConfig()
    p.add_argument("--scenario", choices=[k.lower() for k in KINDS], default="st")
    p.add_argument("--box", choices=["white", "gray"], default="gray")
    p.add_argument("--epsilon", type=float, default=d.epsilon)
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--max-steps", type=int, default=d.t_max)
    p.add_argument("--conv-threshold", type=float, default=d.tau_conv)
    p.add_argument("--pairs", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--target-users", type=int, default=None,
                   help="MA: users per example (default 2); UA: learned subjects (default 10)")
    p.add_argument("--imgs-per-target", type=int, default=10, help="UA: learn images per subject")
    p.add_argument("--defense", type=_defense, default=None, help="CA defense, e.g. blur:1.0")
    p.add_argument("--baseline", type=_csv_list(str), default=[], help="ST only: pgd,fgsm")
    p.add_argument("--threads", type=int, default=None, help="worker processes (default $MTADV_THREADS or 1)")
    p.add_argument("--no-timing", action="store_true", help="leave mean_time_ms empty for byte-stable reports")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtadv", description="Multi-task adversarial attacks on embedding-based authentication.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic identity dataset as PGM files")
    _add_common(p)
    p.add_argument("--subjects", type=int, default=60)
    p.add_argument("--images", type=int, default=10)
    p.add_argument("--size", type=int, default=16, help="image height and width")
    p.add_argument("--intra-noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one embedding model per seed")
    _add_common(p)
    t = TrainConfig()
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=_csv_list(int), required=True)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--steps", type=int, default=t.steps)
    p.add_argument("--lr", type=float, default=t.lr)
    p.add_argument("--batch-subjects", type=int, default=t.batch_subjects)
    p.add_argument("--eer-target", type=float, default=t.eer_target)
    p.add_argument("--allow-weak", action="store_true", help="keep models that miss the EER gate")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="EER threshold and ROC of each system")
    _add_common(p)
    _add_systems(p)
    p.add_argument("--defense", type=_defense, default=None)
    p.add_argument("--roc-points", type=int, default=101)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("attack", help="run a threat scenario and write CSV + JSON reports")
    _add_common(p)
    _add_systems(p)
    _add_attack(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="vary one attack setting and write a long-form CSV")
    _add_common(p)
    _add_systems(p)
    _add_attack(p)
    p.add_argument("--axis", required=True, choices=["epsilon", "alpha", "max-steps", "threshold"])
    p.add_argument("--values", type=_csv_list(float), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("geometry-check", help="planar-geometry and ordering checks on one benchmark")
    _add_common(p)
    _add_systems(p)
    _add_attack(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_geometry_check)
    return parser


# --- config resolution ------------------------------------------------------


def _load_config_file(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    if isinstance(obj, dict) and isinstance(obj.get("config"), dict):
        obj = obj["config"]
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return {k.replace("-", "_"): v for k, v in obj.items() if k not in ("command",)}


def _config_path(argv):
    # found before the real parse so the file can satisfy required flags
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv):
    argv = list(argv)
    parser = build_parser()
    commands = parser._subparsers._group_actions[0].choices
    path = _config_path(argv)
    command = next((a for a in argv if a in commands), None)
    if path is not None and command is not None:
        values = _load_config_file(path)
        sub = commands[command]
        known = {a.dest: a for a in sub._actions}
        unknown = sorted(set(values) - set(known) - _NOT_EMBEDDED)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for k, v in values.items():
            if k in _NOT_EMBEDDED:
                continue
            action = known[k]
            if action.type is not None and v is not None and not isinstance(v, bool):
                try:
                    v = action.type(v if not isinstance(v, list) else ",".join(map(str, v)))
                except (argparse.ArgumentTypeError, ValueError) as e:
                    raise ConfigError(f"config key {k}: {e}")
            defaults[k] = v
        sub.set_defaults(**defaults)
        # required flags may now come from the file
        for a in sub._actions:
            if a.dest in defaults:
                a.required = False
    return parser.parse_args(argv)


def _resolved(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in _NOT_EMBEDDED:
            continue
        if isinstance(v, DefenseTransform):
            v = {"gaussian_blur": "blur", "soft_quantize": "quantize"}[v.kind] + f":{v.param!r}" + (
                f":{v.levels}" if v.kind == "soft_quantize" else "")
        out[k] = v
    out["command"] = args.command
    return out


def _prepare_out(path, force=False) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- commands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.subjects < 2:
        raise ConfigError(f"--subjects must be >= 2 for pairing, got {args.subjects}")
    ds = generate_dataset(args.subjects, args.images, (args.size, args.size, 1), args.intra_noise, args.seed)
    out = _prepare_out(args.out, args.force)
    files = save_directory(ds, out)
    _write_json(out / "manifest.json", {"config": _resolved(args), "dataset": ds.manifest(), "n_files": len(files)})
    print(f"wrote {len(files)} images for {len(ds)} subjects to {out}")
    return 0


def _load_data(path):
    return load_directory(Path(path))


def cmd_train(args) -> int:
    if not args.seeds:
        raise UsageError("--seeds needs at least one seed")
    ds = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hyper = TrainConfig(steps=args.steps, lr=args.lr, batch_subjects=args.batch_subjects, eer_target=args.eer_target)
    summary = []
    for seed in args.seeds:
        model = init_model(replace(DEFAULT_ARCH, input_shape=tuple(ds.image_shape)),
                           embed_dim=args.embed_dim, seed=seed)
        trained = train_model(model, ds, replace(hyper, seed=seed), enforce_gate=not args.allow_weak,
                              log=lambda m: print(f"[seed {seed}] {m}", file=sys.stderr))
        _, hold = split_subjects(ds, hyper.holdout_frac, seed)
        eer = heldout_eer(trained, ds.subset(hold), seed)
        path = out / f"model-seed{seed}.mdl"
        save_model(trained, path)
        summary.append({"seed": seed, "model_id": trained.model_id, "path": path.name, "heldout_eer": eer,
                        "passed_gate": eer <= hyper.eer_target})
        print(f"seed {seed}: held-out EER {eer:.4f} -> {path}")
    _write_json(out / "train.json", {"config": _resolved(args), "models": summary})
    return 0


def _systems(args, ds, defense=None):
    models = [load_model(p) for p in args.models]
    systems = []
    for m in models:
        systems.append(calibrate_system(m, ds, None, args.distance, seed=args.calib_seed))
        if defense is not None:
            systems.append(calibrate_system(m, ds, defense, args.distance, seed=args.calib_seed))
    return systems


def cmd_calibrate(args) -> int:
    ds = _load_data(args.data)
    out = _prepare_out(args.out, force=True)
    systems = _systems(args, ds, args.defense)
    entries = []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system_id", "threshold", "fpr", "tpr"])
    for s in systems:
        scores = pair_scores(s, ds, args.calib_seed)
        curve = roc(scores, args.roc_points)
        for t, f, p in curve.points:
            w.writerow([s.system_id, repr(t), repr(f), repr(p)])
        entries.append(s.describe())
        print(f"{s.system_id}: tau {s.tau:.4f}  EER {s.eer:.4f}")
    (out / "roc.csv").write_text(buf.getvalue())
    _write_json(out / "calibration.json", {"config": _resolved(args), "dataset": ds.manifest(), "systems": entries})
    return 0


def _spec(args, ds, **over) -> ScenarioSpec:
    kind = args.scenario.upper()
    defense = args.defense
    if kind == "CA":
        if defense is None:
            defense = DefenseTransform("gaussian_blur", 1.0)
        if len(args.models) != 1:
            raise ConfigError(f"CA takes exactly one model, got {len(args.models)}")
        systems = _systems(args, ds, defense)
    else:
        if defense is not None:
            raise ConfigError("--defense only applies to --scenario ca")
        systems = _systems(args, ds)
    users = args.target_users
    if users is None:
        users = {"MA": 2, "UA": 10}.get(kind, 1)
    cfg = AttackConfig(epsilon=args.epsilon, alpha=args.alpha, t_max=args.max_steps, tau_conv=args.conv_threshold)
    spec = ScenarioSpec(kind, tuple(systems), box=args.box, n_target_users=users,
                        imgs_per_target=args.imgs_per_target if kind == "UA" else 1,
                        attack_cfg=cfg, n_pairs=args.pairs, seed=args.seed, baselines=tuple(args.baseline))
    spec = replace(spec, **over)
    return spec.validate(ds)


def _threads(args) -> int:
    n = args.threads if args.threads is not None else _default_threads()
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    return n


def cmd_attack(args) -> int:
    ds = _load_data(args.data)
    spec = _spec(args, ds)
    report = run_scenario(spec, ds, threads=_threads(args))
    csv_path, json_path = report.write(args.out, stem=spec.kind.lower(), timing=not args.no_timing,
                                       config=_resolved(args))
    sys.stdout.write(report.to_csv(timing=not args.no_timing))
    print(f"wrote {csv_path} and {json_path}")
    return 0


_SWEEP_METRICS = ("asr_white", "asr_gray", "mean_dissim", "mean_ssim", "mean_steps")


def cmd_sweep(args) -> int:
    if args.scenario != "st":
        raise ConfigError("sweep runs the ST scenario only")
    ds = _load_data(args.data)
    base = _spec(args, ds)
    threads = _threads(args)
    rows = []
    extra = {}
    if args.axis == "threshold":
        system = base.systems[0]
        report = run_scenario(base, ds, threads)
        curve = roc(pair_scores(system, ds, args.calib_seed), thresholds=args.values)
        recs = [r["mtadv"] for r in report.records]
        for t, fpr, tpr in curve.points:
            rows += [(t, "fpr", fpr), (t, "tpr", tpr)]
            rows.append((t, "asr_white", mean_or_nan(r["dissim"] <= t for r in recs)))
            rows.append((t, "asr_gray", mean_or_nan(np.mean(np.asarray(r["gray_d"]) <= t) for r in recs)))
        extra["roc"] = curve.points
    else:
        for v in args.values:
            cfg = base.attack_cfg
            if args.axis == "epsilon":
                cfg = replace(cfg, epsilon=v, alpha=min(cfg.alpha, v) if v > 0 else cfg.alpha)
            elif args.axis == "alpha":
                cfg = replace(cfg, alpha=v)
            else:
                cfg = replace(cfg, t_max=int(v))
            report = run_scenario(replace(base, attack_cfg=cfg), ds, threads)
            row = report.rows[0]
            rows += [(v, m, float(getattr(row, m))) for m in _SWEEP_METRICS]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "axis_value", "metric", "value"])
    for v, m, x in rows:
        w.writerow([args.axis, repr(float(v)), m, repr(float(x))])
    (out / f"sweep-{args.axis}.csv").write_text(buf.getvalue())
    if "roc" in extra:
        rb = io.StringIO()
        rw = csv.writer(rb, lineterminator="\n")
        rw.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in extra["roc"]:
            rw.writerow([repr(t), repr(f), repr(p)])
        (out / "roc.csv").write_text(rb.getvalue())
    _write_json(out / f"sweep-{args.axis}.json", {"config": _resolved(args), "dataset": ds.manifest(),
                                                  "spec": base.to_json()})
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_geometry_check(args) -> int:
    ds = _load_data(args.data)
    if len(args.models) != 1:
        raise ConfigError("geometry-check takes exactly one model")
    threads = _threads(args)
    st = _spec(args, ds, kind="ST", n_target_users=1, box="gray", baselines=())
    reports = [run_scenario(st, ds, threads)]
    ma = replace(st, kind="MA", n_target_users=2, box="white").validate(ds)
    reports.append(run_scenario(ma, ds, threads))
    users = args.target_users or 10
    ua = replace(st, kind="UA", n_target_users=users, imgs_per_target=args.imgs_per_target).validate(ds)
    reports.append(run_scenario(ua, ds, threads))
    checks = [check_st_gray(reports[0]), *check_ma_white(reports[1]), *verify_orderings(reports)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for c in checks:
        print(c.line())
    _write_json(out / "geometry.json", {
        "config": _resolved(args),
        "dataset": ds.manifest(),
        "checks": [{"name": c.name, "passed": c.passed, "value": c.value, "bound": c.bound, "detail": c.detail}
                   for c in checks],
    })
    failed = [c.name for c in checks if c.passed is False]
    if failed:
        raise CheckFailed(f"failed checks: {', '.join(failed)}")
    return 0


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        return args.func(args)
    except MtadvError as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
        return 2 if isinstance(e, UsageError) else 1
    except (OSError, ValueError) as e:
        print(f"error: {type(e).__name__.upper()}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
