"""Command-line entry point: ``lrt gen-data | train | ablate | eval | diff``.

Exit codes: 0 on success, 2 for usage or validation problems (bad flags, missing
or unreadable inputs, incompatible files), 1 for failures during a run.
"""

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, container, datagen, metrics
from . import sessions as S
from .errors import ConfigError, ContractError, LRTError, ParseError, ProtocolError, VersionError
from .relation import MODES

log = logging.getLogger("lrt")

USAGE_ERRORS = (ConfigError, ContractError, ParseError, VersionError, ProtocolError,
                FileNotFoundError, IsADirectoryError, NotADirectoryError)

CONFIG_FILE = "config.json"
MANIFEST_FILE = "run-manifest.txt"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config layering
# ---------------------------------------------------------------------------


def _coerce(name, raw, default):
    """Parse a ``--set`` value into the type of the field it overrides."""
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = json.loads(raw) if raw.startswith("[") else raw.split(",")
            return tuple(float(v) for v in items)
    except ValueError:
        raise UsageError(f"cannot parse {name}={raw!r} as {type(default).__name__}") from None
    return raw


def parse_overrides(pairs, cls=S.TrainConfig):
    defaults = {f.name: getattr(cls, f.name) for f in fields(cls)}
    out = {}
    for item in pairs or ():
        key, sep, raw = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        if key not in defaults:
            raise UsageError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw.strip(), defaults[key])
    return out


def layered_config(outdir, args):
    """Defaults < ``<outdir>/config.json`` < ``--mode``/``--seed`` < ``--set``."""
    doc = S.TrainConfig().to_json()
    saved = Path(outdir) / CONFIG_FILE
    if saved.is_file():
        try:
            doc.update(json.loads(saved.read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{saved}: not valid JSON ({exc})") from None
    if args.mode is not None:
        doc["mode"] = args.mode
    if args.seed is not None:
        doc["seed"] = args.seed
    doc.update(parse_overrides(args.set))
    return S.TrainConfig.from_json(doc).validate()


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_manifest(path, command, config, dataset_sha):
    lines = [
        f"lrt {__version__}",
        f"command: {command}",
        f"mode: {config.mode}",
        f"seed: {config.seed}",
        f"dataset_sha256: {dataset_sha}",
        "config: " + json.dumps(config.to_json(), sort_keys=True),
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def _load_dataset(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"dataset {path} does not exist")
    return datagen.load(p), container.file_sha256(p)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def summarize(ds):
    m = ds.manifest
    H, W, D = m.dims
    inc = len(m.sessions) - 1
    return (f"{len(m.classes)} classes: {len(m.sessions[0])} base + {inc} sessions of "
            f"{m.n_way}-way {m.n_shot}-shot; images {H}x{W}x{D}; "
            f"{sum(m.samples)} train / {sum(m.test_samples)} test samples; seed {m.seed}")


def cmd_gen_data(args):
    over = parse_overrides(args.set, datagen.GeneratorConfig)
    flags = {"seed": args.seed, "n_base_classes": args.base, "n_inc_sessions": args.sessions,
             "n_way": args.way, "n_shot": args.shot}
    over.update({k: v for k, v in flags.items() if v is not None})
    ds = datagen.generate(datagen.GeneratorConfig(**over))
    sha = datagen.save(ds, args.output)
    print(f"{args.output}: {summarize(ds)}")
    print(f"sha256 {sha}")
    return 0


def _write_session_reports(states, ds, outdir):
    man = ds.manifest
    for k, st in enumerate(states, start=1):
        n_seen = [sum(len(b) for b in man.sessions[:s + 1]) for s in range(k)]
        rep = S.session_report(st, ds, st.history[:k], n_seen)
        metrics.write_report(rep, outdir / f"session-{k}")


def cmd_train(args):
    ds, sha = _load_dataset(args.dataset)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    config = layered_config(outdir, args)
    (outdir / CONFIG_FILE).write_text(_dump(config.to_json()))
    write_manifest(outdir / MANIFEST_FILE, "train", config, sha)
    log.info("training mode=%s seed=%d", config.mode, config.seed)
    states, report = S.run_protocol(ds, config, keep_states=True)
    _write_session_reports(states, ds, outdir)
    metrics.write_report(report, outdir / "report")
    S.save_state(states[-1], outdir / "state.lrtm")
    print(format_sessions(report))
    return 0


def format_sessions(report):
    accs = " ".join(f"{a:6.2f}" for a in report.session_acc)
    return f"{report.mode:12s} sessions [{accs}]  avg {report.average:6.2f}"


def run_ablation(modes, seeds, dataset=None, overrides=None, gen_overrides=None):
    """``{mode: [report per seed]}``; without ``dataset`` each seed draws its own default world."""
    out = {m: [] for m in modes}
    for seed in seeds:
        ds = dataset
        if ds is None:
            ds = datagen.generate(datagen.GeneratorConfig(**{**(gen_overrides or {}), "seed": seed}))
        for mode in modes:
            cfg = S.TrainConfig(**{**(overrides or {}), "mode": mode, "seed": seed}).validate()
            _, rep = S.run_protocol(ds, cfg)
            out[mode].append(rep)
            log.info("%s", format_sessions(rep))
    return out


def ablation_rows(results, baseline="visual-only"):
    base = np.mean([r.average for r in results[baseline]])
    rows = []
    for mode, reps in results.items():
        avg = float(np.mean([r.average for r in reps]))
        rows.append({"mode": mode, "runs": len(reps),
                     "last_acc": float(np.mean([r.last for r in reps])),
                     "avg_acc": avg, "delta_vs_" + baseline.replace("-", "_"): avg - base})
    return rows


def format_table(rows):
    keys = list(rows[0])
    head = f"{keys[0]:<12s} {keys[1]:>4s} " + " ".join(f"{k:>22s}" for k in keys[2:])
    lines = [head]
    for r in rows:
        lines.append(f"{r[keys[0]]:<12s} {r[keys[1]]:>4d} " + " ".join(f"{r[k]:>22.2f}" for k in keys[2:]))
    return "\n".join(lines)


def cmd_ablate(args):
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in MODES:
            raise UsageError(f"unknown mode {m!r}")
    if "visual-only" not in modes:
        modes.append("visual-only")  # baseline of the delta column
    seeds = list(range(args.n_seeds)) if args.seeds is None else [int(s) for s in args.seeds.split(",")]
    if not seeds:
        raise UsageError("need at least one seed")
    overrides = parse_overrides(args.set)
    overrides.pop("mode", None)
    overrides.pop("seed", None)
    ds = _load_dataset(args.dataset)[0] if args.dataset else None
    rows = ablation_rows(run_ablation(modes, seeds, ds, overrides))
    table = format_table(rows)
    print(table)
    if args.output:
        Path(args.output).write_text(_dump(rows))
    return 0


def cmd_eval(args):
    ds, _ = _load_dataset(args.dataset)
    if not Path(args.state).is_file():
        raise UsageError(f"state {args.state} does not exist")
    state = S.load_state(args.state)
    S.check_compatible(state, ds)
    man = ds.manifest
    n_seen = [sum(len(b) for b in man.sessions[:s + 1]) for s in range(state.session)]
    history = list(state.history)
    if len(history) != state.session:
        raise UsageError("state file carries no per-session accuracy history")
    # the final session is re-scored from the loaded parameters
    history[-1] = metrics.session_accuracy(*S.evaluate(state, ds))
    report = S.session_report(state, ds, history, n_seen)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    metrics.write_report(report, outdir / "eval")
    if args.confusion:
        metrics.write_confusion(report.confusion, outdir / "confusion.csv")
    print(format_sessions(report))
    return 0


def cmd_diff(args):
    a, b = metrics.read_report(args.a), metrics.read_report(args.b)
    if len(a.session_acc) != len(b.session_acc):
        print(f"session count differs: {len(a.session_acc)} vs {len(b.session_acc)}")
    for k, (x, y) in enumerate(zip(a.session_acc, b.session_acc), start=1):
        print(f"session {k}: {x:7.2f} {y:7.2f} {y - x:+7.2f}")
    print(f"average  : {a.average:7.2f} {b.average:7.2f} {b.average - a.average:+7.2f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="lrt", description="Few-shot class-incremental learning engine.")
    p.add_argument("--version", action="version", version=f"lrt {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="draw a synthetic dataset")
    g.add_argument("--seed", type=int)
    g.add_argument("--base", type=int, help="number of base classes")
    g.add_argument("--sessions", type=int, help="number of incremental sessions")
    g.add_argument("--way", type=int)
    g.add_argument("--shot", type=int)
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="generator field override")
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train every session and write reports")
    t.add_argument("dataset")
    t.add_argument("-o", "--outdir", required=True)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="compare modes over shared seeds")
    a.add_argument("dataset", nargs="?", help="dataset file; default draws one world per seed")
    a.add_argument("--modes", default="full,visual-only,graph-only,fusion-only")
    a.add_argument("--seeds", help="comma-separated seed list (overrides --n-seeds)")
    a.add_argument("--n-seeds", type=int, default=5)
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.add_argument("-o", "--output", help="write the table as JSON")
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="score a saved state without training")
    e.add_argument("dataset")
    e.add_argument("--state", required=True)
    e.add_argument("-o", "--outdir", required=True)
    e.add_argument("--confusion", action="store_true", help="also write confusion.csv")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diff", help="compare two report files")
    d.add_argument("a")
    d.add_argument("b")
    d.set_defaults(func=cmd_diff)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lrt: error: {exc}", file=sys.stderr)
        return 2
    except USAGE_ERRORS as exc:
        print(f"lrt: error: {exc}", file=sys.stderr)
        return 2
    except (LRTError, OSError) as exc:
        print(f"lrt: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
