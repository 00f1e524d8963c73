"""Command-line entry point: ``hbmi synth|train|eval|decode|context``.

Every command accepts ``--config FILE`` (JSON object keyed by flag names with
dashes or underscores); explicit flags override file values. The fully
resolved configuration is written to ``config.json`` in the output directory.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .datasets import (
    SynthConfig,
    atomic_write_text,
    bundle_extra,
    generate_synthetic,
    load_dataset,
    load_model_bundle,
    save_model_bundle,
    write_dataset,
)
from .decoder import HANDS, MODES, RIGHT
from .errors import DataError, NumericalError
from .evaluation import (
    TABLE2_ROWS,
    EvalProtocol,
    accuracy_table,
    confusion_csv,
    context_sweep,
    decision_log,
    decode_trials,
    online_eval,
    repetition_table,
    sweep_table,
    within_session_cv,
)
from .pipeline import FeatureCache, FitLog, PipelineConfig, train_from_source

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "synth": dict(out=None, seed=7, sessions=5, blocks=8, trials_per_block=50,
                  separability_eeg=2.0, separability_emg=2.0, noise_floor=1.0, drift=0.0,
                  subject_id="synthetic"),
    "train": dict(data=None, out=None, sessions=None, nmf_seed=0),
    "eval": dict(data=None, out=None, protocol="within", mode="all", session=1, test_session=4,
                 folds=5, repetitions=5, seed=0, jobs=1, hand=RIGHT, nmf_seed=0),
    "decode": dict(model=None, data=None, out=None, session=None, mode="hbmi10", hand=RIGHT),
    "context": dict(data=None, out=None, test_session=5, level=None, p=None, q=1.0, seed=0,
                    jobs=1, mode="hbmi10", nmf_seed=0),
}
REQUIRED = {"synth": ("out",), "train": ("data", "out"), "eval": ("data", "out"),
            "decode": ("model", "data", "out"), "context": ("data", "out")}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog="hbmi", description="Hierarchical EEG+EMG gesture decoding.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=S)
        p.add_argument("--config", help="JSON file with default values for the flags")
        return p

    p = add("synth", "generate a synthetic dataset")
    p.add_argument("--out", help="dataset directory to create")
    p.add_argument("--seed", type=int)
    p.add_argument("--sessions", type=_positive_int)
    p.add_argument("--blocks", type=_positive_int)
    p.add_argument("--trials-per-block", type=_positive_int)
    p.add_argument("--separability-eeg", type=_nonneg_float)
    p.add_argument("--separability-emg", type=_nonneg_float)
    p.add_argument("--noise-floor", type=float)
    p.add_argument("--drift", type=_nonneg_float, help="session drift magnitude")
    p.add_argument("--subject-id")

    p = add("train", "fit a model bundle")
    p.add_argument("--data")
    p.add_argument("--out", help="bundle directory")
    p.add_argument("--sessions", type=_int_list, help="comma-separated sessions (default all)")
    p.add_argument("--nmf-seed", type=int)

    p = add("eval", "within-session or online evaluation")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--protocol", choices=("within", "online"))
    p.add_argument("--mode", choices=MODES + ("all",))
    p.add_argument("--session", type=_positive_int, help="session for within-session CV")
    p.add_argument("--test-session", type=_positive_int, help="held-out session for online")
    p.add_argument("--folds", type=_positive_int)
    p.add_argument("--repetitions", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=_positive_int)
    p.add_argument("--hand", choices=HANDS, help="hand for EMG-only decoding")
    p.add_argument("--nmf-seed", type=int)

    p = add("decode", "decode every window of a session with a saved bundle")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--session", type=_positive_int, help="default: all sessions")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--hand", choices=HANDS)

    p = add("context", "context-injection sweep on an online split")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--test-session", type=_positive_int)
    p.add_argument("--level", type=int, choices=(0, 1, 2, 3), action="append",
                   help="repeat with --p to combine levels; omit for the four standard rows")
    p.add_argument("--p", type=float, action="append")
    p.add_argument("--q", type=float, help="probability that the favored state is the true one")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=_positive_int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--nmf-seed", type=int)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags (in increasing precedence)."""
    config = dict(DEFAULTS[command])
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    path = getattr(args, "config", None)
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}:{exc.lineno}: {exc.msg}") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{path}: expected a JSON object")
        for key, value in loaded.items():
            norm = key.replace("-", "_")
            if norm not in config:
                raise UsageError(f"{path}: unknown option {key!r} for {command}")
            config[norm] = value
    config.update(flags)
    missing = [k for k in REQUIRED[command] if config.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s) "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    if command == "synth" and int(config["sessions"]) < 1:
        raise UsageError("synth: --sessions must be >= 1")
    if command == "context":
        levels, ps = config["level"], config["p"]
        if (levels is None) != (ps is None) or (levels is not None and len(levels) != len(ps)):
            raise UsageError("context: give --level and --p the same number of times")
    return config


def _echo(out: Path, command: str, config: dict) -> None:
    atomic_write_text(out / "config.json", json.dumps(
        {"command": command, "version": __version__, **config}, indent=1, sort_keys=True) + "\n")


def _pipeline_cfg(config: dict) -> PipelineConfig:
    return PipelineConfig(nmf_seed=int(config.get("nmf_seed", 0)))


def cmd_synth(c: dict) -> int:
    cfg = SynthConfig(seed=int(c["seed"]), separability_eeg=float(c["separability_eeg"]),
                      separability_emg=float(c["separability_emg"]),
                      noise_floor=float(c["noise_floor"]), session_drift=float(c["drift"]),
                      n_sessions=int(c["sessions"]), n_blocks=int(c["blocks"]),
                      n_trials_per_block=int(c["trials_per_block"]), subject_id=str(c["subject_id"]))
    out = Path(c["out"])
    source = generate_synthetic(cfg)
    write_dataset(source, out)
    _echo(out, "synth", c)
    print(f"wrote {len(source.manifest.trials)} trials to {out}")
    return EXIT_OK


def cmd_train(c: dict) -> int:
    data = load_dataset(c["data"])
    sessions = c["sessions"] or data.manifest.sessions
    missing = [s for s in sessions if s not in data.manifest.sessions]
    if missing:
        raise DataError(f"sessions {missing} not in dataset (have {data.manifest.sessions})")
    log = FitLog()
    model = train_from_source(data, sessions, _pipeline_cfg(c), log)
    out = Path(c["out"])
    save_model_bundle(model, out, {"sessions": list(sessions), "dataset": str(c["data"]),
                                   "trials": sorted(log.trial_keys)})
    _echo(out, "train", c)
    print(f"trained on sessions {list(sessions)}; bundle at {out}")
    return EXIT_OK


def _modes(c: dict) -> tuple[str, ...]:
    return MODES if c["mode"] == "all" else (c["mode"],)


def cmd_eval(c: dict) -> int:
    data = load_dataset(c["data"])
    out = Path(c["out"])
    cache = FeatureCache(data, _pipeline_cfg(c))
    modes = _modes(c)
    if c["protocol"] == "within":
        protocol = EvalProtocol("within", int(c["folds"]), int(c["repetitions"]), seed=int(c["seed"]),
                                emg_hand=c["hand"])
        session = int(c["session"])
        reports = within_session_cv(data, session, modes, protocol, cache, jobs=int(c["jobs"]))
    else:
        session = int(c["test_session"])
        log = FitLog()
        reports = online_eval(data, session, modes, cache, log=log, hand=c["hand"])
        atomic_write_text(out / "training_sessions.json",
                          json.dumps({"test_session": session, "train_sessions": sorted(log.sessions),
                                      "train_trials": sorted(log.trial_keys)}) + "\n")
    cells = {(m, session): r.accuracy for m, r in reports.items()}
    atomic_write_text(out / "accuracy.csv", accuracy_table(cells, modes))
    for m, r in reports.items():
        atomic_write_text(out / f"repetitions_{m}.csv", repetition_table(r))
        atomic_write_text(out / f"confusion_{m}.csv", confusion_csv(r))
    atomic_write_text(out / "decisions.csv", decision_log(reports))
    _echo(out, "eval", c)
    for m, r in reports.items():
        print(f"{c['protocol']} session {session} {m}: accuracy {r.accuracy:.4f} "
              f"({r.n_windows} windows)")
    return EXIT_OK


def cmd_decode(c: dict) -> int:
    model = load_model_bundle(c["model"])
    data = load_dataset(c["data"])
    cache = FeatureCache(data)
    sessions = [int(c["session"])] if c["session"] else data.manifest.sessions
    trained_on = bundle_extra(c["model"]).get("sessions", [])
    overlap = sorted(set(sessions) & set(trained_on))
    if overlap:
        print(f"warning: decoding session(s) {overlap} that the model was trained on",
              file=sys.stderr)
    reports = {}
    for s in sessions:
        infos = data.manifest.session_trials(s)
        if not infos:
            raise DataError(f"session {s} not in dataset (have {data.manifest.sessions})")
        rep = decode_trials(model, cache.many(infos), c["mode"], hand=c["hand"])
        rep.repetition_accuracies = [rep.accuracy]
        rep.meta = {"protocol": "decode", "session": s, "mode": c["mode"]}
        reports[f"session_{s}"] = rep
    out = Path(c["out"])
    atomic_write_text(out / "decisions.csv", decision_log(reports))
    _echo(out, "decode", c)
    for key, r in reports.items():
        print(f"{key} {c['mode']}: accuracy {r.accuracy:.4f}")
    return EXIT_OK


def cmd_context(c: dict) -> int:
    data = load_dataset(c["data"])
    if c["level"] is None:
        configs = TABLE2_ROWS
    else:
        configs = (tuple(zip(c["level"], c["p"])),)
    out = Path(c["out"])
    cache = FeatureCache(data, _pipeline_cfg(c))
    baseline, rows = context_sweep(data, int(c["test_session"]), configs, c["mode"],
                                   float(c["q"]), int(c["seed"]), cache, jobs=int(c["jobs"]))
    atomic_write_text(out / "context.csv", sweep_table(baseline, rows))
    reports = {"baseline": baseline, **{r.label: r.report for r in rows}}
    atomic_write_text(out / "decisions.csv", decision_log(reports))
    _echo(out, "context", c)
    print(f"baseline: {baseline.accuracy:.4f}")
    for r in rows:
        print(f"{r.label}: {r.report.accuracy:.4f}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "decode": cmd_decode,
            "context": cmd_context}


def _origin(exc: BaseException) -> str:
    """Dotted module of the innermost package frame that raised ``exc``."""
    name = "hbmi"
    for frame in traceback.extract_tb(exc.__traceback__):
        path = Path(frame.filename)
        if path.parent.name == "hbmi":
            name = f"hbmi.{path.stem}"
    return name


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        config = resolve(args.command, args)
        return COMMANDS[args.command](config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
