"""Command-line entry point: ``sbp synth|fit|evaluate|detect|compare|rerun``.

Every command resolves its configuration (JSON file, then flag overrides),
writes its artifacts under ``--out`` and finishes by atomically writing
``manifest.json`` with the resolved configuration, seeds, input and output
checksums and the wall-clock duration.  ``sbp rerun manifest.json`` replays
a run from its manifest.

Exit codes: 0 success, 2 usage/configuration/data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .data import DataError, SeriesFrame, SynthConfig, gen_synthetic, load_series, write_csv
from .evaluation import CalibrationReport, emit_pp_plot, render_svg, write_pp_csv
from .evt import DetectorState, dspot_init, dspot_step, spot_init, spot_step
from .experiment import (
    METHOD_ORDER,
    POINT_SEED_OFFSET,
    SBP_SEED_OFFSET,
    ExperimentConfig,
    compare,
    mae_table,
    run_dspot,
    run_sbp,
    run_spot,
    run_tcn_spot,
)
from .tcn import PointModel, SbpModel, TrainingError, load_model, save_model, train

logger = logging.getLogger("sbp")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

SNAPSHOT_KIND = "sbp-detect-snapshot"


class UsageError(Exception):
    """Bad flags, configuration or inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Run bookkeeping
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    blob = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Run:
    """Collects artifacts of one command and writes its manifest."""

    def __init__(self, command: str, out: Path, options: dict, config: dict, seed: int | None):
        self.command = command
        self.out = out
        self.options = options
        self.config = config
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.started = time.perf_counter()

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def write(self, name: str, data: bytes | str) -> Path:
        path = self.out / name
        atomic_write(path, data)
        self.outputs[name] = sha256_file(path)
        return path

    def record(self, path) -> None:
        path = Path(path)
        self.outputs[path.name] = sha256_file(path)

    def seeds(self) -> dict[str, int]:
        if self.seed is None:
            return {}
        return {
            "master": self.seed,
            "synth": self.seed,
            "sbp_model": self.seed + SBP_SEED_OFFSET,
            "point_model": self.seed + POINT_SEED_OFFSET,
        }

    def finish(self) -> None:
        doc = {
            "command": self.command,
            "version": __version__,
            "options": self.options,
            "config": self.config,
            "seeds": self.seeds(),
            "inputs": self.inputs,
            "outputs": dict(sorted(self.outputs.items())),
            "duration_seconds": round(time.perf_counter() - self.started, 3),
        }
        atomic_write(self.out / "manifest.json", json.dumps(doc, indent=1) + "\n")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    return doc


def _synth_config(doc: dict, seed: int | None) -> SynthConfig:
    section = doc.get("synth", {} if "length" not in doc and "noise" not in doc else doc)
    cfg = SynthConfig.from_dict(section)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    cfg.validate()
    return cfg


def _experiment_config(doc: dict, args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(doc)
    tcn_over: dict[str, Any] = {}
    if getattr(args, "bins", None) is not None:
        tcn_over["n_bins"] = args.bins
    if getattr(args, "context", None) is not None:
        tcn_over["context_length"] = args.context
    train_over: dict[str, Any] = {}
    if getattr(args, "q", None) is not None:
        train_over["tail_mass"] = args.q
    if getattr(args, "epochs", None) is not None:
        train_over["epochs"] = args.epochs
    top: dict[str, Any] = {}
    if getattr(args, "seed", None) is not None:
        top["seed"] = args.seed
    if getattr(args, "grid", None) is not None:
        top["grid"] = args.grid
    if getattr(args, "q_detect", None) is not None:
        top["q_detect"] = args.q_detect
    cfg = replace(cfg, tcn=replace(cfg.tcn, **tcn_over), train=replace(cfg.train, **train_over), **top)
    cfg.levels()  # validates the grid name
    return cfg


def _full_config(exp: ExperimentConfig, synth: SynthConfig | None) -> dict:
    doc = exp.to_dict()
    if synth is not None:
        doc["synth"] = synth.to_dict()
    return doc


def _load_frame(args, doc: dict, run_seed: int | None) -> tuple[SeriesFrame, SynthConfig | None]:
    if args.data is not None:
        try:
            return load_series(args.data), None
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from exc
    synth = _synth_config(doc, run_seed)
    return gen_synthetic(synth), synth


def _options(args) -> dict:
    skip = {"func", "config", "config_doc", "out", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(args) -> tuple[dict, ExperimentConfig]:
    doc = args.config_doc if getattr(args, "config_doc", None) is not None else _read_config(args.config)
    return doc, _experiment_config(doc, args)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> None:
    doc = args.config_doc if getattr(args, "config_doc", None) is not None else _read_config(args.config)
    cfg = _synth_config(doc, args.seed)
    out = _out_dir(args)
    run = Run("synth", out, _options(args), {"synth": cfg.to_dict()}, cfg.seed)
    frame = gen_synthetic(cfg)
    write_csv(frame, out / "series.csv")
    run.record(out / "series.csv")
    run.finish()
    logger.info("wrote %d rows to %s", len(frame), out / "series.csv")


def _write_training(run: Run, model, log) -> None:
    run.write("model.sbpm", save_model(model))
    if log is not None:
        run.write("train_log.csv", log.to_csv())


def cmd_fit(args) -> None:
    doc, exp = _resolve(args)
    frame, synth = _load_frame(args, doc, args.seed)
    out = _out_dir(args)
    run = Run("fit", out, _options(args), _full_config(exp, synth), exp.seed)
    if args.data is not None:
        run.add_input(args.data)
    values = frame.values
    if args.split:
        values = values[: int(round(values.size * exp.train_fraction))]
    if values.size <= exp.tcn.context_length + 1:
        raise UsageError(f"series of length {values.size} is too short for context {exp.tcn.context_length}")
    model, log = train(values, exp.sbp_tcn(), exp.train)
    _write_training(run, model, log)
    run.finish()


def _write_report(run: Run, report: CalibrationReport) -> None:
    run.write("report.json", report.to_json())
    csv_path, svg_path = emit_pp_plot(report, run.out / "pp.csv")
    run.record(csv_path)
    run.record(svg_path)


def cmd_evaluate(args) -> None:
    doc, exp = _resolve(args)
    frame, synth = _load_frame(args, doc, args.seed)
    out = _out_dir(args)
    run = Run("evaluate", out, _options(args), _full_config(exp, synth), exp.seed)
    if args.data is not None:
        run.add_input(args.data)
    model = None
    kind = args.model
    if args.model_file is not None:
        try:
            with open(args.model_file, "rb") as fh:
                model = load_model(fh.read())
        except FileNotFoundError as exc:
            raise UsageError(f"model file not found: {args.model_file}") from exc
        run.add_input(args.model_file)
        kind = "sbp" if isinstance(model, SbpModel) else "tcn-spot"
        if args.model not in (None, kind):
            raise UsageError(f"--model {args.model} does not match model file kind {kind}")
    if kind is None:
        raise UsageError("give --model or --model-file")
    if model is not None and model.cfg.context_length != exp.tcn.context_length:
        exp = replace(exp, tcn=replace(exp.tcn, context_length=model.cfg.context_length))
    if kind == "sbp":
        result = run_sbp(frame, exp, model)
    elif kind == "tcn-spot":
        result = run_tcn_spot(frame, exp, model)
    elif kind == "spot":
        result = run_spot(frame, exp)
    else:
        result = run_dspot(frame, exp)
    _write_report(run, result.report)
    if model is None and result.model is not None:
        _write_training(run, result.model, result.log)
    run.finish()
    print(f"{result.report.model_name} mae={result.report.mae!r}")


def _outcome_lines(start: int, outcomes) -> list[str]:
    return [f"{start + i},{o.kind.value},{o.z_q_after!r}" for i, o in enumerate(outcomes)]


def cmd_detect(args) -> None:
    doc = args.config_doc if getattr(args, "config_doc", None) is not None else _read_config(args.config)
    exp = ExperimentConfig.from_dict(doc)
    try:
        frame = load_series(args.data)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args)
    q = args.q if args.q is not None else exp.q_detect
    run = Run("detect", out, _options(args), replace(exp, q_detect=q).to_dict(), None)
    run.add_input(args.data)
    x = frame.values
    step: Callable = dspot_step if args.detector == "dspot" else spot_step
    if args.resume is not None:
        run.add_input(args.resume)
        with open(args.resume) as fh:
            snap = json.load(fh)
        if snap.get("kind") != SNAPSHOT_KIND or snap.get("detector") != args.detector:
            raise UsageError(f"{args.resume} is not a {args.detector} detection snapshot")
        state = DetectorState.from_dict(snap["state"])
        start = int(snap["next_index"])
        header = False
    else:
        n_init = args.init if args.init is not None else max(100, int(round(0.2 * x.size)))
        if n_init >= x.size:
            raise UsageError(f"--init {n_init} leaves no points to score")
        calib = x[:n_init]
        if args.detector == "dspot":
            state = dspot_init(calib, q, exp.tau_level, exp.depth, side=args.side, refit_every=args.refit_every)
        else:
            state = spot_init(calib, q, exp.tau_level, side=args.side, refit_every=args.refit_every)
        start = n_init
        header = True
    stop = x.size if args.stop is None else min(int(args.stop), x.size)
    outcomes = [step(state, v) for v in x[start:stop]]
    lines = (["index,kind,z_q"] if header else []) + _outcome_lines(start, outcomes)
    run.write("outcomes.csv", "\n".join(lines) + "\n")
    snap = {"kind": SNAPSHOT_KIND, "detector": args.detector, "next_index": stop, "state": state.to_dict()}
    run.write("snapshot.json", json.dumps(snap) + "\n")
    run.finish()
    n_anom = sum(o.kind.value == "anomaly" for o in outcomes)
    print(f"scored {len(outcomes)} points, {n_anom} anomalies")


def cmd_compare(args) -> None:
    doc, exp = _resolve(args)
    frame, synth = _load_frame(args, doc, args.seed)
    out = _out_dir(args)
    run = Run("compare", out, _options(args), _full_config(exp, synth), exp.seed)
    if args.data is not None:
        run.add_input(args.data)
    results = compare(frame, exp)
    table = mae_table(results)
    run.write("compare.csv", table)
    reports = [results[name].report for name in METHOD_ORDER]
    run.write("report.json", json.dumps({"grid": exp.grid, "reports": [json.loads(r.to_json()) for r in reports]}, indent=1) + "\n")
    for rep in reports:
        path = out / f"pp_{rep.model_name.lower()}.csv"
        write_pp_csv(rep, path)
        run.record(path)
    run.write("pp.svg", render_svg(reports))
    sbp = results["SBP"]
    _write_training(run, sbp.model, sbp.log)
    run.finish()
    sys.stdout.write(table)


def cmd_rerun(args) -> None:
    try:
        with open(args.manifest) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"manifest not found: {args.manifest}") from exc
    command = manifest.get("command")
    if command not in COMMANDS or command == "rerun":
        raise UsageError(f"manifest names unknown command {command!r}")
    for path, digest in manifest.get("inputs", {}).items():
        if not os.path.exists(path) or sha256_file(path) != digest:
            raise UsageError(f"input {path} is missing or differs from the manifest")
    ns = argparse.Namespace(**manifest["options"])
    ns.out = args.out if args.out is not None else str(Path(args.manifest).parent)
    ns.config = None
    ns.config_doc = manifest["config"]
    # the stored config already has every override folded in
    for flag in ("bins", "context", "epochs", "grid", "q_detect"):
        if hasattr(ns, flag):
            setattr(ns, flag, None)
    if command != "detect" and hasattr(ns, "q"):
        ns.q = None
    COMMANDS[command](ns)


COMMANDS: dict[str, Callable] = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "detect": cmd_detect,
    "compare": cmd_compare,
    "rerun": cmd_rerun,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sbp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, model_flags=True):
        p.add_argument("--config", metavar="PATH", help="JSON configuration; flags override it")
        p.add_argument("--out", metavar="DIR", required=True, help="output directory")
        p.add_argument("--seed", type=_u64, metavar="U64", help="master seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if data:
            p.add_argument("--data", metavar="PATH", help="input CSV; default is the synthetic benchmark")
        if model_flags:
            p.add_argument("--q", type=float, metavar="FLOAT", help="SBP tail mass per side")
            p.add_argument("--bins", type=_positive_int, metavar="N", help="number of bins")
            p.add_argument("--context", type=_positive_int, metavar="N", help="context window length")
            p.add_argument("--epochs", type=_positive_int, metavar="N", help="training epochs")
            p.add_argument("--grid", choices=["tail", "full"], help="calibration level grid")

    p = sub.add_parser("synth", help="generate a synthetic series")
    common(p, data=False, model_flags=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="train an SBP model")
    common(p)
    p.add_argument("--split", action="store_true", help="train on the training split only")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="calibration report for one model")
    common(p)
    p.add_argument("--model", choices=["sbp", "spot", "dspot", "tcn-spot"], help="model kind to train and evaluate")
    p.add_argument("--model-file", metavar="PATH", help="evaluate a saved .sbpm model instead of training")
    p.add_argument("--q-detect", type=float, metavar="FLOAT", help="detector decision level for baselines")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("detect", help="stream a series through SPOT or DSPOT")
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--out", metavar="DIR", required=True)
    p.add_argument("--data", metavar="PATH", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--detector", choices=["spot", "dspot"], default="spot")
    p.add_argument("--q", type=float, metavar="FLOAT", help="exceedance level (default 1e-3)")
    p.add_argument("--side", choices=["upper", "lower"], default="upper")
    p.add_argument("--init", type=_positive_int, metavar="N", help="calibration points (default 20%%, at least 100)")
    p.add_argument("--refit-every", type=_positive_int, default=1, metavar="K", help="refit after every K peaks")
    p.add_argument("--stop", type=int, metavar="INDEX", help="pause before this index and write a snapshot")
    p.add_argument("--resume", metavar="PATH", help="continue from a snapshot.json")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("compare", help="SPOT, DSPOT, TCN-SPOT and SBP side by side")
    common(p)
    p.add_argument("--q-detect", type=float, metavar="FLOAT", help="detector decision level for baselines")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("rerun", help="replay a run from its manifest.json")
    p.add_argument("manifest", metavar="MANIFEST")
    p.add_argument("--out", metavar="DIR", help="output directory (default: the manifest's directory)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (TrainingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"sbp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, DataError, ValueError, TypeError, KeyError, OSError) as exc:
        print(f"sbp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
