"""Command-line pipeline: profile -> classify -> attack -> report, plus calibrate.

Every subcommand reads an optional INI manifest (``--config``, section
``[manifest]``); command-line flags override manifest keys. Outputs go to
``<out>/<vendor>/`` and are byte-identical across re-runs of one manifest.

Exit codes: 0 success or finding, 1 usage error, 2 input error,
3 internal invariant violation. Failures print one JSON record to stderr.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import bfa
from .classifier import (
    DEFAULT_OVERLAP_EPSILON,
    DefenseThresholds,
    classify,
    level_counts,
    levels_csv,
    load_bitmap,
    recommend_defense,
    to_bitmap,
)
from .device import REFERENCE_CONFIG, REFERENCE_HC, REFERENCE_VICTIMS, DeviceConfig, dump_profiles, load_profiles, resolve_profile
from .errors import ConfigurationError, HammerLabError, InvariantViolation
from .patterns import MODELS, AttackModel
from .profiler import (
    CALIBRATION_TARGETS,
    DEFAULT_HC_LEVELS,
    DEFAULT_TRIALS,
    HC_CAP,
    CalibrationTarget,
    ProfileResult,
    SweepPlan,
    calibrate,
    flip_curve,
    persistence_map,
    run_sweep,
)

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2, 3
RESULT_FILE = "result.jsonl"
NETWORK_FILE = "network.qnet"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class RunManifest:
    """Resolved settings: manifest file values overlaid by flags."""

    subcommand: str
    settings: dict[str, Any] = field(default_factory=dict)
    defense: DefenseThresholds = DefenseThresholds()

    def get(self, key: str, default=None):
        value = self.settings.get(key)
        return default if value is None else value

    @property
    def out(self) -> Path:
        return Path(self.get("out", "hammerlab-out"))

    @property
    def vendor(self) -> str:
        return self.get("vendor", "mf-A")

    @property
    def vendor_dir(self) -> Path:
        return self.out / self.vendor


def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    try:
        return tuple(int(x.replace("_", "")) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise ConfigurationError(f"expected a comma-separated list of integers, got {text!r}") from None


_MANIFEST_TYPES = {
    "vendor": str, "out": str, "profiles": str, "seed": int, "trial_seed": int, "rows": int,
    "cols": int, "victim_rows": _int_list, "hc_levels": _int_list, "hc_max": int, "trials": int,
    "models": str, "model": str, "hc": int, "overlap_epsilon": float, "network": str,
    "net_seed": int, "max_iters": int, "target_acc": float, "bitmap": str, "workers": int,
    "vc_db": float, "vc_sg": float, "sg_count": int, "noise_amp": float,
}


def load_manifest(args: argparse.Namespace) -> RunManifest:
    settings: dict[str, Any] = {}
    defense = DefenseThresholds()
    if getattr(args, "config", None):
        parser = configparser.ConfigParser()
        try:
            with open(args.config, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigurationError(f"cannot read manifest {args.config}: {exc}") from exc
        if parser.has_section("manifest"):
            for key, raw in parser["manifest"].items():
                conv = _MANIFEST_TYPES.get(key)
                if conv is None:
                    raise ConfigurationError(f"unknown manifest key {key!r}")
                try:
                    settings[key] = conv(raw)
                except ValueError:
                    raise ConfigurationError(f"manifest key {key!r}: bad value {raw!r}") from None
        defense = DefenseThresholds.from_config(parser)
    for key, value in vars(args).items():
        if key in _MANIFEST_TYPES and value is not None:
            settings[key] = _MANIFEST_TYPES[key](value) if key in ("hc_levels", "victim_rows") else value
    return RunManifest(args.command, settings, defense)


def _profile(m: RunManifest):
    extra = load_profiles(m.get("profiles")) if m.get("profiles") else None
    return resolve_profile(m.vendor, extra)


def _models(text: str) -> tuple[AttackModel, ...]:
    try:
        return tuple(AttackModel(t.strip().upper()) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigurationError(f"models must be drawn from SG, VC, DB; got {text!r}") from None


def _hc_levels(m: RunManifest) -> tuple[int, ...]:
    if m.get("hc_levels") is not None:
        return m.get("hc_levels")
    hc_max = m.get("hc_max", HC_CAP)
    if hc_max > HC_CAP or hc_max < 1:
        raise ConfigurationError(f"hc_max must lie in [1, {HC_CAP}]")
    # Same two-decade span as the default sweep, ending at hc_max.
    span = DEFAULT_HC_LEVELS[-1] / DEFAULT_HC_LEVELS[0]
    levels = np.geomspace(max(1.0, hc_max / span), hc_max, len(DEFAULT_HC_LEVELS))
    return tuple(sorted({int(round(x)) for x in levels}))


def sweep_plan(m: RunManifest) -> SweepPlan:
    config = DeviceConfig(
        rows=m.get("rows", REFERENCE_CONFIG.rows),
        cols=m.get("cols", REFERENCE_CONFIG.cols),
        seed=m.get("seed", REFERENCE_CONFIG.seed),
    )
    return SweepPlan(
        profile=_profile(m),
        config=config,
        hc_levels=_hc_levels(m),
        models=_models(m.get("models", "SG,VC,DB")),
        trials=m.get("trials", DEFAULT_TRIALS),
        victim_rows=m.get("victim_rows", REFERENCE_VICTIMS),
        trial_seed=m.get("trial_seed", 0),
    )


# ---------------------------------------------------------------------------
# Writers


def _csv(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x: float) -> str:
    return repr(float(x)) if x != int(x) else str(int(x))


def _write(path: Path, payload: str | bytes) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, bytes):
        path.write_bytes(payload)
    else:
        path.write_text(payload, encoding="utf-8")
    return path


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_result(m: RunManifest) -> ProfileResult:
    path = m.vendor_dir / RESULT_FILE
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read profile result {path}: {exc.strerror}") from None
    try:
        return ProfileResult.from_jsonl(text)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: malformed result file ({exc})") from None


# ---------------------------------------------------------------------------
# Subcommands


def cmd_profile(m: RunManifest) -> dict:
    plan = sweep_plan(m)
    result = run_sweep(plan, workers=m.get("workers", 1))
    d = m.vendor_dir
    written = [_write(d / RESULT_FILE, result.to_jsonl())]
    rows = []
    for model in plan.models:
        rows += [(model.value, p.hc, _num(p.mean), p.min, p.max) for p in flip_curve(result, model)]
    written.append(_write(d / "curves.csv", _csv(rows, ("model", "hc", "mean", "min", "max"))))
    if len(plan.hc_levels) >= 2:
        for model in plan.models:
            pm = persistence_map(result, model)
            written.append(_write(d / f"persistence_{model.value}.csv", _csv(pm.rows(), ("row", "col", "count", "bucket"))))
    return {"command": "profile", "vendor": m.vendor, "files": [str(p) for p in written]}


def cmd_classify(m: RunManifest) -> dict:
    result = _load_result(m)
    hc = m.get("hc", REFERENCE_HC)
    missing = [x.value for x in MODELS if x not in result.plan.models]
    if hc not in result.plan.hc_levels:
        missing.append(f"hc={hc}")
    if missing:
        raise ConfigurationError(f"result lacks what classification needs: {', '.join(missing)}")
    sets = [result.union(x, hc) for x in MODELS]
    eps = m.get("overlap_epsilon", DEFAULT_OVERLAP_EPSILON)
    level_map = classify(*sets, result.universe(), eps)
    counts = level_counts(level_map)
    if sum(counts.values()) != len(result.universe()):
        raise InvariantViolation("security levels do not partition the cell universe")
    summary = {
        "vendor": m.vendor,
        "hc": hc,
        "scheme": level_map.scheme.value,
        "overlap_epsilon": eps,
        "level_counts": {str(k): v for k, v in counts.items()},
        "recommendation": recommend_defense(counts, m.defense),
        "flips": {x.value: len(s) for x, s in zip(MODELS, sets)},
    }
    d = m.vendor_dir
    _write(d / "levels.csv", levels_csv(level_map))
    _write(d / "levels.bin", to_bitmap(level_map))
    _write(d / "classification.json", _json(summary))
    return {"command": "classify", **summary}


def _network(m: RunManifest):
    seed = m.get("net_seed", 0)
    net, _train, test = bfa.build_toy_network(seed)
    if m.get("network"):
        net = bfa.load_network(m.get("network"))
    return net, test


def cmd_attack(m: RunManifest) -> dict:
    model = AttackModel(m.get("model", "DB").upper())
    bitmap = Path(m.get("bitmap", m.vendor_dir / "levels.bin"))
    try:
        level_map = load_bitmap(bitmap)
    except OSError as exc:
        raise ConfigurationError(f"cannot read level bitmap {bitmap}: {exc.strerror}") from None
    net, data = _network(m)
    rows = sorted({r for r, _ in level_map.levels})
    cols = 1 + max((c for _, c in level_map.levels), default=-1)
    layout = bfa.CellLayout.for_network(net, rows, cols)
    allowed = bfa.allowed_bits(level_map, layout, model)
    report = bfa.attack(net, data, allowed, m.get("max_iters", bfa.DEFAULT_MAX_ITERS), m.get("target_acc", bfa.RANDOM_GUESS))
    payload = {
        "vendor": m.vendor,
        "model": model.value,
        "scheme": level_map.scheme.value,
        "allowed_bits": len(allowed),
        "net_seed": m.get("net_seed", 0),
        "max_iters": m.get("max_iters", bfa.DEFAULT_MAX_ITERS),
        "target_acc": m.get("target_acc", bfa.RANDOM_GUESS),
        **report.to_dict(),
    }
    _write(m.vendor_dir / f"attack_{model.value}.json", _json(payload))
    return {"command": "attack", "vendor": m.vendor, "model": model.value, "iterations": report.iterations,
            "reason": report.reason}


SUMMARY_COLUMNS = (
    "vendor", "model", "flips_at_hc", "hc", "scheme", "level1", "level2", "level3", "level4",
    "attack_iterations", "attack_reached",
)


def cmd_report(m: RunManifest, warn=None) -> dict:
    warn = warn or (lambda msg: print(f"warning: {msg}", file=sys.stderr))
    out = m.out
    vendors = [m.get("vendor")] if m.get("vendor") else sorted(p.name for p in out.iterdir() if p.is_dir()) if out.is_dir() else []
    rows = []
    for vendor in vendors:
        d = out / vendor
        try:
            result = ProfileResult.from_jsonl((d / RESULT_FILE).read_text(encoding="utf-8"))
        except (OSError, ValueError, KeyError) as exc:
            warn(f"{vendor}: skipped, no readable {RESULT_FILE} ({type(exc).__name__})")
            continue
        hc = result.plan.hc_levels[-1]
        try:
            cls = json.loads((d / "classification.json").read_text(encoding="utf-8"))
        except (OSError, ValueError):
            warn(f"{vendor}: classification.json missing; level columns left blank")
            cls = None
        for model in MODELS:
            if model not in result.plan.models:
                warn(f"{vendor}: model {model.value} absent from result")
                continue
            counts = result.counts(model, hc)
            levels = [cls["level_counts"][str(k)] for k in (1, 2, 3, 4)] if cls else [""] * 4
            try:
                rep = json.loads((d / f"attack_{model.value}.json").read_text(encoding="utf-8"))
                iters, reached = rep["iterations"], rep["reason"] == "target reached"
            except (OSError, ValueError, KeyError):
                warn(f"{vendor}: attack_{model.value}.json missing; attack columns left blank")
                iters, reached = "", ""
            rows.append([vendor, model.value, _num(sum(counts) / len(counts)), hc,
                         cls["scheme"] if cls else "", *levels, iters, reached])
    _write(out / "summary.csv", _csv(rows, SUMMARY_COLUMNS))
    widths = [max(len(str(x)) for x in col) for col in zip(SUMMARY_COLUMNS, *rows)]
    text = "\n".join(
        "  ".join(str(x).ljust(w) for x, w in zip(line, widths)).rstrip() for line in [SUMMARY_COLUMNS, *rows]
    )
    _write(out / "summary.txt", text + "\n")
    return {"command": "report", "rows": len(rows)}


def cmd_calibrate(m: RunManifest) -> dict:
    vendor = m.vendor
    base = CALIBRATION_TARGETS.get(vendor)
    fields = {k: m.get(k) for k in ("vc_db", "vc_sg", "sg_count", "noise_amp")}
    if base is None and None in (fields["vc_db"], fields["vc_sg"], fields["sg_count"]):
        raise ConfigurationError(f"no built-in targets for {vendor!r}; pass --vc-db, --vc-sg and --sg-count")
    if base is not None:
        fields = {k: v if v is not None else getattr(base, k) for k, v in fields.items()}
    elif fields["noise_amp"] is None:
        fields["noise_amp"] = 0.01
    target = CalibrationTarget(**fields)
    report = calibrate(target, vendor)
    _write(m.out / "profiles.ini", dump_profiles({vendor: report.profile}))
    summary = {"vendor": vendor, "iterations": report.iterations, "counts": report.counts,
               "ratios": report.ratios, "converged": report.converged}
    _write(m.out / f"calibration_{vendor}.json", _json(summary))
    return {"command": "calibrate", **summary}


COMMANDS = {
    "profile": cmd_profile,
    "classify": cmd_classify,
    "attack": cmd_attack,
    "report": cmd_report,
    "calibrate": cmd_calibrate,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--vendor", help="vendor profile name (built-in mf-A..mf-G or from --profiles)")
    common.add_argument("--seed", type=int, help="device seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="INI manifest with a [manifest] section")
    common.add_argument("--profiles", help="INI file with extra vendor profiles")

    ap = _Parser(prog="hammerlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("profile", parents=[common], help="sweep HC levels and write curves")
    p.add_argument("--hc-levels", dest="hc_levels", help="comma-separated ascending hammer counts")
    p.add_argument("--hc-max", dest="hc_max", type=int, help="top of the default log-spaced sweep")
    p.add_argument("--trials", type=int)
    p.add_argument("--trial-seed", dest="trial_seed", type=int)
    p.add_argument("--models", help="comma-separated subset of SG,VC,DB")
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--victim-rows", dest="victim_rows", help="comma-separated victim rows")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("classify", parents=[common], help="assign security levels from a profile result")
    p.add_argument("--hc", type=int, help="hammer count to classify at (default 1000000)")
    p.add_argument("--overlap-epsilon", dest="overlap_epsilon", type=float)

    p = sub.add_parser("attack", parents=[common], help="run the greedy bit-flip attack")
    p.add_argument("--model", choices=[x.value for x in MODELS])
    p.add_argument("--bitmap", help="level bitmap (default <out>/<vendor>/levels.bin)")
    p.add_argument("--network", help="network file; default is the toy network for --net-seed")
    p.add_argument("--net-seed", dest="net_seed", type=int)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--target-acc", dest="target_acc", type=float)

    sub.add_parser("report", parents=[common], help="summarize every vendor under --out")

    p = sub.add_parser("calibrate", parents=[common], help="fit a vendor profile to flip-count targets")
    p.add_argument("--vc-db", dest="vc_db", type=float)
    p.add_argument("--vc-sg", dest="vc_sg", type=float)
    p.add_argument("--sg-count", dest="sg_count", type=int)
    p.add_argument("--noise-amp", dest="noise_amp", type=float)
    return ap


def _fail(code: int, kind: str, message: str, extra: dict | None = None) -> int:
    record = {"error": kind, "message": message, "exit_code": code, **(extra or {})}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    try:
        manifest = load_manifest(args)
        if args.command == "report" and args.vendor is None:
            manifest.settings.pop("vendor", None)
        summary = COMMANDS[args.command](manifest)
    except HammerLabError as exc:
        extra = {"grid_point": exc.grid_point} if hasattr(exc, "grid_point") else None
        return _fail(exc.exit_code, type(exc).__name__, str(exc), extra)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_INPUT, type(exc).__name__, str(exc))
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_INVARIANT, type(exc).__name__, str(exc))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
