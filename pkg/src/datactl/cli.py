"""Command-line entry point for datactl.

JSON reports go to stdout (or ``--out``); human-readable summaries go to
stderr. Exit codes: 0 pass/success, 1 fail, 2 indeterminate, 3 usage or
data error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, DatactlWarning

EXIT_OK, EXIT_FAIL, EXIT_INDETERMINATE, EXIT_ERROR = 0, 1, 2, 3


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}", self.format_usage())


def _clean(obj):
    """Recursively replace non-finite floats (and numpy scalars) so output is strict JSON."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _dumps(obj) -> str:
    return json.dumps(_clean(obj), allow_nan=False)


class _Emitter:
    def __init__(self, args):
        self.path = getattr(args, "out", None)
        self.quiet = getattr(args, "quiet", False)
        self._chunks: list[str] = []

    def json(self, obj) -> None:
        self._chunks.append(_dumps(obj) + "\n")

    def text(self, s: str) -> None:
        self._chunks.append(s)

    def summary(self, msg: str) -> None:
        if not self.quiet:
            print(msg, file=sys.stderr)

    def flush(self) -> None:
        data = "".join(self._chunks)
        if self.path:
            Path(self.path).write_text(data, encoding="utf-8")
        else:
            sys.stdout.write(data)


def _load_json(path, what: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} {path}: malformed JSON ({exc.msg})") from None


def _trace(path, args):
    from .trace import parse_trace
    return parse_trace(path, strict=not args.lenient)


def _binning(trace, args):
    from .stats import fit_binning
    return fit_binning(trace, args.x_bins, args.y_bins)


def _model(args):
    from .trace import ModelDescriptor
    if not getattr(args, "model_name", None):
        return None
    return ModelDescriptor(args.model_name, loss=args.loss)


def _dump_dist(args, trace, binning) -> None:
    if getattr(args, "dump_dist", None):
        from .stats import estimate_conditional
        Path(args.dump_dist).write_text(estimate_conditional(trace, binning).to_jsonl(), encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args, out: _Emitter) -> int:
    from . import refsys
    from .trace import dumps_trace
    params = _load_json(args.params, "params") if args.params else {}
    if not isinstance(params, dict):
        raise DataError("params file must hold a JSON object")
    if args.system == "lv":
        params = dict(params)
        sample_every = int(params.pop("sample_every", 10))
        obs_noise = float(params.pop("obs_noise", 0.0))
        try:
            lv = refsys.LotkaVolterraParams(**params)
        except TypeError as exc:
            raise DataError(f"invalid Lotka-Volterra parameters: {exc}") from None
        trace = refsys.generate_lv_trace(lv, args.n, sample_every, obs_noise, args.seed)
    else:
        unknown = set(params) - {"model", "knobs", "inputs"}
        if unknown:
            raise DataError(f"unknown params keys {sorted(unknown)}; expected model, knobs, inputs")
        model = refsys.model_from_json(args.system, params.get("model"))
        knobs = refsys.knobs_from_json(params.get("knobs"))
        inputs = None
        if params.get("inputs") is not None:
            try:
                inputs = refsys.InputProcess(**params["inputs"])
            except TypeError as exc:
                raise DataError(f"invalid input process: {exc}") from None
        trace = refsys.generate_trace(model, args.n, args.seed, knobs, inputs)
    out.text(dumps_trace(trace))
    out.summary(f"simulated {len(trace)} records of {args.system} (seed {args.seed})")
    return EXIT_OK


def cmd_classify(args, out: _Emitter) -> int:
    from .sysclass import classify_passive
    trace = _trace(args.trace, args)
    binning = _binning(trace, args)
    _dump_dist(args, trace, binning)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DatactlWarning)
        result = classify_passive(trace, args.segments, args.kappa, binning, history=args.history)
    out.json(result.to_json())
    out.summary(f"class: {result.label.value} (confidence {result.confidence:.3f})")
    return EXIT_OK


def _verdict(verdict, out: _Emitter) -> int:
    out.json(verdict.to_json())
    out.summary(verdict.summary)
    return verdict.exit_code


def cmd_check_robustness(args, out: _Emitter) -> int:
    from .properties import RobustnessSpec, check_robustness
    spec = RobustnessSpec.from_json(_load_json(args.spec, "spec"))
    trace = _trace(args.trace, args)
    binning = _binning(trace, args)
    _dump_dist(args, trace, binning)
    return _verdict(check_robustness(trace, spec, binning, _model(args)), out)


def cmd_check_sensitivity(args, out: _Emitter) -> int:
    from .properties import SensitivitySpec, check_sensitivity
    spec = SensitivitySpec.from_json(_load_json(args.spec, "spec"))
    trace = _trace(args.trace, args)
    binning = _binning(trace, args)
    _dump_dist(args, trace, binning)
    return _verdict(check_sensitivity(trace, spec, binning, _model(args)), out)


def cmd_check_stability(args, out: _Emitter) -> int:
    from .properties import StabilityParams, check_stability
    params = StabilityParams(args.window, args.stride, args.eta, args.grace)
    trace = _trace(args.trace, args)
    binning = _binning(trace, args)
    _dump_dist(args, trace, binning)
    verdict = check_stability(trace, params, binning, _model(args), args.event_tag)
    if args.plot and not verdict.indeterminate:
        d = verdict.details["d_kl"]
        _plot(args.plot, verdict.details["window_starts"][1:], {"D_KL": d[1:]},
              "window start t", "nats", hlines={})
    return _verdict(verdict, out)


def cmd_monitor(args, out: _Emitter) -> int:
    from .monitor import build_reference, iter_reports
    dev = _trace(args.reference, args)
    stream = _trace(args.stream, args)
    profile = build_reference(dev, _binning(dev, args))
    reports = list(iter_reports(stream, profile, args.width, args.theta_x, args.theta_y, args.theta_c))
    for r in reports:
        out.json(r.to_json())
    if args.plot and reports:
        ts = [r.t_start for r in reports]
        series = {"input": [r.input_kl for r in reports], "output": [r.output_kl for r in reports],
                  "conditional": [r.conditional_kl for r in reports]}
        _plot(args.plot, ts, series, "window start t", "KL (nats)",
              hlines={"theta_x": args.theta_x, "theta_y": args.theta_y, "theta_c": args.theta_c})
    if not reports:
        out.summary(f"monitor: no window of {args.width} records completed")
        return EXIT_INDETERMINATE
    shifted = [r for r in reports if r.label != "none"]
    counts = {}
    for r in reports:
        counts[r.label] = counts.get(r.label, 0) + 1
    out.summary(f"monitor: {len(reports)} windows, labels {dict(sorted(counts.items()))}")
    return EXIT_FAIL if shifted else EXIT_OK


def cmd_imagine(args, out: _Emitter) -> int:
    from .imagination import CriticalCaseBuffer, load_kb, run_pipeline
    from .monitor import build_reference
    dev = _trace(args.reference, args)
    stream = _trace(args.stream, args)
    kb = load_kb(_load_json(args.kb, "kb"))
    profile = build_reference(dev, _binning(dev, args))
    critical = CriticalCaseBuffer(args.critical_out) if args.critical_out else None
    outputs = run_pipeline(stream, profile, kb, args.top_k, args.buffer, critical)
    for o in outputs:
        out.json(o.to_json())
    n_mis = sum(o.misuse for o in outputs)
    out.summary(f"imagine: {len(outputs)} records, {n_mis} misused, "
                f"{sum(o.degraded for o in outputs)} degraded")
    return EXIT_OK


def cmd_trust(args, out: _Emitter) -> int:
    from .retrospect import TrustState, auto_scale, read_pairs, trust_report, update_trust
    pairs = read_pairs(args.pairs)
    if args.scale == "auto":
        scale = auto_scale(pairs)
    else:
        try:
            scale = np.array([float(v) for v in args.scale.split(",")])
        except ValueError:
            raise DataError(f"--scale must be 'auto' or comma-separated numbers, got {args.scale!r}") from None
    state = TrustState(args.window, args.beta)
    for p in pairs:
        state = update_trust(state, p, scale)
        out.json({"t": p.t, "trust": state.trust if state.accepted else None,
                  "conservatism": state.conservatism if state.accepted else None,
                  "accepted": state.accepted, "rejected": state.rejected})
    report = trust_report(state)
    if report["status"] == "indeterminate":
        out.summary(f"trust: no accepted pairs ({state.rejected} rejected)")
        return EXIT_INDETERMINATE
    out.summary(f"trust: {report['trust']:.4f} (conservatism {report['conservatism']:.4f}, "
                f"{state.accepted} accepted, {state.rejected} rejected)")
    return EXIT_OK


def _plot(path, xs, series: dict, xlabel: str, ylabel: str, hlines: dict) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 3.5))
    for name, ys in series.items():
        ax.plot(xs, [np.nan if v is None else v for v in ys], marker=".", label=name)
    for name, v in hlines.items():
        ax.axhline(v, linestyle="--", linewidth=0.8, color="grey")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {s}")
    return v


def _positive_float(s: str) -> float:
    v = float(s)
    if not v > 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s}")
    return v


def _nonneg_float(s: str) -> float:
    v = float(s)
    if not v >= 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {s}")
    return v


def build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="CFG.json", help="JSON object of option defaults; flags take precedence")
    common.add_argument("--out", metavar="PATH", help="write the report here instead of stdout")
    common.add_argument("--lenient", action="store_true", help="ignore unknown record keys and sort records by t")
    common.add_argument("-q", "--quiet", action="store_true", help="suppress the stderr summary")

    bins = _Parser(add_help=False)
    bins.add_argument("--x-bins", type=_positive_int, default=8)
    bins.add_argument("--y-bins", type=_positive_int, default=8)

    checks = _Parser(add_help=False)
    checks.add_argument("--dump-dist", metavar="PATH", help="write the estimated conditional as sparse JSONL")
    checks.add_argument("--model-name", help="monitored model name, carried into the report")
    checks.add_argument("--loss", help="performance measure name, report annotation only")

    parser = _Parser(prog="datactl", description="Trace analysis, property checks and runtime monitoring.")
    parser.add_argument("--version", action="version", version=f"datactl {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", parents=[common], help="generate a trace from a reference system")
    p.add_argument("--system", required=True, choices=["lv", "static", "nonstat", "dynamic"])
    p.add_argument("--params", metavar="P.json")
    p.add_argument("--n", type=_positive_int, default=10_000)
    p.add_argument("--seed", type=_nonneg_int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("classify", parents=[common, checks], help="classify a trace as static, non-stationary or dynamic")
    p.add_argument("--trace", required=True)
    p.add_argument("--segments", type=_positive_int, default=4)
    p.add_argument("--kappa", type=_positive_float, default=0.05)
    p.add_argument("--history", type=_positive_int, default=3)
    p.add_argument("--x-bins", type=_positive_int, default=6)
    p.add_argument("--y-bins", type=_positive_int, default=6)
    p.set_defaults(func=cmd_classify)

    for name, func, helptext in (("check-robustness", cmd_check_robustness, "circumstance robustness check"),
                                 ("check-sensitivity", cmd_check_sensitivity, "circumstance sensitivity check")):
        p = sub.add_parser(name, parents=[common, bins, checks], help=helptext)
        p.add_argument("--trace", required=True)
        p.add_argument("--spec", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("check-stability", parents=[common, bins, checks], help="window-to-window divergence stability check")
    p.add_argument("--trace", required=True)
    p.add_argument("--window", type=_positive_int, default=500)
    p.add_argument("--stride", type=_positive_int, default=250)
    p.add_argument("--eta", type=_nonneg_float, default=0.02)
    p.add_argument("--grace", type=_nonneg_int, default=2)
    p.add_argument("--event-tag", default="circumstance_change")
    p.add_argument("--plot", metavar="SVG")
    p.set_defaults(func=cmd_check_stability)

    p = sub.add_parser("monitor", parents=[common, bins], help="windowed shift detection against a reference trace")
    p.add_argument("--reference", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--width", type=_positive_int, default=500)
    p.add_argument("--theta-x", type=_nonneg_float, default=0.1)
    p.add_argument("--theta-y", type=_nonneg_float, default=0.1)
    p.add_argument("--theta-c", type=_nonneg_float, default=0.1)
    p.add_argument("--plot", metavar="SVG")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("imagine", parents=[common, bins], help="substitute inputs for misused records")
    p.add_argument("--reference", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--kb", required=True)
    p.add_argument("--top-k", type=_positive_int, default=3)
    p.add_argument("--buffer", type=_positive_int, default=100)
    p.add_argument("--critical-out", metavar="PATH", help="append misused records to this JSONL file")
    p.set_defaults(func=cmd_imagine)

    p = sub.add_parser("trust", parents=[common], help="retrospective trust from prediction/outcome pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--beta", type=_positive_float, default=1.0)
    p.add_argument("--window", type=_positive_int, default=50)
    p.add_argument("--scale", default="auto")
    p.set_defaults(func=cmd_trust)
    return parser


def _prescan(argv: list[str], commands) -> tuple[str | None, str | None]:
    """Subcommand name and ``--config`` value, found without a full parse."""
    command = next((a for a in argv if a in commands), None)
    config = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif a.startswith("--config="):
            config = a.split("=", 1)[1]
    return command, config


def _apply_config(parser: _Parser, command: str, path: str) -> None:
    cfg = _load_json(path, "config")
    if not isinstance(cfg, dict):
        raise DataError("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[command]  # noqa: SLF001
    by_dest = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}  # noqa: SLF001
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = set(cfg) - set(by_dest)
    if unknown:
        raise DataError(f"config keys not valid for {command}: {sorted(unknown)}")
    for k, v in cfg.items():
        action = by_dest[k]
        if action.type is not None and v is not None and not isinstance(v, bool):
            try:
                v = action.type(str(v))
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise DataError(f"config key {k!r}: {exc}") from None
        if action.choices is not None and v not in action.choices:
            raise DataError(f"config key {k!r}: {v!r} not in {sorted(action.choices)}")
        cfg[k] = v
        # an option supplied by the config is no longer required on the command line
        action.required = False
    sub.set_defaults(**cfg)


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        commands = parser._subparsers._group_actions[0].choices  # noqa: SLF001
        command, config = _prescan(argv, commands)
        if command and config:
            _apply_config(parser, command, config)
        args = parser.parse_args(argv)
        out = _Emitter(args)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DatactlWarning)
            code = args.func(args, out)
        out.flush()
        return code
    except UsageError as exc:
        sys.stderr.write(exc.usage)
        print(exc, file=sys.stderr)
        return EXIT_ERROR
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (DataError, OSError, ValueError) as exc:
        print(f"datactl: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(run())
