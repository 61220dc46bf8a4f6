"""Command-line pipeline: model, simulate, correlate, tomo, fit-d, report.

Every written file gets a sidecar ``<file>.manifest.json`` recording the
command, inputs with their SHA-256, the seed, the tool version and the
resolved configuration. Nothing time-dependent is recorded, so rerunning a
stage on the same inputs reproduces its outputs byte for byte.

Exit codes::

    0  success
    2  command-line usage error
    3  invalid configuration, spec or request
    4  I/O failure
    5  file format version mismatch
    6  truncated file
    7  malformed file contents
    8  impossible conditioning outcome
    9  insufficient counts
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .correlator import Correlator, CountsTable, correlate_file, write_events, write_events_csv
from .errors import ConfigError, InsufficientDataError, QknitError, SchemaError
from .eventsim import DetectorBankConfig, StreamConfig, simulate_stream
from .model import (
    SPECS,
    ProtocolConfig,
    predicted_event_rate,
    resolve_spec,
    simulate_conditional_dm,
)
from .states import DensityMatrix, SIGMA_X, expectation, fidelity, negativity
from .tags import SettingsLog, write_tags, write_tags_csv
from .tomography import (
    REQUESTS,
    REQUEST_SPECS,
    analyze,
    ideal_reference,
    model_reference,
    reconstruct_dm,
    resolve_request,
    run_determinism_analysis,
)

EXIT_OK = 0
EXIT_IO = 4


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

PRESETS = {"default": ProtocolConfig, "ideal": ProtocolConfig.ideal, "calibrated": ProtocolConfig.calibrated}


def _protocol_from(obj) -> ProtocolConfig:
    if obj is None:
        return ProtocolConfig()
    if isinstance(obj, str):
        obj = {"preset": obj}
    if not isinstance(obj, dict):
        raise ConfigError("'protocol' must be a preset name or an object")
    obj = dict(obj)
    preset = obj.pop("preset", "default")
    if preset not in PRESETS:
        raise ConfigError(f"unknown protocol preset {preset!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[preset]()
    merged = base.to_json()
    merged.update(obj)
    return ProtocolConfig.from_json(merged)


def load_config(path: "str | None") -> StreamConfig:
    """Stream configuration from a JSON file; missing keys take defaults.

    ``protocol`` may be an object of ProtocolConfig fields, optionally with a
    ``preset`` of ``default``, ``ideal`` or ``calibrated`` to override.
    """
    if path is None:
        return StreamConfig()
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(obj) - {"protocol", "bank", "duration", "seed"}
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        return StreamConfig(
            _protocol_from(obj.get("protocol")),
            DetectorBankConfig.from_json(obj.get("bank", {})),
            float(obj.get("duration", 0.1)),
            int(obj.get("seed", 0)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, QknitError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc


def _threads() -> "int | None":
    raw = os.environ.get("QKNIT_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"QKNIT_THREADS must be a positive integer, got {raw!r}")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


# ---------------------------------------------------------------------------
# manifests and output
# ---------------------------------------------------------------------------


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_path: "str | None"
    inputs: list[str]
    outputs: list[str]
    seed: "int | None"
    version: str
    input_sha256: dict[str, str] = field(default_factory=dict)
    resolved_config: dict = field(default_factory=dict)

    @classmethod
    def build(cls, command, config_path, inputs, outputs, seed, resolved) -> "RunManifest":
        hashes = {str(p): sha256_of(p) for p in inputs}
        if config_path:
            hashes[str(config_path)] = sha256_of(config_path)
        return cls(command, config_path, [str(p) for p in inputs], [str(p) for p in outputs], seed, __version__, hashes, resolved)

    def write(self, path) -> None:
        _write_json(path, asdict(self))


def manifest_path(out) -> str:
    return f"{out}.manifest.json"


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        fh.write(_dumps(obj))


def _read_json(path) -> dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc


def _finish(args, out_paths, inputs, seed, resolved) -> None:
    m = RunManifest.build(args.command, args.config, inputs, out_paths, seed, resolved)
    for p in out_paths:
        m.write(manifest_path(p))


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.4f}"


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def model_metrics(dm: DensityMatrix, reference: DensityMatrix) -> dict[str, float]:
    out = {"fidelity_ideal": float(fidelity(dm, reference)), "purity": float(np.real(np.trace(dm.matrix @ dm.matrix)))}
    if dm.n_qubits == 1:
        out["dop_single"] = float(expectation(dm, SIGMA_X))
    elif dm.n_qubits == 2:
        out["negativity"] = float(negativity(dm, [dm.register[0]]))
        out["dop_pair"] = float(expectation(dm, np.kron(SIGMA_X, SIGMA_X)))
    return out


def _spec_arg(text: str):
    """A spec name, or a path to a MeasurementSpec JSON file."""
    if text in SPECS:
        return text, SPECS[text].spec, SPECS[text].reference()
    if os.path.exists(text):
        spec = resolve_spec(_read_json(text))
        return Path(text).stem, spec, None
    raise ConfigError(f"unknown spec {text!r}; choose from {sorted(SPECS)} or give a JSON file")


def cmd_model(args) -> int:
    cfg = load_config(args.config)
    proto = cfg.protocol
    if args.ideal:
        proto = ProtocolConfig.ideal(**{k: v for k, v in proto.to_json().items() if k in ("determinism", "quadrature_nodes")})
    elif args.calibrated:
        proto = ProtocolConfig.calibrated(**{k: v for k, v in proto.to_json().items() if k in ("determinism", "quadrature_nodes", "traced_window")})
    names = args.spec or list(SPECS)
    docs = []
    for text in names:
        name, spec, reference = _spec_arg(text)
        dm = simulate_conditional_dm(proto, spec)
        metrics = model_metrics(dm, reference) if reference is not None else {}
        docs.append((name, {"spec": name, "measurement": spec.to_json(), "dm": dm.to_json(), "metrics": metrics, "protocol": proto.to_json()}))
        line = " ".join(f"{k}={_fmt(v)}" for k, v in sorted(metrics.items()))
        print(f"spec={name} {line}".rstrip())
    if args.out:
        if len(docs) == 1:
            paths = [args.out]
        else:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            paths = [str(Path(args.out) / f"{n}.json") for n, _ in docs]
        for p, (_, doc) in zip(paths, docs):
            doc["manifest"] = Path(manifest_path(p)).name
            _write_json(p, doc)
        _finish(args, paths, [], None, {"protocol": proto.to_json()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate / correlate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.duration is not None:
        changes["duration"] = args.duration
    if changes:
        cfg = StreamConfig(cfg.protocol, cfg.bank, changes.get("duration", cfg.duration), changes.get("seed", cfg.seed))
    stream = simulate_stream(cfg)
    write_tags(args.out, stream)
    outs = [args.out]
    if args.csv:
        write_tags_csv(args.csv, stream)
        outs.append(args.csv)
    t_int_ps = int(round(cfg.protocol.integration_window * 1e12))
    corr = Correlator(stream.pulse_period_ps, t_int_ps, stream.settings)
    corr.feed_records(stream.records)
    corr.finish()
    period = stream.pulse_period_ps * 1e-12
    duration = cfg.n_pulses * period
    summary = {
        "events": len(stream),
        "pulses": cfg.n_pulses,
        "duration_s": duration,
        "pair_rate_hz": corr.stats.pairs / duration,
        "triple_rate_hz": corr.stats.chains.get(3, 0) / duration,
        "quadruple_rate_hz": corr.stats.chains.get(4, 0) / duration,
        "predicted_pair_rate_hz": predicted_event_rate(2, 1 / period, cfg.bank.efficiency) if cfg.bank.efficiency > 0 else 0.0,
    }
    for k, v in summary.items():
        print(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    _finish(args, outs, [], cfg.seed, cfg.to_json())
    return EXIT_OK


def _config_for_input(args, input_path) -> StreamConfig:
    """--config if given, else the resolved config in the input's manifest, else defaults."""
    if args.config:
        return load_config(args.config)
    side = manifest_path(input_path)
    if os.path.exists(side):
        resolved = _read_json(side).get("resolved_config") or {}
        if "protocol" in resolved:
            try:
                return StreamConfig.from_json(resolved)
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{side}: bad resolved config ({exc})") from exc
    return StreamConfig()


def cmd_correlate(args) -> int:
    cfg = _config_for_input(args, args.input)
    t_int_ps = int(round(cfg.protocol.integration_window * 1e12))
    settings = cfg.bank.settings_log()
    corr = correlate_file(
        args.input, t_int_ps, settings, max_k=args.max_k, embedded=args.embedded, keep_events=bool(args.events)
    )
    summary = corr.summary()
    doc = corr.counts.to_json()
    doc["summary"] = summary
    doc["embedded"] = args.embedded
    doc["max_k"] = args.max_k
    doc["config"] = cfg.to_json()
    doc["manifest"] = Path(manifest_path(args.out)).name
    _write_json(args.out, doc)
    outs = [args.out]
    if args.events:
        if args.events.endswith(".csv"):
            write_events_csv(args.events, corr.events)
        else:
            write_events(args.events, corr.events, corr.period)
        outs.append(args.events)
    for k in ("pairs", "kept_photons", "multi_click_pulses"):
        print(f"{k}={summary[k]}")
    for k in ("pair_rate_hz", "triple_rate_hz", "quadruple_rate_hz"):
        if k in summary:
            print(f"{k}={summary[k]:.6g}")
    print(f"cells={len(corr.counts.cells)} total_counts={corr.counts.total}")
    _finish(args, outs, [args.input], cfg.seed, cfg.to_json())
    return EXIT_OK


def load_counts(path) -> tuple[CountsTable, dict]:
    obj = _read_json(path)
    return CountsTable.from_json(obj), obj


# ---------------------------------------------------------------------------
# tomo / fit-d / report
# ---------------------------------------------------------------------------


def _request_arg(text: str):
    if text in REQUESTS:
        return text, REQUESTS[text]
    if os.path.exists(text):
        return Path(text).stem, resolve_request(_read_json(text))
    raise ConfigError(f"unknown request {text!r}; choose from {sorted(REQUESTS)} or give a JSON file")


def _tomo_doc(name, request, counts, proto, n_boot, seed):
    res = reconstruct_dm(counts, request)
    doc = res.to_json()
    if name in REQUEST_SPECS:
        ideal = ideal_reference(name)
        model = model_reference(name, proto)
        doc["metrics_vs_ideal"] = analyze(res, ideal, n_boot=n_boot, seed=seed)
        doc["metrics_vs_model"] = analyze(res, model, n_boot=n_boot, seed=seed)
        doc["model_dm"] = model.to_json()
    else:
        doc["metrics"] = analyze(res, None, n_boot=n_boot, seed=seed)
    return doc, res


def cmd_tomo(args) -> int:
    counts, obj = load_counts(args.input)
    cfg = load_config(args.config) if args.config else _config_from_counts(obj)
    name, request = _request_arg(args.spec)
    if args.psd:
        request = request.with_estimator("linear_psd")
    doc, _ = _tomo_doc(name, request, counts, cfg.protocol, args.boot, args.seed or 0)
    doc["name"] = name
    doc["config"] = cfg.to_json()
    for section in ("metrics_vs_ideal", "metrics_vs_model", "metrics"):
        for k, v in doc.get(section, {}).items():
            print(f"{section}.{k}={_fmt(v['value'])}±{_fmt(v['error'])}")
    print(f"counts_used={doc['counts_used']}")
    if args.out:
        doc["manifest"] = Path(manifest_path(args.out)).name
        _write_json(args.out, doc)
        _finish(args, [args.out], [args.input], args.seed, cfg.to_json())
    return EXIT_OK


def _config_from_counts(obj) -> StreamConfig:
    if "config" in obj:
        try:
            return StreamConfig.from_json(obj["config"])
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"bad embedded config ({exc})") from exc
    return StreamConfig()


def cmd_fit_d(args) -> int:
    counts, obj = load_counts(args.input)
    cfg = load_config(args.config) if args.config else _config_from_counts(obj)
    experiment = args.spec or "three"
    result = run_determinism_analysis(
        counts, cfg.protocol, experiment, min_counts=args.min_counts, n_boot=args.boot, seed=args.seed or 0
    )
    doc = result.to_json()
    doc["experiment"] = experiment
    print(f"d_hat={result.d_hat:.4f} error={result.error:.4f} fidelity={result.fidelity:.4f} counts_used={result.counts_used}")
    if result.wide_interval:
        print("warning: D is not constrained by these counts (wide interval)", file=sys.stderr)
    if args.out:
        doc["config"] = cfg.to_json()
        doc["manifest"] = Path(manifest_path(args.out)).name
        _write_json(args.out, doc)
        _finish(args, [args.out], [args.input], args.seed, cfg.to_json())
    return EXIT_OK


REPORT_COLUMNS = (
    "request", "counts_used",
    "fidelity_ideal", "fidelity_ideal_err",
    "fidelity_model", "fidelity_model_err",
    "negativity", "negativity_err",
    "dop", "dop_err",
    "d_hat", "d_hat_err",
)


def cmd_report(args) -> int:
    counts, obj = load_counts(args.input)
    cfg = load_config(args.config) if args.config else _config_from_counts(obj)
    rows = []
    figures = []
    out = Path(args.out)
    from .plotting import plot_density_matrix

    for name, request in REQUESTS.items():
        row = dict.fromkeys(REPORT_COLUMNS, "")
        row["request"] = name
        try:
            doc, res = _tomo_doc(name, request, counts, cfg.protocol, args.boot, args.seed or 0)
        except InsufficientDataError:
            row["counts_used"] = 0
            rows.append(row)
            continue
        row["counts_used"] = doc["counts_used"]
        mi, mm = doc["metrics_vs_ideal"], doc["metrics_vs_model"]
        row["fidelity_ideal"], row["fidelity_ideal_err"] = mi["fidelity"]["value"], mi["fidelity"]["error"]
        row["fidelity_model"], row["fidelity_model_err"] = mm["fidelity"]["value"], mm["fidelity"]["error"]
        if "negativity" in mi:
            row["negativity"], row["negativity_err"] = mi["negativity"]["value"], mi["negativity"]["error"]
        dop = mi.get("dop_single") or mi.get("dop_pair")
        if dop:
            row["dop"], row["dop_err"] = dop["value"], dop["error"]
        if name in ("three_pulse", "five_pulse"):
            d = run_determinism_analysis(
                counts, cfg.protocol, name.split("_")[0], n_boot=args.boot, seed=args.seed or 0
            )
            row["d_hat"], row["d_hat_err"] = d.d_hat, d.error
        fig = out.with_name(f"{out.stem}_{name}.png")
        plot_density_matrix(res.dm, fig, f"{name} (outlines: model)", reference=model_reference(name, cfg.protocol))
        figures.append(str(fig))
        rows.append(row)

    def cell(v):
        return f"{v:.6g}" if isinstance(v, float) else str(v)

    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow([cell(row[c]) for c in REPORT_COLUMNS])
    widths = [max(len(c), 10) for c in REPORT_COLUMNS]
    print("  ".join(c.ljust(wd) for c, wd in zip(REPORT_COLUMNS, widths)))
    for row in rows:
        print("  ".join(cell(row[c]).ljust(wd) for c, wd in zip(REPORT_COLUMNS, widths)))
    _finish(args, [str(out)] + figures, [args.input], args.seed, cfg.to_json())
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qknit", description="Spin-photon cluster-state knitting simulator.")
    p.add_argument("--version", action="version", version=f"qknit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", required=out_required, help="output path")
        sp.add_argument("--seed", type=int, help="random seed (u64)")

    m = sub.add_parser("model", help="modelled conditional density matrices")
    common(m)
    m.add_argument("--spec", action="append", help="spec name or JSON file (repeatable; default all)")
    g = m.add_mutually_exclusive_group()
    g.add_argument("--ideal", action="store_true", help="ideal limit (no lifetime, no dephasing)")
    g.add_argument("--calibrated", action="store_true", help="calibrated noise parameters")
    m.set_defaults(func=cmd_model)

    s = sub.add_parser("simulate", help="Monte Carlo time-tag stream")
    common(s, out_required=True)
    s.add_argument("--duration", type=float, help="seconds of acquisition")
    s.add_argument("--csv", help="also write the tags as CSV")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("correlate", help="bin, pair and chain time tags into counts")
    common(c, out_required=True)
    c.add_argument("input", help="binary time-tag file")
    c.add_argument("--events", help="write correlated events (.csv for CSV, else binary)")
    c.add_argument("--embedded", action="store_true", help="also count sub-events inside longer chains")
    c.add_argument("--max-k", type=int, default=5, help="largest event multiplicity tabulated")
    c.set_defaults(func=cmd_correlate)

    t = sub.add_parser("tomo", help="reconstruct a conditioned density matrix")
    common(t)
    t.add_argument("input", help="counts JSON")
    t.add_argument("--spec", default="fig3c", help="request name or JSON file")
    t.add_argument("--psd", action="store_true", help="project the estimate onto physical states")
    t.add_argument("--boot", type=int, default=200, help="bootstrap resamples")
    t.set_defaults(func=cmd_tomo)

    f = sub.add_parser("fit-d", help="fit the determinism factor")
    common(f)
    f.add_argument("input", help="counts JSON")
    f.add_argument("--spec", choices=("three", "five"), default="three", help="missing-photon experiment")
    f.add_argument("--boot", type=int, default=200, help="bootstrap resamples")
    f.add_argument("--min-counts", type=int, default=100, help="counts floor for a finite error")
    f.set_defaults(func=cmd_fit_d)

    r = sub.add_parser("report", help="table of metrics for every request, plus figures")
    common(r, out_required=True)
    r.add_argument("input", help="counts JSON")
    r.add_argument("--boot", type=int, default=200, help="bootstrap resamples")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _threads()
        return args.func(args)
    except QknitError as exc:
        print(f"qknit {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"qknit {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
