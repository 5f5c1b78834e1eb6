"""``hdsa-lab`` command line.

::

    hdsa-lab <synthesize|map|hdsa|oracle|spread> --config PATH --seed U64 --out DIR [--workers N]

Every subcommand writes CSV reports, a JSON cost ledger (where PDE solves
are involved) and ``manifest.json`` describing any binary array dumps.
Outputs depend only on the config and the seed, never on timing or the
worker count. Set ``HDSA_LOG`` (``DEBUG``, ``INFO``, ...) for log output.

Exit status: 0 on success, 2 for configuration errors, 1 for failures
during a run; failures leave ``error.json`` in the output directory.
"""
import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import oracle1d
from .config import (ConfigError, ProblemFactory, config_to_dict, parse_config, pipeline_settings,
                     scalar_problem)
from .hdsa import build_report, default_scheme, run_samples, spread_study
from .ledger import CostLedger

log = logging.getLogger("hdsa_lab")

SENSITIVITY_COLUMNS = ("qoi", "subgroup", "member", "pointwise_raw", "pointwise_norm",
                       "generalized_raw", "generalized_norm", "n_s", "seed")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


class ArrayDump:
    """Flat little-endian float64 files plus a JSON manifest."""

    def __init__(self, out):
        self.out = Path(out)
        self.entries = {}

    def add(self, name, arr):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        fname = f"{name}.f64"
        data = arr.tobytes()
        (self.out / fname).write_bytes(data)
        self.entries[name] = {"file": fname, "dtype": "float64", "byteorder": "little",
                              "shape": list(arr.shape), "sha256": hashlib.sha256(data).hexdigest()}

    def write(self, extra=None):
        write_json(self.out / "manifest.json", {"arrays": self.entries, **(extra or {})})


def load_array(manifest_path, name):
    """Read one array back from a dump directory."""
    manifest_path = Path(manifest_path)
    entry = json.loads(manifest_path.read_text())["arrays"][name]
    raw = (manifest_path.parent / entry["file"]).read_bytes()
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"])


# -- subcommands -------------------------------------------------------------


def _ledger(samples):
    led = CostLedger()
    for s in samples:
        led.record(s.index, s.counts, s.expected, s.overhead)
    out = led.to_dict()
    out["mismatches"] = [list(m) for m in led.check()]
    return out


def _dump_samples(out, samples, cfg, seed, with_map):
    dump = ArrayDump(out)
    if cfg.sampling.save_arrays:
        dump.add("m_true", np.array([s.m_true for s in samples]))
        dump.add("y", np.array([s.y for s in samples]))
        dump.add("noise", np.array([s.noise for s in samples]))
        if with_map:
            dump.add("m_star", np.array([s.m_star for s in samples]))
    dump.write({"seed": seed, "n_samples": len(samples), "config": config_to_dict(cfg)})


def _map_rows(samples, seed):
    for s in samples:
        st = s.stats
        yield {"sample": s.index, "converged": s.converged, "newton_steps": st["newton_steps"],
               "cg_iterations": st["cg_iterations"], "rejected_trials": st["rejected_trials"],
               "rejected_gradient_trials": st["rejected_gradient_trials"],
               "pde_solves": st["pde_solves"], "grad_norm0": st["grad_norm0"],
               "grad_norm": st["grad_norm"], "sq_error": s.sq_error, "map_norm": s.map_norm,
               "message": s.message, "seed": seed}


MAP_COLUMNS = ("sample", "converged", "newton_steps", "cg_iterations", "rejected_trials",
               "rejected_gradient_trials", "pde_solves", "grad_norm0", "grad_norm", "sq_error", "map_norm", "message", "seed")


def cmd_synthesize(cfg, seed, out, workers):
    samples = run_samples(ProblemFactory(cfg), pipeline_settings(cfg), seed,
                          range(cfg.sampling.n_samples), workers, stage="data")
    rows = []
    for s in samples:
        for j, (y, eta) in enumerate(zip(s.y, s.noise)):
            rows.append({"sample": s.index, "sensor": j, "y": y, "noise": eta, "seed": seed})
    write_csv(out / "data.csv", ("sample", "sensor", "y", "noise", "seed"), rows)
    write_json(out / "ledger.json", _ledger(samples))
    _dump_samples(out, samples, cfg, seed, with_map=False)


def cmd_map(cfg, seed, out, workers):
    samples = run_samples(ProblemFactory(cfg), pipeline_settings(cfg), seed,
                          range(cfg.sampling.n_samples), workers, stage="map")
    write_csv(out / "map.csv", MAP_COLUMNS, _map_rows(samples, seed))
    write_json(out / "ledger.json", _ledger(samples))
    _dump_samples(out, samples, cfg, seed, with_map=True)
    if not any(s.converged for s in samples):
        raise RuntimeError("no MAP solve converged")


def cmd_hdsa(cfg, seed, out, workers):
    factory = ProblemFactory(cfg)
    params = factory().params
    samples = run_samples(factory, pipeline_settings(cfg), seed, range(cfg.sampling.n_samples),
                          workers, stage="full")
    scheme = default_scheme(params)
    report = build_report(samples, scheme, params.theta_names, seed)
    write_csv(out / "sensitivities.csv", SENSITIVITY_COLUMNS, report.rows())
    write_csv(out / "map.csv", MAP_COLUMNS, _map_rows(samples, seed))
    write_json(out / "summary.json", {
        "bayes_risk": report.bayes_risk, "avg_map_norm": report.avg_map_norm,
        "n_s": report.n_s, "n_failed": report.n_failed, "seed": seed,
        "theta_names": report.theta_names, "DR": report.DR, "warnings": report.warnings,
        "subgroups": list(scheme.names),
    })
    write_json(out / "ledger.json", _ledger(samples))
    _dump_samples(out, samples, cfg, seed, with_map=True)


def cmd_spread(cfg, seed, out, workers):
    factory = ProblemFactory(cfg)
    params = factory().params
    sp = cfg.spread
    samples = run_samples(factory, pipeline_settings(cfg), seed, range(sp.pool_size), workers,
                          stage="risk")
    scheme = default_scheme(params)
    study = spread_study(samples, scheme, sp.group_sizes, sp.n_groups, seed)
    rows = []
    for n in study.group_sizes:
        for g in range(study.n_groups):
            for k, name in enumerate(scheme.names):
                rows.append({"group_size": n, "group": g, "subgroup": name,
                             "generalized_raw": study.values[n][g, k],
                             "generalized_norm": study.normalized[n][g, k], "seed": seed})
    write_csv(out / "spread.csv", ("group_size", "group", "subgroup", "generalized_raw",
                                   "generalized_norm", "seed"), rows)
    raw, norm = study.summary(), study.summary(normalized=True)
    summary = []
    for n in study.group_sizes:
        for k, name in enumerate(scheme.names):
            summary.append({"group_size": n, "subgroup": name,
                            "min_raw": raw[n]["min"][k], "max_raw": raw[n]["max"][k],
                            "std_raw": raw[n]["std"][k], "min_norm": norm[n]["min"][k],
                            "max_norm": norm[n]["max"][k], "std_norm": norm[n]["std"][k]})
    write_csv(out / "spread_summary.csv", ("group_size", "subgroup", "min_raw", "max_raw", "std_raw",
                                           "min_norm", "max_norm", "std_norm"), summary)
    write_json(out / "ledger.json", _ledger(samples))
    _dump_samples(out, samples, cfg, seed, with_map=True)


def cmd_oracle(cfg, seed, out, workers):
    pb = scalar_problem(cfg)
    o = cfg.oracle
    fig = oracle1d.figure_data(pb, seed, m_true=o.m_true, perturbed_theta=o.perturbed_theta)
    write_csv(out / "oracle_state.csv", ("x", "state"),
              ({"x": x, "state": u} for x, u in fig["curve"]))
    write_csv(out / "oracle_data.csv", ("x", "y"), ({"x": x, "y": y} for x, y in fig["data"]))
    write_csv(out / "oracle_densities.csv", ("m", "prior", "posterior_nominal", "posterior_perturbed"),
              ({"m": r[0], "prior": r[1], "posterior_nominal": r[2], "posterior_perturbed": r[3]}
               for r in fig["densities"]))
    res = oracle1d.scalar_hdsa(pb, o.n_samples, seed)
    rows = [
        {"qoi": "map", "subgroup": "theta", "member": "theta", "pointwise_raw": res.map_formula,
         "pointwise_norm": res.map_formula / np.mean(np.abs(res.m_star)),
         "generalized_raw": res.map_formula,
         "generalized_norm": res.map_formula / np.mean(np.abs(res.m_star)), "n_s": o.n_samples, "seed": seed},
        {"qoi": "risk", "subgroup": "theta", "member": "theta", "pointwise_raw": abs(res.risk_formula),
         "pointwise_norm": abs(res.risk_formula) / res.bayes_risk,
         "generalized_raw": abs(res.risk_formula),
         "generalized_norm": abs(res.risk_formula) / res.bayes_risk, "n_s": o.n_samples, "seed": seed},
    ]
    write_csv(out / "sensitivities.csv", SENSITIVITY_COLUMNS, rows)
    write_json(out / "oracle.json", {
        "bayes_risk": res.bayes_risk, "risk_formula": res.risk_formula, "risk_fd": res.risk_fd,
        "map_formula": res.map_formula, "map_fd": res.map_fd, "moments": fig["moments"],
        "seed": seed, "n_samples": o.n_samples,
    })
    ArrayDump(out).write({"seed": seed})


COMMANDS = {
    "synthesize": cmd_synthesize,
    "map": cmd_map,
    "hdsa": cmd_hdsa,
    "oracle": cmd_oracle,
    "spread": cmd_spread,
}


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="hdsa-lab", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", required=True, type=_u64, help="master seed (unsigned 64-bit)")
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--workers", type=_positive, default=1, help="worker processes for sample loops")
    return p


def _setup_logging():
    level = os.environ.get("HDSA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = parse_config(args.config)
    except (ConfigError, OSError) as exc:
        write_json(out / "error.json", {"status": "error", "phase": "config",
                                        "type": type(exc).__name__, "message": str(exc),
                                        "key": getattr(exc, "key", None),
                                        "line": getattr(exc, "line", None)})
        print(f"hdsa-lab: config error: {exc}", file=sys.stderr)
        return 2
    cfg.seed = args.seed
    try:
        COMMANDS[args.command](cfg, args.seed, out, args.workers)
    except Exception as exc:  # noqa: BLE001 -- reported as a machine-readable record
        log.debug("%s", traceback.format_exc())
        write_json(out / "error.json", {"status": "error", "phase": args.command,
                                        "type": type(exc).__name__, "message": str(exc)})
        print(f"hdsa-lab: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    stale = out / "error.json"
    if stale.exists():
        stale.unlink()
    return 0


if __name__ == "__main__":
    sys.exit(main())
