"""Command-line entry point: configuration in, artifacts out.

Six commands share one configuration scheme: an optional JSON file named by
--config plus per-field flags, flags winning.  Every command that writes
files drops a run_config.json echo of the resolved configuration next to
them, and JSON artifacts embed the same echo under a "config" key, so any
output can be traced back to the exact inputs and seed that produced it.

Exit codes: 0 success, 2 configuration or schema error, 3 identity
violation, 4 experiment threshold failure, 5 resource budget exceeded.

The --threads flag is accepted and echoed for interface stability.  All
kernels here run on a single deterministic stream per seed, so results
never depend on it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import RunConfig
from .encodings import IDENTITY_NAMES, build_bundle, export_bundle_csv, \
    verify_forest_identities
from .errors import ConfigError, GwiError, LawError, ResourceLimitError, \
    ViolationError
from .experiments import run_height_convergence, run_leftheight_convergence, \
    run_profile_convergence, run_rayknight_check, run_stable_marginal_check
from .figures import render_report_figures
from .forest import from_jsonl, generate_forest_batch, to_jsonl
from .limits import build_left_height, build_limit_system, mcbi_sde, \
    simulate_height_batch, system_invariant_report, write_trajectory_csv
from .seeds import as_generator

__all__ = ["main", "EXIT_OK", "EXIT_CONFIG", "EXIT_VIOLATION",
           "EXIT_THRESHOLD", "EXIT_RESOURCE"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VIOLATION = 3
EXIT_THRESHOLD = 4
EXIT_RESOURCE = 5

ROW_FIELDS = ("statistic", "component", "scale", "coordinate", "value",
              "threshold", "passed", "n", "excluded_fraction", "note")

_EXPERIMENTS = {
    "profile": (run_profile_convergence, ("v_list", "p_list", "replicates"),
                ("seed", "dt", "sde_paths", "thresholds")),
    "height": (run_height_convergence, ("t_list", "p_list", "replicates"),
               ("seed", "component", "extremes_replicates", "dt",
                "thresholds")),
    "leftheight": (run_leftheight_convergence, ("t_list", "p", "replicates"),
                   ("seed", "engine", "h_first", "h_cap", "chunk", "dt",
                    "reference_paths", "max_vertices", "thresholds")),
    "rayknight": (run_rayknight_check, ("v_list", "p", "replicates"),
                  ("seed", "dt", "band", "occupation_replicates",
                   "occupation_t_max", "occupation_dt", "flow_v_max",
                   "thresholds")),
    "stable": (run_stable_marginal_check, ("t", "p_list", "replicates"),
               ("seed", "component", "grid_points", "thresholds")),
}


def _jsonable(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON-serializable: {type(x).__name__}")


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(payload, fp, indent=2, sort_keys=True, default=_jsonable)
        fp.write("\n")


def _ensure_out(cfg: RunConfig) -> str:
    out = cfg.require("out_dir")
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "run_config.json"), cfg.to_dict())
    return out


def _expand_inputs(paths) -> list:
    """Files stay files; a directory contributes its *.jsonl members."""
    found = []
    for path in paths:
        if os.path.isdir(path):
            members = sorted(
                os.path.join(path, name) for name in os.listdir(path)
                if name.endswith(".jsonl")
            )
            if not members:
                raise ConfigError(f"directory {path} holds no .jsonl forests")
            found.extend(members)
        else:
            found.append(path)
    return found


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig) -> int:
    ensemble = cfg.ensemble()
    h_max = cfg.require("h_max")
    n_forests = cfg.get("n_forests", 1)
    out = _ensure_out(cfg)
    kwargs = {}
    if cfg.get("max_vertices") is not None:
        kwargs["max_vertices"] = cfg.get("max_vertices")
    forests = generate_forest_batch(
        ensemble, h_max, n_forests, as_generator(cfg.get("seed")), **kwargs
    )
    entries = []
    for k, forest in enumerate(forests):
        name = f"forest_{k:04d}.jsonl"
        to_jsonl(forest, os.path.join(out, name))
        entries.append({
            "file": name,
            "vertices": forest.size,
            "n_types": forest.n_types,
            "h_max": forest.h_max,
        })
    _write_json(os.path.join(out, "manifest.json"),
                {"config": cfg.to_dict(), "forests": entries})
    total = sum(e["vertices"] for e in entries)
    print(f"wrote {len(entries)} forest(s), {total} vertices, to {out}")
    return EXIT_OK


def cmd_encode(cfg: RunConfig) -> int:
    inputs = _expand_inputs(cfg.require("inputs"))
    out = _ensure_out(cfg)
    encoded = []
    for path in inputs:
        forest = from_jsonl(path)
        stem = os.path.splitext(os.path.basename(path))[0]
        manifest = export_bundle_csv(
            build_bundle(forest), os.path.join(out, stem), seed=cfg.get("seed")
        )
        encoded.append({"input": path, "dir": stem, "files": manifest["files"]})
    _write_json(os.path.join(out, "encode_manifest.json"),
                {"config": cfg.to_dict(), "encoded": encoded})
    print(f"encoded {len(encoded)} forest(s) into {out}")
    return EXIT_OK


def _verify_forests(sources) -> tuple:
    """sources: iterable of (label, loader). Returns (results, totals)."""
    totals = {"structural": 0, **dict.fromkeys(IDENTITY_NAMES, 0)}
    n_checked = 0
    results = []
    for label, load in sources:
        entry = {"source": label}
        try:
            forest = load()
        except ViolationError as exc:
            entry["structural_error"] = str(exc)
            totals["structural"] += 1
            results.append(entry)
            continue
        report = verify_forest_identities(forest)
        entry.update(ok=report.ok, n_checked=report.n_checked,
                     counts=report.counts, first=report.first)
        for name, count in report.counts.items():
            totals[name] += count
        n_checked += report.n_checked
        results.append(entry)
    return results, totals, n_checked


def cmd_verify(cfg: RunConfig) -> int:
    inputs = cfg.get("inputs")
    if inputs:
        sources = [
            (path, lambda p=path: from_jsonl(p))
            for path in _expand_inputs(inputs)
        ]
    else:
        ensemble = cfg.ensemble()
        h_max = cfg.require("h_max")
        n_forests = cfg.get("n_forests", 1)
        kwargs = {}
        if cfg.get("max_vertices") is not None:
            kwargs["max_vertices"] = cfg.get("max_vertices")
        forests = generate_forest_batch(
            ensemble, h_max, n_forests, as_generator(cfg.get("seed")), **kwargs
        )
        sources = [
            (f"generated[{k}]", lambda f=f: f) for k, f in enumerate(forests)
        ]
    results, totals, n_checked = _verify_forests(sources)
    violations = sum(totals.values())
    for name in ("structural", *IDENTITY_NAMES):
        print(f"{name}: {totals[name]} violation(s)")
    verdict = "PASS" if violations == 0 else "FAIL"
    print(f"verify: {verdict} ({len(results)} forest(s), "
          f"{n_checked} identity checks)")
    if violations:
        for entry in results:
            if "structural_error" in entry:
                print(f"  {entry['source']}: {entry['structural_error']}")
            elif not entry.get("ok", True):
                for name, desc in entry["first"].items():
                    print(f"  {entry['source']}: {name}: {desc}")
    out = cfg.get("out_dir")
    if out:
        os.makedirs(out, exist_ok=True)
        _write_json(os.path.join(out, "identity_report.json"), {
            "config": cfg.to_dict(),
            "ok": violations == 0,
            "totals": totals,
            "n_checked": n_checked,
            "results": results,
        })
    return EXIT_OK if violations == 0 else EXIT_VIOLATION


def cmd_simulate(cfg: RunConfig) -> int:
    mech = cfg.mechanism()
    target = cfg.get("target", "mass")
    dt = cfg.get("dt", 1e-3)
    n_paths = cfg.get("n_paths", 1)
    rng = as_generator(cfg.get("seed"))
    out = _ensure_out(cfg)
    type_names = [f"type_{j}" for j in range(1, mech.n_types + 1)]
    files = []
    extra = {}

    if target == "mass":
        result = mcbi_sde(mech, dt, cfg.require("v_max"), rng,
                          n_paths=n_paths)
        for r in range(n_paths):
            name = f"mass_{r:04d}.csv"
            write_trajectory_csv(os.path.join(out, name), result.values[r],
                                 dt, names=type_names)
            files.append(name)
        extra["clamp_fraction"] = result.clamp_fraction
    elif target == "heights":
        j = cfg.get("component", 1)
        if not 1 <= j <= mech.n_types:
            raise ConfigError(f"component {j} outside 1..{mech.n_types}")
        batch = simulate_height_batch(
            mech.beta[j - 1], mech.alpha[j - 1][j - 1], dt,
            cfg.require("t_max"), rng, n_paths
        )
        for r in range(n_paths):
            name = f"heights_{r:04d}.csv"
            series = np.stack(
                [batch.path[r], batch.height[r], batch.descent[r]]
            )
            write_trajectory_csv(os.path.join(out, name), series, dt,
                                 names=["path", "height", "descent"])
            files.append(name)
    elif target == "system":
        t_max = cfg.require("t_max")
        v_max = cfg.require("v_max")
        invariants = []
        all_ok = True
        for r in range(n_paths):
            system = build_limit_system(mech, dt, t_max, dt, v_max, rng)
            prefix = f"system_{r:04d}"
            write_trajectory_csv(os.path.join(out, f"{prefix}_mass.csv"),
                                 system.mass, dt, names=type_names)
            write_trajectory_csv(os.path.join(out, f"{prefix}_flow.csv"),
                                 system.root_flow, dt, names=type_names)
            files.extend([f"{prefix}_mass.csv", f"{prefix}_flow.csv"])
            for j in range(1, mech.n_types + 1):
                lh = build_left_height(system, j)
                name = f"{prefix}_leftheight_type{j}.csv"
                write_trajectory_csv(
                    os.path.join(out, name),
                    np.stack([lh.values, lh.shift]), dt,
                    names=["left_height", "shift"],
                )
                files.append(name)
            report = system_invariant_report(system)
            ok = report.ok
            all_ok = all_ok and ok
            invariants.append({
                f: getattr(report, f) for f in report.__dataclass_fields__
            })
        extra["invariants"] = invariants
        if not all_ok:
            bad = [
                f for entry in invariants
                for f, good in entry.items() if not good
            ]
            print(f"simulate: invariants violated: {sorted(set(bad))}",
                  file=sys.stderr)
    else:
        raise ConfigError(
            f"unknown simulate target {target!r}; "
            "choose from ['heights', 'mass', 'system']"
        )

    _write_json(os.path.join(out, "summary.json"),
                {"config": cfg.to_dict(), "files": files, **extra})
    print(f"wrote {len(files)} trajectory file(s) to {out}")
    if target == "system" and not all_ok:
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_experiment(cfg: RunConfig) -> int:
    name = cfg.require("experiment")
    if name not in _EXPERIMENTS:
        raise ConfigError(
            f"unknown experiment {name!r}; "
            f"choose from {sorted(_EXPERIMENTS)}"
        )
    runner, required, optional = _EXPERIMENTS[name]
    family = cfg.family()
    args = [cfg.require(key) for key in required]
    kwargs = {
        key: cfg.get(key) for key in optional if cfg.get(key) is not None
    }
    if cfg.get("dry_run"):
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    out = _ensure_out(cfg)
    if cfg.get("dump_samples"):
        kwargs["samples_dir"] = out
    report = runner(family, *args, **kwargs)
    report.save(os.path.join(out, "report.json"))
    verdict = "PASS" if report.passed else "FAIL"
    print(f"experiment {name}: {verdict} ({len(report.rows)} rows, "
          f"{report.runtime_seconds:.1f}s)")
    for flag in report.flags:
        print(f"  flag: {flag}")
    failed = [row for row in report.rows if not row["passed"]]
    for row in failed[:10]:
        print(f"  failed: {row['statistic']} component {row['component']} "
              f"scale {row['scale']} at {row['coordinate']:g}: "
              f"{row['value']:.4g} vs {row['threshold']:.4g}")
    if len(failed) > 10:
        print(f"  ... and {len(failed) - 10} more failed rows")
    return EXIT_OK if report.passed else EXIT_THRESHOLD


def cmd_report(cfg: RunConfig) -> int:
    src = cfg.require("report")
    try:
        with open(src, "r", encoding="utf-8") as fp:
            payload = json.load(fp)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{src} is not valid JSON: {exc}") from exc
    report = payload.get("report", payload)
    for key in ("experiment", "rows", "passed"):
        if key not in report:
            raise ConfigError(
                f"{src} is not an experiment report (missing {key!r})"
            )
    out = _ensure_out(cfg)
    rows_path = os.path.join(out, "rows.csv")
    _write_rows_csv(rows_path, report["rows"])
    figures = render_report_figures(report, out, samples=cfg.get("samples"))
    _write_json(os.path.join(out, "report_summary.json"), {
        "config": cfg.to_dict(),
        "experiment": report["experiment"],
        "passed": report["passed"],
        "report_config": report.get("config", {}),
        "files": ["rows.csv", *figures],
    })
    print(f"rendered {report['experiment']} report "
          f"({'PASS' if report['passed'] else 'FAIL'}) to {out}: "
          f"rows.csv, {', '.join(figures)}")
    return EXIT_OK


def _write_rows_csv(path, rows) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROW_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


_DISPATCH = {
    "generate": cmd_generate,
    "encode": cmd_encode,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gwiforest",
        description="Sample truncated forests with immigration, verify "
                    "their path encodings, and check scaling limits.",
    )
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    def add(name, help_text, seed=True):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config",
                        help="JSON file with config values; flags override it")
        sp.add_argument("--out-dir", dest="out_dir",
                        help="directory for output artifacts")
        if seed:
            sp.add_argument("--seed", type=int,
                            help="root seed; a fixed seed reproduces every "
                                 "artifact byte for byte")
        sp.add_argument("--threads", type=int,
                        help="worker threads; results do not depend on it")
        return sp

    g = add("generate", "sample truncated forests to JSON-lines files")
    g.add_argument("--h-max", dest="h_max", type=int,
                   help="truncation height")
    g.add_argument("--n-forests", dest="n_forests", type=int)
    g.add_argument("--p", type=int,
                   help="scale for mechanism-derived offspring laws")
    g.add_argument("--max-vertices", dest="max_vertices", type=int,
                   help="vertex budget before giving up")

    e = add("encode", "export the path encodings of stored forests to CSV")
    e.add_argument("--input", dest="inputs", action="append",
                   help="forest JSON-lines file or directory (repeatable)")

    v = add("verify", "replay the exact discrete identities and report "
                      "violations")
    v.add_argument("--input", dest="inputs", action="append",
                   help="forest JSON-lines file or directory (repeatable); "
                        "omit to generate from the config")
    v.add_argument("--h-max", dest="h_max", type=int)
    v.add_argument("--n-forests", dest="n_forests", type=int)
    v.add_argument("--p", type=int)
    v.add_argument("--max-vertices", dest="max_vertices", type=int)

    s = add("simulate", "integrate the limiting objects and write "
                        "trajectory CSVs")
    s.add_argument("--target", choices=("mass", "heights", "system"),
                   help="mass SDE, one reflected height path, or the full "
                        "substitution system")
    s.add_argument("--dt", type=float)
    s.add_argument("--v-max", dest="v_max", type=float)
    s.add_argument("--t-max", dest="t_max", type=float)
    s.add_argument("--n-paths", dest="n_paths", type=int)
    s.add_argument("--component", type=int)

    x = add("experiment", "run a convergence experiment and write its report")
    x.add_argument("--experiment", metavar="NAME",
                   help=f"one of {sorted(_EXPERIMENTS)}")
    x.add_argument("--replicates", type=int)
    x.add_argument("--p", type=int)
    x.add_argument("--dry-run", dest="dry_run", action="store_const",
                   const=True,
                   help="print the resolved configuration and exit")
    x.add_argument("--dump-samples", dest="dump_samples",
                   action="store_const", const=True,
                   help="also write the raw per-row samples as CSV")

    r = add("report", "render a saved experiment report to CSV and figures",
            seed=False)
    r.add_argument("--report", help="path to a saved report JSON")
    r.add_argument("--samples", help="raw samples CSV to histogram")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        k: v for k, v in vars(args).items()
        if k not in ("command", "config") and v is not None
    }
    try:
        if args.config:
            cfg = RunConfig.load(args.command, args.config, overrides)
        else:
            cfg = RunConfig.build(args.command, None, overrides)
        return _DISPATCH[args.command](cfg)
    except (ConfigError, LawError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ViolationError as exc:
        print(f"identity violation: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except ResourceLimitError as exc:
        print(f"resource budget exceeded: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except GwiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
