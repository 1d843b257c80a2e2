"""Command-line front-end: sampling runs, post-processing, evidence, efficiency.

Subcommands
-----------
smc          adaptive pilot run plus seeded non-adaptive replays (one archive each)
postprocess  control-variate estimates of integrands from an archived population
evidence     CTI / telescoping-product evidence reports from an archive
efficiency   MSE-ratio tables across replicate estimate files

All randomness flows from ``--seed``; given identical inputs and seeds every
output file is byte-identical.  Wall-clock times and timestamps live only in
the ``run.log`` / ``timings.json`` sidecars.  Exit codes: 2 configuration,
3 numerical failure, 4 I/O.

Method strings (``--methods``, comma-separated):

    vanilla                      plain weighted mean
    zv[:Q=2][:ols|ridge|lasso][:lam=F][:split][:relaxed][:sub=1+3]
    cf[:bw=F][:lam=F][:folds=K] | cf:poly[:Q=2][:lam=F]
    crossval[:maxQ=I]

Subset indices in ``sub=`` are 1-based coordinate numbers joined by '+'.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import (
    BasisTooLarge,
    ConditioningError,
    ConvergenceError,
    DegenerateWeights,
    DomainError,
    InsufficientSamples,
    InvalidInput,
    InvalidSchedule,
)
from .evidence import (
    VANILLA,
    CfMethod,
    CrossvalMethod,
    cti_estimate,
    expectation_with_provenance,
    method_label,
    smc_evidence_estimate,
)
from .models import model_from_manifest
from .polybasis import SubsetSpec
from .samples import read_sample_csv
from .smc import (
    SmcConfig,
    load_particle_system,
    posthoc_schedule,
    run_smc,
    save_particle_system,
)
from .zvcv import ZvSpec

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

_PATH_KEYS = ("data_csv", "design_csv", "response_csv")


# --- method grammar -----------------------------------------------------------


def _num(text: str, conv, what: str):
    try:
        return conv(text)
    except ValueError:
        raise InvalidInput(f"cannot parse {what} from {text!r}") from None


def parse_method(token: str):
    """Parse one method string into a selector object."""
    parts = token.strip().split(":")
    head, rest = parts[0], parts[1:]
    if head in ("vanilla", "none"):
        if rest:
            raise InvalidInput(f"{head!r} takes no options")
        return VANILLA
    if head == "crossval":
        max_q = None
        for p in rest:
            if p.startswith("maxQ="):
                max_q = _num(p[5:], int, "maxQ")
            else:
                raise InvalidInput(f"unknown crossval option {p!r}")
        return CrossvalMethod(max_degree=max_q)
    if head == "cf":
        kind, bw, lam, q, folds = "gaussian", None, 0.0, 2, 5
        for p in rest:
            if p == "poly":
                kind = "polynomial"
            elif p.startswith("bw="):
                bw = _num(p[3:], float, "bandwidth")
            elif p.startswith("lam="):
                lam = _num(p[4:], float, "lam")
            elif p.startswith("Q="):
                q = _num(p[2:], int, "Q")
            elif p.startswith("folds="):
                folds = _num(p[6:], int, "folds")
            else:
                raise InvalidInput(f"unknown cf option {p!r}")
        return CfMethod(bandwidth=bw, lam_r=lam, kind=kind, degree=q, folds=folds)
    if head == "zv":
        q, penalty, lam, split, relaxed, subset = 2, "ols", None, False, False, None
        for p in rest:
            if p.startswith("Q="):
                q = _num(p[2:], int, "Q")
            elif p in ("ols", "ridge", "lasso"):
                penalty = p
            elif p == "split":
                split = True
            elif p == "relaxed":
                relaxed = True
            elif p.startswith("lam="):
                lam = _num(p[4:], float, "lam")
            elif p.startswith("sub="):
                cols = [_num(v, int, "subset index") for v in p[4:].split("+")]
                if any(c < 1 for c in cols):
                    raise InvalidInput("subset indices are 1-based")
                subset = SubsetSpec(tuple(sorted(c - 1 for c in cols)))
            else:
                raise InvalidInput(f"unknown zv option {p!r}")
        return ZvSpec(
            degree=q, penalty=penalty, subset=subset,
            estimator="split" if split else "combined",
            lam=lam, relaxed=relaxed,
        )
    raise InvalidInput(f"unknown method {token!r}")


def parse_methods(spec: str):
    tokens = [t for t in (s.strip() for s in spec.split(",")) if t]
    if not tokens:
        raise InvalidInput("empty method list")
    return [parse_method(t) for t in tokens]


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9.+-]+", "-", label)


def _derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=tuple(key)).generate_state(1)[0])


# --- sidecars -----------------------------------------------------------------


class _Sidecar:
    """Timestamped log lines and named durations, kept out of the main outputs."""

    def __init__(self, out_dir: Path):
        self.out = out_dir
        self.lines: list[str] = []
        self.timings: dict = {"entries": {}}

    def note(self, msg: str) -> None:
        stamp = datetime.now(timezone.utc).isoformat()
        self.lines.append(f"{stamp} {msg}")

    def record(self, key: str, seconds: float) -> None:
        self.timings["entries"][key] = seconds

    def flush(self) -> None:
        self.timings["total_s"] = float(sum(self.timings["entries"].values()))
        (self.out / "run.log").write_text("".join(line + "\n" for line in self.lines))
        with (self.out / "timings.json").open("w") as fh:
            json.dump(self.timings, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _write_json(path: Path, payload: dict) -> None:
    with path.open("w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"malformed JSON in {path}: {exc}") from exc


def _resolve_manifest_paths(manifest: dict, base_dir: Path) -> dict:
    """Copy of a model manifest with data paths made absolute for embedding."""
    out = dict(manifest)
    for key in _PATH_KEYS:
        if key in out:
            p = Path(out[key])
            out[key] = str(p if p.is_absolute() else (base_dir / p).resolve())
    return out


# --- smc ----------------------------------------------------------------------


def _run_replicate(model_manifest: dict, cfg_kwargs: dict, record, out_dir: str) -> float:
    """Worker for the replicate pool; isolated per process, returns wall time."""
    model = model_from_manifest(model_manifest)
    t0 = time.perf_counter()
    ps = run_smc(model, SmcConfig(**cfg_kwargs), replay=record)
    elapsed = time.perf_counter() - t0
    save_particle_system(ps, out_dir, model_manifest=model_manifest)
    return elapsed


def cmd_smc(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    side = _Sidecar(out)
    manifest = _read_json(Path(args.model))
    resolved = _resolve_manifest_paths(manifest, Path(args.model).parent)
    model = model_from_manifest(resolved)
    cfg = SmcConfig(
        n_particles=args.n,
        rho=args.rho,
        rho_tilde=args.rho_tilde,
        h_min=args.hmin,
        h_max=args.hmax,
        jump_fraction=args.jump_fraction,
        jump_threshold_stat=args.jump_stat,
        max_repeats=args.max_repeats,
        seed=args.seed,
    )

    side.note(f"pilot run starting: N={cfg.n_particles} seed={cfg.seed}")
    t0 = time.perf_counter()
    pilot = run_smc(model, cfg)
    side.record("pilot", time.perf_counter() - t0)
    save_particle_system(pilot, out / "pilot", model_manifest=resolved)
    side.note(f"pilot finished: {len(pilot.snapshots)} temperatures")

    record = pilot.replay_record()
    replicate_seeds = [args.seed + 1 + r for r in range(args.replicates)]
    jobs = max(1, min(args.jobs, max(args.replicates, 1)))
    if jobs > 1 and args.replicates > 1:
        # replicates are fully isolated: each worker rebuilds the model from
        # the manifest and writes only its own directory
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(
                    _run_replicate, resolved, asdict(replace(cfg, seed=seed_r)),
                    record, str(out / "replicates" / f"rep_{r:03d}"),
                ): r
                for r, seed_r in enumerate(replicate_seeds)
            }
            for fut in as_completed(futures):
                r = futures[fut]
                side.record(f"replicate_{r:03d}", fut.result())
    else:
        for r, seed_r in enumerate(replicate_seeds):
            t0 = time.perf_counter()
            ps = run_smc(model, replace(cfg, seed=seed_r), replay=record)
            side.record(f"replicate_{r:03d}", time.perf_counter() - t0)
            save_particle_system(ps, out / "replicates" / f"rep_{r:03d}",
                                 model_manifest=resolved)
    side.note(f"{args.replicates} replay runs finished")

    _write_json(out / "run_config.json", {
        "command": "smc",
        "model_manifest_path": str(args.model),
        "model": resolved,
        "smc": {
            "n_particles": cfg.n_particles, "rho": cfg.rho,
            "rho_tilde": cfg.rho_tilde, "h_min": cfg.h_min, "h_max": cfg.h_max,
            "h_grid_size": cfg.h_grid_size,
            "jump_fraction": cfg.jump_fraction,
            "jump_threshold_stat": cfg.jump_threshold_stat,
            "max_repeats": cfg.max_repeats, "resampling": cfg.resampling,
            "seed": cfg.seed, "bisection_tol": cfg.bisection_tol,
        },
        "replicates": args.replicates,
        "replicate_seeds": replicate_seeds,
    })
    side.flush()
    temps = ", ".join(f"{t:.4f}" for t in pilot.temperatures)
    print(f"pilot: {len(pilot.snapshots)} temperatures [{temps}]")
    print(f"pilot log evidence (reweighting increments): {pilot.log_evidence!r}")
    print(f"replicates: {args.replicates}")
    return EXIT_OK


# --- postprocess ----------------------------------------------------------------


def _build_integrands(tokens: str, theta: np.ndarray):
    d = theta.shape[1]
    out = []
    for token in (t.strip() for t in tokens.split(",")):
        if not token:
            continue
        if token in ("mean", "identity"):
            out.extend((f"theta{j + 1}", theta[:, j]) for j in range(d))
        elif token == "square":
            out.extend((f"theta{j + 1}^2", theta[:, j] ** 2) for j in range(d))
        elif token.startswith("coord="):
            k = _num(token[6:], int, "coordinate")
            if not 1 <= k <= d:
                raise InvalidInput(f"coordinate {k} out of range 1..{d}")
            out.append((f"theta{k}", theta[:, k - 1]))
        else:
            raise InvalidInput(f"unknown integrand {token!r}")
    if not out:
        raise InvalidInput("empty integrand list")
    return out


def cmd_postprocess(args) -> int:
    archive = Path(args.archive)
    manifest = _read_json(archive / "manifest.json")
    n_temps = len(manifest["temperatures"])
    idx = args.snapshot if args.snapshot is not None else n_temps - 1
    if idx < 0:
        idx += n_temps
    if not 0 <= idx < n_temps:
        raise InvalidInput(f"snapshot index {args.snapshot} out of range")
    s = read_sample_csv(archive / f"t_{idx:03d}.csv")
    temperature = float(manifest["temperatures"][idx])

    methods = parse_methods(args.methods)
    integrands = _build_integrands(args.integrands, s.theta)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    side = _Sidecar(out)
    results = []
    for mi, method in enumerate(methods):
        label = method_label(method)
        for ii, (name, values) in enumerate(integrands):
            t0 = time.perf_counter()
            rec = expectation_with_provenance(
                s, values, method,
                seed=_derive_seed(args.seed, mi, ii),
                temperature=temperature,
            )
            side.record(f"{name}|{label}", time.perf_counter() - t0)
            results.append({
                "integrand": name,
                "method": label,
                "method_used": rec.method,
                "estimate": rec.estimate,
                "raw": rec.raw,
                "detail": rec.detail,
            })
    _write_json(out / "estimates.json", {
        "archive": str(args.archive),
        "snapshot_index": idx,
        "temperature": temperature,
        "seed": args.seed,
        "results": results,
    })
    side.note(f"{len(results)} estimates written")
    side.flush()
    for r in results:
        print(f"{r['integrand']:>12}  {r['method']:<24} {r['estimate']!r}")
    return EXIT_OK


# --- evidence -------------------------------------------------------------------


def cmd_evidence(args) -> int:
    archive = Path(args.archive)
    manifest = _read_json(archive / "manifest.json")
    if not manifest.get("model"):
        raise InvalidInput("archive manifest has no embedded model")
    model = model_from_manifest(manifest["model"])
    ps = load_particle_system(archive, model)
    schedule = ps.schedule()
    if args.posthoc_rho is not None:
        schedule = posthoc_schedule(ps, args.posthoc_rho)

    methods = parse_methods(args.methods)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    side = _Sidecar(out)
    summary = []
    for mi, method in enumerate(methods):
        label = method_label(method)
        seed = _derive_seed(args.seed, mi)
        t0 = time.perf_counter()
        if args.estimator == "smc":
            report = smc_evidence_estimate(schedule, ps, cv=method, seed=seed)
        else:
            order = 1 if args.estimator == "cti1" else 2
            report = cti_estimate(schedule, ps, order=order, cv=method,
                                  v_mean_mode=args.v_mean_mode, seed=seed)
        side.record(f"log_evidence:{args.estimator}|{label}",
                    time.perf_counter() - t0)
        name = f"evidence_{args.estimator}_{_slug(label)}.json"
        report.save(out / name)
        summary.append({
            "file": name,
            "method": label,
            "log_evidence": report.log_evidence,
            "fallbacks_triggered": report.fallbacks_triggered,
        })
    _write_json(out / "summary.json", {
        "archive": str(args.archive),
        "estimator": args.estimator,
        "posthoc_rho": args.posthoc_rho,
        "n_temperatures": len(schedule),
        "seed": args.seed,
        "reports": summary,
    })
    side.note(f"{len(summary)} evidence reports written")
    side.flush()
    for row in summary:
        print(f"{args.estimator}  {row['method']:<24} log Z = {row['log_evidence']!r}")
    return EXIT_OK


# --- efficiency -----------------------------------------------------------------


def _load_estimate_rows(path: Path):
    """(integrand, method, estimate) rows from one estimates/report file."""
    payload = _read_json(path)
    if "results" in payload:
        return [
            (r["integrand"], r["method"], float(r["estimate"]))
            for r in payload["results"]
        ]
    if "per_expectation" in payload:
        name = f"log_evidence:{payload['estimator']}"
        return [(name, payload["method"], float(payload["log_evidence"]))]
    if "reports" in payload:   # evidence summary.json
        name = f"log_evidence:{payload['estimator']}"
        return [
            (name, r["method"], float(r["log_evidence"]))
            for r in payload["reports"]
        ]
    raise InvalidInput(f"{path} is not an estimates or evidence file")


def _sibling_timings(path: Path) -> dict:
    t = path.parent / "timings.json"
    if not t.exists():
        return {}
    return _read_json(t).get("entries", {})


def _parse_gold(args, groups):
    if (args.gold is None) == (args.gold_method is None):
        raise InvalidInput("exactly one of --gold / --gold-method is required")
    integrands = sorted({key[0] for key in groups})
    if args.gold is not None:
        try:
            value = float(args.gold)
            return {name: value for name in integrands}
        except ValueError:
            table = _read_json(Path(args.gold))
            missing = [n for n in integrands if n not in table]
            if missing:
                raise InvalidInput(f"gold file lacks integrands: {missing}")
            return {n: float(table[n]) for n in integrands}
    gold = {}
    for name in integrands:
        key = (name, args.gold_method)
        if key not in groups:
            raise InvalidInput(
                f"gold method {args.gold_method!r} has no estimates for {name!r}"
            )
        gold[name] = float(np.mean(groups[key]["estimates"]))
    return gold


_EFFICIENCY_CAP = 1e12


def _capped_ratio(num: float, den: float) -> float:
    if den == 0.0:
        return 1.0 if num == 0.0 else _EFFICIENCY_CAP
    return min(num / den, _EFFICIENCY_CAP)


def cmd_efficiency(args) -> int:
    groups: dict = {}
    for raw in args.inputs:
        path = Path(raw)
        times = _sibling_timings(path)
        for integrand, method, estimate in _load_estimate_rows(path):
            g = groups.setdefault((integrand, method),
                                  {"estimates": [], "times": []})
            g["estimates"].append(estimate)
            t = times.get(f"{integrand}|{method}")
            if t is not None:
                g["times"].append(float(t))
    if not groups:
        raise InvalidInput("no estimates found in the input files")
    gold = _parse_gold(args, groups)

    integrands = sorted({k[0] for k in groups})
    rows = []
    for name in integrands:
        if (name, "vanilla") not in groups:
            raise InvalidInput(f"no vanilla estimates for {name!r}")
        mse = {}
        mean_time = {}
        for (iname, method), g in groups.items():
            if iname != name:
                continue
            e = np.asarray(g["estimates"], dtype=float)
            mse[method] = float(np.mean((e - gold[name]) ** 2))
            if g["times"] and len(g["times"]) == len(g["estimates"]):
                mean_time[method] = float(np.mean(g["times"]))
        base = mse["vanilla"]
        base_time = mean_time.get("vanilla")
        for method in sorted(mse):
            eff = _capped_ratio(base, mse[method])
            t = mean_time.get(method)
            overall = None
            if base_time is not None and t is not None:
                overall = _capped_ratio(base * base_time, mse[method] * t)
            rows.append({
                "integrand": name,
                "method": method,
                "n": len(groups[(name, method)]["estimates"]),
                "mse": mse[method],
                "efficiency": eff,
                "mean_time_s": t,
                "overall_efficiency": overall,
            })

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ["integrand", "method", "n", "mse", "efficiency",
              "mean_time_s", "overall_efficiency"]
    csv_lines = [",".join(header)]
    for r in rows:
        csv_lines.append(",".join(
            "" if r[h] is None else repr(r[h]) if isinstance(r[h], float) else str(r[h])
            for h in header
        ))
    (out / "efficiency.csv").write_text("\n".join(csv_lines) + "\n")

    md = ["| " + " | ".join(header) + " |",
          "|" + "|".join(" --- " for _ in header) + "|"]
    for r in rows:
        md.append("| " + " | ".join(
            "" if r[h] is None
            else f"{r[h]:.6g}" if isinstance(r[h], float)
            else str(r[h])
            for h in header
        ) + " |")
    (out / "efficiency.md").write_text("\n".join(md) + "\n")
    print("\n".join(md))
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="steincv",
        description="Stein control variates over annealing SMC runs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("smc", help="adaptive pilot run plus seeded replays")
    p.add_argument("--model", required=True, help="model manifest JSON")
    p.add_argument("--n", type=int, default=1000, help="number of particles")
    p.add_argument("--rho", type=float, default=0.5, help="ESS fraction target")
    p.add_argument("--rho-tilde", type=float, default=0.9, dest="rho_tilde",
                   help="post-hoc CESS fraction")
    p.add_argument("--hmin", type=float, default=0.01)
    p.add_argument("--hmax", type=float, default=1.0)
    p.add_argument("--jump-fraction", type=float, default=0.5, dest="jump_fraction")
    p.add_argument("--jump-stat", choices=("mean", "median"), default="mean",
                   dest="jump_stat")
    p.add_argument("--max-repeats", type=int, default=100, dest="max_repeats")
    p.add_argument("--replicates", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1,
                   help="replicate pool width (1 = sequential)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_smc)

    p = sub.add_parser("postprocess", help="estimate integrands from an archive")
    p.add_argument("--archive", required=True, help="snapshot archive directory")
    p.add_argument("--methods", default="vanilla")
    p.add_argument("--integrands", default="mean",
                   help="comma list: mean | square | coord=K")
    p.add_argument("--snapshot", type=int, default=None,
                   help="snapshot index (default: last)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("evidence", help="evidence reports from an archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--estimator", choices=("cti1", "cti2", "smc"), default="cti2")
    p.add_argument("--methods", default="vanilla")
    p.add_argument("--posthoc-rho", type=float, default=None, dest="posthoc_rho",
                   help="reschedule temperatures to this CESS fraction first")
    p.add_argument("--v-mean-mode", choices=("cv", "raw"), default="cv",
                   dest="v_mean_mode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evidence)

    p = sub.add_parser("efficiency", help="MSE-ratio tables across replicates")
    p.add_argument("--inputs", nargs="+", required=True,
                   help="estimates.json / evidence report files")
    p.add_argument("--gold", default=None,
                   help="gold-standard value, or a JSON file {integrand: value}")
    p.add_argument("--gold-method", default=None, dest="gold_method",
                   help="method whose replicate mean is the gold standard")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_efficiency)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InvalidInput, InvalidSchedule, BasisTooLarge) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, ConditioningError, DegenerateWeights,
            DomainError, InsufficientSamples) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
