"""Experiment harness: config parsing, run execution, CSV outputs, reporting.

Config schema (JSON, single file; unknown keys anywhere are errors)
-------------------------------------------------------------------
{
  "stream": {                     # see data.StreamSpec
    "kind": "permuted" | "split" | "synthetic",
    "n_tasks": int, "train_per_task": int, "valid_per_task": int,
    "test_per_task": int, "seed": int, "eval_subset_size": int,
    "source_images": str, "source_labels": str,     # permuted / split
    "classes_per_task": int,                        # split / synthetic
    "input_dim": int, "noise_std": float            # synthetic
  },
  "methods": [                    # at least one entry
    {"tag": "finetune" | "joint" | "ewc" | "online_ewc" | "mas"
            | "sp_ewc" | "sp_mas",
     "label": str,                # optional, defaults to tag, must be unique
     "lambda": float,             # optional, pins the EWC-family strength
     "gamma": float,              # optional, pins the MAS-family strength
     "lr": float,                 # optional, pins the learning rate
     "online_gamma": float,       # online_ewc decay, default 1.0
     "regularizer": "proposed" | "hard" | "linear" | "logarithmic",
     "mu_policy": {"kind": "fixed"|"topk"|"quantile",
                    "value": float, "k": int, "rho": float}}
  ],
  "seeds": [int, ...],
  "epochs": int, "batch_size": int, "momentum": float,
  "anneal": "cosine" | "none",   # per-stage step-size schedule
  "hidden": [int, ...], "sample_cap": int,
  "lr_grid": [float, ...],
  "lambda_grid": [float, ...],    # EWC-family strengths to sweep
  "gamma_grid": [float, ...],     # MAS-family strengths to sweep
  "mu_policy": {...},             # default policy for sp methods
  "output_dir": str
}

Relative stream source paths resolve against $WCLAB_DATA_DIR when set, else
against the config file's directory. A manifest.json written by a previous
run is itself a valid config input (its resolved_config is used verbatim),
and rerunning it reproduces results.csv byte for byte on the same platform.

Outputs in output_dir: results.csv, weights.csv, convergence.csv,
timings.csv, manifest.json, plus per-run fragments under partial/ that are
kept when a run fails. All CSVs use comma separators, LF line endings, one
header row, and floats printed with 17 significant digits. timings.csv is
the only file excluded from the byte-determinism contract.
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass

import numpy as np

from . import __version__
from .data import StreamSpec, build_stream
from .metrics import StorageLedger, acf, apa, ps
from .selfpaced import MuPolicy
from .trainer import (EWC_FAMILY, MAS_FAMILY, METHOD_TAGS, Method, RunResult,
                      TrainConfig, run_stream)

DATA_DIR_ENV = "WCLAB_DATA_DIR"

RESULTS_FILE = "results.csv"
WEIGHTS_FILE = "weights.csv"
CONVERGENCE_FILE = "convergence.csv"
TIMINGS_FILE = "timings.csv"
MANIFEST_FILE = "manifest.json"


class ConfigError(ValueError):
    """Invalid experiment config; the message names the offending field path."""


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


_STREAM_KEYS = {"kind": str, "n_tasks": int, "train_per_task": int,
                "valid_per_task": int, "test_per_task": int, "seed": int,
                "eval_subset_size": int, "source_images": str, "source_labels": str,
                "classes_per_task": int, "input_dim": int, "noise_std": (int, float)}
_METHOD_KEYS = {"tag": str, "label": str, "lambda": (int, float), "gamma": (int, float),
                "lr": (int, float), "online_gamma": (int, float), "regularizer": str,
                "mu_policy": dict}
_POLICY_KEYS = {"kind": str, "value": (int, float), "k": int, "rho": (int, float)}
_TOP_KEYS = {"stream": dict, "methods": list, "seeds": list, "epochs": int,
             "batch_size": int, "momentum": (int, float), "anneal": str,
             "hidden": list, "sample_cap": int, "lr_grid": list,
             "lambda_grid": list, "gamma_grid": list, "mu_policy": dict,
             "output_dir": str}

_DEFAULTS = {"epochs": 12, "batch_size": 128, "momentum": 0.9, "anneal": "cosine",
             "hidden": [400, 400], "sample_cap": 1000, "lambda_grid": [1.0],
             "gamma_grid": [1.0], "mu_policy": {"kind": "topk", "k": 0},
             "output_dir": "runs"}


def _check_keys(obj: dict, allowed: dict, path: str) -> None:
    for key, val in obj.items():
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key (allowed: {sorted(allowed)})")
        want = allowed[key]
        if not isinstance(val, want):
            name = want.__name__ if isinstance(want, type) else "number"
            raise ConfigError(f"{path}.{key}: expected {name}, got {type(val).__name__}")
        if isinstance(val, bool) and want is not bool:
            raise ConfigError(f"{path}.{key}: expected a number, got a bool")


def _resolve_path(p: str, base_dir: str) -> str:
    if os.path.isabs(p):
        return p
    root = os.environ.get(DATA_DIR_ENV) or base_dir
    return os.path.abspath(os.path.join(root, p))


def validate_config(raw: dict, base_dir: str = ".") -> dict:
    """Validate and resolve a raw config dict; raises ConfigError with paths.

    Returns a fully-resolved copy: defaults filled in, stream paths made
    absolute, per-method labels assigned. The result is what manifest.json
    records, and feeding it back in reproduces the run.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object at the top level")
    if "resolved_config" in raw:  # a manifest was passed; unwrap it
        return validate_config(raw["resolved_config"], base_dir)
    _check_keys(raw, _TOP_KEYS, "config")
    cfg = dict(_DEFAULTS)
    cfg.update({k: v for k, v in raw.items()})

    if "stream" not in raw:
        raise ConfigError("config.stream: required")
    _check_keys(raw["stream"], _STREAM_KEYS, "config.stream")
    stream = dict(raw["stream"])
    for key in ("source_images", "source_labels"):
        if key in stream:
            stream[key] = _resolve_path(stream[key], base_dir)
    try:
        StreamSpec(**stream)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config.stream: {e}") from e
    cfg["stream"] = stream

    if not isinstance(cfg["output_dir"], str) or not cfg["output_dir"]:
        raise ConfigError("config.output_dir: expected a non-empty string")
    if not os.path.isabs(cfg["output_dir"]):
        cfg["output_dir"] = os.path.abspath(os.path.join(base_dir, cfg["output_dir"]))

    if cfg["anneal"] not in ("cosine", "none"):
        raise ConfigError("config.anneal: expected 'cosine' or 'none'")

    if "methods" not in raw or not raw["methods"]:
        raise ConfigError("config.methods: at least one method is required")
    if "seeds" not in raw or not raw["seeds"]:
        raise ConfigError("config.seeds: at least one seed is required")
    for i, s in enumerate(raw["seeds"]):
        if not isinstance(s, int) or isinstance(s, bool):
            raise ConfigError(f"config.seeds[{i}]: expected int, got {type(s).__name__}")

    if "mu_policy" in raw:
        _check_keys(raw["mu_policy"], _POLICY_KEYS, "config.mu_policy")
        _build_policy(cfg["mu_policy"], "config.mu_policy")

    labels = set()
    methods = []
    for i, entry in enumerate(raw["methods"]):
        path = f"config.methods[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{path}: expected an object")
        _check_keys(entry, _METHOD_KEYS, path)
        if "tag" not in entry:
            raise ConfigError(f"{path}.tag: required")
        if entry["tag"] not in METHOD_TAGS:
            raise ConfigError(f"{path}.tag: unknown method {entry['tag']!r} "
                              f"(known: {METHOD_TAGS})")
        entry = dict(entry)
        entry.setdefault("label", entry["tag"])
        if entry["label"] in labels:
            raise ConfigError(f"{path}.label: duplicate label {entry['label']!r}")
        labels.add(entry["label"])
        if "mu_policy" in entry:
            _check_keys(entry["mu_policy"], _POLICY_KEYS, f"{path}.mu_policy")
            _build_policy(entry["mu_policy"], f"{path}.mu_policy")
        if "regularizer" in entry and entry["regularizer"] not in (
                "proposed", "hard", "linear", "logarithmic"):
            raise ConfigError(f"{path}.regularizer: unknown kind {entry['regularizer']!r}")
        methods.append(entry)
    cfg["methods"] = methods

    for grid, allow_zero in (("lr_grid", False), ("lambda_grid", True), ("gamma_grid", True)):
        if grid == "lr_grid" and "lr_grid" not in raw:
            raise ConfigError("config.lr_grid: required")
        vals = cfg[grid]
        if not vals:
            raise ConfigError(f"config.{grid}: must not be empty")
        for j, v in enumerate(vals):
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise ConfigError(f"config.{grid}[{j}]: expected a number")
            if v < 0 or (v == 0 and not allow_zero):
                raise ConfigError(f"config.{grid}[{j}]: must be positive")

    for key, lo in (("epochs", 1), ("batch_size", 1), ("sample_cap", 1)):
        if cfg[key] < lo:
            raise ConfigError(f"config.{key}: must be >= {lo}")
    if not cfg["hidden"] or not all(isinstance(h, int) and h > 0 for h in cfg["hidden"]):
        raise ConfigError("config.hidden: expected a list of positive ints")
    return cfg


def _build_policy(d: dict, path: str) -> MuPolicy:
    try:
        return MuPolicy(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


@dataclass(frozen=True)
class RunSpec:
    """One (method, seed, grid point) work unit."""

    label: str
    seed: int
    lr: float
    lam: float
    gamma: float

    @property
    def run_id(self) -> str:
        return f"{self.label}_s{self.seed}_lr{self.lr:g}_l{self.lam:g}_g{self.gamma:g}"


def _method_entry(cfg: dict, label: str) -> dict:
    for entry in cfg["methods"]:
        if entry["label"] == label:
            return entry
    raise KeyError(label)


def build_method(cfg: dict, spec: RunSpec) -> Method:
    entry = _method_entry(cfg, spec.label)
    policy_dict = entry.get("mu_policy", cfg["mu_policy"])
    return Method(tag=entry["tag"], lam=spec.lam, gamma=spec.gamma,
                  online_gamma=float(entry.get("online_gamma", 1.0)),
                  regularizer=entry.get("regularizer", "proposed"),
                  mu_policy=_build_policy(policy_dict, "mu_policy"))


def expand_runs(cfg: dict) -> list[RunSpec]:
    """Every (method, seed, grid point) combination, in config order."""
    runs = []
    for entry in cfg["methods"]:
        tag = entry["tag"]
        lrs = [float(entry["lr"])] if "lr" in entry else [float(x) for x in cfg["lr_grid"]]
        if tag in EWC_FAMILY:
            lams = [float(entry["lambda"])] if "lambda" in entry else [float(x) for x in cfg["lambda_grid"]]
            gammas = [0.0]
        elif tag in MAS_FAMILY:
            lams = [0.0]
            gammas = [float(entry["gamma"])] if "gamma" in entry else [float(x) for x in cfg["gamma_grid"]]
        else:
            lams, gammas = [0.0], [0.0]
        for seed in cfg["seeds"]:
            for lr in lrs:
                for lam in lams:
                    for gamma in gammas:
                        runs.append(RunSpec(entry["label"], int(seed), lr, lam, gamma))
    return runs


_STREAM_CACHE: dict[str, list] = {}


def _stream_for(cfg: dict):
    key = json.dumps(cfg["stream"], sort_keys=True)
    if key not in _STREAM_CACHE:
        _STREAM_CACHE.clear()  # hold at most one materialized stream
        _STREAM_CACHE[key] = build_stream(StreamSpec(**cfg["stream"]))
    return _STREAM_CACHE[key]


def execute_run(cfg: dict, spec: RunSpec) -> dict:
    """Run one work unit and emit its CSV row fragments (plain dicts)."""
    tasks = _stream_for(cfg)
    method = build_method(cfg, spec)
    tc = TrainConfig(lr=spec.lr, epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]),
                     momentum=float(cfg["momentum"]), hidden=tuple(cfg["hidden"]),
                     sample_cap=int(cfg["sample_cap"]), anneal=str(cfg["anneal"]))
    t0 = time.perf_counter()
    result = run_stream(tasks, method, tc, seed=spec.seed)
    wall = time.perf_counter() - t0
    return _rows_for(cfg, spec, result, wall)


def _rows_for(cfg: dict, spec: RunSpec, result: RunResult, wall: float) -> dict:
    m = result.n_stages
    kind = cfg["stream"]["kind"]
    ledger_a = StorageLedger(result.ledger_active)
    ledger_t = StorageLedger(result.ledger_total)
    base = {"stream": kind, "method": spec.label, "seed": spec.seed,
            "lr": spec.lr, "lambda": spec.lam, "gamma": spec.gamma}
    results, weights, convergence, timings = [], [], [], []
    for log in result.stage_logs:
        s = log.stage
        row = dict(base)
        row.update({
            "stage": s,
            "apa": apa(result.acc_matrix, s),
            "acf": acf(result.acc_matrix, s),
            "ps_active": ps(ledger_a, s),
            "ps_total": ps(ledger_t, s),
            "mu": log.mu if np.isfinite(log.mu) else None,
            "retained_k": log.retained_k,
        })
        for j in range(m):
            row[f"acc_{j + 1}"] = float(result.acc_matrix[s - 1, j]) if j < s else None
        results.append(row)
        for task_id, v, eta in log.weights:
            weights.append(dict(base, stage=s, task=task_id + 1, v=v,
                                eta=eta if np.isfinite(eta) else None))
        for e, obj in enumerate(log.objectives, start=1):
            convergence.append(dict(base, stage=s, epoch=e, objective=obj))
        timings.append(dict(base, stage=s, seconds=log.seconds))
    timings.append(dict(base, stage=None, seconds=wall))
    return {"results": results, "weights": weights,
            "convergence": convergence, "timings": timings}


def _sort_key(row: dict):
    return (row["method"], row["seed"], row.get("stage") or 0,
            row["lr"], row["lambda"], row["gamma"],
            row.get("task") or 0, row.get("epoch") or 0)


def _columns(kind: str, n_tasks: int) -> list[str]:
    base = ["stream", "method", "seed", "lr", "lambda", "gamma", "stage"]
    if kind == "results":
        return base + ["apa", "acf", "ps_active", "ps_total", "mu", "retained_k"] + \
            [f"acc_{j + 1}" for j in range(n_tasks)]
    if kind == "weights":
        return base + ["task", "v", "eta"]
    if kind == "convergence":
        return base + ["epoch", "objective"]
    return base + ["seconds"]


def _write_csv(path: str, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in sorted(rows, key=_sort_key):
            w.writerow([_fmt(row.get(c)) for c in columns])


def _platform_fingerprint() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "platform": platform.platform(), "machine": platform.machine()}


def run_experiment(cfg: dict, jobs: int = 1) -> dict:
    """Execute every run in the config; write CSVs and manifest to output_dir.

    Workers share nothing (each rebuilds its stream deterministically);
    fragments land in output_dir/partial/ as runs finish, so a failure keeps
    every completed run. The merged CSVs are sorted and formatted
    deterministically. Returns the manifest dict.
    """
    out = cfg["output_dir"]
    partial = os.path.join(out, "partial")
    os.makedirs(partial, exist_ok=True)
    runs = expand_runs(cfg)
    failures: list[dict] = []
    fragments: list[dict] = []

    manifest = {"artifact": "wclab", "version": __version__,
                "platform": _platform_fingerprint(), "status": "running",
                "n_runs": len(runs), "resolved_config": cfg, "failures": failures}
    _write_manifest(out, manifest)

    def record(spec: RunSpec, rows: dict) -> None:
        with open(os.path.join(partial, spec.run_id + ".json"), "w") as f:
            json.dump(rows, f)
        fragments.append(rows)

    if jobs <= 1:
        for spec in runs:
            try:
                record(spec, execute_run(cfg, spec))
            except Exception as e:  # keep going; the manifest records the failure
                failures.append({"run": spec.run_id, "error": f"{type(e).__name__}: {e}"})
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            pending = {pool.submit(execute_run, cfg, spec): spec for spec in runs}
            for fut in as_completed(pending):
                spec = pending[fut]
                try:
                    record(spec, fut.result())
                except Exception as e:
                    failures.append({"run": spec.run_id, "error": f"{type(e).__name__}: {e}"})

    n_tasks = int(cfg["stream"].get("n_tasks", 5))
    merged = {k: [r for frag in fragments for r in frag[k]]
              for k in ("results", "weights", "convergence", "timings")}
    _write_csv(os.path.join(out, RESULTS_FILE), _columns("results", n_tasks), merged["results"])
    _write_csv(os.path.join(out, WEIGHTS_FILE), _columns("weights", n_tasks), merged["weights"])
    _write_csv(os.path.join(out, CONVERGENCE_FILE), _columns("convergence", n_tasks),
               merged["convergence"])
    _write_csv(os.path.join(out, TIMINGS_FILE), _columns("timings", n_tasks), merged["timings"])

    manifest["status"] = "complete" if not failures else "partial"
    manifest["failures"] = sorted(failures, key=lambda f: f["run"])
    _write_manifest(out, manifest)
    return manifest


def _write_manifest(out: str, manifest: dict) -> None:
    with open(os.path.join(out, MANIFEST_FILE), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_config(path: str) -> dict:
    """Read and validate a config file (or a manifest.json from a prior run)."""
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return validate_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def read_rows(results_dir: str, name: str) -> list[dict]:
    """Read one of the output CSVs back into typed row dicts."""
    path = os.path.join(results_dir, name)
    rows = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            typed: dict = {}
            for k, v in row.items():
                if v == "" or v is None:
                    typed[k] = None
                elif k in ("seed", "stage", "retained_k", "task", "epoch"):
                    typed[k] = int(v)
                elif k in ("stream", "method"):
                    typed[k] = v
                else:
                    typed[k] = float(v)
            rows.append(typed)
    return rows


def grid_select(rows: list[dict]) -> dict[str, dict]:
    """Winning grid point per method label: maximize final-stage apa averaged
    over seeds; ties prefer the smaller strength, then the smaller lr."""
    final_stage = max(r["stage"] for r in rows)
    scores: dict[tuple, list[float]] = {}
    for r in rows:
        if r["stage"] != final_stage:
            continue
        key = (r["method"], r["lr"], r["lambda"], r["gamma"])
        scores.setdefault(key, []).append(r["apa"])
    best: dict[str, dict] = {}
    ranked: dict[str, tuple] = {}
    for (label, lr, lam, gamma), vals in scores.items():
        rank = (-float(np.mean(vals)), lam + gamma, lr)
        if label not in ranked or rank < ranked[label]:
            ranked[label] = rank
            best[label] = {"lr": lr, "lambda": lam, "gamma": gamma,
                           "apa": float(np.mean(vals))}
    return best


def convergence_ok(rows: list[dict], window: int = 5, band: float = 0.02) -> list[str]:
    """Criterion: per (run, stage), the last `window` epoch objectives must be
    nonincreasing within a fractional noise band. Returns violation strings."""
    series: dict[tuple, list[tuple[int, float]]] = {}
    for r in rows:
        key = (r["method"], r["seed"], r["lr"], r["lambda"], r["gamma"], r["stage"])
        series.setdefault(key, []).append((r["epoch"], r["objective"]))
    bad = []
    for key, pts in series.items():
        pts.sort()
        tail = [obj for _, obj in pts[-window:]]
        if not all(math.isfinite(o) for o in tail):
            bad.append(f"{key}: non-finite objective in the final {window} epochs")
            continue
        for a, b in zip(tail, tail[1:]):
            if b > a * (1.0 + band):
                bad.append(f"{key}: objective rose {a:.6g} -> {b:.6g} in the final {window} epochs")
                break
    return sorted(bad)


def write_report(results_dir: str) -> dict:
    """Summarize a finished run directory; writes report.txt and figure CSVs.

    The summary names the winning grid point per method, stage-wise metric
    tables land in figure_apa.csv / figure_acf.csv / figure_ps.csv, and the
    convergence check (final epochs nonincreasing within the noise band) is
    applied to convergence.csv.
    """
    results = read_rows(results_dir, RESULTS_FILE)
    conv = read_rows(results_dir, CONVERGENCE_FILE)
    if not results:
        raise ValueError(f"{results_dir}: no result rows to report")
    best = grid_select(results)
    violations = convergence_ok(conv)
    stages = sorted({r["stage"] for r in results})
    labels = sorted(best)

    def stage_means(metric: str, label: str) -> list[float]:
        sel = best[label]
        out = []
        for s in stages:
            vals = [r[metric] for r in results
                    if r["method"] == label and r["stage"] == s and r["lr"] == sel["lr"]
                    and r["lambda"] == sel["lambda"] and r["gamma"] == sel["gamma"]]
            out.append(float(np.mean(vals)))
        return out

    figures = {}
    for metric, fname in (("apa", "figure_apa.csv"), ("acf", "figure_acf.csv"),
                          ("ps_active", "figure_ps.csv")):
        table = {label: stage_means(metric, label) for label in labels}
        figures[metric] = table
        with open(os.path.join(results_dir, fname), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["stage"] + labels)
            for i, s in enumerate(stages):
                w.writerow([s] + [_fmt(table[lab][i]) for lab in labels])

    lines = ["wclab report", "============", ""]
    lines.append(f"{'method':<14}{'lr':>10}{'strength':>12}{'final apa':>12}"
                 f"{'final acf':>12}{'avg apa':>10}{'ps_active':>11}")
    summary = {}
    for label in labels:
        sel = best[label]
        apa_t = figures["apa"][label]
        acf_t = figures["acf"][label]
        ps_t = figures["ps_active"][label]
        summary[label] = {"grid": sel, "final_apa": apa_t[-1], "final_acf": acf_t[-1],
                          "avg_apa": float(np.mean(apa_t)), "final_ps_active": ps_t[-1]}
        strength = sel["lambda"] if sel["lambda"] else sel["gamma"]
        lines.append(f"{label:<14}{sel['lr']:>10g}{strength:>12g}{apa_t[-1]:>12.4f}"
                     f"{acf_t[-1]:>12.4f}{float(np.mean(apa_t)):>10.4f}{ps_t[-1]:>11.4f}")
    lines.append("")
    if violations:
        lines.append(f"convergence check: FAIL ({len(violations)} stage(s) rose beyond the band)")
        lines.extend("  " + v for v in violations)
    else:
        lines.append("convergence check: PASS (final epochs nonincreasing within 2%)")
    text = "\n".join(lines) + "\n"
    with open(os.path.join(results_dir, "report.txt"), "w") as f:
        f.write(text)
    return {"summary": summary, "convergence_violations": violations, "text": text}
