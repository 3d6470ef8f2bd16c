"""Sweep planning, CSV emission, and summaries.

A plan is a base config, one sweep axis, and a list of seeds. Every
(value, seed) combination becomes an independent run whose evaluation rows
land in one CSV named by the config hash. The summary is recomputed purely
from the CSV files, so it can always be regenerated after the fact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, config_to_dict, with_seed
from .potentials import PotentialSpec
from .training import NumericalError, RunRecord, TrainConfig, train

__all__ = [
    "CSV_SCHEMA",
    "ExperimentPlan",
    "RunOutcome",
    "expand_plan",
    "config_digest",
    "write_run_csv",
    "read_run_csv",
    "run_plan",
    "summarize_runs",
]

CSV_SCHEMA_VERSION = 1
CSV_SCHEMA = (
    "step",
    "layer",
    "task_loss",
    "accuracy",
    "max_vio",
    "gini",
    "mech",
    "phi",
    "eta",
    "batch",
    "seed",
)

DETERMINISTIC_ENV = "PHIBAL_DETERMINISTIC"


@dataclass(frozen=True)
class ExperimentPlan:
    base: TrainConfig
    axis: str
    values: tuple
    seeds: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise ConfigError("sweep values must be non-empty")
        if not self.seeds:
            raise ConfigError("need at least one seed")


@dataclass(frozen=True)
class RunOutcome:
    label: str
    seed: int
    csv_path: str | None
    error: str | None = None


def _apply_axis(base: TrainConfig, axis: str, value) -> tuple[str, TrainConfig]:
    bal = base.balance
    if axis == "phi":
        token = str(value)
        PotentialSpec.parse(token)
        return token, replace(base, balance=replace(bal, mechanism="phi", phi=token))
    if axis == "eta":
        return str(value), replace(base, balance=replace(bal, eta=float(value)))
    if axis == "batch":
        return str(value), replace(base, batch_tokens=int(value))
    if axis == "mechanism":
        return str(value), replace(base, balance=replace(bal, mechanism=str(value)))
    if axis == "statistic":
        return str(value), replace(base, balance=replace(bal, statistic=str(value)))
    raise ConfigError(f"unknown sweep axis {axis!r}")


def expand_plan(plan: ExperimentPlan) -> list[tuple[str, int, TrainConfig]]:
    """All (label, seed, config) combinations, in plan order."""
    out = []
    for value in plan.values:
        for seed in plan.seeds:
            label, cfg = _apply_axis(plan.base, plan.axis, value)
            out.append((label, seed, with_seed(cfg, seed)))
    return out


def config_digest(cfg: TrainConfig) -> str:
    payload = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


# -- CSV ------------------------------------------------------------------------


def write_run_csv(path, cfg: TrainConfig, record: RunRecord) -> None:
    phi_token = cfg.balance.phi if cfg.balance.mechanism == "phi" else ""
    with open(path, "w", newline="") as fh:
        fh.write(f"# phibal csv schema v{CSV_SCHEMA_VERSION}\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_SCHEMA)
        for row in record.rows:
            writer.writerow(
                [
                    row.step,
                    row.layer,
                    repr(row.task_loss),
                    repr(row.accuracy),
                    repr(row.max_vio),
                    repr(row.gini),
                    cfg.balance.mechanism,
                    phi_token,
                    repr(cfg.balance.eta),
                    cfg.batch_tokens,
                    cfg.seed,
                ]
            )


def read_run_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ConfigError(f"{path}: missing schema header comment")
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_SCHEMA:
            raise ConfigError(f"{path}: unexpected columns {reader.fieldnames}")
        for raw in reader:
            rows.append(
                {
                    "step": int(raw["step"]),
                    "layer": int(raw["layer"]),
                    "task_loss": float(raw["task_loss"]),
                    "accuracy": float(raw["accuracy"]),
                    "max_vio": float(raw["max_vio"]),
                    "gini": float(raw["gini"]),
                    "mech": raw["mech"],
                    "phi": raw["phi"],
                    "eta": float(raw["eta"]),
                    "batch": int(raw["batch"]),
                    "seed": int(raw["seed"]),
                }
            )
    return rows


# -- plan execution -----------------------------------------------------------------


def _run_one(job: tuple[str, int, TrainConfig, str]) -> RunOutcome:
    label, seed, cfg, out_dir = job
    path = Path(out_dir) / f"run_{config_digest(cfg)}.csv"
    try:
        record = train(cfg)
        write_run_csv(path, cfg, record)
        return RunOutcome(label=label, seed=seed, csv_path=str(path))
    except NumericalError as exc:
        return RunOutcome(label=label, seed=seed, csv_path=None, error=str(exc))
    except Exception as exc:  # a failed run must not abort its siblings
        detail = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        return RunOutcome(label=label, seed=seed, csv_path=None, error=detail)


def run_plan(plan: ExperimentPlan, out_dir, jobs: int = 1) -> list[RunOutcome]:
    """Run every combination, write per-run CSVs and a Markdown summary.

    The output directory must be writable before any run starts. A failing
    combination (bad value or a numerical abort) becomes an error row in the
    summary and does not stop its siblings. Results keep plan order
    regardless of scheduling.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write_probe"
    try:
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc

    if os.environ.get(DETERMINISTIC_ENV) == "1":
        jobs = 1

    outcomes: list[RunOutcome | None] = []
    pending: list[tuple[int, tuple[str, int, TrainConfig, str]]] = []
    for value in plan.values:
        for seed in plan.seeds:
            try:
                label, cfg = _apply_axis(plan.base, plan.axis, value)
                cfg = with_seed(cfg, seed)
            except Exception as exc:
                detail = "".join(
                    traceback.format_exception_only(type(exc), exc)
                ).strip()
                outcomes.append(
                    RunOutcome(label=str(value), seed=seed, csv_path=None, error=detail)
                )
                continue
            pending.append((len(outcomes), (label, seed, cfg, str(out))))
            outcomes.append(None)

    job_inputs = [job for _, job in pending]
    if jobs > 1 and len(job_inputs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, job_inputs))
    else:
        results = [_run_one(job) for job in job_inputs]
    for (index, _), outcome in zip(pending, results):
        outcomes[index] = outcome

    summary = summarize_runs(plan.axis, outcomes)
    (out / "summary.md").write_text(summary)
    return outcomes


# -- summaries ------------------------------------------------------------------------


def _terminal_metrics(csv_path: str) -> dict:
    rows = read_run_csv(csv_path)
    last = max(r["step"] for r in rows)
    final = [r for r in rows if r["step"] == last]
    return {
        "max_vio": float(np.mean([r["max_vio"] for r in final])),
        "gini": float(np.mean([r["gini"] for r in final])),
        "task_loss": final[-1]["task_loss"],
        "accuracy": final[-1]["accuracy"],
    }


def _mean_halfwidth(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, 0.0
    half = 1.96 * float(arr.std(ddof=1)) / arr.size**0.5
    return mean, half


def summarize_runs(axis: str, outcomes: list[RunOutcome]) -> str:
    """Markdown summary per sweep value: mean +/- 95% half-width over seeds.

    Derived entirely from the run CSVs so it can be recomputed offline.
    """
    by_label: dict[str, list[RunOutcome]] = {}
    order: list[str] = []
    for oc in outcomes:
        if oc.label not in by_label:
            by_label[oc.label] = []
            order.append(oc.label)
        by_label[oc.label].append(oc)

    groups = []
    failures = []
    for label in order:
        metrics = []
        for oc in by_label[label]:
            if oc.error is not None:
                failures.append(f"- `{label}` seed {oc.seed}: ERROR {oc.error}")
            else:
                metrics.append(_terminal_metrics(oc.csv_path))
        if metrics:
            mv_mean, mv_half = _mean_halfwidth([m["max_vio"] for m in metrics])
            loss_mean, loss_half = _mean_halfwidth([m["task_loss"] for m in metrics])
            acc_mean, _ = _mean_halfwidth([m["accuracy"] for m in metrics])
            groups.append((label, len(metrics), mv_mean, mv_half, loss_mean, loss_half, acc_mean))

    if axis == "phi":
        groups.sort(key=lambda g: g[2])

    lines = [
        f"# Sweep summary: axis `{axis}`",
        "",
        "| value | runs | terminal max_vio | terminal task_loss | terminal accuracy |",
        "|---|---|---|---|---|",
    ]
    for label, n, mv, mvh, loss, lossh, acc in groups:
        lines.append(
            f"| `{label}` | {n} | {mv:.4f} ± {mvh:.4f} | {loss:.4f} ± {lossh:.4f} | {acc:.4f} |"
        )
    if failures:
        lines += ["", "## Failed runs", ""] + failures
    lines.append("")
    return "\n".join(lines)
