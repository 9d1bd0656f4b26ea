"""Reporting, the random-swap baseline and the ablation studies."""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import DEFAULT_ENV, EnvConfig
from .instance import ProblemInstance
from .trainer import TrainConfig, TrainResult, evaluate, rollout_metrics, train
from .trajectory import DISCOUNTED_SUM, MAX_WINDOW, RandomPolicy, rollout_batch

REPORT_FIELDS = ("method", "variant", "n", "instances", "obj", "obj_sd", "tgt", "travel", "waiting",
                 "cost", "cost_capacity", "cost_earliness", "cost_lateness", "seconds")


@dataclass
class ReportRow:
    method: str
    variant: str
    n: int
    instances: int
    obj: float
    obj_sd: float
    tgt: float
    travel: float
    waiting: float
    cost: float
    cost_capacity: float
    cost_earliness: float
    cost_lateness: float
    seconds: float

    def __post_init__(self):
        if self.obj_sd < 0:
            raise ValueError("obj_sd must be non-negative")
        if abs(self.obj - (self.tgt + self.cost)) > 1e-9:
            raise ValueError(f"obj {self.obj} != tgt {self.tgt} + cost {self.cost}")

    @classmethod
    def from_metrics(cls, method: str, instances: list[ProblemInstance], rows: list[dict]) -> "ReportRow":
        """Aggregate per-instance metric dicts; ``obj`` is rebuilt as ``tgt + cost``."""
        if not rows:
            raise ValueError("no rows to aggregate")
        mean = lambda k: float(np.mean([r[k] for r in rows]))
        objs = np.array([r["tgt"] + r["cost"] for r in rows])
        tgt, cost = mean("tgt"), mean("cost")
        return cls(
            method=method,
            variant=instances[0].variant.value,
            n=instances[0].num_customers,
            instances=len(rows),
            obj=tgt + cost,
            obj_sd=float(objs.std(ddof=1)) if len(rows) > 1 else 0.0,
            tgt=tgt,
            travel=mean("travel"),
            waiting=mean("waiting"),
            cost=cost,
            cost_capacity=mean("cost_capacity"),
            cost_earliness=mean("cost_earliness"),
            cost_lateness=mean("cost_lateness"),
            seconds=mean("seconds"),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def random_policy_rows(instances: list[ProblemInstance], steps: int, seed: int = 0, report: str = "best",
                       env_config: EnvConfig = DEFAULT_ENV, phi: float | None = None) -> list[dict]:
    """Per-instance metrics of uniform random swaps from the initial solution."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    # one stream per instance, so results do not depend on evaluation order or on other instances
    streams = np.random.SeedSequence(seed).spawn(len(instances))
    policy = RandomPolicy()
    rows = []
    for k, inst in enumerate(instances):
        rng = np.random.default_rng(streams[k])
        t0 = time.perf_counter()
        rb = rollout_batch(inst, policy, 1, steps, phi, rng, env_config)
        seconds = time.perf_counter() - t0
        rows.append({"instance": k, **rollout_metrics(rb, env_config, report), "seconds": seconds})
    return rows


def random_policy_eval(instances: list[ProblemInstance], steps: int, seed: int = 0, report: str = "best",
                       env_config: EnvConfig = DEFAULT_ENV) -> ReportRow:
    """Random 2-exchange baseline; ``report`` picks the best-visited or the final state."""
    rows = random_policy_rows(instances, steps, seed, report, env_config)
    return ReportRow.from_metrics("random" if report == "best" else f"random-{report}", instances, rows)


def trained_eval(instances, params, lagr, config: TrainConfig, seed: int = 0,
                 report: str = "best") -> tuple[ReportRow, list[dict]]:
    rows = evaluate(instances, params, lagr, config, seed=seed, report=report)
    return ReportRow.from_metrics("trained", instances, rows), rows


# -- studies -----------------------------------------------------------------

STUDIES = ("shaping", "return-form", "lambda-init")


@dataclass
class StudyRun:
    study: str
    label: str
    seed: int
    config: TrainConfig
    result: TrainResult


def study_configs(study: str, base: TrainConfig, values=None) -> list[tuple[str, TrainConfig]]:
    """Labelled configs compared by one study."""
    if study == "shaping":
        return [("shaping-on", dataclasses.replace(base, shaping=True)),
                ("shaping-off", dataclasses.replace(base, shaping=False))]
    if study == "return-form":
        forms = values or (MAX_WINDOW, DISCOUNTED_SUM)
        return [(form, dataclasses.replace(base, return_form=form)) for form in forms]
    if study == "lambda-init":
        values = values or (1.0, 3.0, 5.0)
        return [(f"lambda-{float(v):g}", dataclasses.replace(base, lambda_init=float(v))) for v in values]
    raise ValueError(f"unknown study {study!r}; expected one of {STUDIES}")


def run_study(study: str, instances: list[ProblemInstance], base: TrainConfig, seeds=(0,),
              values=None, progress=None) -> list[StudyRun]:
    runs = []
    for seed in seeds:
        for label, cfg in study_configs(study, base, values):
            cfg = dataclasses.replace(cfg, seed=int(seed))
            result = train(instances, cfg)
            runs.append(StudyRun(study, label, int(seed), cfg, result))
            if progress is not None:
                progress(runs[-1])
    return runs


def curve(run_or_log, column: str = "mean_obj") -> np.ndarray:
    log = run_or_log.result.log if isinstance(run_or_log, StudyRun) else run_or_log
    return np.array([row[column] for row in log], dtype=float)


def area_under_curve(values, first: int | None = None) -> float:
    """Mean height of the curve over the first ``first`` updates (unit spacing)."""
    values = np.asarray(values, dtype=float)
    if first is not None:
        values = values[:first]
    return float(values.mean()) if values.size else float("nan")


def trailing_sd(values, window: int) -> float:
    values = np.asarray(values, dtype=float)[-window:]
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


def curves_rows(runs: list[StudyRun]) -> list[dict]:
    rows = []
    for run in runs:
        for row in run.result.log:
            rows.append({"study": run.study, "label": run.label, "seed": run.seed, **row})
    return rows


# -- csv ---------------------------------------------------------------------

def write_rows(rows: list[dict], path: "str | Path", fields=None) -> None:
    fields = list(fields or (rows[0].keys() if rows else REPORT_FIELDS))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def read_rows(path: "str | Path") -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def merge_reports(paths) -> list[dict]:
    """Summary rows (``instance`` column empty or absent) of several eval CSVs."""
    merged = []
    for path in paths:
        for row in read_rows(path):
            if row.get("instance", "") in ("", "summary"):
                merged.append({k: row.get(k, "") for k in REPORT_FIELDS})
    return merged


def format_table(rows: list[dict]) -> str:
    cols = ("method", "variant", "n", "obj", "obj_sd", "tgt", "cost", "seconds")
    cells = [[str(c) for c in cols]]
    for row in rows:
        line = []
        for c in cols:
            v = row.get(c, "")
            try:
                line.append(f"{float(v):.4f}" if c not in ("n",) else str(int(float(v))))
            except (TypeError, ValueError):
                line.append(str(v))
        cells.append(line)
    widths = [max(len(r[i]) for r in cells) for i in range(len(cols))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in cells)
