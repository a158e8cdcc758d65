"""Attack campaigns: run an attack over a dataset and aggregate the results.

A campaign writes three files to its output directory:

* ``samples.csv``: one row per selected sample (floats written with ``repr``
  so sequential and parallel runs are byte-identical),
* ``report.json``: aggregates (ASR, median distance, propagation counts),
* ``curve.dat``: robust accuracy against the distance threshold, two
  whitespace-separated columns readable by gnuplot.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import multiprocessing
import os
import pathlib
from typing import Iterable, Optional, Sequence

import numpy as np

from alma import nn
from alma.baselines import minimal_via_binary_search, penalty_attack, pgd_l2
from alma.constraints import is_adversarial
from alma.distances import DistanceKind, DistanceSpec, distance
from alma.harness.data import Dataset, load_dataset
from alma.solver import AlmaConfig, alma_attack

WORKERS_ENV = "ALMA_WORKERS"
ATTACKS = ("alma", "penalty", "bisect")

CSV_FIELDS = (
    "index",
    "label",
    "target",
    "clean_correct",
    "attacked",
    "success",
    "distance",
    "forwards",
    "backwards",
    "init_forwards",
    "init_backwards",
    "error",
)


@dataclasses.dataclass
class Campaign:
    model_path: str
    data_path: str
    attack: str = "alma"
    config: AlmaConfig = dataclasses.field(default_factory=AlmaConfig)
    target_rule: str = "second"  # targeted mode only: "second" or "fixed:<k>"
    limit: Optional[int] = None
    workers: Optional[int] = None  # None: $ALMA_WORKERS, else 1
    out_dir: Optional[str] = None
    seed: Optional[int] = 0  # None keeps dataset order
    penalty_steps: int = 9
    penalty_inner: int = 1000
    penalty_c_init: float = 1.0
    bisect_hi: float = 10.0
    bisect_precision: float = 0.01
    pgd_steps: int = 100

    def __post_init__(self):
        if self.attack not in ATTACKS:
            raise ValueError(f"unknown attack {self.attack!r}; expected one of {', '.join(ATTACKS)}")
        parse_target_rule(self.target_rule)
        if self.attack == "bisect" and self.config.distance.kind is not DistanceKind.L2:
            raise ValueError("the bisection wrapper drives an L2 budget attack")


@dataclasses.dataclass
class SampleRecord:
    index: int
    label: int
    target: int  # -1 when untargeted
    clean_correct: bool
    attacked: bool
    success: bool
    distance: float  # inf on failure
    forwards: int = 0
    backwards: int = 0
    init_forwards: int = 0
    init_backwards: int = 0
    error: str = ""


@dataclasses.dataclass
class CampaignReport:
    asr: float  # percent
    median_distance: float  # failures count as +inf
    median_distance_correct_only: float
    clean_accuracy: float
    mean_forwards: float
    mean_backwards: float
    mean_init_forwards: float
    mean_init_backwards: float
    errors: int
    records: list[SampleRecord]
    curve: list[tuple[float, float]]

    def aggregates(self) -> dict:
        def num(v: float):
            return v if math.isfinite(v) else None

        return {
            "samples": len(self.records),
            "asr": self.asr,
            "median_distance": num(self.median_distance),
            "median_distance_correct_only": num(self.median_distance_correct_only),
            "clean_accuracy": self.clean_accuracy,
            "mean_forwards": self.mean_forwards,
            "mean_backwards": self.mean_backwards,
            "mean_init_forwards": self.mean_init_forwards,
            "mean_init_backwards": self.mean_init_backwards,
            "errors": self.errors,
        }


def parse_target_rule(rule: str) -> tuple[str, int]:
    if rule == "second":
        return "second", -1
    if rule.startswith("fixed:"):
        try:
            return "fixed", int(rule.split(":", 1)[1])
        except ValueError:
            pass
    raise ValueError(f"bad target rule {rule!r}; use 'second' or 'fixed:<k>'")


def select_samples(count: int, limit: Optional[int], seed: Optional[int]) -> list[int]:
    """Sorted sample indices: a seeded subset when ``seed`` is set, else the first ``limit``."""
    n = count if limit is None else min(limit, count)
    if seed is None:
        return list(range(n))
    return sorted(int(i) for i in np.random.default_rng(seed).permutation(count)[:n])


# --------------------------------------------------------------------------
# aggregation


def median_distance(records: Sequence[SampleRecord]) -> float:
    """Median over all records with failures at +inf (inf when ASR <= 50%)."""
    if not records:
        return math.nan
    values = np.sort([r.distance if r.success else math.inf for r in records])
    n = len(values)
    if n % 2:
        return float(values[n // 2])
    lo, hi = values[n // 2 - 1], values[n // 2]
    return float(hi) if math.isinf(hi) else float(0.5 * (lo + hi))


def robust_accuracy_curve(records: Sequence[SampleRecord], thresholds: Iterable[float]) -> list[tuple[float, float]]:
    """Fraction of samples still robust at each threshold: attack failed or distance > t."""
    dist = np.array([r.distance if r.success else math.inf for r in records])
    n = max(len(dist), 1)
    return [(float(t), float(np.count_nonzero(dist > t)) / n) for t in thresholds]


def default_thresholds(records: Sequence[SampleRecord], points: int = 101) -> list[float]:
    finite = [r.distance for r in records if r.success and math.isfinite(r.distance)]
    top = max(finite, default=0.0)
    if top <= 0:
        return [0.0]
    return [float(t) for t in np.linspace(0.0, top, points)]


def summarize(records: list[SampleRecord], thresholds: Optional[Sequence[float]] = None) -> CampaignReport:
    n = len(records)
    if n == 0:
        raise ValueError("no records to summarize")
    correct = [r for r in records if r.clean_correct]
    thresholds = default_thresholds(records) if thresholds is None else thresholds

    def mean(field: str) -> float:
        return float(np.mean([getattr(r, field) for r in records]))

    return CampaignReport(
        asr=100.0 * sum(r.success for r in records) / n,
        median_distance=median_distance(records),
        median_distance_correct_only=median_distance(correct) if correct else math.nan,
        clean_accuracy=len(correct) / n,
        mean_forwards=mean("forwards"),
        mean_backwards=mean("backwards"),
        mean_init_forwards=mean("init_forwards"),
        mean_init_backwards=mean("init_backwards"),
        errors=sum(1 for r in records if r.error),
        records=records,
        curve=robust_accuracy_curve(records, thresholds),
    )


# --------------------------------------------------------------------------
# per-sample work

_worker_state: dict = {}


def _attack_one(campaign: Campaign, model: nn.Model, index: int, x: np.ndarray, label: int) -> SampleRecord:
    record = SampleRecord(index, label, -1, False, False, False, math.inf)
    try:
        _attack_into(record, campaign, model, x, label)
    except Exception as exc:  # recorded per sample; the campaign goes on
        record.success, record.distance = False, math.inf
        record.error = f"{type(exc).__name__}: {exc}"
    return record


def _attack_into(record: SampleRecord, campaign: Campaign, model: nn.Model, x: np.ndarray, label: int) -> None:
    config = campaign.config
    z = model.logits(x[None])[0]
    goal = label
    if config.targeted:
        rule, fixed = parse_target_rule(campaign.target_rule)
        if rule == "fixed":
            record.target = fixed
        else:
            # stable order: highest logit first, ties to the lower index
            order = np.argsort(-z, kind="stable")
            record.target = int(order[1] if order[0] == label else order[0])
        goal = record.target
    record.clean_correct = bool(int(np.argmax(z)) == label)
    if is_adversarial(z, goal, config.targeted):
        record.success, record.distance = True, 0.0
        return

    record.attacked = True
    if campaign.attack == "bisect":
        counter = nn.PropagationCounter()
        found = minimal_via_binary_search(
            lambda budget: pgd_l2(model, x, goal, budget, campaign.pgd_steps, targeted=config.targeted, counter=counter),
            0.0,
            campaign.bisect_hi,
            campaign.bisect_precision,
            verify=lambda adv: is_adversarial(model.logits(adv[None])[0], goal, config.targeted),
        )
        record.forwards, record.backwards = counter.forwards, counter.backwards
        if found is not None:
            record.success = True
            record.distance = distance(config.distance, found[0], x)
        return

    if campaign.attack == "alma":
        result = alma_attack(model, x, goal, config)
    else:
        result = penalty_attack(
            model,
            x,
            goal,
            config.distance,
            campaign.penalty_steps,
            campaign.penalty_inner,
            campaign.penalty_c_init,
            config.targeted,
            config.epsilon,
        )
    record.success = result.success
    record.distance = float(result.distance) if result.success else math.inf
    record.forwards, record.backwards = result.counters.forwards, result.counters.backwards
    record.init_forwards = result.init_counters.forwards
    record.init_backwards = result.init_counters.backwards


def _init_worker(campaign: Campaign, model: nn.Model, data: Dataset) -> None:
    _worker_state.update(campaign=campaign, model=model, data=data)


def _run_index(index: int) -> SampleRecord:
    s = _worker_state
    data = s["data"]
    return _attack_one(s["campaign"], s["model"], index, data.images[index], int(data.labels[index]))


def resolve_workers(requested: Optional[int]) -> int:
    if requested is not None:
        workers = requested
    else:
        raw = os.environ.get(WORKERS_ENV, "1")
        try:
            workers = int(raw)
        except ValueError:
            raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if workers < 1:
        raise ValueError("worker count must be positive")
    return workers


def run_campaign(
    campaign: Campaign,
    model: Optional[nn.Model] = None,
    data: Optional[Dataset] = None,
) -> CampaignReport:
    """Attack the selected samples and aggregate; writes report files when ``out_dir`` is set.

    ``model`` and ``data`` override the paths (handy for in-memory fixtures).
    """
    model = model if model is not None else nn.load_model(campaign.model_path)
    data = data if data is not None else load_dataset(campaign.data_path)
    if tuple(data.shape) != tuple(model.input_shape):
        raise nn.ShapeError(f"dataset shape {data.shape} does not match model input {model.input_shape}")
    if data.num_classes != model.num_classes:
        raise nn.ShapeError(f"dataset has {data.num_classes} classes, model {model.num_classes}")
    rule, fixed = parse_target_rule(campaign.target_rule)
    if campaign.config.targeted and rule == "fixed" and not 0 <= fixed < model.num_classes:
        raise ValueError(f"fixed target {fixed} out of range for {model.num_classes} classes")

    indices = select_samples(len(data), campaign.limit, campaign.seed)
    workers = min(resolve_workers(campaign.workers), max(len(indices), 1))
    if workers == 1:
        _init_worker(campaign, model, data)
        try:
            records = [_run_index(i) for i in indices]
        finally:
            _worker_state.clear()
    else:
        ctx = multiprocessing.get_context("fork" if "fork" in multiprocessing.get_all_start_methods() else "spawn")
        with ctx.Pool(workers, initializer=_init_worker, initargs=(campaign, model, data)) as pool:
            records = pool.map(_run_index, indices, chunksize=1)

    report = summarize(records)
    if campaign.out_dir is not None:
        write_report(report, campaign.out_dir)
    return report


# --------------------------------------------------------------------------
# files


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def records_to_csv(records: Sequence[SampleRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in records:
        writer.writerow([_fmt(getattr(r, f)) for f in CSV_FIELDS])
    return buf.getvalue()


def records_from_csv(text: str) -> list[SampleRecord]:
    reader = csv.DictReader(io.StringIO(text))
    missing = set(CSV_FIELDS) - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"per-sample CSV lacks columns: {', '.join(sorted(missing))}")
    out = []
    for row in reader:
        out.append(
            SampleRecord(
                index=int(row["index"]),
                label=int(row["label"]),
                target=int(row["target"]),
                clean_correct=row["clean_correct"] == "1",
                attacked=row["attacked"] == "1",
                success=row["success"] == "1",
                distance=float(row["distance"]),
                forwards=int(row["forwards"]),
                backwards=int(row["backwards"]),
                init_forwards=int(row["init_forwards"]),
                init_backwards=int(row["init_backwards"]),
                error=row["error"],
            )
        )
    return out


def curve_to_dat(curve: Sequence[tuple[float, float]]) -> str:
    lines = ["# threshold robust_accuracy"]
    lines += [f"{t!r} {a!r}" for t, a in curve]
    return "\n".join(lines) + "\n"


def write_report(report: CampaignReport, out_dir: "str | os.PathLike") -> None:
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "samples.csv").write_text(records_to_csv(report.records))
    (out / "report.json").write_text(json.dumps(report.aggregates(), indent=2, sort_keys=True) + "\n")
    (out / "curve.dat").write_text(curve_to_dat(report.curve))
