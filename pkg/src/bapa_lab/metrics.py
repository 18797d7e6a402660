"""Per-slot accuracy reports and scheme comparisons.

``avg`` is the mean of the nine positive-sample slot accuracies and ``delta``
their population variance, both on the 0-1 scale. The serialized report also
carries the percent-scale figures (``avg_pct`` and ``delta_pct2``, the latter in
percentage-point squared) so they line up with tables quoted in percent.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetMismatchError, FormatError, ShapeError
from .pgm import write_pgm
from .probe import EVAL, GRID, NUM_SLOTS, ProbeDataset

REPORT_SCHEMA = "bapa-lab-position-report/1"
COMPARISON_SCHEMA = "bapa-lab-comparison/1"
DELTA_CONVENTION = "population variance of the 9 slot accuracies (divide by 9)"


@dataclass
class PositionReport:
    acc: list[float]
    acc_neg: float
    avg: float
    delta: float
    scheme: str
    seed: int | None
    n_pos: list[int]
    n_neg: int
    dataset_hash: str
    schema: str = REPORT_SCHEMA
    delta_convention: str = DELTA_CONVENTION

    @property
    def avg_pct(self) -> float:
        return 100.0 * self.avg

    @property
    def delta_pct2(self) -> float:
        return 1e4 * self.delta

    def to_dict(self) -> dict:
        d = asdict(self)
        d["avg_pct"] = self.avg_pct
        d["delta_pct2"] = self.delta_pct2
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "PositionReport":
        if d.get("schema") != REPORT_SCHEMA:
            raise FormatError(f"unsupported report schema {d.get('schema')!r}")
        d = {k: v for k, v in d.items() if k not in ("avg_pct", "delta_pct2")}
        return cls(**d)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scheme", "seed"] + [f"acc_{n}" for n in range(NUM_SLOTS)]
                   + ["acc_neg", "avg", "delta", "avg_pct", "delta_pct2", "dataset_hash"])
        w.writerow([self.scheme, self.seed] + [repr(a) for a in self.acc]
                   + [repr(self.acc_neg), repr(self.avg), repr(self.delta),
                      repr(self.avg_pct), repr(self.delta_pct2), self.dataset_hash])
        return buf.getvalue()

    def heatmap(self) -> np.ndarray:
        return np.asarray(self.acc, dtype=np.float64).reshape(GRID, GRID)


def summarize(acc) -> tuple[float, float]:
    a = np.asarray(acc, dtype=np.float64)
    avg = float(np.mean(a))
    return avg, float(np.mean((a - avg) ** 2))


def report_from_predictions(pred_yes, labels, slots, *, scheme: str, seed: int | None,
                            dataset_hash: str) -> PositionReport:
    """Aggregate boolean yes-predictions into a :class:`PositionReport`."""
    pred_yes = np.asarray(pred_yes, dtype=bool)
    labels = np.asarray(labels)
    slots = np.asarray(slots)
    if not (pred_yes.shape == labels.shape == slots.shape):
        raise ShapeError("predictions, labels and slots must align")
    pos = labels == 1
    acc, n_pos = [], []
    for n in range(NUM_SLOTS):
        sel = pos & (slots == n)
        if not sel.any():
            raise ShapeError(f"no positive eval samples at slot {n}")
        acc.append(float(pred_yes[sel].mean()))
        n_pos.append(int(sel.sum()))
    neg = ~pos
    acc_neg = float((~pred_yes[neg]).mean()) if neg.any() else float("nan")
    avg, delta = summarize(acc)
    return PositionReport(acc=acc, acc_neg=acc_neg, avg=avg, delta=delta, scheme=scheme, seed=seed,
                          n_pos=n_pos, n_neg=int(neg.sum()), dataset_hash=dataset_hash)


def evaluate(model, ds: ProbeDataset, seed: int | None = None, batch_size: int = 512) -> PositionReport:
    from .train import predict

    idx = ds.indices(EVAL)
    if idx.size == 0:
        raise ShapeError("dataset has no eval split")
    logits = predict(model, ds, idx, batch_size)
    pred_yes = logits[:, 1] > logits[:, 0]
    return report_from_predictions(
        pred_yes, ds.label[idx], ds.slot[idx], scheme=model.cfg.scheme,
        seed=model.cfg.seed if seed is None else seed, dataset_hash=ds.content_hash,
    )


@dataclass
class ComparisonReport:
    baseline: list[PositionReport]
    candidate: list[PositionReport]
    per_seed: list[dict] = field(default_factory=list)
    verdict: dict = field(default_factory=dict)
    schema: str = COMPARISON_SCHEMA

    def to_dict(self) -> dict:
        return {
            "schema": self.schema,
            "baseline": [r.to_dict() for r in self.baseline],
            "candidate": [r.to_dict() for r in self.candidate],
            "per_seed": self.per_seed,
            "verdict": self.verdict,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = ["seed", "baseline_scheme", "candidate_scheme", "avg_diff", "delta_diff",
                "acc_neg_diff", "variance_reduced", "avg_non_degraded"]
        w.writerow(keys)
        for row in self.per_seed:
            w.writerow([row[k] for k in keys])
        return buf.getvalue()


def compare(baseline, candidate, avg_tolerance: float = 0.02, min_wins: int | None = None) -> ComparisonReport:
    """Compare two reports, or two equal-length lists of per-seed reports.

    ``variance_reduced`` holds for a pair when the candidate's delta is strictly
    lower; ``avg_non_degraded`` when its avg is at least the baseline's minus
    ``avg_tolerance`` (0-1 scale). The overall verdict requires variance
    reduction in at least ``min_wins`` pairs (default: a strict majority) and a
    non-degraded mean avg.
    """
    a_list = baseline if isinstance(baseline, (list, tuple)) else [baseline]
    b_list = candidate if isinstance(candidate, (list, tuple)) else [candidate]
    if len(a_list) != len(b_list) or not a_list:
        raise ShapeError("baseline and candidate need the same non-zero number of reports")
    per_seed = []
    for a, b in zip(a_list, b_list):
        if a.dataset_hash != b.dataset_hash:
            raise DatasetMismatchError(
                f"reports come from different datasets ({a.dataset_hash[:12]} vs {b.dataset_hash[:12]})"
            )
        per_seed.append({
            "seed": b.seed,
            "baseline_scheme": a.scheme,
            "candidate_scheme": b.scheme,
            "acc_diff": [y - x for x, y in zip(a.acc, b.acc)],
            "avg_diff": b.avg - a.avg,
            "delta_diff": b.delta - a.delta,
            "acc_neg_diff": b.acc_neg - a.acc_neg,
            "variance_reduced": b.delta < a.delta,
            "avg_non_degraded": b.avg >= a.avg - avg_tolerance,
        })
    n = len(per_seed)
    need = n // 2 + 1 if min_wins is None else min_wins
    wins = sum(r["variance_reduced"] for r in per_seed)
    mean_a = float(np.mean([r.avg for r in a_list]))
    mean_b = float(np.mean([r.avg for r in b_list]))
    verdict = {
        "variance_reduced_count": wins,
        "pairs": n,
        "min_wins": need,
        "variance_reduced": wins >= need,
        "mean_avg_baseline": mean_a,
        "mean_avg_candidate": mean_b,
        "avg_tolerance": avg_tolerance,
        "avg_non_degraded": mean_b >= mean_a - avg_tolerance,
    }
    verdict["trend_reproduced"] = verdict["variance_reduced"] and verdict["avg_non_degraded"]
    return ComparisonReport(list(a_list), list(b_list), per_seed, verdict)


def save_report(report: PositionReport, out_dir, stem: str = "report") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out / f"{stem}.json",
        "csv": out / f"{stem}.csv",
        "pgm": out / f"{stem}_accuracy.pgm",
    }
    paths["json"].write_text(report.to_json())
    paths["csv"].write_text(report.to_csv())
    write_pgm(paths["pgm"], report.heatmap(), scale=16,
              comment=f"per-slot positive accuracy, scheme={report.scheme}, min-max scaled")
    return paths


def load_report(path) -> PositionReport:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"report not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"report {path} is not valid JSON: {exc}") from exc
    return PositionReport.from_dict(d)
