"""Thresholded [0, 100] scoring, aggregation, ranking and best-variant selection.

Each metric maps linearly onto [0, 100] inside its acceptance threshold and
scores zero outside it: dice > 0.80, RAVD < 5%, ASSD < 15 mm, MSSD < 60 mm.
A case scores the mean of its four metric scores; organ scores average cases,
multi-organ scores average organs, and MR scores average the T1-DUAL and
T2-SPIR results.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Organ, TrainingModality
from .metrics import MetricReport

METRIC_KINDS = ("dice", "ravd", "assd", "mssd")

CATEGORIES = (
    "ct-liver",
    "mr-liver",
    "mr-rkidney",
    "mr-lkidney",
    "mr-spleen",
    "mr-multiorgan",
)


def metric_score(kind: str, value: float) -> float:
    """Map one metric value onto [0, 100]; values outside the threshold get 0.

    The in-range mapping is linear with the threshold itself scoring exactly 0.
    Dice is computed in percent space so that e.g. 0.90 -> 50 holds exactly in
    floating point.
    """
    if kind == "dice":
        if value < 0.80:
            return 0.0
        return (100.0 * value - 80.0) * 5.0
    if kind == "ravd":
        return 0.0 if value > 5.0 else 100.0 * (1.0 - value / 5.0)
    if kind == "assd":
        return 0.0 if value > 15.0 else 100.0 * (1.0 - value / 15.0)
    if kind == "mssd":
        return 0.0 if value > 60.0 else 100.0 * (1.0 - value / 60.0)
    raise ValueError(f"unknown metric kind {kind!r}")


def metric_scores(report: MetricReport) -> dict[str, float]:
    return {kind: metric_score(kind, getattr(report, kind)) for kind in METRIC_KINDS}


def case_score(report: MetricReport) -> float:
    """Mean of the four thresholded metric scores."""
    scores = metric_scores(report)
    return sum(scores.values()) / 4.0


def aggregate(scores, level: str) -> float:
    """Average scores at one aggregation level.

    organ: cases -> organ score; multiorgan: organ scores -> combined score;
    mr: (T1-DUAL score, T2-SPIR score) -> MR score; modality: cases of one
    modality. All levels are plain means; the level argument documents intent
    and validates the input arity.
    """
    values = [float(v) for v in scores]
    if not values:
        raise ValueError(f"cannot aggregate an empty score set at level {level!r}")
    if level not in ("organ", "modality", "mr", "multiorgan"):
        raise ValueError(f"unknown aggregation level {level!r}")
    if level == "mr" and len(values) != 2:
        raise ValueError("mr aggregation takes exactly (T1, T2) scores")
    return float(np.mean(values))


@dataclass(frozen=True)
class RankedVariant:
    variant: str
    score: float
    rank: int
    rank_label: str


def rank(scores) -> list[RankedVariant]:
    """Order variants by descending score with shared ranks on exact ties.

    Tied entries share the lowest rank of their group and a combined label
    (e.g. two variants tied at positions 5 and 6 both rank 5, labelled "5/6",
    and the next variant ranks 7). Ties are ordered by name.
    """
    items = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    if not items:
        raise ValueError("cannot rank an empty category")
    out: list[RankedVariant] = []
    pos = 0
    while pos < len(items):
        tie = [items[pos]]
        while pos + len(tie) < len(items) and items[pos + len(tie)][1] == items[pos][1]:
            tie.append(items[pos + len(tie)])
        label = "/".join(str(r) for r in range(pos + 1, pos + 1 + len(tie)))
        for name, score in tie:
            out.append(RankedVariant(name, score, pos + 1, label))
        pos += len(tie)
    return out


@dataclass(frozen=True)
class CaseResult:
    """One scored case of one variant; metrics may be NaN when flagged."""

    variant: str
    modality: TrainingModality
    organ: Organ
    case_id: str
    dice: float
    ravd: float
    assd: float
    mssd: float
    score_dice: float
    score_ravd: float
    score_assd: float
    score_mssd: float
    case_score: float

    @classmethod
    def from_report(cls, variant, modality, organ, case_id, report: MetricReport):
        scores = metric_scores(report)
        return cls(
            variant, TrainingModality(modality), Organ(organ), str(case_id),
            report.dice, report.ravd, report.assd, report.mssd,
            scores["dice"], scores["ravd"], scores["assd"], scores["mssd"],
            case_score(report),
        )

    @classmethod
    def flagged(cls, variant, modality, organ, case_id):
        """Zero-score placeholder for a case whose metrics are undefined."""
        nan = float("nan")
        return cls(
            variant, TrainingModality(modality), Organ(organ), str(case_id),
            nan, nan, nan, nan, 0.0, 0.0, 0.0, 0.0, 0.0,
        )


class ScoreTable:
    """Per-case scores keyed by (variant, modality, organ, case id)."""

    def __init__(self):
        self._cases: dict[tuple[str, TrainingModality, Organ, str], CaseResult] = {}

    def add(self, result: CaseResult) -> None:
        key = (result.variant, result.modality, result.organ, result.case_id)
        self._cases[key] = result

    def __len__(self) -> int:
        return len(self._cases)

    def cells(self) -> set[tuple[TrainingModality, Organ]]:
        return {(r.modality, r.organ) for r in self._cases.values()}

    def variants(self) -> list[str]:
        return sorted({r.variant for r in self._cases.values()})

    def cell_score(self, variant: str, modality: TrainingModality, organ: Organ) -> float | None:
        """Mean case score of one variant in one (modality, organ) cell."""
        values = [
            r.case_score
            for r in self._cases.values()
            if r.variant == variant and r.modality == modality and r.organ == organ
        ]
        if not values:
            return None
        return aggregate(values, "organ")

    def category_scores(self, category: str) -> dict[str, float]:
        """Variant -> score for one scoreboard category.

        ct-liver reads the CT cell; mr-<organ> averages the T1 and T2 cells;
        mr-multiorgan averages the four mr-<organ> scores. Variants missing a
        constituent cell are excluded from the category.
        """
        if category not in CATEGORIES:
            raise ValueError(f"unknown category {category!r}; expected one of {CATEGORIES}")
        out: dict[str, float] = {}
        for variant in self.variants():
            score = self._category_score(variant, category)
            if score is not None:
                out[variant] = score
        return out

    def _category_score(self, variant: str, category: str) -> float | None:
        if category == "ct-liver":
            return self.cell_score(variant, TrainingModality.CT, Organ.LIVER)
        if category == "mr-multiorgan":
            organ_scores = []
            for organ in Organ:
                s = self._category_score(variant, f"mr-{organ.value}")
                if s is None:
                    return None
                organ_scores.append(s)
            return aggregate(organ_scores, "multiorgan")
        organ = Organ(category.removeprefix("mr-"))
        t1 = self.cell_score(variant, TrainingModality.T1, organ)
        t2 = self.cell_score(variant, TrainingModality.T2, organ)
        if t1 is None or t2 is None:
            return None
        return aggregate([t1, t2], "mr")

    def scoreboard(self) -> dict:
        """Ranked scores for every category with at least one variant."""
        board = {}
        for category in CATEGORIES:
            scores = self.category_scores(category)
            if scores:
                board[category] = [
                    {
                        "variant": rv.variant,
                        "score": rv.score,
                        "rank": rv.rank,
                        "rank_label": rv.rank_label,
                    }
                    for rv in rank(scores)
                ]
        return board


def select_movpunet(table: ScoreTable, parameter_counts=None) -> dict[tuple[str, str], str]:
    """Pick the best-scoring variant per (modality, organ) cell.

    Ties prefer the variant with the fewest parameters (unknown counts sort
    last), then the lexicographically first name. Returns
    {(modality value, organ value): variant name}.
    """
    parameter_counts = parameter_counts or {}
    registry: dict[tuple[str, str], str] = {}
    for modality, organ in sorted(table.cells(), key=lambda c: (c[0].value, c[1].value)):
        scored = []
        for variant in table.variants():
            s = table.cell_score(variant, modality, organ)
            if s is not None:
                params = parameter_counts.get(variant)
                scored.append((-s, params if params is not None else float("inf"), variant))
        if not scored:
            raise ValueError(f"no scored variant for cell ({modality.value}, {organ.value})")
        scored.sort()
        registry[(modality.value, organ.value)] = scored[0][2]
    return registry


_CSV_COLUMNS = [
    "variant", "modality", "organ", "case",
    "dice", "ravd", "assd", "mssd",
    "score_dice", "score_ravd", "score_assd", "score_mssd", "case_score",
]


def write_case_report(results, path) -> None:
    """Write per-case results as the evaluation report CSV (atomically)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_CSV_COLUMNS)
        for r in results:
            writer.writerow([
                r.variant, r.modality.value, r.organ.value, r.case_id,
                repr(r.dice), repr(r.ravd), repr(r.assd), repr(r.mssd),
                repr(r.score_dice), repr(r.score_ravd), repr(r.score_assd),
                repr(r.score_mssd), repr(r.case_score),
            ])
    tmp.replace(path)


def read_case_report(path) -> list[CaseResult]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(_CSV_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: report is missing columns {sorted(missing)}")
        return [
            CaseResult(
                row["variant"], TrainingModality(row["modality"]), Organ(row["organ"]),
                row["case"],
                float(row["dice"]), float(row["ravd"]), float(row["assd"]),
                float(row["mssd"]),
                float(row["score_dice"]), float(row["score_ravd"]),
                float(row["score_assd"]), float(row["score_mssd"]),
                float(row["case_score"]),
            )
            for row in reader
        ]


def write_scoreboard(table: ScoreTable, path, parameter_counts=None) -> dict:
    """Emit the aggregated scoreboard plus best-variant registry as JSON."""
    registry = select_movpunet(table, parameter_counts)
    doc = {
        "categories": table.scoreboard(),
        "movpunet": {f"{m}/{o}": v for (m, o), v in registry.items()},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
    tmp.replace(path)
    return doc
