"""JSON-lines manifests, corpus statistics and leakage-safe splits.

One manifest line describes one audio file. Required keys are
``audio_path``, ``individual_id`` and ``label``; everything else is optional.
Unknown keys are kept in ``SampleRecord.extras`` and written back unchanged.
Optional fields absent from a line stay ``None`` (read as "unknown").
"""

from __future__ import annotations

import datetime as dt
import json
import math
import os
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import MalformedLine, ManifestError, MissingField, SingleClass, TooFewIndividuals

LABELS = ("negative", "positive", "other_respiratory")
TEST_TYPES = ("pcr", "antigen", "unknown")
SEXES = ("female", "male", "other", "unknown")
SYMPTOMS = ("fever", "tiredness", "sore_throat", "difficulty_breathing", "chest_pain_pressure", "diarrhoea", "cough")
TRIAGE_KEYS = ("symptomatic_now", "close_contact", "breathing_problems", "risk_group")
MAX_SWAB_TO_RECORDING_DAYS = 3
IMBALANCE_WARN_RATIO = 3.0

_KNOWN = {
    "audio_path", "individual_id", "label", "test_type", "test_date", "recording_date",
    "age", "sex", "location", "symptoms", "triage",
}


class ClassImbalanceWarning(UserWarning):
    pass


@dataclass
class SampleRecord:
    audio_path: str
    individual_id: str
    label: str
    test_type: Optional[str] = None
    test_date: Optional[dt.date] = None
    recording_date: Optional[dt.date] = None
    age: Optional[int] = None
    sex: Optional[str] = None
    location: Optional[str] = None
    symptoms: Optional[dict] = None
    triage: Optional[dict] = None
    extras: dict = field(default_factory=dict)
    base_dir: str = field(default="", compare=False, repr=False)

    @property
    def days_test_to_recording(self) -> Optional[int]:
        if self.test_date is None or self.recording_date is None:
            return None
        return (self.recording_date - self.test_date).days

    @property
    def flags(self) -> list[str]:
        out = []
        d = self.days_test_to_recording
        if d is not None and d > MAX_SWAB_TO_RECORDING_DAYS:
            out.append("recording_outside_test_window")
        return out

    @property
    def resolved_path(self) -> str:
        return os.path.join(self.base_dir, self.audio_path) if self.base_dir else self.audio_path

    def to_dict(self) -> dict:
        d = dict(self.extras)
        d.update(audio_path=self.audio_path, individual_id=self.individual_id, label=self.label)
        for k in ("test_date", "recording_date"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v.isoformat()
        for k in ("test_type", "sex", "age", "location", "triage"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        if self.symptoms is not None:
            d["symptoms"] = {s: (v.isoformat() if isinstance(v, dt.date) else v) for s, v in self.symptoms.items()}
        return d


def _parse_date(v, key, line_no):
    if v is None:
        return None
    try:
        return dt.date.fromisoformat(v)
    except (TypeError, ValueError):
        raise MalformedLine(line_no, f"{key} is not an ISO date: {v!r}") from None


def _enum(v, allowed, key, line_no):
    if v not in allowed:
        raise MalformedLine(line_no, f"{key} must be one of {allowed}, got {v!r}")
    return v


def parse_record(obj, line_no: int = 0, base_dir: str = "") -> SampleRecord:
    if not isinstance(obj, dict):
        raise MalformedLine(line_no, "record is not a JSON object")
    for key in ("label", "individual_id", "audio_path"):
        if key not in obj or obj[key] in (None, ""):
            raise MissingField(key, line_no)
    label = _enum(obj["label"], LABELS, "label", line_no)
    if not isinstance(obj["individual_id"], str):
        raise MalformedLine(line_no, "individual_id must be a string")
    symptoms = obj.get("symptoms")
    if symptoms is not None:
        if not isinstance(symptoms, dict):
            raise MalformedLine(line_no, "symptoms must be an object of onset dates")
        for s, onset in symptoms.items():
            _enum(s, SYMPTOMS, "symptom", line_no)
            if onset is not None:
                _parse_date(onset, f"symptoms.{s}", line_no)
    triage = obj.get("triage")
    if triage is not None:
        if not isinstance(triage, dict):
            raise MalformedLine(line_no, "triage must be an object")
        for k, v in triage.items():
            _enum(k, TRIAGE_KEYS, "triage key", line_no)
            if v is not None and not isinstance(v, bool):
                raise MalformedLine(line_no, f"triage.{k} must be a boolean or null")
    age = obj.get("age")
    if age is not None and (not isinstance(age, int) or isinstance(age, bool) or age < 0):
        raise MalformedLine(line_no, "age must be a nonnegative integer")
    return SampleRecord(
        audio_path=str(obj["audio_path"]),
        individual_id=obj["individual_id"],
        label=label,
        test_type=None if obj.get("test_type") is None else _enum(obj["test_type"], TEST_TYPES, "test_type", line_no),
        test_date=_parse_date(obj.get("test_date"), "test_date", line_no),
        recording_date=_parse_date(obj.get("recording_date"), "recording_date", line_no),
        age=age,
        sex=None if obj.get("sex") is None else _enum(obj["sex"], SEXES, "sex", line_no),
        location=obj.get("location"),
        symptoms=symptoms,
        triage=triage,
        extras={k: v for k, v in obj.items() if k not in _KNOWN},
        base_dir=base_dir,
    )


def load_manifest(path, errors: Optional[list] = None) -> list[SampleRecord]:
    """Parse a JSON-lines manifest.

    Blank lines are ignored. When ``errors`` is a list, bad lines are skipped
    and their ManifestError appended to it; otherwise the first bad line
    raises. ``audio_path`` is resolved relative to the manifest's directory
    via ``SampleRecord.resolved_path``.
    """
    base_dir = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise MalformedLine(line_no, exc.msg) from None
                records.append(parse_record(obj, line_no, base_dir))
            except ManifestError as exc:
                if errors is None:
                    raise
                errors.append(exc)
    return records


def dumps_record(record: SampleRecord) -> str:
    return json.dumps(record.to_dict(), sort_keys=True, ensure_ascii=False)


def save_manifest(records: Iterable[SampleRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(dumps_record(r) + "\n")


# --- statistics ---------------------------------------------------------------

@dataclass(frozen=True)
class CorpusStats:
    n_individuals: int
    n_files: int
    per_label: dict
    imbalance_ratio: float
    n_flagged: int = 0


def corpus_summary(records: Sequence[SampleRecord]) -> CorpusStats:
    """Exact counts; warns with ClassImbalanceWarning when max/min label count exceeds 3."""
    counts = Counter(r.label for r in records)
    present = [c for c in counts.values() if c > 0]
    ratio = max(present) / min(present) if present else 1.0
    if ratio > IMBALANCE_WARN_RATIO:
        warnings.warn(
            f"class imbalance ratio {ratio:.2f} exceeds {IMBALANCE_WARN_RATIO:g}; "
            "consider reweighting or reporting per-class metrics",
            ClassImbalanceWarning,
            stacklevel=2,
        )
    return CorpusStats(
        n_individuals=len({r.individual_id for r in records}),
        n_files=len(records),
        per_label=dict(sorted(counts.items())),
        imbalance_ratio=ratio,
        n_flagged=sum(1 for r in records if r.flags),
    )


# --- splitting ----------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    train: frozenset
    val: frozenset
    test: frozenset
    fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    holdout_manifest: Optional[str] = None

    def split_of(self, individual_id: str) -> str:
        for name in ("train", "val", "test"):
            if individual_id in getattr(self, name):
                return name
        raise KeyError(individual_id)

    def select(self, records: Iterable[SampleRecord], name: str) -> list[SampleRecord]:
        ids = getattr(self, name)
        return [r for r in records if r.individual_id in ids]

    def to_dict(self) -> dict:
        return {
            "train": sorted(self.train),
            "val": sorted(self.val),
            "test": sorted(self.test),
            "fractions": list(self.fractions),
            "seed": self.seed,
            "holdout_manifest": self.holdout_manifest,
        }


def individual_labels(records: Iterable[SampleRecord]) -> dict[str, str]:
    """Majority label per individual (ties resolve to positive)."""
    by_id = defaultdict(Counter)
    for r in records:
        by_id[r.individual_id][r.label] += 1
    out = {}
    for iid, c in by_id.items():
        best = max(c.values())
        winners = [lbl for lbl in c if c[lbl] == best]
        out[iid] = "positive" if "positive" in winners else sorted(winners)[0]
    return out


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    quotas = [total * f for f in fractions]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:total - sum(counts)]:
        counts[i] += 1
    return counts


def _controlled_rounding(row_totals, col_totals, fractions):
    """Integer table with given row/column sums close to row_total * fraction."""
    table = [[math.floor(r * f) for f in fractions] for r in row_totals]
    row_def = [r - sum(row) for r, row in zip(row_totals, table)]
    col_def = [c - sum(table[i][j] for i in range(len(table))) for j, c in enumerate(col_totals)]
    cells = sorted(
        ((i, j) for i in range(len(table)) for j in range(len(fractions))),
        key=lambda ij: (-(row_totals[ij[0]] * fractions[ij[1]] - math.floor(row_totals[ij[0]] * fractions[ij[1]])), ij),
    )
    while sum(row_def) > 0:
        progressed = False
        for i, j in cells:
            if row_def[i] > 0 and col_def[j] > 0:
                table[i][j] += 1
                row_def[i] -= 1
                col_def[j] -= 1
                progressed = True
        if not progressed:
            break
    # column deficits can only go negative if floor sums exceeded targets
    for j in range(len(col_def)):
        while col_def[j] < 0:
            i = max(range(len(table)), key=lambda i: table[i][j])
            k = max(range(len(col_def)), key=lambda k: col_def[k])
            table[i][j] -= 1
            table[i][k] += 1
            col_def[j] += 1
            col_def[k] -= 1
    return table


def split_by_individual(records: Sequence[SampleRecord], fractions=(0.8, 0.1, 0.1), seed: int = 0,
                        holdout_manifest: Optional[str] = None) -> SplitPlan:
    """Partition individuals (never files) into train/val/test.

    Split sizes follow largest-remainder rounding of ``fractions``; every split
    with a positive fraction gets at least one individual. Allocation is
    stratified by each individual's label.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three nonnegative numbers summing to 1")
    labels = individual_labels(records)
    if len(labels) < 3:
        raise TooFewIndividuals(f"need at least 3 individuals, got {len(labels)}")
    if len(set(labels.values())) < 2:
        raise SingleClass("corpus contains a single label")

    sizes = largest_remainder(len(labels), fractions)
    for j, f in enumerate(fractions):
        if f > 0 and sizes[j] == 0:
            donor = max(range(3), key=lambda k: sizes[k])
            sizes[donor] -= 1
            sizes[j] += 1

    groups = defaultdict(list)
    for iid in sorted(labels):
        groups[labels[iid]].append(iid)
    group_names = sorted(groups)
    table = _controlled_rounding([len(groups[g]) for g in group_names], sizes, fractions)

    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for g, row in zip(group_names, table):
        ids = [groups[g][i] for i in rng.permutation(len(groups[g]))]
        start = 0
        for j, n in enumerate(row):
            parts[j].extend(ids[start:start + n])
            start += n
    return SplitPlan(frozenset(parts[0]), frozenset(parts[1]), frozenset(parts[2]), fractions, seed, holdout_manifest)


def kfold_individuals(records: Sequence[SampleRecord], k: int = 5, seed: int = 0) -> list[frozenset]:
    """Label-stratified k-fold partition of individual ids."""
    if k < 2:
        raise ValueError("k must be >= 2")
    labels = individual_labels(records)
    if len(labels) < k:
        raise TooFewIndividuals(f"{len(labels)} individuals cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    slot = 0
    for g in sorted(set(labels.values())):
        ids = sorted(i for i in labels if labels[i] == g)
        for idx in rng.permutation(len(ids)):
            folds[slot % k].append(ids[idx])
            slot += 1
    return [frozenset(f) for f in folds]


def class_index(label: str, n_classes: int = 2) -> int:
    """Class index with the positive class last."""
    if n_classes == 2:
        if label == "other_respiratory":
            raise ValueError("other_respiratory needs n_classes=3")
        return 1 if label == "positive" else 0
    return {"negative": 0, "other_respiratory": 1, "positive": 2}[label]
