"""Observed-data containers, CSV ingestion and age-grid construction.

Each subject contributes baseline covariates, a list of age landmarks at which
the exposure ``z``, the time-varying confounder ``l`` and the mediator ``m``
were measured, and a right-censored event age.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

__all__ = [
    "DataError",
    "GridInfeasibleError",
    "CovariateSchema",
    "Landmark",
    "SubjectRecord",
    "Cohort",
    "AgeGrid",
    "load_cohort",
    "write_cohort",
    "build_age_grid",
    "grid_covers_events",
]

CONTINUOUS = "continuous"
BINARY = "binary"
_KINDS = (CONTINUOUS, BINARY)


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""

    def __init__(self, message, subject_id=None, row=None):
        self.message = message
        self.subject_id = subject_id
        self.row = row
        where = []
        if subject_id is not None:
            where.append(f"subject {subject_id!r}")
        if row is not None:
            where.append(f"row {row}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class GridInfeasibleError(DataError):
    pass


@dataclass(frozen=True)
class CovariateSchema:
    """Names and kinds of the modelled variables.

    ``baseline`` maps baseline covariate names to ``"continuous"`` or
    ``"binary"``; ``l_kind`` and ``m_kind`` give the kinds of the
    time-varying confounder and mediator. The exposure is always binary.
    """

    baseline: tuple[tuple[str, str], ...]
    l_kind: str = BINARY
    m_kind: str = CONTINUOUS

    def __post_init__(self):
        names = [n for n, _ in self.baseline]
        if len(set(names)) != len(names):
            raise DataError("duplicate baseline covariate names")
        reserved = {"subject_id", "event_age", "event_indicator"}
        for name, kind in self.baseline:
            if name in reserved:
                raise DataError(f"baseline covariate name {name!r} is reserved")
            if kind not in _KINDS:
                raise DataError(f"unknown kind {kind!r} for baseline covariate {name!r}")
        for label, kind in (("l", self.l_kind), ("m", self.m_kind)):
            if kind not in _KINDS:
                raise DataError(f"unknown kind {kind!r} for {label}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "CovariateSchema":
        baseline = d.get("baseline", {})
        if isinstance(baseline, Mapping):
            items = tuple((str(k), str(v)) for k, v in baseline.items())
        else:
            items = tuple((str(k), str(v)) for k, v in baseline)
        return cls(items, str(d.get("l", BINARY)), str(d.get("m", CONTINUOUS)))

    def to_dict(self) -> dict:
        return {"baseline": dict(self.baseline), "l": self.l_kind, "m": self.m_kind}

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.baseline]

    @property
    def kinds(self) -> list[str]:
        return [k for _, k in self.baseline]

    @property
    def n_baseline(self) -> int:
        return len(self.baseline)

    def binary_mask(self) -> np.ndarray:
        return np.array([k == BINARY for _, k in self.baseline], dtype=bool)


class Landmark(NamedTuple):
    age: float
    z: int
    l: float
    m: float


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    baseline: tuple[float, ...]
    landmarks: tuple[Landmark, ...]
    event_age: float
    event_indicator: int

    @property
    def n_landmarks(self) -> int:
        return len(self.landmarks)

    def validate(self, schema: CovariateSchema, age_bound: float = math.inf) -> None:
        sid = self.subject_id
        if len(self.baseline) != schema.n_baseline:
            raise DataError("baseline length does not match schema", sid)
        for value, (name, kind) in zip(self.baseline, schema.baseline):
            _check_value(value, kind, name, sid)
        if self.event_indicator not in (0, 1):
            raise DataError("event_indicator must be 0 or 1", sid)
        if not (0.0 <= self.event_age <= age_bound):
            raise DataError(f"event age {self.event_age} outside [0, {age_bound}]", sid)
        prev = -math.inf
        for lm in self.landmarks:
            if not (0.0 <= lm.age <= age_bound):
                raise DataError(f"landmark age {lm.age} outside [0, {age_bound}]", sid)
            if lm.age <= prev:
                raise DataError("non-monotone ages", sid)
            if lm.age > self.event_age:
                raise DataError("measurement after event", sid)
            _check_value(lm.z, BINARY, "z", sid)
            _check_value(lm.l, schema.l_kind, "l", sid)
            _check_value(lm.m, schema.m_kind, "m", sid)
            prev = lm.age


def _check_value(value, kind, name, sid, row=None):
    if not isinstance(value, (int, float, np.integer, np.floating)) or not math.isfinite(value):
        raise DataError(f"non-finite value in column {name!r}", sid, row)
    if kind == BINARY and value not in (0, 1):
        raise DataError(f"non-binary value {value!r} in binary column {name!r}", sid, row)


@dataclass(frozen=True)
class Cohort:
    subjects: tuple[SubjectRecord, ...]
    schema: CovariateSchema
    age_bound: float = math.inf

    def __post_init__(self):
        if not self.subjects:
            raise DataError("cohort is empty")
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise DataError("duplicate subject_id", dup)
        for s in self.subjects:
            s.validate(self.schema, self.age_bound)

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def n(self) -> int:
        return len(self.subjects)

    def event_ages(self, events_only: bool = True) -> np.ndarray:
        return np.array(
            [s.event_age for s in self.subjects if s.event_indicator == 1 or not events_only],
            dtype=float,
        )

    def landmark_ages(self) -> np.ndarray:
        return np.array([lm.age for s in self.subjects for lm in s.landmarks], dtype=float)


# --------------------------------------------------------------------------- IO

SUBJECTS_FILE = "subjects.csv"
LANDMARKS_FILE = "landmarks.csv"
_LANDMARK_COLUMNS = ("subject_id", "age", "z", "l", "m")


def _parse_float(text, column, sid, row):
    text = (text or "").strip()
    if text == "":
        raise DataError(
            f"missing value in column {column!r}; only truncated landmark lists are supported",
            sid, row,
        )
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"cannot parse {text!r} in column {column!r}", sid, row) from None
    if not math.isfinite(value):
        raise DataError(f"non-finite value in column {column!r}", sid, row)
    return value


def _read_rows(path: Path, required: Iterable[str]):
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path.name}: missing column(s) {', '.join(missing)}")
        # row numbers are file line numbers (header is line 1)
        return [(i + 2, row) for i, row in enumerate(reader)]


def load_cohort(path, schema: CovariateSchema, age_bound: float = math.inf) -> Cohort:
    """Read ``subjects.csv`` and ``landmarks.csv`` from directory ``path``."""
    path = Path(path)
    sub_rows = _read_rows(path / SUBJECTS_FILE, ["subject_id", *schema.names, "event_age", "event_indicator"])
    lm_rows = _read_rows(path / LANDMARKS_FILE, _LANDMARK_COLUMNS)

    landmarks: dict[str, list[tuple[int, Landmark]]] = {}
    for row_no, row in lm_rows:
        sid = (row["subject_id"] or "").strip()
        age = _parse_float(row["age"], "age", sid, row_no)
        z = _parse_float(row["z"], "z", sid, row_no)
        l = _parse_float(row["l"], "l", sid, row_no)
        m = _parse_float(row["m"], "m", sid, row_no)
        _check_value(z, BINARY, "z", sid, row_no)
        _check_value(l, schema.l_kind, "l", sid, row_no)
        _check_value(m, schema.m_kind, "m", sid, row_no)
        entry = Landmark(age, int(z), int(l) if schema.l_kind == BINARY else l,
                         int(m) if schema.m_kind == BINARY else m)
        lst = landmarks.setdefault(sid, [])
        if lst and age <= lst[-1][1].age:
            raise DataError("non-monotone ages", sid, row_no)
        lst.append((row_no, entry))

    subjects = []
    seen = set()
    for row_no, row in sub_rows:
        sid = (row["subject_id"] or "").strip()
        if sid in seen:
            raise DataError("duplicate subject_id", sid, row_no)
        seen.add(sid)
        base = []
        for name, kind in schema.baseline:
            v = _parse_float(row[name], name, sid, row_no)
            _check_value(v, kind, name, sid, row_no)
            base.append(v)
        event_age = _parse_float(row["event_age"], "event_age", sid, row_no)
        delta = _parse_float(row["event_indicator"], "event_indicator", sid, row_no)
        _check_value(delta, BINARY, "event_indicator", sid, row_no)
        lms = landmarks.pop(sid, [])
        for lm_row, lm in lms:
            if lm.age > event_age:
                raise DataError("measurement after event", sid, lm_row)
        rec = SubjectRecord(sid, tuple(base), tuple(lm for _, lm in lms), event_age, int(delta))
        try:
            rec.validate(schema, age_bound)
        except DataError as exc:
            raise DataError(exc.message, sid, row_no) from None
        subjects.append(rec)
    if landmarks:
        sid, lms = next(iter(landmarks.items()))
        raise DataError("landmark for unknown subject", sid, lms[0][0])
    return Cohort(tuple(subjects), schema, age_bound)


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_cohort(cohort: Cohort, path) -> tuple[Path, Path]:
    """Write the two long-format CSV files; floats use round-trip repr."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    schema = cohort.schema
    sub_path = path / SUBJECTS_FILE
    lm_path = path / LANDMARKS_FILE
    binary = schema.binary_mask()
    with sub_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", *schema.names, "event_age", "event_indicator"])
        for s in cohort.subjects:
            base = [str(int(v)) if b else _fmt(v) for v, b in zip(s.baseline, binary)]
            w.writerow([s.subject_id, *base, _fmt(s.event_age), str(int(s.event_indicator))])
    with lm_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_LANDMARK_COLUMNS)
        for s in cohort.subjects:
            for lm in s.landmarks:
                w.writerow([s.subject_id, _fmt(lm.age), str(int(lm.z)), _fmt(lm.l), _fmt(lm.m)])
    return sub_path, lm_path


# ------------------------------------------------------------------- age grid


@dataclass(frozen=True)
class AgeGrid:
    ages: tuple[float, ...]

    def __post_init__(self):
        a = np.asarray(self.ages, dtype=float)
        if a.size == 0:
            raise GridInfeasibleError("age grid is empty")
        if np.any(np.diff(a) <= 0):
            raise GridInfeasibleError("age grid must be strictly increasing")

    @property
    def K(self) -> int:
        return len(self.ages)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.ages, dtype=float)


def grid_covers_events(ages: Sequence[float], event_ages: Sequence[float]) -> bool:
    """Check that every interval (a_{k-1}, a_k] holds an event; a_0 = -inf."""
    ev = np.asarray(event_ages, dtype=float)
    lo = -math.inf
    for a in ages:
        if not np.any((ev > lo) & (ev <= a)):
            return False
        lo = a
    return True


def build_age_grid(cohort_or_events, target_age: float, max_intervals: int = 4,
                   start: float | None = None) -> AgeGrid:
    """Coarsen a nominal grid until each interval contains an observed event.

    The nominal grid has ``max_intervals`` equally spaced points from ``start``
    (default: the earliest event age) to ``target_age``. Scanning left to
    right, a point whose interval holds no event is dropped, which merges that
    interval into its right neighbour; if the final interval ending at
    ``target_age`` is empty the last kept point is dropped until it is not.
    """
    if max_intervals < 1:
        raise ValueError("max_intervals must be >= 1")
    if isinstance(cohort_or_events, Cohort):
        events = cohort_or_events.event_ages(events_only=True)
    else:
        events = np.asarray(cohort_or_events, dtype=float)
    events = np.sort(events[events <= target_age])
    if events.size == 0:
        raise GridInfeasibleError(f"grid infeasible: no events at or below age {target_age}")
    first = events[0] if start is None else float(start)
    if first >= target_age or max_intervals == 1:
        nominal = np.array([target_age])
    else:
        nominal = np.linspace(first, target_age, max_intervals)
    kept: list[float] = []
    lo = -math.inf
    for a in nominal[:-1]:
        if np.any((events > lo) & (events <= a)):
            kept.append(float(a))
            lo = a
    while kept and not np.any(events > kept[-1]):
        kept.pop()
    ages = tuple(kept) + (float(target_age),)
    assert grid_covers_events(ages, events)
    return AgeGrid(ages)
