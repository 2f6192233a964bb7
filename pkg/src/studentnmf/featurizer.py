"""Per (student, period) behaviour features and the masked feature matrix.

Features (all durations in hours):

====  ==========================================================
f1    session time inside the school-hours window (local time)
f2    session time outside the window
f3    exercise dwell time
f4    text dwell time
f5    quiz time
f6    session time in language subjects
f7    session time in societal subjects
f8    session time in science subjects
f9    mean session duration
f10   mean quiz score; missing (mask 0) when no quiz was taken
f11+  exercise dwell time per Bloom group 1..4 (f11..f14)
====  ==========================================================
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, time, timedelta
from typing import IO, Iterable, Mapping
from zoneinfo import ZoneInfo

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError
from .sessionizer import Kind, Session, StudentPeriodEntry

ALL_FEATURES = tuple(range(1, 15))
MISSABLE_FEATURES = frozenset({10})
SUBJECT_CLASSES = ("language", "societal", "science")
FEATURE_DESCRIPTIONS = {
    1: "Hours between 8AM and 4PM",
    2: "Hours before 8AM and after 4PM",
    3: "Hours doing exercises",
    4: "Hours reading texts",
    5: "Hours taking quizzes",
    6: "Hours working with language subjects",
    7: "Hours working with societal subjects",
    8: "Hours working with science subjects",
    9: "Average session length in hours",
    10: "Average quiz score",
    11: "Hours working with Bloom level 1",
    12: "Hours working with Bloom level 2",
    13: "Hours working with Bloom level 3",
    14: "Hours working with Bloom level 4",
}
EXPERIMENT_1 = tuple(range(1, 11))
EXPERIMENT_2 = (6, 7, 8, 11, 12, 13, 14)

_BLOOM_GROUPS = {1: 1, 2: 1, 3: 2, 4: 3, 5: 3, 6: 4}


def bloom_group(raw_level: int) -> int:
    """Map a Bloom taxonomy level (1=Remember .. 6=Create) to one of 4 groups.

    Remember/Understand -> 1, Apply -> 2, Analyze/Evaluate -> 3, Create -> 4.
    """
    try:
        return _BLOOM_GROUPS[raw_level]
    except (KeyError, TypeError):
        raise ValidationError(f"Bloom level must be in 1..6, got {raw_level!r}") from None


def feature_name(fid: int) -> str:
    return f"f{fid}"


def parse_feature_ids(text: str) -> tuple[int, ...]:
    """Parse ``"1-10"`` or ``"6,7,8,11-14"`` into feature ids."""
    ids: list[int] = []
    for part in text.split(","):
        part = part.strip().lstrip("f")
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            ids.extend(range(int(lo), int(hi.lstrip("f")) + 1))
        else:
            ids.append(int(part))
    return tuple(ids)


@dataclass(frozen=True)
class FeatureSpec:
    feature_ids: tuple[int, ...] = EXPERIMENT_1
    subject_map: Mapping[str, str] = field(default_factory=dict)
    school_hours: tuple[time, time] = (time(8), time(16))
    timezone: str = "Europe/Copenhagen"

    def __post_init__(self) -> None:
        ids = tuple(self.feature_ids)
        object.__setattr__(self, "feature_ids", ids)
        if not ids:
            raise ValidationError("feature_ids must be non-empty")
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate feature ids in {ids}")
        bad = [i for i in ids if i not in ALL_FEATURES]
        if bad:
            raise ValidationError(f"unknown feature ids {bad}; valid ids are 1..14")
        if not self.school_hours[0] < self.school_hours[1]:
            raise ValidationError("school-hours window must start before it ends")
        bad_classes = {c for c in self.subject_map.values() if c not in SUBJECT_CLASSES}
        if bad_classes:
            raise ConfigurationError(f"unknown subject classes {sorted(bad_classes)}; expected {SUBJECT_CLASSES}")
        ZoneInfo(self.timezone)

    @property
    def names(self) -> list[str]:
        return [feature_name(i) for i in self.feature_ids]


@dataclass
class FeatureMatrix:
    X: np.ndarray
    W: np.ndarray
    row_labels: list[tuple[str, int]]
    col_labels: list[int]

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=float)
        self.W = np.asarray(self.W, dtype=float)
        if self.X.ndim != 2 or self.X.shape != self.W.shape:
            raise ValidationError(f"X and W must be 2-D with equal shapes, got {self.X.shape} and {self.W.shape}")
        if len(self.row_labels) != self.X.shape[0] or len(self.col_labels) != self.X.shape[1]:
            raise ValidationError("label counts do not match the matrix shape")
        if not np.all(np.isfinite(self.X)) or np.any(self.X < 0):
            raise ValidationError("X must be finite and non-negative")
        if not np.all((self.W == 0) | (self.W == 1)):
            raise ValidationError("W must be binary")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def feature_names(self) -> list[str]:
        return [feature_name(i) for i in self.col_labels]


def school_hours_split(start: float, end: float, window: tuple[time, time], tz: ZoneInfo) -> tuple[float, float]:
    """Split ``[start, end]`` (UTC seconds) into (inside, outside) window seconds."""
    if end <= start:
        return 0.0, 0.0
    total = end - start
    inside = 0.0
    day = datetime.fromtimestamp(start, tz).date()
    last = datetime.fromtimestamp(end, tz).date()
    while day <= last:
        lo = datetime.combine(day, window[0], tzinfo=tz).timestamp()
        hi = datetime.combine(day, window[1], tzinfo=tz).timestamp()
        inside += max(0.0, min(end, hi) - max(start, lo))
        day += timedelta(days=1)
    return inside, total - inside


def _interval(s: Session) -> tuple[float, float]:
    if s.kind is Kind.QUIZ:
        return s.start, s.start + s.duration
    return s.start, s.end


def extract_row(entry: StudentPeriodEntry, spec: FeatureSpec) -> tuple[np.ndarray, np.ndarray]:
    """Feature values and mask for one active (student, period) entry."""
    if not entry.sessions:
        raise ValidationError(f"entry {entry.student_id}/{entry.period_index} has no sessions")
    unmapped = sorted({s.subject for s in entry.sessions if s.subject not in spec.subject_map})
    if unmapped:
        raise ConfigurationError(f"subjects missing from subject map: {', '.join(unmapped)}")

    tz = ZoneInfo(spec.timezone)
    f = dict.fromkeys(ALL_FEATURES, 0.0)
    class_feature = {"language": 6, "societal": 7, "science": 8}
    scores = []
    total = 0.0
    for s in entry.sessions:
        inside, outside = school_hours_split(*_interval(s), spec.school_hours, tz)
        f[1] += inside
        f[2] += outside
        f[3] += s.per_kind_seconds.get(Kind.EXERCISE, 0.0)
        f[4] += s.per_kind_seconds.get(Kind.TEXT, 0.0)
        f[5] += s.per_kind_seconds.get(Kind.QUIZ, 0.0)
        f[class_feature[spec.subject_map[s.subject]]] += s.duration
        for g in (1, 2, 3, 4):
            f[10 + g] += s.bloom_seconds.get(g, 0.0)
        total += s.duration
        if s.quiz_score is not None:
            scores.append(s.quiz_score)
    for i in f:
        f[i] /= 3600.0
    f[9] = total / len(entry.sessions) / 3600.0
    f[10] = float(np.mean(scores)) if scores else 0.0

    values = np.array([f[i] for i in spec.feature_ids])
    mask = np.array([0.0 if (i == 10 and not scores) else 1.0 for i in spec.feature_ids])
    return values, mask


def build_matrix(entries: Iterable[StudentPeriodEntry], spec: FeatureSpec) -> FeatureMatrix:
    """Assemble X and W with rows ordered by (period, student_id)."""
    ordered = sorted(entries, key=lambda e: (e.period_index, e.student_id))
    if not ordered:
        raise ValidationError("no active entries to featurize")
    rows = [extract_row(e, spec) for e in ordered]
    return FeatureMatrix(
        X=np.vstack([r[0] for r in rows]),
        W=np.vstack([r[1] for r in rows]),
        row_labels=[(e.student_id, e.period_index) for e in ordered],
        col_labels=list(spec.feature_ids),
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def matrix_paths(prefix: str) -> tuple[str, str]:
    return f"{prefix}.matrix.csv", f"{prefix}.mask.csv"


def write_matrix(fm: FeatureMatrix, prefix: str) -> tuple[str, str]:
    """Write ``<prefix>.matrix.csv`` and the companion ``<prefix>.mask.csv``."""
    paths = matrix_paths(prefix)
    for path, data, conv in ((paths[0], fm.X, _fmt), (paths[1], fm.W, lambda v: str(int(v)))):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["student_id", "period", *fm.feature_names])
            for (sid, p), row in zip(fm.row_labels, data):
                writer.writerow([sid, p, *(conv(v) for v in row)])
    return paths


def _read_table(path: str) -> tuple[list[str], list[tuple[str, int]], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["student_id", "period"]:
            raise ParseError(1, f"{path}: expected header starting with student_id,period")
        labels, rows = [], []
        for row in reader:
            if len(row) != len(header):
                raise ParseError(reader.line_num, f"{path}: expected {len(header)} fields")
            try:
                labels.append((row[0], int(row[1])))
                rows.append([float(v) for v in row[2:]])
            except ValueError as exc:
                raise ParseError(reader.line_num, f"{path}: {exc}") from None
    data = np.array(rows, dtype=float).reshape(len(rows), len(header) - 2)
    return header[2:], labels, data


def read_matrix(prefix: str) -> FeatureMatrix:
    x_path, w_path = matrix_paths(prefix)
    names, labels, X = _read_table(x_path)
    w_names, w_labels, W = _read_table(w_path)
    if w_names != names or w_labels != labels:
        raise ValidationError("matrix and mask files disagree on labels")
    try:
        cols = [int(n.lstrip("f")) for n in names]
    except ValueError:
        raise ValidationError(f"feature columns must be named f<id>, got {names}") from None
    return FeatureMatrix(X=X, W=W, row_labels=labels, col_labels=cols)


def load_subject_map(stream: IO[str]) -> dict[str, str]:
    data = json.load(stream)
    if not isinstance(data, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in data.items()):
        raise ConfigurationError("subject map must be a JSON object of subject -> class")
    return data
