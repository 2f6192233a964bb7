"""Raw log parsing, sessionization and weekly activity periods.

Events are page accesses (text or exercise) and quiz attempts.  Per student,
quiz attempts become singleton sessions; the remaining events are merged
left to right while the subject stays the same and consecutive timestamps
are less than ``gap`` seconds apart.
"""

from __future__ import annotations

import bisect
import csv
import io
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from enum import Enum
from typing import IO, Iterable, Sequence
from zoneinfo import ZoneInfo

from .errors import ParseError, ValidationError

DEFAULT_GAP = 600
EVENT_COLUMNS = ["student_id", "timestamp", "subject", "kind", "bloom", "score", "duration"]
SESSION_COLUMNS = [
    "student_id", "subject", "start", "end", "kind", "duration", "score",
    "text_s", "exercise_s", "quiz_s", "bloom1_s", "bloom2_s", "bloom3_s", "bloom4_s",
]


class Kind(str, Enum):
    TEXT = "text"
    EXERCISE = "exercise"
    QUIZ = "quiz"
    MIXED = "mixed"


EVENT_KINDS = (Kind.TEXT, Kind.EXERCISE, Kind.QUIZ)


@dataclass(frozen=True, slots=True)
class RawEvent:
    student_id: str
    timestamp: int
    subject: str
    kind: Kind
    bloom_group: int | None = None
    quiz_score: float | None = None
    quiz_duration: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise ValidationError(f"event kind must be text, exercise or quiz, got {self.kind!r}")
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise ValidationError(f"timestamp must be finite and >= 0, got {self.timestamp}")
        is_quiz = self.kind is Kind.QUIZ
        if is_quiz != (self.quiz_score is not None) or is_quiz != (self.quiz_duration is not None):
            raise ValidationError("quiz score and duration are required for quizzes and forbidden otherwise")
        if self.bloom_group is not None:
            if self.kind is not Kind.EXERCISE:
                raise ValidationError("bloom group is only allowed on exercise events")
            if self.bloom_group not in (1, 2, 3, 4):
                raise ValidationError(f"bloom group must be in 1..4, got {self.bloom_group}")
        if is_quiz:
            if not 0.0 <= self.quiz_score <= 1.0:
                raise ValidationError(f"quiz score must be in [0, 1], got {self.quiz_score}")
            if not self.quiz_duration >= 0 or not math.isfinite(self.quiz_duration):
                raise ValidationError(f"quiz duration must be >= 0, got {self.quiz_duration}")


@dataclass(frozen=True, slots=True)
class Session:
    """A merged activity interval for one student in one subject.

    ``per_kind_seconds`` and ``bloom_seconds`` hold the dwell time (time to
    the next event of the session) attributed to the kind and Bloom group of
    the earlier event.  Quiz sessions carry their logged duration instead.
    """

    student_id: str
    subject: str
    start: float
    end: float
    kind: Kind
    duration: float
    quiz_score: float | None = None
    per_kind_seconds: dict[Kind, float] = field(default_factory=dict)
    bloom_seconds: dict[int, float] = field(default_factory=dict)
    n_events: int = 1


@dataclass(frozen=True)
class PeriodCalendar:
    """Consecutive fixed-length activity periods starting at local midnight of ``epoch``."""

    epoch: date
    period_count: int
    period_length: int = 7
    timezone: str = "Europe/Copenhagen"

    def __post_init__(self) -> None:
        if self.period_length < 1:
            raise ValidationError("period_length must be at least one day")
        if self.period_count < 0:
            raise ValidationError("period_count must be non-negative")
        ZoneInfo(self.timezone)

    def boundaries(self) -> list[float]:
        """UTC timestamps of the ``period_count + 1`` period boundaries."""
        tz = ZoneInfo(self.timezone)
        out = []
        for p in range(self.period_count + 1):
            day = self.epoch + timedelta(days=p * self.period_length)
            out.append(datetime.combine(day, time(0), tzinfo=tz).timestamp())
        return out

    def period_of(self, timestamp: float) -> int | None:
        return _locate(self.boundaries(), timestamp)


@dataclass(frozen=True)
class StudentPeriodEntry:
    student_id: str
    period_index: int
    sessions: tuple[Session, ...]


def _locate(bounds: list[float], timestamp: float) -> int | None:
    if timestamp < bounds[0] or timestamp >= bounds[-1]:
        return None
    return bisect.bisect_right(bounds, timestamp) - 1


class DroppedSessionsWarning(UserWarning):
    """Sessions starting outside the calendar were dropped."""

    def __init__(self, count: int) -> None:
        super().__init__(f"dropped {count} session(s) starting outside the calendar")
        self.count = count


def _opt(value: str, conv, line: int, name: str):
    value = value.strip()
    if value == "":
        return None
    try:
        return conv(value)
    except ValueError:
        raise ParseError(line, f"invalid {name}: {value!r}") from None


def parse_events(stream: IO[bytes] | IO[str] | bytes | str, *, raw_bloom: bool = False) -> list[RawEvent]:
    """Parse the events CSV (header required) into validated events.

    With ``raw_bloom`` the bloom column holds Bloom taxonomy levels 1..6 which
    are regrouped into the four groups used by the features.
    """
    from .featurizer import bloom_group

    if isinstance(stream, bytes):
        text = stream.decode("utf-8")
    elif isinstance(stream, str):
        text = stream
    else:
        data = stream.read()
        text = data.decode("utf-8") if isinstance(data, bytes) else data
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(1, "missing header") from None
    if [h.strip() for h in header] != EVENT_COLUMNS:
        raise ParseError(1, f"expected header {','.join(EVENT_COLUMNS)}")
    events = []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(EVENT_COLUMNS):
            raise ParseError(line, f"expected {len(EVENT_COLUMNS)} fields, got {len(row)}")
        sid, ts, subject, kind, bloom, score, duration = (c.strip() for c in row)
        if not sid or not subject:
            raise ParseError(line, "student_id and subject are required")
        try:
            timestamp = int(ts)
        except ValueError:
            raise ParseError(line, f"invalid timestamp: {ts!r}") from None
        try:
            kind_v = Kind(kind)
        except ValueError:
            raise ParseError(line, f"unknown kind: {kind!r}") from None
        bloom_v = _opt(bloom, int, line, "bloom")
        try:
            if bloom_v is not None and raw_bloom:
                bloom_v = bloom_group(bloom_v)
            events.append(RawEvent(
                student_id=sid,
                timestamp=timestamp,
                subject=subject,
                kind=kind_v,
                bloom_group=bloom_v,
                quiz_score=_opt(score, float, line, "score"),
                quiz_duration=_opt(duration, float, line, "duration"),
            ))
        except ParseError:
            raise
        except ValidationError as exc:
            raise ValidationError(f"line {line}: {exc}") from None
    return events


def write_events(events: Iterable[RawEvent], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(EVENT_COLUMNS)
    for e in events:
        writer.writerow([
            e.student_id, e.timestamp, e.subject, e.kind.value,
            "" if e.bloom_group is None else e.bloom_group,
            "" if e.quiz_score is None else repr(e.quiz_score),
            "" if e.quiz_duration is None else _num(e.quiz_duration),
        ])


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _close_session(run: list[RawEvent]) -> Session:
    per_kind: dict[Kind, float] = defaultdict(float)
    bloom: dict[int, float] = defaultdict(float)
    for prev, nxt in zip(run, run[1:]):
        dwell = float(nxt.timestamp - prev.timestamp)
        per_kind[prev.kind] += dwell
        if prev.bloom_group is not None:
            bloom[prev.bloom_group] += dwell
    kinds = {e.kind for e in run}
    start, end = float(run[0].timestamp), float(run[-1].timestamp)
    return Session(
        student_id=run[0].student_id,
        subject=run[0].subject,
        start=start,
        end=end,
        kind=kinds.pop() if len(kinds) == 1 else Kind.MIXED,
        duration=end - start,
        per_kind_seconds=dict(per_kind),
        bloom_seconds=dict(bloom),
        n_events=len(run),
    )


def _quiz_session(e: RawEvent) -> Session:
    start = float(e.timestamp)
    return Session(
        student_id=e.student_id,
        subject=e.subject,
        start=start,
        end=start + e.quiz_duration,
        kind=Kind.QUIZ,
        duration=float(e.quiz_duration),
        quiz_score=e.quiz_score,
        per_kind_seconds={Kind.QUIZ: float(e.quiz_duration)},
    )


def _session_key(s: Session):
    return (s.student_id, s.start, s.subject, s.kind.value, s.end)


def build_sessions(events: Sequence[RawEvent], gap: float = DEFAULT_GAP) -> list[Session]:
    """Merge events into sessions, ordered by (student_id, start)."""
    if not gap > 0:
        raise ValidationError(f"gap must be positive, got {gap}")
    by_student: dict[str, list[RawEvent]] = defaultdict(list)
    for e in events:
        by_student[e.student_id].append(e)

    sessions: list[Session] = []
    for student_events in by_student.values():
        # stable: ties keep input order
        student_events.sort(key=lambda e: e.timestamp)
        run: list[RawEvent] = []
        for e in student_events:
            if e.kind is Kind.QUIZ:
                sessions.append(_quiz_session(e))
                continue
            if run and (e.subject != run[-1].subject or e.timestamp - run[-1].timestamp >= gap):
                sessions.append(_close_session(run))
                run = []
            run.append(e)
        if run:
            sessions.append(_close_session(run))
    sessions.sort(key=_session_key)
    return sessions


def assign_periods(sessions: Iterable[Session], calendar: PeriodCalendar) -> list[StudentPeriodEntry]:
    """Group sessions into (student, period) entries by session start time.

    Sessions starting outside the calendar are dropped; a
    :class:`DroppedSessionsWarning` reports how many.
    """
    bounds = calendar.boundaries()
    grouped: dict[tuple[int, str], list[Session]] = defaultdict(list)
    dropped = 0
    for s in sessions:
        p = _locate(bounds, s.start)
        if p is None:
            dropped += 1
            continue
        grouped[(p, s.student_id)].append(s)
    if dropped:
        warnings.warn(DroppedSessionsWarning(dropped), stacklevel=2)
    return [
        StudentPeriodEntry(student_id=sid, period_index=p, sessions=tuple(sorted(grouped[(p, sid)], key=_session_key)))
        for p, sid in sorted(grouped)
    ]


def activity_counts(entries: Iterable[StudentPeriodEntry], period_count: int) -> list[tuple[int, int]]:
    """Number of distinct active students per period, zeros included."""
    active: dict[int, set[str]] = defaultdict(set)
    for e in entries:
        active[e.period_index].add(e.student_id)
    return [(p, len(active.get(p, ()))) for p in range(period_count)]


def write_sessions(sessions: Iterable[Session], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(SESSION_COLUMNS)
    for s in sessions:
        writer.writerow([
            s.student_id, s.subject, _num(s.start), _num(s.end), s.kind.value, _num(s.duration),
            "" if s.quiz_score is None else repr(s.quiz_score),
            *(_num(s.per_kind_seconds.get(k, 0.0)) for k in EVENT_KINDS),
            *(_num(s.bloom_seconds.get(g, 0.0)) for g in (1, 2, 3, 4)),
        ])


def read_sessions(stream: IO[str]) -> list[Session]:
    reader = csv.DictReader(stream)
    if reader.fieldnames != SESSION_COLUMNS:
        raise ParseError(1, f"expected header {','.join(SESSION_COLUMNS)}")
    out = []
    for row in reader:
        try:
            per_kind = {k: float(row[f"{k.value}_s"]) for k in EVENT_KINDS}
            bloom = {g: float(row[f"bloom{g}_s"]) for g in (1, 2, 3, 4)}
            out.append(Session(
                student_id=row["student_id"],
                subject=row["subject"],
                start=float(row["start"]),
                end=float(row["end"]),
                kind=Kind(row["kind"]),
                duration=float(row["duration"]),
                quiz_score=float(row["score"]) if row["score"] else None,
                per_kind_seconds={k: v for k, v in per_kind.items() if v},
                bloom_seconds={g: v for g, v in bloom.items() if v},
            ))
        except (ValueError, TypeError) as exc:
            raise ParseError(reader.line_num, str(exc)) from None
    return out
