"""Synthetic cohorts with planted behaviours, as matrices or raw event logs.

Planted memberships are per active (student, period) row.  Each student has
a persistent primary behaviour, sometimes mixed with a secondary one, plus a
small background weight on every behaviour.  Vacation periods scale both the
chance of being active and the amount of activity by their multiplier.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from typing import Mapping, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .errors import ValidationError
from .featurizer import EXPERIMENT_2, FeatureMatrix, FeatureSpec
from .sessionizer import Kind, PeriodCalendar, RawEvent

MASKED_FEATURE = 10

# stream ids for independent generators derived from one seed
_FACTORS, _NOISE, _MASK, _EVENTS = range(4)


@dataclass(frozen=True)
class SyntheticSpec:
    n_students: int = 500
    n_periods: int = 20
    k_true: int = 3
    noise_sigma: float = 0.0
    missing_rate: float = 0.0
    vacation_periods: Mapping[int, float] = field(default_factory=dict)
    seed: int = 0
    n_features: int = 10
    active_prob: float = 0.9
    secondary_prob: float = 0.5
    background: float = 0.05
    dirichlet_alpha: float = 0.5
    score_bound: float | None = 1.0

    def __post_init__(self) -> None:
        if self.n_students < 1 or self.n_periods < 1 or self.k_true < 1 or self.n_features < 1:
            raise ValidationError("n_students, n_periods, k_true and n_features must be >= 1")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not 0 <= self.missing_rate < 1:
            raise ValidationError("missing_rate must lie in [0, 1)")
        for p, mult in self.vacation_periods.items():
            if not 0 <= mult < 1:
                raise ValidationError(f"vacation multiplier for period {p} must lie in [0, 1)")
        if not 0 < self.active_prob <= 1:
            raise ValidationError("active_prob must lie in (0, 1]")
        if self.score_bound is not None and not self.score_bound > 0:
            raise ValidationError("score_bound must be positive")

    def multiplier(self, period: int) -> float:
        return self.vacation_periods.get(period, 1.0)

    def rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream])


@dataclass(frozen=True, eq=False)
class PlantedFactors:
    U: np.ndarray
    V: np.ndarray
    row_labels: list[tuple[str, int]]


def student_ids(n: int) -> list[str]:
    width = max(4, len(str(n - 1)))
    return [f"s{i:0{width}d}" for i in range(n)]


def plant_memberships(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[tuple[str, int]]]:
    """Planted U* (in activity units) and its (student, period) row labels."""
    k = spec.k_true
    ids = student_ids(spec.n_students)
    primary = rng.integers(0, k, spec.n_students)
    level = rng.gamma(4.0, 0.25, spec.n_students)
    rows, labels = [], []
    for p in range(spec.n_periods):
        mult = spec.multiplier(p)
        active = rng.random(spec.n_students) < spec.active_prob * mult
        weekly = rng.gamma(8.0, 1 / 8.0, spec.n_students)
        secondary = rng.integers(0, k, spec.n_students)
        mix = rng.random(spec.n_students) * 0.6 * (rng.random(spec.n_students) < spec.secondary_prob)
        bg = rng.random((spec.n_students, k)) * spec.background
        for s in np.flatnonzero(active):
            u = bg[s].copy()
            u[primary[s]] += 1.0
            u[secondary[s]] += mix[s]
            rows.append(u * level[s] * weekly[s] * mult)
            labels.append((ids[s], p))
    U = np.array(rows).reshape(len(rows), k)
    return U, labels


def plant_factors(spec: SyntheticSpec) -> PlantedFactors:
    """Planted U*, V* (rows of V* on the simplex) for the matrix generator."""
    rng = spec.rng(_FACTORS)
    V = rng.dirichlet(np.full(spec.n_features, spec.dirichlet_alpha), spec.k_true)
    U, labels = plant_memberships(spec, rng)
    if spec.score_bound is not None and spec.n_features >= MASKED_FEATURE and U.size:
        # f10 is a score: keep its planted values under the bound the fit assumes,
        # then restore unit row sums with U absorbing the scale (other columns unchanged)
        j = MASKED_FEATURE - 1
        peak = float((U @ V[:, j]).max())
        if peak > spec.score_bound:
            V[:, j] *= spec.score_bound / peak
            sums = V.sum(axis=1)
            V /= sums[:, None]
            U = U * sums[None, :]
    return PlantedFactors(U=U, V=V, row_labels=labels)


def synth_matrix(planted: PlantedFactors, spec: SyntheticSpec) -> FeatureMatrix:
    """``X = max(0, U* V* + noise)``; the f10 column (if present) masked at ``missing_rate``."""
    X = planted.U @ planted.V
    if spec.noise_sigma > 0:
        X = np.maximum(0.0, X + spec.rng(_NOISE).normal(0.0, spec.noise_sigma, X.shape))
    W = np.ones_like(X)
    cols = list(range(1, X.shape[1] + 1))
    if MASKED_FEATURE in cols and spec.missing_rate > 0:
        j = cols.index(MASKED_FEATURE)
        W[:, j] = spec.rng(_MASK).random(X.shape[0]) >= spec.missing_rate
    return FeatureMatrix(X=X, W=W, row_labels=list(planted.row_labels), col_labels=cols)


# --- event logs -----------------------------------------------------------

SUBJECTS = {
    "language": ("danish", "english", "german"),
    "societal": ("history", "social_studies", "religion"),
    "science": ("physics", "biology", "geography"),
}
DEFAULT_SUBJECT_MAP = {s: cls for cls, subjects in SUBJECTS.items() for s in subjects}

SCHOOL = (8, 16)
EVENING = (16, 22)
# sessions end >= 11 min before the next slot so neighbours never merge at gap 600
SESSION_SPAN = 49 * 60
MAX_SESSION = 45 * 60


@dataclass(frozen=True)
class BehaviorTemplate:
    """Propensities of one planted behaviour.

    ``kinds`` weights text vs exercise page views, ``bloom`` the Bloom group
    of exercise views, ``quiz_share`` the fraction of time spent in quizzes.
    """

    name: str
    subject_class: str
    hours: tuple[int, int]
    kinds: Mapping[Kind, float]
    bloom: Mapping[int, float]
    quiz_share: float = 0.1
    score: float = 0.7


DEFAULT_TEMPLATES = (
    BehaviorTemplate("school-hours language reader", "language", SCHOOL,
                     {Kind.TEXT: 0.8, Kind.EXERCISE: 0.2}, {1: 0.85, 2: 0.05, 3: 0.05, 4: 0.05}, 0.1, 0.75),
    BehaviorTemplate("school-hours societal analyst", "societal", SCHOOL,
                     {Kind.TEXT: 0.3, Kind.EXERCISE: 0.7}, {1: 0.05, 2: 0.05, 3: 0.85, 4: 0.05}, 0.05, 0.7),
    BehaviorTemplate("evening science practitioner", "science", EVENING,
                     {Kind.TEXT: 0.2, Kind.EXERCISE: 0.8}, {2: 0.6, 4: 0.4}, 0.15, 0.6),
    BehaviorTemplate("evening language quizzer", "language", EVENING,
                     {Kind.TEXT: 0.5, Kind.EXERCISE: 0.5}, {2: 0.5, 4: 0.5}, 0.6, 0.65),
    BehaviorTemplate("school-hours science reader", "science", SCHOOL,
                     {Kind.TEXT: 1.0}, {}, 0.05, 0.8),
)


def template_profile(t: BehaviorTemplate, feature_ids: Sequence[int]) -> np.ndarray:
    """Expected additive feature hours per hour of the behaviour.

    Features that are not sums of time (f9, f10) get 0.
    """
    school = t.hours == SCHOOL
    page = 1.0 - t.quiz_share
    kind_total = sum(t.kinds.values())
    exercise = page * t.kinds.get(Kind.EXERCISE, 0.0) / kind_total
    bloom_total = sum(t.bloom.values()) or 1.0
    f = {
        1: 1.0 if school else 0.0,
        2: 0.0 if school else 1.0,
        3: exercise,
        4: page * t.kinds.get(Kind.TEXT, 0.0) / kind_total,
        5: t.quiz_share,
        6: float(t.subject_class == "language"),
        7: float(t.subject_class == "societal"),
        8: float(t.subject_class == "science"),
        9: 0.0,
        10: 0.0,
    }
    for g in (1, 2, 3, 4):
        f[10 + g] = exercise * t.bloom.get(g, 0.0) / bloom_total
    return np.array([f[i] for i in feature_ids])


@dataclass(frozen=True, eq=False)
class SyntheticEventLog:
    events: list[RawEvent]
    planted: PlantedFactors
    templates: tuple[BehaviorTemplate, ...]
    calendar: PeriodCalendar
    feature_spec: FeatureSpec
    hours: np.ndarray  # planted activity hours per row and behaviour


def _session_events(rng, sid, subject, start, length, t: BehaviorTemplate) -> list[RawEvent]:
    times = [start]
    end = start + length
    while end - times[-1] > 240:
        times.append(times[-1] + int(rng.integers(60, 241)))
    if times[-1] != end:
        times.append(end)
    # each event takes the (kind, bloom) label furthest behind its target share of dwell time
    kind_total = sum(t.kinds.values())
    bloom_total = sum(t.bloom.values())
    targets: dict[tuple[Kind, int | None], float] = {}
    for kind, w in t.kinds.items():
        if kind is Kind.EXERCISE and bloom_total:
            for g, b in t.bloom.items():
                targets[(kind, g)] = w / kind_total * b / bloom_total
        else:
            targets[(kind, None)] = w / kind_total
    labels = list(targets)
    attributed = dict.fromkeys(labels, 0.0)
    out = []
    elapsed = 0.0
    for ts, nxt in zip(times, times[1:] + [None]):
        dwell = 0.0 if nxt is None else float(nxt - ts)
        elapsed += dwell
        kind, bloom = max(labels, key=lambda lab: targets[lab] * elapsed - attributed[lab])
        attributed[(kind, bloom)] += dwell
        out.append(RawEvent(sid, int(ts), subject, kind, bloom_group=bloom))
    return out


def synth_event_log(
    spec: SyntheticSpec,
    templates: Sequence[BehaviorTemplate] = DEFAULT_TEMPLATES,
    *,
    epoch: date = date(2015, 1, 8),
    feature_ids: Sequence[int] = EXPERIMENT_2,
    timezone: str = "Europe/Copenhagen",
) -> SyntheticEventLog:
    """Raw events whose sessionized features approximate the planted U* V*.

    Activity of behaviour ``b`` in a row is ``U*[row, b]`` hours, laid out as
    sessions of at most 45 minutes in one-hour slots of the behaviour's
    time-of-day window, plus quiz sessions for ``quiz_share`` of the time.
    The returned planted V* is the templates' expected per-hour feature
    profile over ``feature_ids``, normalized to rows summing to one (U*
    absorbs the scale).
    """
    if spec.k_true > len(templates):
        raise ValidationError(f"k_true={spec.k_true} exceeds the {len(templates)} available templates")
    templates = tuple(templates[: spec.k_true])
    rng = spec.rng(_EVENTS)
    hours, labels = plant_memberships(spec, spec.rng(_FACTORS))
    tz = ZoneInfo(timezone)
    calendar = PeriodCalendar(epoch=epoch, period_count=spec.n_periods, timezone=timezone)
    events: list[RawEvent] = []

    for (sid, p), row in zip(labels, hours):
        period_start = epoch + timedelta(days=7 * p)
        free = {
            window: [(d, h) for d in range(7) for h in range(*window)]
            for window in (SCHOOL, EVENING)
        }
        for window in free:
            rng.shuffle(free[window])
        for t, h in zip(templates, row):
            seconds = h * 3600.0
            quiz_seconds = seconds * t.quiz_share
            page_seconds = seconds - quiz_seconds
            jobs = []
            n_quiz = int(round(quiz_seconds / 600.0))
            if n_quiz == 0 and rng.random() < quiz_seconds / 600.0:
                n_quiz = 1
            for _ in range(n_quiz):
                jobs.append(("quiz", max(60, int(round(quiz_seconds / n_quiz)))))
            n_sess = math.ceil(page_seconds / MAX_SESSION)
            if n_sess and page_seconds / n_sess >= 60:
                jobs += [("page", int(round(page_seconds / n_sess)))] * n_sess
            for job, length in jobs:
                if not free[t.hours]:
                    break
                day, hour = free[t.hours].pop()
                span = min(length, MAX_SESSION) if job == "page" else min(length, SESSION_SPAN)
                offset = int(rng.integers(0, SESSION_SPAN - span + 1))
                local = datetime.combine(period_start + timedelta(days=day), time(hour), tzinfo=tz)
                start = int(local.timestamp()) + offset
                subject = SUBJECTS[t.subject_class][int(rng.integers(len(SUBJECTS[t.subject_class])))]
                if job == "quiz":
                    score = float(np.clip(rng.beta(8 * t.score, 8 * (1 - t.score)), 0.0, 1.0))
                    events.append(RawEvent(sid, start, subject, Kind.QUIZ, quiz_score=round(score, 4),
                                           quiz_duration=float(span)))
                else:
                    events.extend(_session_events(rng, sid, subject, start, span, t))

    events.sort(key=lambda e: (e.timestamp, e.student_id))
    profiles = np.array([template_profile(t, feature_ids) for t in templates])
    sums = profiles.sum(axis=1)
    sums = np.where(sums > 0, sums, 1.0)
    planted = PlantedFactors(U=hours * sums[None, :], V=profiles / sums[:, None], row_labels=labels)
    fspec = FeatureSpec(feature_ids=tuple(feature_ids), subject_map=dict(DEFAULT_SUBJECT_MAP), timezone=timezone)
    return SyntheticEventLog(events=events, planted=planted, templates=templates, calendar=calendar,
                             feature_spec=fspec, hours=hours)


# --- recovery scoring -------------------------------------------------------

def _cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(1.0 - np.dot(a, b) / (na * nb))


def aligned_recovery_error(model, U_true: np.ndarray, V_true: np.ndarray, *, greedy: bool = False) -> float:
    """Mean per-cluster cosine distance between fitted V and V*, minimized over cluster permutations.

    Exhaustive for k <= 8; larger k requires ``greedy=True``.  ``U_true`` is
    accepted for symmetry with the planted pair but the score only depends
    on the cluster profiles.
    """
    V = np.asarray(model.V if hasattr(model, "V") else model, dtype=float)
    V_true = np.asarray(V_true, dtype=float)
    if V.shape != V_true.shape:
        raise ValidationError(f"fitted V {V.shape} and planted V {V_true.shape} differ in shape")
    k = V.shape[0]
    D = np.array([[_cosine_distance(V[i], V_true[j]) for j in range(k)] for i in range(k)])
    if k > 8 and not greedy:
        raise ValidationError(f"exhaustive alignment supports k <= 8, got k={k}; pass greedy=True")
    if greedy:
        remaining_fit, remaining_true, total = set(range(k)), set(range(k)), 0.0
        for _ in range(k):
            i, j = min(itertools.product(remaining_fit, remaining_true), key=lambda ij: D[ij])
            total += D[i, j]
            remaining_fit.remove(i)
            remaining_true.remove(j)
        return total / k
    cols = np.arange(k)
    return float(min(D[list(perm), cols].mean() for perm in itertools.permutations(range(k))))
