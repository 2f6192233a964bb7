"""Weighted non-negative matrix factorization with multiplicative updates.

Minimizes ``||W * (X - U V)||_F`` over ``U >= 0`` (n x k) and ``V >= 0``
(k x m) where ``W`` is a binary mask (0 = missing).  Updates are the weighted
Lee-Seung rules with guarded denominators and Lin's lifting of stuck entries.

Missing cells whose column carries a known upper bound ``c`` are handled by
the bound rule: before every update step, a missing cell whose reconstruction
exceeds ``c`` is temporarily observed at value ``c``; it is masked again as
soon as the reconstruction drops back to ``c`` or below.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import IO, Mapping, Sequence

import numpy as np

from .errors import KSelectionWarning, OverparameterizedWarning, ValidationError

DEFAULT_BOUNDS = {10: 1.0}


@dataclass(frozen=True)
class FitOptions:
    """Solver settings.

    ``bounds`` maps a feature id (matched against the matrix column labels)
    to the known upper bound of its missing values.
    """

    max_iters: int = 500
    rel_tol: float = 1e-6
    denom_guard: float = 1e-12
    lin_epsilon: float = 1e-9
    restarts: int = 5
    bounds: Mapping[int, float] = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    threads: int = 1

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if not (self.rel_tol > 0 and self.denom_guard > 0 and self.lin_epsilon > 0):
            raise ValidationError("rel_tol, denom_guard and lin_epsilon must be positive")
        if self.restarts < 1:
            raise ValidationError("restarts must be >= 1")
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        for key, c in self.bounds.items():
            if not np.isfinite(c):
                raise ValidationError(f"bound for column {key} must be finite")


@dataclass(frozen=True, eq=False)
class FactorModel:
    U: np.ndarray
    V: np.ndarray
    k: int
    objective_trace: tuple[float, ...]
    seed: int
    converged: bool
    iterations: int
    restart: int = 0
    toggle_events: int = 0
    options: FitOptions = field(default_factory=FitOptions)
    row_labels: list | None = None
    col_labels: list | None = None

    def __post_init__(self) -> None:
        for name in ("U", "V"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def final_objective(self) -> float:
        return self.objective_trace[-1]

    def reconstruction(self) -> np.ndarray:
        return self.U @ self.V


@dataclass(frozen=True, eq=False)
class DiagonalRescaling:
    """Diagonal of ``A`` in ``U V = (U A^-1)(A V)``; identity on degenerate rows."""

    scale: np.ndarray
    degenerate: tuple[int, ...] = ()


def init_factors(n: int, m: int, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform draws on (0, 1]; strictly positive so no entry starts locked at zero."""
    if min(n, m, k) < 1:
        raise ValidationError(f"n, m and k must be >= 1, got {(n, m, k)}")
    if k > min(n, m):
        warnings.warn(OverparameterizedWarning(f"k={k} exceeds min(n, m)={min(n, m)}"), stacklevel=2)
    rng = np.random.default_rng(seed)
    U = 1.0 - rng.random((n, k))
    V = 1.0 - rng.random((k, m))
    return U, V


def _check_shapes(X, W, U, V) -> None:
    if X.shape != W.shape:
        raise ValidationError(f"X {X.shape} and W {W.shape} differ in shape")
    if U.ndim != 2 or V.ndim != 2 or U.shape[0] != X.shape[0] or V.shape[1] != X.shape[1] or U.shape[1] != V.shape[0]:
        raise ValidationError(f"factor shapes U {U.shape}, V {V.shape} do not conform to X {X.shape}")


def masked_objective(X, W, U, V) -> float:
    """Frobenius norm (not squared) of ``W * (X - U V)``."""
    X, W, U, V = (np.asarray(a, dtype=float) for a in (X, W, U, V))
    _check_shapes(X, W, U, V)
    R = W * (X - U @ V)
    return float(np.sqrt(np.sum(R * R)))


def update_step(X, W, U, V, opts: FitOptions | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One multiplicative update of U followed by V.

    Entries below ``lin_epsilon`` whose partial derivative is negative are
    lifted to ``lin_epsilon`` before being rescaled, so a factor entry can
    never get stuck at zero while the objective still wants it to grow.
    """
    opts = opts or FitOptions()
    X, W, U, V = (np.asarray(a, dtype=float) for a in (X, W, U, V))
    _check_shapes(X, W, U, V)
    if not W.any():
        raise ValidationError("mask W is all zeros; nothing to fit")
    if (U < 0).any() or (V < 0).any():
        raise ValidationError("factors must be non-negative")
    return _update(W * X, W, U, V, opts.denom_guard, opts.lin_epsilon)


def _update(WX, W, U, V, delta, eps):
    num = WX @ V.T
    den = (W * (U @ V)) @ V.T
    lift = (den < num) & (U < eps)
    if lift.any():
        U = np.where(lift, eps, U)
        den = (W * (U @ V)) @ V.T
    U = U * num / (den + delta)

    num = U.T @ WX
    den = U.T @ (W * (U @ V))
    lift = (den < num) & (V < eps)
    if lift.any():
        V = np.where(lift, eps, V)
        den = U.T @ (W * (U @ V))
    V = V * num / (den + delta)
    return U, V


def apply_bound_rule(X, W, UV, bounds: Mapping[int, float], missing) -> tuple[np.ndarray, np.ndarray]:
    """Toggle originally-missing cells of bounded columns (keys are column indices).

    A missing cell whose reconstruction exceeds its column bound ``c`` is set
    to ``X = c, W = 1``; otherwise its weight is 0.  Observed cells and
    unbounded columns are left alone.
    """
    X = np.array(X, dtype=float)
    W = np.array(W, dtype=float)
    missing = np.asarray(missing, dtype=bool)
    for j, c in bounds.items():
        rows = np.flatnonzero(missing[:, j])
        if rows.size == 0:
            continue
        X[rows, j] = c
        W[rows, j] = (UV[rows, j] > c).astype(float)
    return X, W


class _BoundCells:
    """Originally-missing cells of bounded columns, flattened for fast toggling."""

    def __init__(self, W: np.ndarray, bounds: Mapping[int, float]):
        rows, cols, cs = [], [], []
        for j, c in sorted(bounds.items()):
            r = np.flatnonzero(W[:, j] == 0)
            rows.append(r)
            cols.append(np.full(r.size, j))
            cs.append(np.full(r.size, float(c)))
        self.rows = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
        self.cols = np.concatenate(cols) if cols else np.zeros(0, dtype=int)
        self.c = np.concatenate(cs) if cs else np.zeros(0)

    def __bool__(self) -> bool:
        return self.rows.size > 0

    def excess(self, UV: np.ndarray) -> np.ndarray:
        return np.maximum(UV[self.rows, self.cols] - self.c, 0.0)


def _objective(X, W, U, V, cells: _BoundCells) -> float:
    UV = U @ V
    R = W * (X - UV)
    total = np.sum(R * R)
    if cells:
        e = cells.excess(UV)
        total += np.sum(e * e)
    return float(np.sqrt(total))


def _resolve_bounds(bounds: Mapping[int, float], col_labels: Sequence | None) -> dict[int, float]:
    if col_labels is None:
        return {}
    index = {label: j for j, label in enumerate(col_labels)}
    return {index[fid]: float(c) for fid, c in bounds.items() if fid in index}


def _validate_inputs(X, W, k):
    X = np.asarray(X, dtype=float)
    W = np.asarray(W, dtype=float)
    if X.ndim != 2 or X.shape != W.shape:
        raise ValidationError(f"X and W must be 2-D with equal shapes, got {X.shape} and {W.shape}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("X contains non-finite values")
    if np.any(X < 0):
        i, j = np.argwhere(X < 0)[0]
        raise ValidationError(f"X must be non-negative; X[{i}, {j}] = {X[i, j]}")
    if not np.all((W == 0) | (W == 1)):
        raise ValidationError("W must be binary")
    if not W.any():
        raise ValidationError("mask W is all zeros; nothing to fit")
    if int(k) != k or k < 1:
        raise ValidationError(f"k must be a positive integer, got {k}")
    return X, W


def restart_seeds(seed: int, restarts: int) -> list[int]:
    """Per-restart seeds derived from the master seed."""
    state = np.random.SeedSequence(seed).generate_state(restarts, dtype=np.uint64)
    return [int(s) for s in state]


def _run(X, W, k, opts: FitOptions, seed: int, bounds: dict[int, float]):
    n, m = X.shape
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OverparameterizedWarning)
        U, V = init_factors(n, m, k, seed)
    cells = _BoundCells(W, bounds)
    Xe, We = X.copy(), W.copy()
    if cells:
        Xe[cells.rows, cells.cols] = cells.c
    WX = We * Xe
    active = np.zeros(cells.rows.size, dtype=bool)
    toggles = 0

    trace = [_objective(X, W, U, V, cells)]
    converged = False
    it = 0
    for it in range(1, opts.max_iters + 1):
        if cells:
            on = (U @ V)[cells.rows, cells.cols] > cells.c
            toggles += int(np.count_nonzero(on & ~active))
            active = on
            We[cells.rows, cells.cols] = on
            WX = We * Xe
        U_new, V_new = _update(WX, We, U, V, opts.denom_guard, opts.lin_epsilon)
        cur, prev = _objective(X, W, U_new, V_new, cells), trace[-1]
        if cur > prev:
            # the updates never increase the objective in exact arithmetic; a rise
            # means round-off dominates, so keep the previous iterate and stop
            converged = True
            it -= 1
            break
        U, V = U_new, V_new
        trace.append(cur)
        if prev == 0.0 or prev - cur <= opts.rel_tol * prev:
            converged = True
            break
    return U, V, trace, converged, it, toggles


def fit(
    X,
    W,
    k: int,
    opts: FitOptions | None = None,
    *,
    seed: int = 0,
    row_labels: Sequence | None = None,
    col_labels: Sequence | None = None,
) -> FactorModel:
    """Best of ``opts.restarts`` seeded runs, ranked by final objective.

    Each run alternates the bound rule and one update step until the
    relative decrease of the objective drops below ``rel_tol`` or
    ``max_iters`` is reached.  A step that raises the objective (only
    possible through round-off once the fit is exact to working precision)
    is discarded and ends the run.  The recorded objective is the masked
    Frobenius norm plus the hinge penalty on bounded missing cells; with no
    bound active it equals :func:`masked_objective`.
    """
    opts = opts or FitOptions()
    X, W = _validate_inputs(X, W, k)
    k = int(k)
    if k > min(X.shape):
        warnings.warn(OverparameterizedWarning(f"k={k} exceeds min(n, m)={min(X.shape)}"), stacklevel=2)
    bounds = _resolve_bounds(opts.bounds, col_labels)
    seeds = restart_seeds(seed, opts.restarts)

    def one(s):
        return _run(X, W, k, opts, s, bounds)

    if opts.threads > 1 and opts.restarts > 1:
        with ThreadPoolExecutor(max_workers=min(opts.threads, opts.restarts)) as pool:
            runs = list(pool.map(one, seeds))
    else:
        runs = [one(s) for s in seeds]
    best = min(range(len(runs)), key=lambda r: runs[r][2][-1])
    U, V, trace, converged, iters, toggles = runs[best]
    return FactorModel(
        U=U, V=V, k=k, objective_trace=tuple(trace), seed=seed, converged=converged,
        iterations=iters, restart=best, toggle_events=toggles, options=opts,
        row_labels=list(row_labels) if row_labels is not None else None,
        col_labels=list(col_labels) if col_labels is not None else None,
    )


def normalize_clusters(model: FactorModel) -> tuple[FactorModel, DiagonalRescaling]:
    """Rescale so every non-zero row of V sums to one, compensating in U."""
    sums = model.V.sum(axis=1)
    degenerate = tuple(int(i) for i in np.flatnonzero(sums <= 0))
    s = np.where(sums > 0, sums, 1.0)
    V = model.V / s[:, None]
    U = model.U * s[None, :]
    return replace(model, U=U, V=V), DiagonalRescaling(scale=1.0 / s, degenerate=degenerate)


def is_normalized(model: FactorModel, atol: float = 1e-9) -> bool:
    sums = model.V.sum(axis=1)
    return bool(np.all((np.abs(sums - 1.0) <= atol) | (sums == 0)))


def select_k(
    X,
    W,
    k_max: int,
    tau: float = 0.01,
    opts: FitOptions | None = None,
    *,
    seed: int = 0,
    row_labels: Sequence | None = None,
    col_labels: Sequence | None = None,
) -> tuple[int, list[FactorModel]]:
    """Fit k = 1..k_max and pick the first k where adding a cluster stops paying.

    Returns the smallest k with ``(err(k) - err(k+1)) / err(1) < tau``.  When
    one cluster already leaves less than ``tau`` of the data norm
    unexplained, k = 1.
    """
    if k_max < 1:
        raise ValidationError("k_max must be >= 1")
    if not 0 < tau < 1:
        raise ValidationError("tau must lie in (0, 1)")
    X, W = _validate_inputs(X, W, 1)
    models = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OverparameterizedWarning)
        for k in range(1, k_max + 1):
            models.append(fit(X, W, k, opts, seed=seed, row_labels=row_labels, col_labels=col_labels))
    err = [m.final_objective for m in models]
    base = float(np.sqrt(np.sum((W * X) ** 2)))
    if err[0] <= tau * base:
        return 1, models
    for k in range(1, k_max):
        if (err[k - 1] - err[k]) / err[0] < tau:
            return k, models
    warnings.warn(KSelectionWarning(f"error decrease stayed above tau={tau} up to k_max={k_max}"), stacklevel=2)
    return k_max, models


def model_to_dict(model: FactorModel) -> dict:
    opts = asdict(model.options)
    opts["bounds"] = {str(key): c for key, c in model.options.bounds.items()}
    return {
        "k": model.k,
        "seed": model.seed,
        "options": opts,
        "row_labels": [list(r) for r in model.row_labels] if model.row_labels is not None else None,
        "col_labels": model.col_labels,
        "U": model.U.tolist(),
        "V": model.V.tolist(),
        "objective_trace": list(model.objective_trace),
        "converged": model.converged,
        "iterations": model.iterations,
        "restart": model.restart,
        "toggle_events": model.toggle_events,
    }


def model_from_dict(data: dict) -> FactorModel:
    try:
        opts = dict(data.get("options") or {})
        opts["bounds"] = {int(key): float(c) for key, c in (opts.get("bounds") or {}).items()}
        k = int(data["k"])
        U = np.array(data["U"], dtype=float).reshape(-1, k)
        V = np.array(data["V"], dtype=float).reshape(k, -1)
        rows = data.get("row_labels")
        return FactorModel(
            U=U, V=V, k=k,
            objective_trace=tuple(float(v) for v in data["objective_trace"]),
            seed=int(data["seed"]),
            converged=bool(data["converged"]),
            iterations=int(data.get("iterations", len(data["objective_trace"]) - 1)),
            restart=int(data.get("restart", 0)),
            toggle_events=int(data.get("toggle_events", 0)),
            options=FitOptions(**opts),
            row_labels=[(str(r[0]), int(r[1])) for r in rows] if rows is not None else None,
            col_labels=data.get("col_labels"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed model file: {exc}") from None


def save_model(model: FactorModel, stream: IO[str]) -> None:
    json.dump(model_to_dict(model), stream, indent=1)
    stream.write("\n")


def load_model(stream: IO[str]) -> FactorModel:
    return model_from_dict(json.load(stream))
