"""Loss surface L(N, S) of sparsely-activated models, its robust fit, and optimal sparsity.

    L(N, S) = E + A(S) / N**alpha,   A(S) = B + C * exp(beta / (1 - S))

Activated parameters are N_a = N * (1 - S).
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import lbfgs

PARAM_NAMES = ("e_irreducible", "b_sparse", "c_dense", "alpha", "beta")
DEFAULT_DELTA = 1e-3

INIT_GRID = {
    "e_irreducible": (1.0, 2.0, 3.0),
    "b_sparse": (0.001, 0.01, 0.1),
    "c_dense": (0.5, 1.5, 3.0),
    "alpha": (0.05, 0.1, 0.2),
    "beta": (0.01, 0.05, 0.1),
}


class ScalingDomainError(ValueError):
    pass


class FitError(RuntimeError):
    def __init__(self, message: str, diagnostics: Optional[list] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


@dataclass(frozen=True)
class ScalingObservation:
    n_params: float
    sparsity: float
    loss: float

    def __post_init__(self):
        if not self.n_params > 0:
            raise ValueError(f"n_params must be positive, got {self.n_params}")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError(f"sparsity must be in [0, 1), got {self.sparsity}")
        if not self.loss > 0:
            raise ValueError(f"loss must be positive, got {self.loss}")


@dataclass(frozen=True)
class ScalingLawParams:
    e_irreducible: float
    b_sparse: float
    c_dense: float
    alpha: float
    beta: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES])

    @classmethod
    def from_array(cls, values) -> "ScalingLawParams":
        return cls(*(float(v) for v in values))

    def to_dict(self) -> dict:
        return asdict(self)


# full-precision constants as reported (two significant figures)
REPORTED_FULL_PRECISION = ScalingLawParams(1.86, 0.01, 1.89, 0.10, 0.05)


def _check_s(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if np.any(s >= 1.0) or np.any(s < 0.0):
        raise ScalingDomainError("sparsity must lie in [0, 1)")
    return s


def sparsity_factor(params: ScalingLawParams, s) -> np.ndarray:
    """A(S) = B + C exp(beta / (1 - S))."""
    s = _check_s(s)
    if params.c_dense == 0.0:
        # keeps 0 * inf out of the near-1 end of the range
        return params.b_sparse + np.zeros_like(s)
    with np.errstate(over="ignore"):
        return params.b_sparse + params.c_dense * np.exp(params.beta / (1.0 - s))


def predict_loss(params: ScalingLawParams, n, s):
    n = np.asarray(n, dtype=np.float64)
    if np.any(n <= 0):
        raise ScalingDomainError("n must be positive")
    out = params.e_irreducible + sparsity_factor(params, s) / n**params.alpha
    return float(out) if out.ndim == 0 else out


def predict_loss_inference(params: ScalingLawParams, n_activated, s):
    """Loss at a fixed activated-parameter budget: E + A(S) ((1 - S) / N_a)**alpha."""
    n_activated = np.asarray(n_activated, dtype=np.float64)
    if np.any(n_activated <= 0):
        raise ScalingDomainError("n_activated must be positive")
    s = _check_s(s)
    out = params.e_irreducible + sparsity_factor(params, s) * ((1.0 - s) / n_activated) ** params.alpha
    return float(out) if out.ndim == 0 else out


def gap_expanded(params: ScalingLawParams, n, s):
    """L(N, S) - L(N, 0) as the difference of the two scaling terms."""
    n = np.asarray(n, dtype=np.float64)
    return sparsity_factor(params, s) / n**params.alpha - sparsity_factor(params, 0.0) / n**params.alpha


def gap(params: ScalingLawParams, n, s):
    """L(N, S) - L(N, 0) in factored form: A(0)/N^alpha * (A(S)/A(0) - 1)."""
    n = np.asarray(n, dtype=np.float64)
    a0 = sparsity_factor(params, 0.0)
    out = a0 / n**params.alpha * (sparsity_factor(params, s) / a0 - 1.0)
    return float(out) if np.ndim(out) == 0 else out


# fitting


def huber(r, delta: float):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def huber_grad(r, delta: float):
    return np.clip(r, -delta, delta)


def _objective_factory(n, s, loss, delta: float, robust: bool):
    log_n = np.log(n)
    u = 1.0 / (1.0 - s)
    log_l = np.log(loss)

    def objective(theta: np.ndarray) -> tuple[float, np.ndarray]:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return _evaluate(theta)

    def _evaluate(theta: np.ndarray) -> tuple[float, np.ndarray]:
        e, b, c, alpha, beta = np.exp(theta)
        ebu = np.exp(beta * u)
        npow = np.exp(-alpha * log_n)
        a = b + c * ebu
        pred = e + a * npow
        if np.any(pred <= 0) or not np.all(np.isfinite(pred)):
            return float("inf"), np.full_like(theta, np.nan)
        r = np.log(pred) - log_l
        if robust:
            value = float(huber(r, delta).sum())
            dr = huber_grad(r, delta)
        else:
            value = float(0.5 * (r * r).sum())
            dr = r
        w = dr / pred
        # d pred / d param, then chain through param = exp(theta)
        grad = np.array(
            [
                w.sum() * e,
                (w * npow).sum() * b,
                (w * ebu * npow).sum() * c,
                (w * -a * npow * log_n).sum() * alpha,
                (w * c * u * ebu * npow).sum() * beta,
            ]
        )
        return value, grad

    return objective


@dataclass
class StartResult:
    index: int
    init: dict
    objective: float
    iterations: int
    converged: bool
    message: str
    params: Optional[dict]


@dataclass
class FitResult:
    params: ScalingLawParams
    objective: float
    start_index: int
    starts: list[StartResult] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            **self.params.to_dict(),
            "objective": self.objective,
            "best_start": self.start_index,
            "starts": [asdict(s) for s in self.starts],
        }


def init_grid() -> list[dict]:
    keys = list(INIT_GRID)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(INIT_GRID[k] for k in keys))]


def fit(
    observations: Sequence[ScalingObservation],
    delta: float = DEFAULT_DELTA,
    robust: bool = True,
    grid: Optional[Iterable[dict]] = None,
    max_iter: int = 500,
    gtol: float = 1e-9,
) -> FitResult:
    """Huber fit of log loss over a grid of L-BFGS starts; lowest objective wins.

    ``robust=False`` swaps the Huber penalty for plain least squares.
    Ties on the objective go to the lowest start index.
    """
    obs = list(observations)
    if len(obs) < 5:
        raise FitError(f"need at least 5 observations, got {len(obs)}")
    n = np.array([o.n_params for o in obs], dtype=np.float64)
    s = np.array([o.sparsity for o in obs], dtype=np.float64)
    loss = np.array([o.loss for o in obs], dtype=np.float64)
    if len(np.unique(n)) < 2 or len(np.unique(s)) < 2:
        raise FitError("observations must span at least 2 distinct N and 2 distinct S")

    objective = _objective_factory(n, s, loss, delta, robust)
    starts = []
    best: Optional[tuple[float, int, np.ndarray]] = None
    for index, init in enumerate(grid if grid is not None else init_grid()):
        theta0 = np.log([init[k] for k in PARAM_NAMES])
        res = lbfgs.minimize(objective, theta0, memory=10, max_iter=max_iter, gtol=gtol)
        ok = bool(np.isfinite(res.fun))
        starts.append(
            StartResult(
                index=index,
                init=dict(init),
                objective=float(res.fun),
                iterations=res.iterations,
                converged=res.converged,
                message=res.message,
                params=ScalingLawParams.from_array(np.exp(res.x)).to_dict() if ok else None,
            )
        )
        if ok and (best is None or res.fun < best[0]):
            best = (float(res.fun), index, res.x)
    if best is None:
        raise FitError("no start produced a finite objective", starts)
    value, index, theta = best
    return FitResult(ScalingLawParams.from_array(np.exp(theta)), value, index, starts)


# inference-optimal sparsity


@dataclass
class OptimalSparsityResult:
    s_star: float
    loss_factor: float  # A(S*) (1 - S*)**alpha, the N_a-independent part of the loss
    n_params_ratio: float
    boundary: bool = False

    def loss_at(self, params: ScalingLawParams, n_activated: float) -> float:
        return predict_loss_inference(params, n_activated, self.s_star)

    def to_json(self, params: Optional[ScalingLawParams] = None, n_activated: float = 1e9) -> dict:
        d = asdict(self)
        if params is not None:
            d["n_activated"] = n_activated
            d["loss_at_optimum"] = self.loss_at(params, n_activated)
        return d


def inference_objective(params: ScalingLawParams, s):
    """A(S) (1 - S)**alpha; its minimiser is independent of N_a."""
    s = _check_s(s)
    return sparsity_factor(params, s) * (1.0 - s) ** params.alpha


S_UPPER = 1.0 - 1e-6
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(f, lo: float, hi: float, tol: float = 1e-12, max_iter: int = 500) -> float:
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def solve_optimal_sparsity(params: ScalingLawParams, scan_points: int = 2001) -> OptimalSparsityResult:
    """Minimise A(S)(1-S)^alpha over S in [0, 1).

    A coarse scan brackets the minimum, golden-section search refines it.
    A minimiser at either end of the range is reported with ``boundary=True``.
    """
    f = lambda x: float(inference_objective(params, x))  # noqa: E731
    grid = np.linspace(0.0, S_UPPER, scan_points)
    values = inference_objective(params, grid)
    i = int(np.argmin(values))
    if i == 0 or i == len(grid) - 1:
        s_star = float(grid[i])
        return OptimalSparsityResult(s_star, float(values[i]), 1.0 / (1.0 - s_star), boundary=True)
    s_star = golden_section(f, float(grid[i - 1]), float(grid[i + 1]))
    return OptimalSparsityResult(s_star, f(s_star), 1.0 / (1.0 - s_star))


def grid_scan_optimum(params: ScalingLawParams, step: float = 1e-4) -> float:
    grid = np.arange(step, 1.0 - step / 2, step)
    return float(grid[int(np.argmin(inference_objective(params, grid)))])


# curves


def emit_curves(
    params: ScalingLawParams,
    axis: str,
    fixed: Sequence[float] = (),
    xs: Optional[Sequence[float]] = None,
) -> list[tuple[str, float, float]]:
    """Rows of (series, x, predicted loss).

    ``axis='n'``: loss vs N for each fixed S in ``fixed``.
    ``axis='s'``: loss vs S for each fixed N in ``fixed``.
    ``axis='optimal'``: loss vs N_a for each fixed S plus the optimal-S series.
    """
    rows: list[tuple[str, float, float]] = []
    if axis == "n":
        xs = np.logspace(8, 11, 31) if xs is None else np.asarray(xs, dtype=float)
        for s in fixed or (0.0, 0.4, 0.6, 0.8):
            for x in xs:
                rows.append((f"S={s:g}", float(x), predict_loss(params, x, s)))
    elif axis == "s":
        xs = np.linspace(0.0, 0.9, 46) if xs is None else np.asarray(xs, dtype=float)
        for n in fixed or (3e8, 7e8, 1.3e9, 7e9):
            for x in xs:
                rows.append((f"N={n:g}", float(x), predict_loss(params, n, x)))
    elif axis == "optimal":
        xs = np.logspace(8, 11, 31) if xs is None else np.asarray(xs, dtype=float)
        opt = solve_optimal_sparsity(params)
        for s in fixed or (0.0, 0.4, 0.6, 0.8):
            for x in xs:
                rows.append((f"S={s:g}", float(x), predict_loss_inference(params, x, s)))
        for x in xs:
            rows.append(("optimal", float(x), predict_loss_inference(params, x, opt.s_star)))
    else:
        raise ValueError(f"unknown axis {axis!r}")
    return rows


def write_curve_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "x", "loss"])
        for series, x, y in rows:
            w.writerow([series, repr(x), repr(y)])


class ObservationFileError(ValueError):
    pass


def read_observations(path) -> list[ScalingObservation]:
    """CSV with header ``n_params,sparsity,loss``; errors name the offending line."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["n_params", "sparsity", "loss"]:
            raise ObservationFileError(f"{path}:1: header must be n_params,sparsity,loss")
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) != 3:
                    raise ValueError(f"expected 3 fields, got {len(row)}")
                out.append(ScalingObservation(*(float(c) for c in row)))
            except ValueError as exc:
                raise ObservationFileError(f"{path}:{line_no}: {exc}") from exc
    return out


def write_observations(path, observations: Iterable[ScalingObservation]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_params", "sparsity", "loss"])
        for o in observations:
            w.writerow([repr(o.n_params), repr(o.sparsity), repr(o.loss)])


def synthetic_observations(
    params: ScalingLawParams,
    n_values: Sequence[float] = (3e8, 7e8, 1.3e9, 7e9),
    s_values: Sequence[float] = (0.0, 0.4, 0.6, 0.8),
) -> list[ScalingObservation]:
    return [
        ScalingObservation(float(n), float(s), predict_loss(params, n, s))
        for n in n_values
        for s in s_values
    ]
