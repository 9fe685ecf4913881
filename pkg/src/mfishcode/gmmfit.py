"""Two-component Gaussian mixture fits for per-round log intensities.

Each column of a spot intensity table is fit independently with plain EM on
the log-transformed values. Initialization is a deterministic quantile split
(means at the 25th/75th percentiles, per-half standard deviations, equal
weights); optional random restarts keep the best final likelihood. QQ
diagnostics hard-assign points to their higher-responsibility component.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp, ndtri

from .channel import GaussianChannelParams, IntensityTable
from .errors import InputError

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class EmConfig:
    tol: float = 1e-8
    max_iter: int = 500
    sigma_floor: float = 1e-3
    restarts: int = 0
    seed: int = 0
    separation_floor: float = 0.1

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1 or self.sigma_floor <= 0:
            raise InputError("EM config needs tol > 0, max_iter >= 1, sigma_floor > 0")
        if self.restarts < 0:
            raise InputError("restarts must be non-negative")


@dataclass(frozen=True)
class ColumnFit:
    """Fitted mixture for one column, components labeled so mu1 > mu0 ("on" is
    brighter)."""

    w0: float
    w1: float
    mu0: float
    sigma0: float
    mu1: float
    sigma1: float
    log_likelihood: float
    n_iter: int
    converged: bool
    loglik_trace: tuple[float, ...]


@dataclass(frozen=True)
class QQComponent:
    component: int
    probs: np.ndarray
    theoretical: np.ndarray
    empirical: np.ndarray
    n_assigned: int


@dataclass(frozen=True)
class QQDiagnostics:
    components: tuple[QQComponent, ...]
    empty_components: tuple[int, ...]
    log_likelihood: float


@dataclass(frozen=True)
class FitAllResult:
    """Per-column fits plus bundle-level views.

    ``flags`` lists, per column, any of ``not_converged`` and
    ``low_separation`` (fitted means closer than the configured floor).
    """

    column_fits: tuple[ColumnFit, ...]
    flags: tuple[tuple[str, ...], ...]

    @property
    def on_weights(self) -> np.ndarray:
        return np.asarray([f.w1 for f in self.column_fits])

    @property
    def params(self) -> GaussianChannelParams:
        return GaussianChannelParams(
            mu0=np.asarray([f.mu0 for f in self.column_fits]),
            sigma0=np.asarray([f.sigma0 for f in self.column_fits]),
            mu1=np.asarray([f.mu1 for f in self.column_fits]),
            sigma1=np.asarray([f.sigma1 for f in self.column_fits]),
        )


def _component_loglik(y: np.ndarray, w, mu, sigma) -> np.ndarray:
    """(n, 2) array of log(w_k * N(y | mu_k, sigma_k^2))."""
    z = (y[:, None] - mu[None, :]) / sigma[None, :]
    return np.log(w)[None, :] - np.log(sigma)[None, :] - 0.5 * (z * z + _LOG_2PI)


def _em_run(y, w, mu, sigma, config: EmConfig):
    trace: list[float] = []
    prev = -np.inf
    converged = False
    n_iter = 0
    for n_iter in range(1, config.max_iter + 1):
        logp = _component_loglik(y, w, mu, sigma)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.sum())
        trace.append(ll)
        if abs(ll - prev) < config.tol * (1.0 + abs(ll)):
            converged = True
            break
        prev = ll
        resp = np.exp(logp - norm[:, None])
        counts = resp.sum(axis=0)
        counts = np.maximum(counts, 1e-12)
        w = counts / y.size
        mu = (resp * y[:, None]).sum(axis=0) / counts
        var = (resp * (y[:, None] - mu[None, :]) ** 2).sum(axis=0) / counts
        sigma = np.maximum(np.sqrt(var), config.sigma_floor)
    return w, mu, sigma, trace[-1], n_iter, converged, trace


def fit_em(column, config: EmConfig = EmConfig()) -> ColumnFit:
    """EM fit of a two-component Gaussian mixture to one intensity column.

    The column holds linear intensities; fitting happens on natural-log
    values. Non-convergence within ``max_iter`` is reported through the flag,
    not raised.
    """
    col = np.asarray(column, dtype=np.float64)
    if col.ndim != 1 or col.size < 10:
        raise InputError("need a 1-D column with at least 10 entries")
    if np.any(col <= 0.0):
        raise InputError("intensities must be strictly positive")
    y = np.log(col)

    q25, q50, q75 = np.percentile(y, [25.0, 50.0, 75.0])
    lower, upper = y[y <= q50], y[y > q50]
    inits = [(
        np.array([0.5, 0.5]),
        np.array([q25, q75]),
        np.maximum(
            np.array([lower.std() if lower.size else 1.0,
                      upper.std() if upper.size else 1.0]),
            config.sigma_floor,
        ),
    )]
    if config.restarts:
        rng = np.random.default_rng(config.seed)
        spread = max(float(y.std()), config.sigma_floor)
        for _ in range(config.restarts):
            mus = np.sort(rng.choice(y, size=2, replace=False))
            inits.append((np.array([0.5, 0.5]), mus, np.full(2, spread)))

    best = None
    for w, mu, sigma in inits:
        result = _em_run(y, w, mu, sigma, config)
        if best is None or result[3] > best[3]:
            best = result
    w, mu, sigma, ll, n_iter, converged, trace = best
    if mu[1] < mu[0]:
        w, mu, sigma = w[::-1], mu[::-1], sigma[::-1]
    return ColumnFit(
        w0=float(w[0]), w1=float(w[1]),
        mu0=float(mu[0]), sigma0=float(sigma[0]),
        mu1=float(mu[1]), sigma1=float(sigma[1]),
        log_likelihood=ll, n_iter=n_iter, converged=converged,
        loglik_trace=tuple(trace),
    )


def fit_all(
    table: IntensityTable, config: EmConfig = EmConfig(), n_threads: int = 1
) -> FitAllResult:
    """Independent EM fit of every column; results merge by column index."""
    columns = [table.intensities[:, l] for l in range(table.length)]
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            fits = list(pool.map(lambda c: fit_em(c, config), columns))
    else:
        fits = [fit_em(c, config) for c in columns]
    flags = []
    for fit in fits:
        here = []
        if not fit.converged:
            here.append("not_converged")
        if fit.mu1 - fit.mu0 < config.separation_floor:
            here.append("low_separation")
        flags.append(tuple(here))
    return FitAllResult(column_fits=tuple(fits), flags=tuple(flags))


def qq_data(column, fit: ColumnFit, grid_size: int = 99) -> QQDiagnostics:
    """Per-component QQ pairs after hard assignment by responsibility.

    Empirical quantiles interpolate the order statistics at Hazen plotting
    positions (j - 0.5)/m on a matching uniform grid of ``grid_size`` points,
    so data drawn exactly at the component quantiles land on the diagonal.
    Components left empty by the assignment are flagged and omitted.
    """
    if grid_size < 1:
        raise InputError("grid_size must be positive")
    col = np.asarray(column, dtype=np.float64)
    if np.any(col <= 0.0):
        raise InputError("intensities must be strictly positive")
    y = np.log(col)
    w = np.array([fit.w0, fit.w1])
    mu = np.array([fit.mu0, fit.mu1])
    sigma = np.array([fit.sigma0, fit.sigma1])
    logp = _component_loglik(y, w, mu, sigma)
    assign = (logp[:, 1] > logp[:, 0]).astype(np.int8)
    grid = (np.arange(grid_size) + 0.5) / grid_size
    components = []
    empty = []
    for k in (0, 1):
        points = np.sort(y[assign == k])
        if points.size == 0:
            empty.append(k)
            continue
        positions = (np.arange(points.size) + 0.5) / points.size
        empirical = np.interp(grid, positions, points)
        theoretical = mu[k] + sigma[k] * ndtri(grid)
        components.append(
            QQComponent(
                component=k,
                probs=grid.copy(),
                theoretical=theoretical,
                empirical=empirical,
                n_assigned=int(points.size),
            )
        )
    return QQDiagnostics(
        components=tuple(components),
        empty_components=tuple(empty),
        log_likelihood=fit.log_likelihood,
    )


def save_diagnostics_csv(path, diagnostics: list[QQDiagnostics]) -> None:
    """Write ``column,component,p,theoretical_q,empirical_q`` rows."""
    with open(path, "w", newline="") as fh:
        fh.write("column,component,p,theoretical_q,empirical_q\n")
        for col, diag in enumerate(diagnostics):
            for comp in diag.components:
                for p, t, e in zip(comp.probs, comp.theoretical, comp.empirical):
                    fh.write(
                        f"{col},{comp.component},{float(p)!r},{float(t)!r},{float(e)!r}\n"
                    )
