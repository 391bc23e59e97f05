"""Closed-form EM for the GSC model.

One iteration computes exact posterior moments for all data points (see
:mod:`gscem.inference`), reduces them to :class:`SufficientStats`, and applies
the M-step updates for ``W``, then ``Sigma`` (using the new ``W``), then
``pi``.
"""
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import linalg

from .inference import StateContexts, accumulate, cholesky_jitter, LOG_2PI
from .model import (Dataset, InputError, ModelParams, NumericalError,
                    PI_FLOOR, PRUNE_THRESHOLD, check_hidden_cap, clamp_pi)
from .rng import derive_seed, make_rng

DEGENERATE_EIG_RATIO = 1e-12


@dataclass(frozen=True)
class SufficientStats:
    """Dataset-level sums of posterior moments under the current parameters."""
    sum_y_xT: np.ndarray
    sum_xxT: np.ndarray
    sum_s: np.ndarray
    sum_yyT: np.ndarray
    n_points: int
    total_log_lik: float


def e_step(params, Y):
    """Exact E-step. Returns :class:`SufficientStats` for data ``Y``."""
    contexts = params if isinstance(params, StateContexts) else StateContexts(params)
    return SufficientStats(**accumulate(contexts, Y))


def mstep_W(stats, W_old=None):
    """Update the basis ``W = sum_y_xT @ inv(sum_xxT)``.

    Returns ``(W, degenerate)`` where ``degenerate`` lists hidden dimensions
    whose second moment vanished (eigenvalue below ``1e-12`` of the largest).
    Those dimensions are solved by a thresholded pseudo-inverse; their columns
    carry no information and are kept from ``W_old`` when it is given.
    """
    A, B = stats.sum_xxT, stats.sum_y_xT
    H = A.shape[0]
    evals, evecs = np.linalg.eigh(A)
    top = max(evals[-1], 0.0)
    if top > 0 and evals[0] >= DEGENERATE_EIG_RATIO * top:
        try:
            return linalg.solve(A, B.T, assume_a="pos").T, []
        except (linalg.LinAlgError, ValueError):
            pass
    keep = evals > DEGENERATE_EIG_RATIO * top
    inv = (evecs[:, keep] / evals[keep]) @ evecs[:, keep].T
    W = B @ inv
    diag = np.diag(A)
    degenerate = [int(h) for h in range(H)
                  if diag[h] <= DEGENERATE_EIG_RATIO * max(top, 1e-300)]
    if not degenerate:
        # rank deficiency spread across dims: report the null-space support
        null = evecs[:, ~keep]
        degenerate = [int(h) for h in np.flatnonzero(np.abs(null).max(axis=1) > 1e-6)]
    if W_old is not None and degenerate:
        W[:, degenerate] = np.asarray(W_old)[:, degenerate]
    return W, degenerate


def residual_scatter(stats, W):
    """``sum_n <(y - W x)(y - W x)^T>`` for fixed statistics."""
    cross = W @ stats.sum_y_xT.T
    R = stats.sum_yyT - cross - cross.T + W @ stats.sum_xxT @ W.T
    return 0.5 * (R + R.T)


def mstep_Sigma(stats, W, isotropic=False):
    """Noise covariance update using the freshly updated ``W``.

    With ``isotropic=True`` the full update is replaced by
    ``trace(Sigma) / D * I``. A non-positive-definite result gets one
    diagonal jitter of ``max(1e-9 * trace / D, 1e-12 * data variance)``;
    if that fails a :class:`NumericalError` is raised.
    """
    D = W.shape[0]
    Sigma = residual_scatter(stats, W) / stats.n_points
    if isotropic:
        Sigma = np.trace(Sigma) / D * np.eye(D)
    try:
        np.linalg.cholesky(Sigma)
        return Sigma
    except np.linalg.LinAlgError:
        pass
    data_var = np.trace(stats.sum_yyT) / (stats.n_points * D)
    eps = max(1e-9 * abs(np.trace(Sigma)) / D, 1e-12 * data_var, 1e-300)
    if isotropic:
        Sigma = max(np.trace(Sigma) / D, 0.0) * np.eye(D)
    Sigma = Sigma + eps * np.eye(D)
    try:
        np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        raise NumericalError("Sigma update is not positive definite") from None
    return Sigma


def mstep_pi(stats, clamp=True):
    pi = stats.sum_s / stats.n_points
    return clamp_pi(pi) if clamp else pi


def expected_complete_loglik(params, stats):
    """M-step objective ``Q(params)`` for fixed statistics.

    Terms constant in the parameters (the Gaussian prior on ``z`` and the
    posterior entropy) are omitted.
    """
    W, Sigma, pi = params.W, params.Sigma, params.pi
    N, D = stats.n_points, W.shape[0]
    L = np.linalg.cholesky(Sigma)
    log_det = 2.0 * np.sum(np.log(np.diag(L)))
    R = residual_scatter(stats, W)
    trace_term = np.trace(linalg.cho_solve((L, True), R))
    q_noise = -0.5 * (N * D * LOG_2PI + N * log_det + trace_term)
    q_prior = np.sum(stats.sum_s * np.log(pi) + (N - stats.sum_s) * np.log1p(-pi))
    return float(q_noise + q_prior)


def init_params(dataset, seed, n_hidden=None):
    """Random starting point for EM.

    ``W`` entries are standard normal, ``Sigma`` is the mean-subtracted
    sample covariance of the data and ``pi_h`` is uniform on [0.05, 0.95].
    """
    Y = dataset.Y if isinstance(dataset, Dataset) else np.asarray(dataset, dtype=float)
    N, D = Y.shape
    if N < 2:
        raise InputError("need at least 2 data points to initialise Sigma")
    H = D if n_hidden is None else int(n_hidden)
    rng = make_rng(seed, "init_params")
    W = rng.standard_normal((D, H))
    pi = rng.uniform(0.05, 0.95, size=H)
    C = np.atleast_2d(np.cov(Y, rowvar=False))
    C = 0.5 * (C + C.T)
    L = cholesky_jitter(C, "sample covariance")
    return ModelParams(W, L @ L.T, pi)


@dataclass(frozen=True)
class FitOptions:
    """Settings of one EM run.

    ``n_hidden`` defaults to the data dimension. ``update_pi=False`` freezes
    ``pi`` at its initial value (e.g. ``pi == 1`` for p-PCA).
    """
    max_iters: int = 300
    rel_tol: float = 1e-8
    isotropic_sigma: bool = False
    seed: int = 0
    record_trace: bool = True
    n_hidden: Optional[int] = None
    update_pi: bool = True

    def __post_init__(self):
        if self.max_iters < 1:
            raise InputError("max_iters must be >= 1")
        if self.rel_tol < 0:
            raise InputError("rel_tol must be >= 0")

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class FitResult:
    params: Optional[ModelParams]
    log_lik_trace: np.ndarray
    iterations_run: int
    converged: bool
    seed: int
    ortho_deviation_deg: float = float("nan")
    pruned_dims: list = field(default_factory=list)
    degenerate_dims: list = field(default_factory=list)
    restart: int = 0
    error: Optional[str] = None

    @property
    def ok(self):
        return self.error is None

    @property
    def final_log_lik(self):
        if self.error is not None or len(self.log_lik_trace) == 0:
            return -np.inf
        return float(self.log_lik_trace[-1])

    def to_dict(self):
        return {
            "params": None if self.params is None else self.params.to_dict(),
            "log_lik_trace": [float(v) for v in self.log_lik_trace],
            "iterations_run": int(self.iterations_run),
            "converged": bool(self.converged),
            "seed": int(self.seed),
            "restart": int(self.restart),
            "ortho_deviation_deg": _json_float(self.ortho_deviation_deg),
            "pruned_dims": [int(h) for h in self.pruned_dims],
            "degenerate_dims": [int(h) for h in self.degenerate_dims],
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d):
        params = None if d.get("params") is None else ModelParams.from_dict(d["params"])
        dev = d.get("ortho_deviation_deg")
        return cls(params=params,
                   log_lik_trace=np.asarray(d["log_lik_trace"], dtype=float),
                   iterations_run=int(d["iterations_run"]),
                   converged=bool(d["converged"]), seed=int(d["seed"]),
                   ortho_deviation_deg=float("nan") if dev is None else float(dev),
                   pruned_dims=list(d.get("pruned_dims", [])),
                   degenerate_dims=list(d.get("degenerate_dims", [])),
                   restart=int(d.get("restart", 0)), error=d.get("error"))


def _json_float(x):
    x = float(x)
    return x if np.isfinite(x) else None


class FitAborted(NumericalError):
    """A fit hit a hard numerical error; ``result`` holds the partial trace."""

    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


def _finish(params, trace, iters, converged, seed, degenerate, error=None):
    from .metrics import safe_ortho_deviation
    return FitResult(
        params=params, log_lik_trace=np.asarray(trace, dtype=float),
        iterations_run=iters, converged=converged, seed=seed,
        ortho_deviation_deg=(float("nan") if params is None
                             else safe_ortho_deviation(params.W)),
        pruned_dims=[] if params is None else params.pruned_dims(PRUNE_THRESHOLD),
        degenerate_dims=sorted(degenerate), error=error)


def fit(dataset, options=FitOptions(), init=None):
    """Run EM on ``dataset``.

    Parameters
    ----------
    dataset : Dataset or array_like
        Observations, N x D.
    options : FitOptions
    init : ModelParams, optional
        Starting parameters; drawn by :func:`init_params` from
        ``options.seed`` when omitted. With ``options.isotropic_sigma`` the
        starting ``Sigma`` is replaced by ``trace(Sigma) / D * I``.

    Returns
    -------
    FitResult
        ``log_lik_trace[0]`` is the log-likelihood of the initial parameters
        and each further entry follows one E/M cycle.

    Raises
    ------
    FitAborted
        On a hard numerical failure, carrying the partial result.
    """
    Y = dataset.Y if isinstance(dataset, Dataset) else Dataset(dataset).Y
    params = init if init is not None else init_params(Y, options.seed, options.n_hidden)
    if params.D != Y.shape[1]:
        raise InputError(f"parameters have D={params.D}, data has D={Y.shape[1]}")
    check_hidden_cap(params.H)
    if options.isotropic_sigma:
        # start inside the isotropic family so the trace is monotone from t=0
        params = params.replace(Sigma=np.trace(params.Sigma) / params.D * np.eye(params.D))

    trace = []
    degenerate = set()
    converged = False
    iters = 0
    try:
        stats = e_step(params, Y)
        trace.append(stats.total_log_lik)
        for iters in range(1, options.max_iters + 1):
            W, degen = mstep_W(stats, params.W)
            degenerate.update(degen)
            Sigma = mstep_Sigma(stats, W, options.isotropic_sigma)
            pi = mstep_pi(stats) if options.update_pi else params.pi
            params = ModelParams(W, Sigma, pi)
            stats = e_step(params, Y)
            prev, cur = trace[-1], stats.total_log_lik
            trace.append(cur)
            if abs(cur - prev) <= options.rel_tol * abs(prev):
                converged = True
                break
    except NumericalError as exc:
        partial = _finish(params, trace, iters, False, options.seed, degenerate, str(exc))
        raise FitAborted(str(exc), partial) from exc
    if not options.record_trace:
        trace = trace[-1:]
    return _finish(params, trace, iters, converged, options.seed, degenerate)


def _fit_restart(args):
    Y, options, restart = args
    try:
        result = fit(Y, options)
    except FitAborted as exc:
        result = exc.result
    result.restart = restart
    return result


def restart_seed(master_seed, restart):
    return derive_seed(master_seed, "restart", restart)


def multi_restart(dataset, options, restarts, n_jobs=1):
    """Independent EM runs from random initialisations.

    Run ``i`` uses the seed ``restart_seed(options.seed, i)``. Results are
    sorted by final log-likelihood (descending, ties by restart index);
    failed runs carry ``error`` and sort last. Raises
    :class:`NumericalError` only if every run failed.
    """
    if restarts < 1:
        raise InputError("restarts must be >= 1")
    Y = dataset.Y if isinstance(dataset, Dataset) else Dataset(dataset).Y
    jobs = [(Y, options.replace(seed=restart_seed(options.seed, i)), i)
            for i in range(restarts)]
    n_jobs = min(int(n_jobs or 1), restarts)
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_fit_restart, jobs))
    else:
        results = [_fit_restart(job) for job in jobs]
    if all(not r.ok for r in results):
        raise NumericalError("all restarts failed: " + results[0].error)
    return sorted(results, key=lambda r: (-r.final_log_lik, r.restart))


def default_jobs():
    """Worker cap from the ``GSC_THREADS`` environment variable (default 1)."""
    try:
        return max(1, int(os.environ.get("GSC_THREADS", "1")))
    except ValueError:
        return 1
