"""Core types of the Gaussian sparse coding (GSC) model and forward sampling.

The generative process for one observation is::

    s ~ Bernoulli(pi)        (H binary switches)
    z ~ N(0, I_H)            (Gaussian slab)
    y = W (s * z) + eps,     eps ~ N(0, Sigma)
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .rng import make_rng

PI_FLOOR = 1e-6
PRUNE_THRESHOLD = 1e-3
MAX_HIDDEN = 20


class GSCError(Exception):
    """Base class for errors raised by this package."""


class InputError(GSCError, ValueError):
    """Malformed user input (shapes, ranges, file contents)."""


class NumericalError(GSCError, ArithmeticError):
    """A matrix that must be positive definite is not, even after jitter."""


class StateCapError(InputError):
    """Exact inference over 2**H states was requested for too large an H."""


def check_hidden_cap(H, cap=MAX_HIDDEN):
    if H > cap:
        raise StateCapError(
            f"H={H} needs 2**{H} states; exact inference is capped at H<={cap} "
            "because its cost grows exponentially with H")


def clamp_pi(pi, floor=PI_FLOOR):
    return np.clip(np.asarray(pi, dtype=float), floor, 1.0 - floor)


def _frozen(a, ndim):
    a = np.array(a, dtype=float)
    if a.ndim != ndim:
        raise InputError(f"expected a {ndim}-d array, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelParams:
    """Parameters ``(W, Sigma, pi)`` of the GSC model.

    ``W`` is D x H with the basis functions as columns, ``Sigma`` the D x D
    noise covariance and ``pi`` the H activation probabilities. Arrays are
    copied and made read-only on construction. Shapes are checked here;
    value constraints are checked by :func:`validate_params`.
    """
    W: np.ndarray
    Sigma: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        W = _frozen(self.W, 2)
        Sigma = _frozen(self.Sigma, 2)
        pi = _frozen(self.pi, 1)
        D, H = W.shape
        if Sigma.shape != (D, D):
            raise InputError(f"Sigma must be {D}x{D}, got {Sigma.shape}")
        if pi.shape != (H,):
            raise InputError(f"pi must have length {H}, got {pi.shape}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "pi", pi)

    @property
    def D(self):
        return self.W.shape[0]

    @property
    def H(self):
        return self.W.shape[1]

    def replace(self, **changes):
        kw = dict(W=self.W, Sigma=self.Sigma, pi=self.pi)
        kw.update(changes)
        return ModelParams(**kw)

    def permuted(self, perm):
        """Reorder hidden units: new unit ``i`` is old unit ``perm[i]``."""
        perm = np.asarray(perm)
        return ModelParams(self.W[:, perm], self.Sigma, self.pi[perm])

    def pruned_dims(self, threshold=PRUNE_THRESHOLD):
        return [int(h) for h in np.flatnonzero(self.pi < threshold)]

    def to_dict(self):
        return {"W": self.W.tolist(), "Sigma": self.Sigma.tolist(),
                "pi": self.pi.tolist()}

    @classmethod
    def from_dict(cls, d):
        missing = {"W", "Sigma", "pi"} - set(d)
        if missing:
            raise InputError(f"parameter document lacks {sorted(missing)}")
        extra = set(d) - {"W", "Sigma", "pi"}
        if extra:
            raise InputError(f"unknown parameter keys {sorted(extra)}")
        W = np.array(d["W"], dtype=float)
        if W.ndim == 1:
            W = W[:, None]
        return cls(W, d["Sigma"], d["pi"])


@dataclass(frozen=True)
class ValidationReport:
    problems: tuple = ()

    @property
    def ok(self):
        return not self.problems

    def __bool__(self):
        return self.ok


def validate_params(params):
    """Check the value invariants of ``params``.

    Returns a :class:`ValidationReport` whose ``problems`` lists every
    violated invariant; an empty list means the parameters are usable.
    ``pi`` is accepted anywhere in the closed interval [0, 1]; exact 0 and 1
    are legal model configurations (e.g. the p-PCA case ``pi == 1``).
    """
    problems = []
    W, Sigma, pi = params.W, params.Sigma, params.pi
    for name, a in (("W", W), ("Sigma", Sigma), ("pi", pi)):
        if not np.all(np.isfinite(a)):
            problems.append(f"{name} has non-finite entries")
    if np.all(np.isfinite(Sigma)):
        scale = max(1.0, float(np.max(np.abs(Sigma))))
        if not np.allclose(Sigma, Sigma.T, rtol=0, atol=1e-10 * scale):
            problems.append("Sigma is not symmetric")
        else:
            try:
                np.linalg.cholesky(Sigma)
            except np.linalg.LinAlgError:
                problems.append("Sigma is not positive definite")
    if np.all(np.isfinite(pi)) and (np.any(pi < 0) or np.any(pi > 1)):
        problems.append("pi out of [0, 1]")
    return ValidationReport(tuple(problems))


def require_valid(params):
    report = validate_params(params)
    if not report:
        raise InputError("invalid parameters: " + "; ".join(report.problems))


@dataclass(frozen=True)
class BinaryState:
    """One binary support vector ``s``.

    The canonical integer encoding sets bit ``h`` of ``index`` to ``s_h``.
    """
    index: int
    H: int

    def __post_init__(self):
        if not 0 <= self.index < (1 << self.H):
            raise InputError(f"state index {self.index} out of range for H={self.H}")

    @classmethod
    def from_bits(cls, bits):
        bits = np.asarray(bits).astype(int)
        if np.any((bits != 0) & (bits != 1)):
            raise InputError("state bits must be 0 or 1")
        return cls(int(np.sum(bits << np.arange(len(bits)))), len(bits))

    @property
    def bits(self):
        return (self.index >> np.arange(self.H)) & 1

    @property
    def active_set(self):
        return [h for h in range(self.H) if (self.index >> h) & 1]

    @property
    def popcount(self):
        return bin(self.index).count("1")


def state_bits(H):
    """All 2**H states as a ``(2**H, H)`` 0/1 integer array in canonical order."""
    check_hidden_cap(H)
    idx = np.arange(1 << H)
    return ((idx[:, None] >> np.arange(H)[None, :]) & 1).astype(np.int8)


def enumerate_states(H):
    check_hidden_cap(H)
    return [BinaryState(i, H) for i in range(1 << H)]


def _log_bernoulli_terms(pi):
    pi = np.asarray(pi, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(pi), np.log1p(-pi)


def log_state_prior(s, pi):
    """Log Bernoulli probability of state ``s`` (BinaryState or 0/1 vector)."""
    bits = s.bits if isinstance(s, BinaryState) else np.asarray(s)
    log_on, log_off = _log_bernoulli_terms(pi)
    # select instead of multiply so that 0 * log(0) never appears
    return float(np.sum(np.where(bits == 1, log_on, log_off)))


def log_state_priors(bits, pi):
    """Vectorised :func:`log_state_prior` over rows of a state-bit array."""
    log_on, log_off = _log_bernoulli_terms(pi)
    return np.where(bits == 1, log_on[None, :], log_off[None, :]).sum(axis=1)


@dataclass(frozen=True)
class LatentSample:
    s: BinaryState
    z: np.ndarray
    x: np.ndarray


@dataclass
class Dataset:
    """Observations ``Y`` (N x D) with optional ground truth.

    ``S_true``/``Z_true`` are the generating binary and Gaussian latents,
    ``X_true`` the effective latents fed through the mixing matrix (for
    sparse-coding and mixing data ``X_true`` need not equal ``S*Z``).
    ``mixing`` is the ground-truth basis used to score separation.
    """
    Y: np.ndarray
    S_true: Optional[np.ndarray] = None
    Z_true: Optional[np.ndarray] = None
    X_true: Optional[np.ndarray] = None
    params_true: Optional[ModelParams] = None
    mixing: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.Y.ndim != 2 or self.Y.shape[0] < 1:
            raise InputError(f"Y must be a non-empty N x D matrix, got {self.Y.shape}")
        if not np.all(np.isfinite(self.Y)):
            raise InputError("Y has non-finite entries")
        N = self.Y.shape[0]
        for name in ("S_true", "Z_true", "X_true"):
            a = getattr(self, name)
            if a is None:
                continue
            a = np.asarray(a, dtype=float)
            if a.ndim != 2 or a.shape[0] != N:
                raise InputError(f"{name} must have {N} rows, got shape {a.shape}")
            setattr(self, name, a)
        if self.params_true is not None:
            for name in ("S_true", "Z_true"):
                a = getattr(self, name)
                if a is not None and a.shape[1] != self.params_true.H:
                    raise InputError(f"{name} has {a.shape[1]} columns, "
                                     f"params_true has H={self.params_true.H}")
        if self.mixing is None and self.params_true is not None:
            self.mixing = self.params_true.W
        if self.mixing is not None:
            self.mixing = np.asarray(self.mixing, dtype=float)

    @property
    def N(self):
        return self.Y.shape[0]

    @property
    def D(self):
        return self.Y.shape[1]

    def latent(self, n):
        if self.S_true is None or self.Z_true is None:
            raise InputError("dataset carries no ground-truth latents")
        s = self.S_true[n].astype(int)
        z = self.Z_true[n]
        return LatentSample(BinaryState.from_bits(s), z, s * z)


def sample_gsc(params, n, seed):
    """Draw ``n`` observations from the GSC model.

    Parameters
    ----------
    params : ModelParams
        Generating parameters; ``pi`` may contain exact 0 or 1.
    n : int
        Number of observations.
    seed : int
        Master seed; equal seeds give bit-identical datasets.

    Returns
    -------
    Dataset
        With ``S_true``, ``Z_true``, ``X_true = S*Z`` and ``params_true``.
    """
    require_valid(params)
    if n < 1:
        raise InputError("n must be >= 1")
    rng = make_rng(seed, "sample_gsc")
    D, H = params.W.shape
    S = (rng.random((n, H)) < params.pi[None, :]).astype(float)
    Z = rng.standard_normal((n, H))
    X = S * Z
    L = np.linalg.cholesky(params.Sigma)
    noise = rng.standard_normal((n, D)) @ L.T
    Y = X @ params.W.T + noise
    return Dataset(Y, S_true=S, Z_true=Z, X_true=X, params_true=params)


def random_gsc_params(D, H, seed, w_std=3.0, pi_range=(0.05, 1.0),
                      sigma_range=(0.05, 10.0)):
    """Random generating parameters in the style of the model-verification runs.

    ``W`` entries are N(0, w_std**2), ``pi_h`` uniform on ``pi_range`` and
    ``Sigma = sigma * I`` with ``sigma`` uniform on ``sigma_range``.
    """
    rng = make_rng(seed, "random_gsc_params")
    W = w_std * rng.standard_normal((D, H))
    pi = rng.uniform(*pi_range, size=H)
    sigma = rng.uniform(*sigma_range)
    return ModelParams(W, sigma * np.eye(D), pi)
