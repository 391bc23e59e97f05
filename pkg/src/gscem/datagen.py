"""Synthetic data for the sparse-direction and source-separation experiments."""
import csv
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .model import Dataset, InputError
from .rng import make_rng

PRIORS = ("cauchy", "laplace")
TARGET_SNR = 10.0


class ParseError(InputError):
    def __init__(self, message, row=None, col=None):
        loc = ""
        if row is not None:
            loc = f" at row {row}" + (f", column {col}" if col is not None else "")
        super().__init__(message + loc)
        self.row, self.col = row, col


def default_noise_sigma(prior, W_gen):
    """Noise std at a nominal amplitude SNR of 10 per observed dimension.

    The nominal signal std of dimension ``d`` is ``sqrt(c * sum_h W_dh**2)``
    averaged over ``d``, with ``c = 2`` (Laplace variance) or ``c = 1``
    (squared Cauchy scale; Cauchy has no variance).
    """
    W_gen = np.atleast_2d(W_gen)
    power = (2.0 if prior == "laplace" else 1.0) * np.sum(W_gen ** 2) / W_gen.shape[0]
    return float(np.sqrt(power) / TARGET_SNR)


def sample_sc(prior, W_gen, noise_sigma, n, seed):
    """Sparse-coding data ``y = W_gen x + eps`` with heavy-tailed sources.

    ``x_h`` are i.i.d. standard Cauchy or standard Laplace (location 0,
    scale 1), ``eps ~ N(0, noise_sigma**2 I)``.
    """
    if prior not in PRIORS:
        raise InputError(f"unknown prior {prior!r}; expected one of {PRIORS}")
    if noise_sigma is None:
        noise_sigma = default_noise_sigma(prior, W_gen)
    if not noise_sigma > 0:
        raise InputError("noise_sigma must be > 0")
    if n < 1:
        raise InputError("n must be >= 1")
    W_gen = np.atleast_2d(np.asarray(W_gen, dtype=float))
    D, H = W_gen.shape
    rng = make_rng(seed, "sample_sc", prior)
    if prior == "cauchy":
        X = rng.standard_cauchy((n, H))
    else:
        X = rng.laplace(0.0, 1.0, (n, H))
    Y = X @ W_gen.T + noise_sigma * rng.standard_normal((n, D))
    return Dataset(Y, X_true=X, mixing=W_gen,
                   meta={"prior": prior, "noise_sigma": float(noise_sigma)})


@dataclass(frozen=True)
class MixSpec:
    A: np.ndarray
    seed: int


def random_orthogonal(dim, seed):
    """Haar-distributed orthogonal matrix via QR with ``diag(R) > 0``."""
    if dim < 1:
        raise InputError("dim must be >= 1")
    rng = make_rng(seed, "random_orthogonal")
    Q, R = np.linalg.qr(rng.standard_normal((dim, dim)))
    Q = Q * np.sign(np.diag(R))[None, :]
    return MixSpec(Q, seed)


@dataclass(frozen=True)
class SourceMatrix:
    S: np.ndarray
    provenance: str = ""

    @property
    def N(self):
        return self.S.shape[0]

    @property
    def H(self):
        return self.S.shape[1]

    def summary(self):
        return {"N": self.N, "H": self.H, "mean": self.S.mean(axis=0).tolist(),
                "std": self.S.std(axis=0).tolist(), "provenance": self.provenance}

    def standardized(self):
        S = self.S - self.S.mean(axis=0)
        std = S.std(axis=0)
        if np.any(std == 0):
            raise InputError("cannot standardise a constant source")
        return SourceMatrix(S / std, self.provenance + " (standardized)")


def mix_sources(sources, mix, n_points, offset=0):
    """Mix a contiguous window of sources: row ``n`` of ``Y`` is ``A @ s_n``."""
    S = sources.S if isinstance(sources, SourceMatrix) else np.asarray(sources, dtype=float)
    A = mix.A if isinstance(mix, MixSpec) else np.asarray(mix, dtype=float)
    if A.shape != (S.shape[1], S.shape[1]):
        raise InputError(f"mixing matrix {A.shape} does not match {S.shape[1]} sources")
    if offset < 0 or n_points < 1 or offset + n_points > S.shape[0]:
        raise InputError(f"window [{offset}, {offset + n_points}) outside "
                         f"{S.shape[0]} source samples")
    window = S[offset:offset + n_points]
    return Dataset(window @ A.T, X_true=window, mixing=A,
                   meta={"offset": int(offset), "n_points": int(n_points)})


def load_sources_csv(path, standardize=False, header=False):
    """Read a rectangular numeric CSV (rows = samples, columns = sources)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for r, row in enumerate(reader, start=1):
            if header and r == 1:
                continue
            if not row or all(c.strip() == "" for c in row):
                continue
            vals = []
            for c, cell in enumerate(row, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"non-numeric cell {cell!r}", r, c) from None
            if rows and len(vals) != len(rows[0]):
                raise ParseError(f"expected {len(rows[0])} columns, got {len(vals)}", r)
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: empty file")
    S = np.array(rows)
    if not np.all(np.isfinite(S)):
        raise ParseError(f"{path}: non-finite values")
    src = SourceMatrix(S, str(path))
    return src.standardized() if standardize else src


def speechlike_sources(n, n_sources=4, seed=0):
    """Super-Gaussian sources: Laplace innovations under slow random envelopes.

    Each column is ``e_t * g_t`` with ``e_t`` standard Laplace and ``g_t`` the
    exponential of a smoothed Gaussian walk (syllable-like bursts), then
    standardised.
    """
    rng = make_rng(seed, "speechlike")
    e = rng.laplace(0.0, 1.0, (n, n_sources))
    kernel = np.hanning(41)
    kernel /= kernel.sum()
    g = np.empty((n, n_sources))
    for h in range(n_sources):
        walk = np.convolve(rng.standard_normal(n + 40), kernel, mode="valid")[:n]
        g[:, h] = np.exp(0.7 * walk / walk.std())
    S = e * g
    S = (S - S.mean(axis=0)) / S.std(axis=0)
    return SourceMatrix(S, f"speechlike(n={n}, sources={n_sources}, seed={seed})")


def bundled_sources_path():
    return resources.files("gscem") / "data" / "speechlike4.csv"


def load_bundled_sources(standardize=False):
    """The 4-source synthetic set shipped with the package."""
    with resources.as_file(bundled_sources_path()) as p:
        src = load_sources_csv(p, standardize=standardize)
    return SourceMatrix(src.S, "bundled:speechlike4.csv")
