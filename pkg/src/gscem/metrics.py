"""Separation quality metrics and run selection."""
from dataclasses import dataclass, field

import numpy as np

from .model import InputError


@dataclass(frozen=True)
class AmariReport:
    index: float
    O: np.ndarray
    permutation_estimate: np.ndarray

    def __float__(self):
        return self.index


def amari_index(W, W_gen, cond_limit=1e12):
    """Amari index of a learned basis ``W`` against the generating ``W_gen``.

    With ``O = W^-1 W_gen`` (left pseudo-inverse when ``W`` is tall)::

        A = 1/(2H(H-1)) * sum_hk (|O_hk| / max_j |O_hj| + |O_hk| / max_j |O_jk|)
            - 1/(H-1)

    ``A`` is 0 exactly when ``O`` is a scaled permutation. For ``H == 1`` the
    index is 0 by convention.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    W_gen = np.atleast_2d(np.asarray(W_gen, dtype=float))
    D, H = W.shape
    if W_gen.shape[1] != H:
        raise InputError(f"W has {H} columns, W_gen has {W_gen.shape[1]}")
    if W_gen.shape[0] != D:
        raise InputError(f"W has {D} rows, W_gen has {W_gen.shape[0]}")
    if D < H:
        raise InputError("Amari index needs D >= H")
    sv = np.linalg.svd(W, compute_uv=False)
    if sv[-1] == 0 or sv[0] / sv[-1] > cond_limit:
        raise InputError("W is singular; Amari index undefined")
    O = np.linalg.solve(W, W_gen) if D == H else np.linalg.pinv(W) @ W_gen
    A = np.abs(O)
    perm = np.argmax(A, axis=1)
    if H == 1:
        return AmariReport(0.0, O, perm)
    row = A / A.max(axis=1, keepdims=True)
    col = A / A.max(axis=0, keepdims=True)
    index = (row.sum() + col.sum()) / (2 * H * (H - 1)) - 1.0 / (H - 1)
    return AmariReport(float(index), O, perm)


def ortho_deviation(W):
    """Largest deviation from 90 degrees between any two columns of ``W``."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    norms = np.linalg.norm(W, axis=0)
    if np.any(norms == 0):
        raise InputError("ortho_deviation: W has a zero column")
    U = W / norms
    H = W.shape[1]
    if H < 2:
        return 0.0
    cos = np.clip(U.T @ U, -1.0, 1.0)
    iu = np.triu_indices(H, 1)
    angles = np.degrees(np.arccos(cos[iu]))
    return float(np.max(np.abs(90.0 - angles)))


def safe_ortho_deviation(W):
    try:
        return ortho_deviation(W)
    except InputError:
        return float("nan")


@dataclass(frozen=True)
class RunSelection:
    threshold_deg: float
    selected: list
    histogram: tuple
    gap_found: bool = True
    values: np.ndarray = field(default=None, repr=False)


def leading_cluster(values, bin_width):
    """Threshold below which the leading cluster of ``values`` lies.

    A histogram with bins of ``bin_width`` starting at ``min(values)`` is
    walked from the lowest bin: the cluster grows while counts do not rise
    and ends at the first empty bin or the first bin whose count increases
    after a decrease began (the minimum after the cluster). Returns
    ``(threshold, edges, counts, gap_found)``; without a gap, ``threshold``
    is the right edge of the last bin and every value is below it.
    """
    values = np.asarray(values, dtype=float)
    if bin_width <= 0:
        raise InputError("bin_width must be positive")
    lo, hi = values.min(), values.max()
    nbins = max(1, int(np.floor((hi - lo) / bin_width)) + 1)
    edges = lo + bin_width * np.arange(nbins + 1)
    counts = np.histogram(values, bins=edges)[0]
    if nbins == 1:
        return edges[-1], edges, counts, False
    # the leading mode: climb while counts rise
    i = 0
    while i + 1 < nbins and counts[i + 1] >= counts[i] and counts[i + 1] > 0:
        i += 1
    # descend to the minimum after the mode
    while i + 1 < nbins:
        nxt = counts[i + 1]
        if nxt == 0:
            return edges[i + 1], edges, counts, True
        if nxt > counts[i]:
            return edges[i + 1], edges, counts, True
        i += 1
    return edges[-1], edges, counts, False


def select_orthogonal_cluster(results, bin_width_deg=2.0, threshold_deg=None):
    """Select the cluster of runs whose learned bases are most orthogonal.

    ``results`` are :class:`~gscem.em.FitResult` objects or raw deviations
    in degrees. ``threshold_deg`` overrides the automatic histogram rule
    (see :func:`leading_cluster`). Runs without a finite deviation, e.g.
    failed runs, are never selected.
    """
    dev = np.array([r if np.isscalar(r) else r.ortho_deviation_deg for r in results],
                   dtype=float)
    finite = np.isfinite(dev)
    if not finite.any():
        raise InputError("no run has a finite orthogonality deviation")
    d = dev[finite]
    thr, edges, counts, gap = leading_cluster(d, bin_width_deg)
    if threshold_deg is not None:
        thr = float(threshold_deg)
        selected = [i for i in range(len(dev)) if finite[i] and dev[i] <= thr]
    elif gap:
        selected = [i for i in range(len(dev)) if finite[i] and dev[i] < thr]
    else:
        selected = [i for i in range(len(dev)) if finite[i]]
    return RunSelection(float(thr), selected, (edges, counts), gap, dev)


def select_likelihood_cluster(results, n_points, bin_width=0.1):
    """Runs in the top log-likelihood cluster.

    Final log-likelihoods are divided by ``n_points`` and negated so the
    best runs form the leading cluster; the same histogram rule as for
    orthogonality is applied with ``bin_width`` nats per point. Failed runs
    are never selected.
    """
    ll = np.array([r.final_log_lik for r in results], dtype=float)
    finite = np.isfinite(ll)
    if not finite.any():
        raise InputError("no successful runs")
    neg = -ll[finite] / n_points
    if finite.sum() == 1:
        thr, gap = neg[0], False
    else:
        thr, _, _, gap = leading_cluster(neg, bin_width)
    if not gap:
        return [i for i in range(len(ll)) if finite[i]]
    return [i for i in range(len(ll)) if finite[i] and -ll[i] / n_points < thr]


@dataclass(frozen=True)
class RunSummary:
    all_mean: float
    all_std: float
    selected_mean: float
    selected_std: float
    amari: np.ndarray
    n_all: int
    n_selected: int

    def to_dict(self):
        return {"GSC": {"mean": self.all_mean, "std": self.all_std, "n": self.n_all},
                "GSC_perp": {"mean": self.selected_mean, "std": self.selected_std,
                             "n": self.n_selected},
                "amari": [float(a) for a in self.amari]}


def summarize_runs(results, selection, W_gen):
    """Mean and population std of the Amari index over all and selected runs."""
    amari = np.array([amari_index(r.params.W, W_gen).index for r in results])
    sel = selection.selected if isinstance(selection, RunSelection) else list(selection)
    if not sel:
        raise InputError("empty selection")
    a_sel = amari[sel]
    return RunSummary(float(amari.mean()), float(amari.std()),
                      float(a_sel.mean()), float(a_sel.std()), amari,
                      len(amari), len(sel))


def format_table(rows):
    """Aligned text table with one line per (name, N, summary) row."""
    header = ("name", "N", "GSC", "GSC_perp")
    lines = [header]
    for name, n, summ in rows:
        lines.append((str(name), str(n),
                      f"{summ.all_mean:.2f}({summ.all_std:.2f})",
                      f"{summ.selected_mean:.2f}({summ.selected_std:.2f})"))
    widths = [max(len(l[i]) for l in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(l, widths)).rstrip()
                     for l in lines) + "\n"
