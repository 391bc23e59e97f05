"""Exact posterior inference for the GSC model.

For a fixed binary state ``s`` with active set ``a`` the model is linear
Gaussian, so

    p(y | s)      = N(y; 0, C_s),         C_s = W_a W_a^T + Sigma
    p(z_a | s, y) = N(z_a; kappa_s, Lambda_s),
    Lambda_s      = (W_a^T Sigma^-1 W_a + I_k)^-1,
    kappa_s       = Lambda_s W_a^T Sigma^-1 y.

Summing over all ``2**H`` states gives the exact E-step. Everything that does
not depend on ``y`` is precomputed once per parameter set in
:class:`StateContexts`. Per-state algebra is done on the k x k active block;
``C_s`` is never formed, its inverse and log-determinant follow from
Woodbury and the matrix determinant lemma::

    y^T C_s^-1 y = y^T Sigma^-1 y - v_a^T Lambda_s v_a,   v = W^T Sigma^-1 y
    log|C_s|     = log|Sigma| - log|Lambda_s|
"""
import csv
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .model import (Dataset, BinaryState, InputError, NumericalError,
                    check_hidden_cap, log_state_priors, require_valid,
                    state_bits)

LOG_2PI = np.log(2.0 * np.pi)
_CHUNK_ELEMENTS = 2 ** 21


def cholesky_jitter(A, what="matrix"):
    """Lower Cholesky factor of ``A``.

    On failure retries once with ``1e-9 * trace(A) / dim`` added to the
    diagonal; a second failure raises :class:`NumericalError`.
    """
    A = np.asarray(A, dtype=float)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    d = A.shape[-1]
    jitter = 1e-9 * abs(np.trace(A)) / d
    try:
        return np.linalg.cholesky(A + jitter * np.eye(d))
    except np.linalg.LinAlgError:
        raise NumericalError(f"{what} is not positive definite "
                             f"(Cholesky failed after jitter {jitter:.3g})") from None


@dataclass(frozen=True)
class StateContext:
    """Data-independent posterior quantities for one state.

    ``Lambda_active`` and ``gain_active`` are restricted to the active
    dimensions; ``gain_active @ y`` gives the posterior mean of ``z`` on
    those dimensions.
    """
    state: BinaryState
    log_det_C: float
    Lambda_active: np.ndarray
    gain_active: np.ndarray
    log_prior: float
    C: np.ndarray

    @property
    def chol_C(self):
        return cholesky_jitter(self.C, f"C_s for state {self.state.index}")


class StateContexts:
    """Precomputed quantities for all ``2**H`` states of one parameter set.

    Attributes
    ----------
    bits : (S, H) int8 array
        State bits in canonical order (bit ``h`` of the index is ``s_h``).
    log_prior : (S,) array
        ``log p(s | pi)``; ``-inf`` for states excluded by ``pi`` in {0, 1}.
    log_det_C : (S,) array
        ``log |C_s|``.
    Lambda : (S, H, H) array
        Posterior covariance of ``z`` embedded on the active block, zero on
        rows/columns of inactive dimensions.
    """

    def __init__(self, params):
        require_valid(params)
        self.params = params
        D, H = params.W.shape
        check_hidden_cap(H)
        self.D, self.H = D, H
        self.bits = state_bits(H)
        S = len(self.bits)
        self.popcount = self.bits.sum(axis=1)
        self.log_prior = log_state_priors(self.bits, params.pi)

        self.chol_Sigma = cholesky_jitter(params.Sigma, "Sigma")
        log_det_Sigma = 2.0 * np.sum(np.log(np.diag(self.chol_Sigma)))
        # B = L^-1 W, so W^T Sigma^-1 W = B^T B and v = B^T (L^-1 y)
        self.B = solve_triangular(self.chol_Sigma, params.W, lower=True)
        M = self.B.T @ self.B
        M = 0.5 * (M + M.T)

        self.Lambda = np.zeros((S, H, H))
        self.log_det_C = np.full(S, log_det_Sigma)
        for k in range(1, H + 1):
            sel = np.flatnonzero(self.popcount == k)
            # active indices per state, ascending
            act = np.nonzero(self.bits[sel])[1].reshape(len(sel), k)
            A = M[act[:, :, None], act[:, None, :]] + np.eye(k)
            L = self._batched_cholesky(A, sel)
            Linv = np.linalg.inv(L)
            Lam = np.swapaxes(Linv, 1, 2) @ Linv
            self.log_det_C[sel] += 2.0 * np.sum(
                np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
            self.Lambda[sel[:, None, None], act[:, :, None], act[:, None, :]] = Lam
        # flattened (S*H, H) view used to map v to all kappas in one product
        self._Lambda_rows = self.Lambda.reshape(S * H, H)

    @staticmethod
    def _batched_cholesky(A, sel):
        try:
            return np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            pass
        out = np.empty_like(A)
        for i, s in enumerate(sel):
            out[i] = cholesky_jitter(A[i], f"posterior precision of state {s}")
        return out

    @property
    def n_states(self):
        return len(self.bits)

    def __len__(self):
        return self.n_states

    def __getitem__(self, index):
        state = BinaryState(int(index), self.H)
        act = state.active_set
        Lam = self.Lambda[index][np.ix_(act, act)]
        W = self.params.W
        Sigma_inv_W = np.linalg.solve(self.params.Sigma, W[:, act])
        C = W[:, act] @ W[:, act].T + self.params.Sigma
        return StateContext(state=state, log_det_C=float(self.log_det_C[index]),
                            Lambda_active=Lam, gain_active=Lam @ Sigma_inv_W.T,
                            log_prior=float(self.log_prior[index]), C=C)

    def __iter__(self):
        return (self[i] for i in range(self.n_states))

    def chunk_size(self):
        return max(1, _CHUNK_ELEMENTS // (self.n_states * max(self.H, 1)))

    def project(self, Y):
        """Per-point pieces shared by all states: ``y^T Sigma^-1 y`` and ``v``."""
        U = solve_triangular(self.chol_Sigma, Y.T, lower=True)
        yq = np.einsum("dn,dn->n", U, U)
        V = U.T @ self.B
        return yq, V

    def joint(self, Y):
        """Unnormalised log posterior over states and all kappas for rows of Y.

        Returns ``log_joint`` (n, S) with ``log p(y, s)`` and ``kappa`` (n, S, H)
        with zeros on inactive dimensions.
        """
        n = Y.shape[0]
        yq, V = self.project(Y)
        kappa = (V @ self._Lambda_rows.T).reshape(n, self.n_states, self.H)
        quad = yq[:, None] - np.einsum("nsh,nh->ns", kappa, V)
        log_joint = (self.log_prior[None, :]
                     - 0.5 * (self.D * LOG_2PI + self.log_det_C[None, :])
                     - 0.5 * quad)
        return log_joint, kappa


def build_state_contexts(params):
    """Precompute :class:`StateContexts` for every state of ``params``."""
    return StateContexts(params)


def _as_rows(Y, D):
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[None, :]
    if Y.ndim != 2 or Y.shape[1] != D:
        raise InputError(f"observations must have {D} columns, got shape {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise InputError("observation has non-finite entries")
    return Y


def _normalise(log_joint):
    ll = logsumexp(log_joint, axis=1)
    return log_joint - ll[:, None], ll


@dataclass(frozen=True)
class StatePosterior:
    log_weights: np.ndarray
    kappa: np.ndarray

    @property
    def weights(self):
        return np.exp(self.log_weights)


def posterior_over_states(contexts, y):
    """Posterior over binary states for a single observation ``y``."""
    y = _as_rows(y, contexts.D)
    if len(y) != 1:
        raise InputError("posterior_over_states takes a single observation")
    log_joint, kappa = contexts.joint(y)
    log_w, _ = _normalise(log_joint)
    return StatePosterior(log_weights=log_w[0], kappa=kappa[0])


@dataclass(frozen=True)
class PointMoments:
    Es: np.ndarray
    Esz: np.ndarray
    Eszsz: np.ndarray
    log_lik: float


def batch_moments(contexts, Y):
    """Posterior moments for every row of ``Y``.

    Returns ``(Es, Esz, Eszsz, log_lik)`` with shapes (N, H), (N, H),
    (N, H, H) and (N,).
    """
    Y = _as_rows(Y, contexts.D)
    N, H = len(Y), contexts.H
    Es = np.empty((N, H))
    Esz = np.empty((N, H))
    Eszsz = np.empty((N, H, H))
    ll = np.empty(N)
    bits = contexts.bits.astype(float)
    step = contexts.chunk_size()
    for start in range(0, N, step):
        sl = slice(start, min(start + step, N))
        log_joint, kappa = contexts.joint(Y[sl])
        log_w, ll[sl] = _normalise(log_joint)
        w = np.exp(log_w)
        Es[sl] = w @ bits
        Esz[sl] = np.einsum("ns,nsh->nh", w, kappa)
        Eszsz[sl] = (np.einsum("ns,shk->nhk", w, contexts.Lambda)
                     + np.einsum("ns,nsh,nsk->nhk", w, kappa, kappa))
    return Es, Esz, Eszsz, ll


def point_moments(contexts, y):
    """E-step moments ``<s>``, ``<s*z>``, ``<(s*z)(s*z)^T>`` and ``log p(y)``."""
    y = _as_rows(y, contexts.D)
    if len(y) != 1:
        raise InputError("point_moments takes a single observation")
    Es, Esz, Eszsz, ll = batch_moments(contexts, y)
    return PointMoments(Es[0], Esz[0], Eszsz[0], float(ll[0]))


def accumulate(contexts, Y):
    """Dataset sums of the E-step moments.

    Returns a dict with ``sum_y_xT`` (D, H), ``sum_xxT`` (H, H), ``sum_s``
    (H,), ``sum_yyT`` (D, D), ``n_points`` and ``total_log_lik``. Rows are
    reduced in fixed chunk order, so results are bit-stable.
    """
    Y = _as_rows(Y, contexts.D)
    N, D, H = len(Y), contexts.D, contexts.H
    bits = contexts.bits.astype(float)
    sum_y_xT = np.zeros((D, H))
    sum_xxT = np.zeros((H, H))
    sum_s = np.zeros(H)
    state_mass = np.zeros(contexts.n_states)
    total_ll = 0.0
    step = contexts.chunk_size()
    for start in range(0, N, step):
        Yc = Y[start:start + step]
        log_joint, kappa = contexts.joint(Yc)
        log_w, ll = _normalise(log_joint)
        w = np.exp(log_w)
        total_ll += float(np.sum(ll))
        mass = w.sum(axis=0)
        state_mass += mass
        sum_s += mass @ bits
        Esz = np.einsum("ns,nsh->nh", w, kappa)
        sum_y_xT += Yc.T @ Esz
        K = kappa.reshape(-1, H)
        sum_xxT += (w.reshape(-1, 1) * K).T @ K
    sum_xxT += np.einsum("s,shk->hk", state_mass, contexts.Lambda)
    sum_xxT = 0.5 * (sum_xxT + sum_xxT.T)
    return dict(sum_y_xT=sum_y_xT, sum_xxT=sum_xxT, sum_s=sum_s,
                sum_yyT=Y.T @ Y, n_points=N, total_log_lik=total_ll)


def point_log_likelihoods(params, Y):
    """``log p(y_n | params)`` for every row of ``Y``."""
    contexts = params if isinstance(params, StateContexts) else StateContexts(params)
    Y = _as_rows(Y, contexts.D)
    out = np.empty(len(Y))
    step = contexts.chunk_size()
    for start in range(0, len(Y), step):
        sl = slice(start, start + step)
        log_joint, _ = contexts.joint(Y[sl])
        out[sl] = logsumexp(log_joint, axis=1)
    return out


def log_likelihood(params, data):
    """Exact data log-likelihood ``sum_n log sum_s p(s) N(y_n; 0, C_s)``."""
    Y = data.Y if isinstance(data, Dataset) else data
    return float(np.sum(point_log_likelihoods(params, Y)))


def dump_state_weights(contexts, y, path):
    """Write ``state_index,popcount,log_weight`` rows for one observation."""
    post = posterior_over_states(contexts, y)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["state_index", "popcount", "log_weight"])
        for i, lw in enumerate(post.log_weights):
            out.writerow([i, int(contexts.popcount[i]), repr(float(lw))])
