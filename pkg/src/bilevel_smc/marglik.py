"""Marginal likelihood ``log L(theta) = log int L(beta, theta) p(beta) dbeta``.

Three evaluators are provided:

* ``la``: Laplace approximation at the MAP (Newton-Raphson per model);
* ``ala``: approximate Laplace, expanding around ``beta = 0`` using the
  gradient/Hessian of the *full* model computed once (:func:`precompute_ala`),
  so that each evaluation costs nothing in ``n``;
* ``quadrature``: adaptive Gauss-Hermite tensor quadrature of the exact
  integral, a ground truth for ``d_theta <= 3``.

All log-determinants and quadratic forms go through a single Cholesky
factorisation.
"""

from __future__ import annotations

import itertools
import math
import threading
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .exceptions import ConvergenceError, InputError, NumericalError, UnsupportedError
from .model import (
    LOG2,
    LOG2PI,
    Dataset,
    PriorConfig,
    Theta,
    _check_theta,
    h_derivs,
    h_value,
    log_cdf,
)

LA = "la"
ALA = "ala"
QUADRATURE = "quadrature"
METHODS = (LA, ALA, QUADRATURE)

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 50
_MAX_HALVINGS = 40
_STALL_TOL = 1e-5


def _cholesky(H):
    try:
        return np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky factorisation failed: {exc}") from None


def _logdet_from_chol(L) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


# --------------------------------------------------------------------------
# ALA
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AlaCache:
    """Gradient and Hessian of ``h`` at zero for the full model.

    Attributes
    ----------
    g_full : ndarray (r + q + p,)
    H_full : ndarray (r + q + p, r + q + p)
        Includes the prior curvature ``I / sigma2``.
    h0_per_obs_total : float
        ``-log L(beta=0) = n log 2`` (both links have F(0) = 1/2).
    sigma2 : float
    r : int
        Number of always-included coefficients (leading block).
    """

    g_full: np.ndarray
    H_full: np.ndarray
    h0_per_obs_total: float
    sigma2: float
    r: int

    @property
    def dim(self) -> int:
        return self.g_full.size


def precompute_ala(data: Dataset, prior: PriorConfig) -> AlaCache:
    """One pass over the data: O(n (r + q + p)^2)."""
    prior.check_dims(data.q, data.p)
    _, g, H = h_derivs(data.design, data.signs, np.zeros(data.dim), prior.sigma2, prior.link)
    g.setflags(write=False)
    H.setflags(write=False)
    return AlaCache(g, H, data.n * LOG2, prior.sigma2, data.r)


def _ala_from_index(idx, cache: AlaCache) -> float:
    d = idx.size
    # -h_theta(0) + (d/2) log 2pi  ==  -n log 2 - (d/2) log sigma2
    base = -cache.h0_per_obs_total - 0.5 * d * math.log(cache.sigma2)
    if d == 0:
        return base
    g = cache.g_full[idx]
    L = _cholesky(cache.H_full[np.ix_(idx, idx)])
    w = solve_triangular(L, g, lower=True, check_finite=False)
    return float(base + 0.5 * (w @ w) - 0.5 * _logdet_from_chol(L))


def ala_log_marginal(theta: Theta, cache: AlaCache) -> float:
    """ALA value from the cached full-model gradient and Hessian.

    Cost is independent of ``n`` and cubic in ``d_theta``.
    """
    mask = theta.active_mask(cache.r)
    if mask.size != cache.dim:
        raise InputError(f"theta implies {mask.size} coefficients, cache has {cache.dim}")
    return _ala_from_index(np.flatnonzero(mask), cache)


def ala_from_scratch(theta: Theta, data: Dataset, prior: PriorConfig) -> float:
    """ALA built directly from the restricted model (no full-model cache)."""
    _check_theta(theta, data)
    D = data.design[:, theta.active_mask(data.r)]
    d = D.shape[1]
    h0, g, H = h_derivs(D, data.signs, np.zeros(d), prior.sigma2, prior.link)
    if d == 0:
        return -h0
    L = _cholesky(H)
    w = solve_triangular(L, g, lower=True)
    return float(-h0 + 0.5 * w @ w + 0.5 * d * LOG2PI - 0.5 * _logdet_from_chol(L))


# --------------------------------------------------------------------------
# Newton-Raphson / LA
# --------------------------------------------------------------------------

class NewtonResult(NamedTuple):
    beta_hat: np.ndarray
    hess_at_mode: np.ndarray
    h_at_mode: float
    chol: np.ndarray
    n_iter: int


def _newton(D, s, sigma2, link, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER) -> NewtonResult:
    d = D.shape[1]
    beta = np.zeros(d)
    val, g, H = h_derivs(D, s, beta, sigma2, link)
    trace = [(0, val, float(np.max(np.abs(g), initial=0.0)))]
    for it in range(1, max_iter + 1):
        gnorm = trace[-1][2]
        L = _cholesky(H)
        if gnorm <= tol:
            return NewtonResult(beta, H, val, L, it - 1)
        step = solve_triangular(L.T, solve_triangular(L, g, lower=True), lower=False)
        t = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = beta - t * step
            cval, cg, cH = h_derivs(D, s, cand, sigma2, link)
            if cval <= val:
                break
            # h is flat to rounding near the mode; judge by the gradient there
            if (cval - val <= 1e-13 * max(1.0, abs(val))
                    and np.max(np.abs(cg)) < gnorm):
                break
            t *= 0.5
        else:
            # no decrease representable: we sit at the floating-point floor
            if gnorm <= _STALL_TOL:
                return NewtonResult(beta, H, val, L, it - 1)
            raise ConvergenceError(f"line search stalled with |grad|={gnorm:.3g}", trace)
        beta, val, g, H = cand, cval, cg, cH
        trace.append((it, val, float(np.max(np.abs(g)))))
    if trace[-1][2] <= tol:
        return NewtonResult(beta, H, val, _cholesky(H), max_iter)
    raise ConvergenceError(
        f"Newton-Raphson did not reach |grad| <= {tol:g} in {max_iter} iterations", trace
    )


def newton_raphson_map(theta: Theta, data: Dataset, prior: PriorConfig,
                       tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER) -> NewtonResult:
    """MAP of ``h_theta`` by damped Newton, started at zero.

    Full Newton steps, halved while ``h`` increases; stops once the gradient
    infinity-norm is at most ``tol``. Raises :class:`ConvergenceError`
    (with the iteration trace) after ``max_iter`` iterations.
    """
    _check_theta(theta, data)
    prior.check_dims(data.q, data.p)
    D = data.design[:, theta.active_mask(data.r)]
    return _newton(D, data.signs, prior.sigma2, prior.link, tol, max_iter)


def _la_from_mask(mask, data: Dataset, prior: PriorConfig) -> float:
    D = data.design[:, mask]
    d = D.shape[1]
    if d == 0:
        return -data.n * LOG2
    fit = _newton(D, data.signs, prior.sigma2, prior.link)
    return -fit.h_at_mode + 0.5 * d * LOG2PI - 0.5 * _logdet_from_chol(fit.chol)


def la_log_marginal(theta: Theta, data: Dataset, prior: PriorConfig) -> float:
    """Laplace approximation ``-h(beta_hat) + (d/2) log 2pi - (1/2) log|H_hat|``."""
    _check_theta(theta, data)
    prior.check_dims(data.q, data.p)
    return _la_from_mask(theta.active_mask(data.r), data, prior)


# --------------------------------------------------------------------------
# Quadrature ground truth
# --------------------------------------------------------------------------

_QUAD_START = 8
_QUAD_MAX_NODES = {1: 1024, 2: 256, 3: 64}
_QUAD_CHUNK = 1 << 14


def _neg_h_batch(D, s, B, sigma2, link):
    """``-h`` at each row of ``B`` (k, d), chunked over rows."""
    d = B.shape[1]
    const = 0.5 * d * (LOG2PI + math.log(sigma2))
    out = np.empty(B.shape[0])
    for lo in range(0, B.shape[0], _QUAD_CHUNK):
        b = B[lo:lo + _QUAD_CHUNK]
        eta = s[:, None] * (D @ b.T)
        out[lo:lo + b.shape[0]] = (
            log_cdf(eta, link).sum(axis=0) - 0.5 * np.sum(b * b, axis=1) / sigma2 - const
        )
    return out


def quadrature_log_marginal(theta: Theta, data: Dataset, prior: PriorConfig, tol=1e-8) -> float:
    """Adaptive Gauss-Hermite estimate of the exact log marginal likelihood.

    The grid is centred at the posterior mode and scaled by the Cholesky
    factor of the Hessian there; the per-dimension node count is doubled
    from 8 until two successive values agree within ``tol``.
    """
    _check_theta(theta, data)
    prior.check_dims(data.q, data.p)
    mask = theta.active_mask(data.r)
    d = int(mask.sum())
    if d > 3:
        raise UnsupportedError(f"quadrature supports d_theta <= 3, got {d}")
    D = data.design[:, mask]
    if d == 0:
        return -h_value(D, data.signs, np.zeros(0), prior.sigma2, prior.link)
    fit = _newton(D, data.signs, prior.sigma2, prior.link)
    # beta = beta_hat + sqrt(2) L^{-T} z turns the integrand into ~exp(-|z|^2)
    A = math.sqrt(2.0) * solve_triangular(fit.chol.T, np.eye(d), lower=False)
    log_jac = 0.5 * d * math.log(2.0) - 0.5 * _logdet_from_chol(fit.chol)
    prev = None
    m = _QUAD_START
    while m <= _QUAD_MAX_NODES[d]:
        z, w = np.polynomial.hermite.hermgauss(m)
        lw = np.log(w) + z * z
        Zg = np.array(list(itertools.product(z, repeat=d)))
        LWg = np.array(list(itertools.product(lw, repeat=d))).sum(axis=1)
        B = fit.beta_hat + Zg @ A.T
        val = log_jac + float(logsumexp(LWg + _neg_h_batch(D, data.signs, B, prior.sigma2, prior.link)))
        if prev is not None and abs(val - prev) <= tol:
            return val
        prev = val
        m *= 2
    raise NumericalError(f"quadrature did not stabilise within {_QUAD_MAX_NODES[d]} nodes per dimension")


# --------------------------------------------------------------------------
# evaluator with memoisation
# --------------------------------------------------------------------------

class MarglikEvaluator:
    """Callable ``theta -> log L(theta)`` for one dataset, prior and method.

    Values are memoised by the packed indicator bit pattern when
    ``memoize`` is set. The cache is idempotent: a concurrent duplicate
    computation stores the same value twice, which is harmless.

    Attributes
    ----------
    n_evals : int
        Number of actual (non-memoised) evaluations.
    eval_time : float
        Wall time spent inside those evaluations, in seconds.
    """

    def __init__(self, data: Dataset, prior: PriorConfig, method=ALA, memoize=True):
        if method not in METHODS:
            raise InputError(f"unknown marginal likelihood method {method!r}")
        prior.check_dims(data.q, data.p)
        self.data = data
        self.prior = prior
        self.method = method
        self.cache = precompute_ala(data, prior) if method == ALA else None
        self.memoize = memoize
        self._memo: dict[bytes, float] = {}
        self._lock = threading.Lock()
        self.n_evals = 0
        self.eval_time = 0.0

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_memo"] = {}
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def evaluate_row(self, row) -> float:
        """Uncached evaluation from a packed ``(gamma, eta)`` boolean row."""
        data = self.data
        mask = np.concatenate([np.ones(data.r, dtype=bool), row])
        if self.method == ALA:
            return _ala_from_index(np.flatnonzero(mask), self.cache)
        if self.method == LA:
            return _la_from_mask(mask, data, self.prior)
        return quadrature_log_marginal(Theta.from_vector(row, data.q), data, self.prior)

    def __call__(self, theta: Theta) -> float:
        _check_theta(theta, self.data)
        return float(self.evaluate_batch(theta.to_vector()[None, :])[0])

    @staticmethod
    def keys(rows) -> list[bytes]:
        packed = np.packbits(np.asarray(rows, dtype=bool), axis=1)
        return [r.tobytes() for r in packed]

    def evaluate_batch(self, rows, pool=None) -> np.ndarray:
        """Evaluate many packed rows, reusing and filling the memo.

        ``pool`` may be a ``concurrent.futures`` executor; only unseen
        configurations are dispatched, and results are stored in input
        order so the outcome does not depend on the pool.
        """
        rows = np.atleast_2d(np.asarray(rows, dtype=bool))
        keys = self.keys(rows)
        out = np.empty(len(keys))
        todo: dict[bytes, int] = {}
        for i, k in enumerate(keys):
            v = self._memo.get(k) if self.memoize else None
            if v is None:
                todo.setdefault(k, i)
            else:
                out[i] = v
        if todo:
            first = list(todo.values())
            t0 = time.perf_counter()
            if pool is None or len(first) < 2:
                vals = [self.evaluate_row(rows[i]) for i in first]
            else:
                vals = list(pool.map(_pool_eval, [rows[i] for i in first],
                                     chunksize=max(1, len(first) // 64)))
            self.eval_time += time.perf_counter() - t0
            self.n_evals += len(first)
            fresh = dict(zip(todo.keys(), vals))
            if self.memoize:
                with self._lock:
                    self._memo.update(fresh)
            for i, k in enumerate(keys):
                if k in fresh:
                    out[i] = fresh[k]
        return out

    def memo_size(self) -> int:
        return len(self._memo)


_WORKER_EVALUATOR: MarglikEvaluator | None = None


def _pool_init(evaluator: MarglikEvaluator):
    global _WORKER_EVALUATOR
    _WORKER_EVALUATOR = evaluator


def _pool_eval(row):
    return _WORKER_EVALUATOR.evaluate_row(row)


def make_pool(evaluator: MarglikEvaluator, workers: int):
    """Process pool whose workers hold a copy of ``evaluator``; None if workers <= 1."""
    if workers <= 1:
        return None
    import multiprocessing as mp
    from concurrent.futures import ProcessPoolExecutor

    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    return ProcessPoolExecutor(max_workers=workers, mp_context=ctx,
                               initializer=_pool_init, initargs=(evaluator,))
