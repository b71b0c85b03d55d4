"""Global independent proposal over constrained indicator vectors.

Groups are proposed by a chain of nested logistic regressions,

    q(gamma_k = 1 | gamma_{1:k-1}) = logistic(b_kk + sum_{i<k} b_ki gamma_i),

and each variable of an active group independently with rate ``c_j``
(variables of inactive groups are always off). Parameters are fitted by
weighted (ridge-penalised) maximum likelihood on a particle sample.

Indicator vectors are handled packed, as boolean rows ``(gamma, eta)`` of
length ``q + p``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .exceptions import InputError
from .model import Theta

RIDGE = 1e-4
LOGIT_MAX_ITER = 25
KAPPA_BOUNDS = (1e-6, 1e-2)


def default_kappa(N: int) -> float:
    """Clipping constant ``1/N`` bounded to ``[1e-6, 1e-2]``."""
    return float(np.clip(1.0 / max(N, 1), *KAPPA_BOUNDS))


@dataclass(frozen=True, eq=False)
class WeightedThetaSample:
    thetas: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        th = np.atleast_2d(np.asarray(self.thetas, dtype=bool))
        w = np.asarray(self.weights, dtype=float).ravel()
        if th.shape[0] == 0 or w.size != th.shape[0]:
            raise InputError("sample must hold N >= 1 particles with one weight each")
        if np.any(w < 0) or not np.isfinite(w).all() or w.sum() <= 0:
            raise InputError("weights must be finite, nonnegative and not all zero")
        object.__setattr__(self, "thetas", th)
        object.__setattr__(self, "weights", w / w.sum())

    @property
    def N(self) -> int:
        return self.weights.size


@dataclass(frozen=True, eq=False)
class ProposalParams:
    """Fitted proposal.

    Attributes
    ----------
    b : ndarray (q, q)
        Lower-triangular; ``b[k, k]`` intercepts, ``b[k, i]`` (i < k)
        interaction coefficients.
    active_regression : ndarray of bool (q,)
        False where group ``k`` uses the clipped marginal frequency instead.
    marginal_gamma : ndarray (q,)
    c : ndarray (p,)
        Rate of ``eta_j = 1`` given its group is active.
    kappa : float
        Every Bernoulli rate is clipped to ``[kappa, 1 - kappa]``.
    group_index : ndarray of int (p,)
        0-based group of each variable.
    """

    b: np.ndarray
    active_regression: np.ndarray
    marginal_gamma: np.ndarray
    c: np.ndarray
    kappa: float
    group_index: np.ndarray

    @property
    def q(self) -> int:
        return self.b.shape[0]

    @property
    def p(self) -> int:
        return self.c.size

    @classmethod
    def independent(cls, p_gamma, c, group_index, kappa=0.0):
        """Proposal with independent groups (no regressions)."""
        p_gamma = np.asarray(p_gamma, float)
        q = p_gamma.size
        return cls(np.zeros((q, q)), np.zeros(q, bool), p_gamma,
                   np.asarray(c, float), float(kappa), np.asarray(group_index))

    def group_rates(self, gamma_prev, k):
        """P(gamma_k = 1 | gamma_{1:k-1}) for each row of ``gamma_prev`` (m, k)."""
        if not self.active_regression[k]:
            return np.full(gamma_prev.shape[0], self.marginal_gamma[k])
        lin = self.b[k, k] + gamma_prev @ self.b[k, :k]
        return np.clip(expit(lin), self.kappa, 1.0 - self.kappa)


def _weighted_logit(Xd, y, w, ridge=RIDGE, max_iter=LOGIT_MAX_ITER):
    """Ridge-penalised weighted logistic regression by damped Newton.

    Minimises ``-sum_n w_n log p(y_n | x_n b) + ridge * |b|^2``.
    """
    k = Xd.shape[1]
    b = np.zeros(k)

    def objective(beta):
        lin = Xd @ beta
        ll = np.where(y, log_expit(lin), log_expit(-lin))
        return -(w @ ll) + ridge * beta @ beta

    f = objective(b)
    for _ in range(max_iter):
        mu = expit(Xd @ b)
        grad = Xd.T @ (w * (mu - y)) + 2.0 * ridge * b
        H = (Xd.T * (w * mu * (1.0 - mu))) @ Xd + 2.0 * ridge * np.eye(k)
        step = np.linalg.solve(H, grad)
        t = 1.0
        while True:
            cand = b - t * step
            fc = objective(cand)
            if fc <= f or t < 1e-10:
                break
            t *= 0.5
        b, f = cand, fc
        if np.max(np.abs(t * step)) < 1e-10:
            break
    return b


def fit_proposal(sample: WeightedThetaSample, group_map, p_eta_fallback=None,
                 kappa=None, one_based=True) -> ProposalParams:
    """Weighted-MLE calibration of the proposal on a particle sample.

    Parameters
    ----------
    sample : WeightedThetaSample
    group_map : array_like of int (p,)
        Group of each variable (1-based unless ``one_based=False``).
    p_eta_fallback : array_like (p,), optional
        Used for ``c_j`` when no particle has group ``g(j)`` active
        (0.5 if not given).
    kappa : float, optional
        Clipping constant, :func:`default_kappa` of the sample size by default.
    """
    gi = np.asarray(group_map, dtype=np.int64) - (1 if one_based else 0)
    th, w = sample.thetas, sample.weights
    p = gi.size
    q = th.shape[1] - p
    if q < 1 or gi.min(initial=0) < 0 or gi.max(initial=0) >= q:
        raise InputError("group_map is inconsistent with the packed sample width")
    if kappa is None:
        kappa = default_kappa(sample.N)
    gamma, eta = th[:, :q], th[:, q:]

    freq = w @ gamma
    b = np.zeros((q, q))
    active = (freq > kappa) & (freq < 1.0 - kappa)
    marginal = np.clip(freq, kappa, 1.0 - kappa)
    for k in range(q):
        if not active[k]:
            continue
        preds = np.flatnonzero(active[:k])
        Xd = np.column_stack([np.ones(sample.N), gamma[:, preds]])
        coef = _weighted_logit(Xd, gamma[:, k], w)
        b[k, k] = coef[0]
        b[k, preds] = coef[1:]

    fallback = np.full(p, 0.5) if p_eta_fallback is None else np.asarray(p_eta_fallback, float)
    denom = freq[gi]
    num = w @ eta
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(denom > 0, num / np.where(denom > 0, denom, 1.0), fallback)
    c = np.clip(c, kappa, 1.0 - kappa)
    return ProposalParams(b, active, marginal, c, float(kappa), gi)


def sample_from_uniforms(params: ProposalParams, u) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-CDF draws from ``m`` rows of uniforms of width ``q + p``.

    Returns packed indicators ``(m, q + p)`` and their log proposal density.
    """
    u = np.atleast_2d(u)
    q, gi = params.q, params.group_index
    m = u.shape[0]
    gamma = np.zeros((m, q), dtype=bool)
    logq = np.zeros(m)
    # rates of exactly 0 or 1 (kappa = 0) are only ever taken on their likely side
    with np.errstate(divide="ignore"):
        for k in range(q):
            rate = params.group_rates(gamma[:, :k], k)
            gamma[:, k] = u[:, k] < rate
            logq += np.log(np.where(gamma[:, k], rate, 1.0 - rate))
        open_ = gamma[:, gi]
        eta = open_ & (u[:, q:] < params.c)
        logq += np.where(open_, np.where(eta, np.log(params.c), np.log1p(-params.c)), 0.0).sum(axis=1)
    return np.hstack([gamma, eta]), logq


def sample_batch(params: ProposalParams, rng: np.random.Generator, size: int):
    return sample_from_uniforms(params, rng.random((size, params.q + params.p)))


def sample_proposal(params: ProposalParams, rng: np.random.Generator) -> tuple[Theta, float]:
    """Draw one ``theta`` and return it with its exact log density."""
    rows, logq = sample_batch(params, rng, 1)
    return Theta.from_vector(rows[0], params.q), float(logq[0])


def log_q_batch(thetas, params: ProposalParams) -> np.ndarray:
    thetas = np.atleast_2d(np.asarray(thetas, dtype=bool))
    q, gi = params.q, params.group_index
    gamma, eta = thetas[:, :q], thetas[:, q:]
    out = np.zeros(thetas.shape[0])
    with np.errstate(divide="ignore"):
        for k in range(q):
            rate = params.group_rates(gamma[:, :k].astype(float), k)
            out += np.log(np.where(gamma[:, k], rate, 1.0 - rate))
    open_ = gamma[:, gi]
    with np.errstate(divide="ignore"):
        le = np.where(eta, np.log(params.c), np.log1p(-params.c))
    out += np.where(open_, le, 0.0).sum(axis=1)
    out[np.any(eta & ~open_, axis=1)] = -np.inf
    return out


def log_q(theta: Theta, params: ProposalParams) -> float:
    """Exact log proposal density; ``-inf`` off the constrained support."""
    if theta.gamma.size != params.q or theta.eta.size != params.p:
        raise InputError("theta dimensions do not match the proposal")
    return float(log_q_batch(theta.to_vector()[None, :], params)[0])
