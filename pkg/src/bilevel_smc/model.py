"""Bi-level binary regression model: data, indicators, priors and exact
log-likelihood / log-posterior evaluations.

Coefficients of a sub-model are always laid out in the canonical order
``(z-block, u-block in group order, x-block in variable order)``; the
design matrix ``Dataset.design`` is ``[Z U X]`` in the same order, so the
active coordinates of a model ``theta`` are selected by
``theta.active_mask(r)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import erfcx, expit, log_ndtr

from .exceptions import InputError

PROBIT = "probit"
LOGIT = "logit"
LINKS = (PROBIT, LOGIT)

LOG2 = math.log(2.0)
LOG2PI = math.log(2.0 * math.pi)
_SQRT1_2 = math.sqrt(0.5)
_SQRT2_PI = math.sqrt(2.0 / math.pi)


def _as_matrix(a, n, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1 and a.size == 0:
        a = a.reshape(n, 0)
    if a.ndim != 2:
        raise InputError(f"{name} must be a 2-d array, got shape {a.shape}")
    if a.shape[0] != n:
        raise InputError(f"{name} has {a.shape[0]} rows, expected n={n}")
    if not np.all(np.isfinite(a)):
        raise InputError(f"{name} contains non-finite entries")
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Binary responses with individual (X), group (U) and always-included
    (Z) design matrices.

    Parameters
    ----------
    y : array_like of {0, 1}, shape (n,)
    X : array_like, shape (n, p)
    U : array_like, shape (n, q)
    Z : array_like, shape (n, r); ``None`` means r = 0.
    group_map : sequence of int, length p
        1-based group of every individual variable.
    allow_empty : bool
        Permit n = 0, which gives a constant (flat) likelihood. Only meant
        for prior-only checks.
    """

    y: np.ndarray
    X: np.ndarray
    U: np.ndarray
    Z: np.ndarray | None
    group_map: np.ndarray
    allow_empty: bool = field(default=False, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        n = y.size
        if n == 0 and not self.allow_empty:
            raise InputError("dataset must have at least one observation")
        if not np.all((y == 0.0) | (y == 1.0)):
            raise InputError("y must be binary (0/1)")
        X = _as_matrix(self.X, n, "X")
        U = _as_matrix(self.U, n, "U")
        Z = _as_matrix(np.zeros((n, 0)) if self.Z is None else self.Z, n, "Z")
        p, q = X.shape[1], U.shape[1]
        if p < 1 or q < 1:
            raise InputError(f"need p >= 1 and q >= 1, got p={p}, q={q}")
        gm = np.asarray(self.group_map)
        if gm.shape != (p,):
            raise InputError(f"group_map must have length p={p}, got shape {gm.shape}")
        if not np.all(gm == np.round(gm)):
            raise InputError("group_map entries must be integers")
        gm = gm.astype(np.int64)
        if gm.min() < 1 or gm.max() > q:
            raise InputError(f"group_map entries must lie in 1..{q}")
        missing = sorted(set(range(1, q + 1)) - set(gm.tolist()))
        if missing:
            raise InputError(f"groups {missing} have no variables")
        y = y.astype(np.int8)
        gm.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "group_map", gm)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.U.shape[1]

    @property
    def r(self) -> int:
        return self.Z.shape[1]

    @property
    def dim(self) -> int:
        """Number of coefficients of the full model, r + q + p."""
        return self.r + self.q + self.p

    @cached_property
    def group_index(self) -> np.ndarray:
        """0-based group of every individual variable."""
        gi = self.group_map - 1
        gi.setflags(write=False)
        return gi

    @cached_property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group_index, minlength=self.q)

    @cached_property
    def design(self) -> np.ndarray:
        """Column concatenation ``[Z U X]`` (canonical coefficient order)."""
        d = np.ascontiguousarray(np.hstack([self.Z, self.U, self.X]))
        d.setflags(write=False)
        return d

    @cached_property
    def signs(self) -> np.ndarray:
        """``2 y - 1``; the likelihood of both links depends on ``s_i * eta_i``."""
        s = 2.0 * self.y - 1.0
        s.setflags(write=False)
        return s

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.y, other.y)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.U, other.U)
            and np.array_equal(self.Z, other.Z)
            and np.array_equal(self.group_map, other.group_map)
        )


@dataclass(frozen=True, eq=False)
class Theta:
    """Group indicators ``gamma`` (length q) and variable indicators ``eta``
    (length p).

    The bi-level constraint (eta[j] = 1 only if gamma[g(j)] = 1) is not
    enforced on construction, because enumeration oracles and the prior
    need to represent invalid configurations; use :meth:`is_valid`.
    """

    gamma: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma).astype(bool).ravel()
        e = np.asarray(self.eta).astype(bool).ravel()
        g.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "eta", e)

    @classmethod
    def from_vector(cls, v, q: int) -> "Theta":
        """Split a packed ``(gamma, eta)`` vector."""
        v = np.asarray(v)
        return cls(v[:q], v[q:])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.eta])

    def key(self) -> bytes:
        return np.packbits(self.to_vector()).tobytes() + bytes([self.gamma.size % 256])

    def is_valid(self, group_index) -> bool:
        return bool(np.all(~self.eta | self.gamma[np.asarray(group_index)]))

    def active_mask(self, r: int) -> np.ndarray:
        return np.concatenate([np.ones(r, dtype=bool), self.gamma, self.eta])

    def dim(self, r: int) -> int:
        """d_theta = r + sum(gamma) + sum(eta)."""
        return r + int(self.gamma.sum()) + int(self.eta.sum())

    def __eq__(self, other):
        if not isinstance(other, Theta):
            return NotImplemented
        return np.array_equal(self.gamma, other.gamma) and np.array_equal(self.eta, other.eta)

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        g = "".join("1" if b else "0" for b in self.gamma)
        e = "".join("1" if b else "0" for b in self.eta)
        return f"Theta(gamma={g}, eta={e})"


def constraint_holds(thetas: np.ndarray, q: int, group_index) -> np.ndarray:
    """Row-wise bi-level constraint check on packed ``(N, q + p)`` indicators."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=bool))
    gamma, eta = thetas[:, :q], thetas[:, q:]
    return np.all(~eta | gamma[:, np.asarray(group_index)], axis=1)


@dataclass(frozen=True, eq=False)
class PriorConfig:
    """Gaussian prior on coefficients and hierarchical Bernoulli prior on
    the indicators.

    Parameters
    ----------
    sigma2 : float
        Prior variance shared by every coefficient block.
    p_gamma : array_like, shape (q,)
        Group inclusion probabilities.
    p_eta : array_like, shape (p,)
        Inclusion probabilities of variables whose group is active.
    link : {'probit', 'logit'}
    """

    sigma2: float
    p_gamma: np.ndarray
    p_eta: np.ndarray
    link: str = PROBIT

    def __post_init__(self):
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise InputError(f"sigma2 must be positive, got {self.sigma2}")
        if self.link not in LINKS:
            raise InputError(f"link must be one of {LINKS}, got {self.link!r}")
        pg = np.atleast_1d(np.asarray(self.p_gamma, dtype=float))
        pe = np.atleast_1d(np.asarray(self.p_eta, dtype=float))
        for name, a in (("p_gamma", pg), ("p_eta", pe)):
            if not np.all((a > 0) & (a < 1)):
                raise InputError(f"{name} entries must lie strictly inside (0, 1)")
            a.setflags(write=False)
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "p_gamma", pg)
        object.__setattr__(self, "p_eta", pe)

    @classmethod
    def default(cls, q: int, p: int, p_gamma=0.5, p_eta=0.5, sigma2=1.0, link=PROBIT):
        """Scalar probabilities broadcast to every group / variable."""
        return cls(sigma2, np.broadcast_to(np.asarray(p_gamma, float), (q,)).copy(),
                   np.broadcast_to(np.asarray(p_eta, float), (p,)).copy(), link)

    def check_dims(self, q: int, p: int):
        if self.p_gamma.size != q or self.p_eta.size != p:
            raise InputError(
                f"prior has q={self.p_gamma.size}, p={self.p_eta.size}; data has q={q}, p={p}"
            )


@dataclass(frozen=True)
class CoefVector:
    beta_x: np.ndarray
    beta_u: np.ndarray
    beta_z: np.ndarray

    def __post_init__(self):
        for name in ("beta_x", "beta_u", "beta_z"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))

    def check_dims(self, data: Dataset):
        if (self.beta_x.size, self.beta_u.size, self.beta_z.size) != (data.p, data.q, data.r):
            raise InputError(
                f"coefficient sizes (p={self.beta_x.size}, q={self.beta_u.size}, "
                f"r={self.beta_z.size}) do not match data (p={data.p}, q={data.q}, r={data.r})"
            )

    def to_vector(self) -> np.ndarray:
        """Canonical (z, u, x) layout."""
        return np.concatenate([self.beta_z, self.beta_u, self.beta_x])


# --------------------------------------------------------------------------
# link functions
# --------------------------------------------------------------------------

def log_cdf(x, link=PROBIT):
    """``log F(x)``, stable in both tails.

    For the probit link this is ``scipy.special.log_ndtr`` (erfc-based, with
    an asymptotic expansion in the far left tail), so ``log_cdf(-40)`` is
    finite where ``log(norm.cdf(-40))`` is ``-inf``.
    """
    x = np.asarray(x, dtype=float)
    if link == PROBIT:
        return log_ndtr(x)
    return -np.logaddexp(0.0, -x)


def _neglog_derivs(x, link):
    """Value, first and second derivative of ``v(x) = -log F(x)``."""
    if link == PROBIT:
        # Phi(x) = erfcx(-x/sqrt2) exp(-x^2/2) / 2, stable for all x
        ex = erfcx(-_SQRT1_2 * x)
        mills = _SQRT2_PI / ex  # phi(x) / Phi(x)
        return 0.5 * x * x + LOG2 - np.log(ex), -mills, mills * (x + mills)
    sig = expit(x)
    return np.logaddexp(0.0, -x), sig - 1.0, sig * (1.0 - sig)


def _check_theta(theta: Theta, data: Dataset):
    if theta.gamma.size != data.q or theta.eta.size != data.p:
        raise InputError(
            f"theta has q={theta.gamma.size}, p={theta.eta.size}; data has q={data.q}, p={data.p}"
        )
    if not theta.is_valid(data.group_index):
        raise InputError(f"{theta!r} violates the bi-level constraint")


# --------------------------------------------------------------------------
# likelihood and prior
# --------------------------------------------------------------------------

def log_likelihood(beta: CoefVector, theta: Theta, data: Dataset, link=PROBIT) -> float:
    """``sum_i log P(Y_i = y_i | beta, theta)`` with inactive coefficients masked out."""
    _check_theta(theta, data)
    beta.check_dims(data)
    lp = data.X @ (theta.eta * beta.beta_x) + data.U @ (theta.gamma * beta.beta_u)
    if data.r:
        lp = lp + data.Z @ beta.beta_z
    return float(np.sum(log_cdf(data.signs * lp, link)))


def log_prior_theta(theta: Theta, prior: PriorConfig, group_index) -> float:
    """Log prior mass of the indicators; ``-inf`` if the constraint is violated."""
    group_index = np.asarray(group_index)
    q, p = prior.p_gamma.size, prior.p_eta.size
    if theta.gamma.size != q or theta.eta.size != p or group_index.size != p:
        raise InputError("theta / prior / group_index dimensions disagree")
    if not theta.is_valid(group_index):
        return -math.inf
    pg, pe = prior.p_gamma, prior.p_eta
    lp = np.sum(np.where(theta.gamma, np.log(pg), np.log1p(-pg)))
    open_ = theta.gamma[group_index]
    lp += np.sum(np.where(theta.eta, np.log(pe), np.log1p(-pe))[open_])
    return float(lp)


def log_prior_batch(thetas: np.ndarray, prior: PriorConfig, group_index) -> np.ndarray:
    """Vectorised :func:`log_prior_theta` over packed ``(N, q + p)`` indicators."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=bool))
    group_index = np.asarray(group_index)
    q = prior.p_gamma.size
    gamma, eta = thetas[:, :q], thetas[:, q:]
    lg = np.where(gamma, np.log(prior.p_gamma), np.log1p(-prior.p_gamma)).sum(axis=1)
    open_ = gamma[:, group_index]
    le = np.where(eta, np.log(prior.p_eta), np.log1p(-prior.p_eta))
    out = lg + np.where(open_, le, 0.0).sum(axis=1)
    out[np.any(eta & ~open_, axis=1)] = -np.inf
    return out


# --------------------------------------------------------------------------
# h_theta = -log{ L(beta, theta) p(beta) } and its derivatives
# --------------------------------------------------------------------------

def h_value(D, s, beta, sigma2, link):
    """``h`` evaluated on an already-subsetted design ``D`` (n, d)."""
    d = beta.size
    v = -log_cdf(s * (D @ beta), link) if d else np.full(s.size, LOG2)
    return float(v.sum() + 0.5 * beta @ beta / sigma2 + 0.5 * d * (LOG2PI + math.log(sigma2)))


def h_derivs(D, s, beta, sigma2, link):
    """Value, gradient and Hessian of ``h`` on a subsetted design."""
    d = beta.size
    x = s * (D @ beta)
    v, d1, d2 = _neglog_derivs(x, link)
    val = float(v.sum() + 0.5 * beta @ beta / sigma2 + 0.5 * d * (LOG2PI + math.log(sigma2)))
    grad = D.T @ (s * d1) + beta / sigma2
    A = D * np.sqrt(d2)[:, None]
    hess = A.T @ A
    hess[np.diag_indices(d)] += 1.0 / sigma2
    return val, grad, hess


def _subset(beta_active, theta: Theta, data: Dataset, prior: PriorConfig):
    _check_theta(theta, data)
    prior.check_dims(data.q, data.p)
    beta_active = np.atleast_1d(np.asarray(beta_active, dtype=float))
    d = theta.dim(data.r)
    if beta_active.shape != (d,):
        raise InputError(f"beta_active has length {beta_active.size}, expected d_theta={d}")
    return data.design[:, theta.active_mask(data.r)], beta_active


def neg_log_posterior_h(beta_active, theta: Theta, data: Dataset, prior: PriorConfig) -> float:
    """``-log L(beta, theta) - log N(beta_active; 0, sigma2 I)``."""
    D, b = _subset(beta_active, theta, data, prior)
    return h_value(D, data.signs, b, prior.sigma2, prior.link)


def grad_hess_h(beta_active, theta: Theta, data: Dataset, prior: PriorConfig):
    """Analytic gradient (d,) and Hessian (d, d) of ``h`` at ``beta_active``."""
    D, b = _subset(beta_active, theta, data, prior)
    _, g, H = h_derivs(D, data.signs, b, prior.sigma2, prior.link)
    return g, H


def expand_beta(beta_active, theta: Theta, data: Dataset) -> CoefVector:
    """Scatter active coefficients back into a full :class:`CoefVector`."""
    full = np.zeros(data.dim)
    full[theta.active_mask(data.r)] = beta_active
    r, q = data.r, data.q
    return CoefVector(full[r + q:], full[r:r + q], full[:r])
