"""Tempering waste-free SMC over bi-level indicator vectors.

Targets ``pi_lambda(theta) ∝ p(theta) L(theta)^lambda`` for an adaptively
chosen sequence ``0 = lambda_0 < ... < lambda_T = 1``. Each stage resamples
``M`` ancestors, moves each one ``P - 1`` times with an independent
Metropolis kernel built on the fitted nested-logistic proposal, keeps all
``N = M P`` chain states, then picks the next exponent so that the ESS of
the incremental weights equals ``ess_ratio * N``.

Randomness is drawn from streams keyed by ``(seed, stage, role, chain)``,
so the result does not depend on how marginal-likelihood evaluations are
spread over worker processes.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .exceptions import InputError, NumericalError, SamplerError
from .marglik import ALA, LA, MarglikEvaluator, make_pool
from .model import Dataset, PriorConfig, Theta, constraint_holds, log_prior_batch
from .proposal import (
    ProposalParams,
    WeightedThetaSample,
    default_kappa,
    fit_proposal,
    log_q_batch,
    sample_from_uniforms,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
MAX_BISECTION_ITER = 60


@dataclass(frozen=True)
class SmcConfig:
    """Sampler settings.

    ``N`` must equal ``M * P``. ``kappa`` overrides the proposal clipping
    constant (default ``1/N`` bounded to ``[1e-6, 1e-2]``).
    """

    N: int = 25_000
    M: int = 125
    P: int = 200
    ess_ratio: float = 0.5
    bisection_tol: float = 1e-8
    seed: int = 0
    marglik_method: str = ALA
    max_stages: int = 1000
    workers: int = 1
    memoize: bool = True
    kappa: float | None = None

    def __post_init__(self):
        if self.M < 1 or self.P < 1 or self.N != self.M * self.P:
            raise InputError(f"need N = M * P with M, P >= 1; got N={self.N}, M={self.M}, P={self.P}")
        if not 0.0 < self.ess_ratio < 1.0:
            raise InputError(f"ess_ratio must lie in (0, 1), got {self.ess_ratio}")
        if self.marglik_method not in (LA, ALA):
            raise InputError(f"marglik_method must be 'la' or 'ala', got {self.marglik_method!r}")
        if self.bisection_tol <= 0 or self.max_stages < 1 or self.workers < 1:
            raise InputError("bisection_tol, max_stages and workers must be positive")

    @classmethod
    def small(cls, **kw):
        """A desk-scale configuration (N = 2,000)."""
        base = dict(N=2000, M=40, P=50)
        base.update(kw)
        return cls(**base)


@dataclass
class ParticleSystem:
    """Current particle sample.

    Attributes
    ----------
    thetas : ndarray of bool (N, q + p)
        Packed ``(gamma, eta)`` rows.
    log_L : ndarray (N,)
        Cached log marginal likelihoods.
    log_weights : ndarray (N,)
        Normalised log weights (``logsumexp == 0``).
    lam : float
        Current tempering exponent.
    stage : int
    log_evidence : float
        Running estimate of ``log sum_theta p(theta) L(theta)``.
    """

    thetas: np.ndarray
    log_L: np.ndarray
    log_weights: np.ndarray
    lam: float = 0.0
    stage: int = 0
    log_evidence: float = 0.0

    @property
    def N(self) -> int:
        return self.log_L.size

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)


@dataclass
class SmcResult:
    gamma_incl: np.ndarray
    eta_incl: np.ndarray
    lambda_schedule: list
    acceptance_rates: list
    log_evidence: float
    wall_times: list
    config: dict
    n_marglik_evals: int = 0
    marglik_time_s: float = 0.0
    final_thetas: np.ndarray | None = field(default=None, repr=False)
    final_weights: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_stages(self) -> int:
        return len(self.lambda_schedule) - 1

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "gamma_incl": [float(v) for v in self.gamma_incl],
            "eta_incl": [float(v) for v in self.eta_incl],
            "lambda_schedule": [float(v) for v in self.lambda_schedule],
            "acceptance_rates": [float(v) for v in self.acceptance_rates],
            "log_evidence": float(self.log_evidence),
            "stage_wall_times_s": [float(v) for v in self.wall_times],
            "n_marglik_evals": int(self.n_marglik_evals),
            "marglik_time_s": float(self.marglik_time_s),
            "config": self.config,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)
            fh.write("\n")


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a given ``(stage, role, chain)`` key."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------

def sample_prior(p_gamma, p_eta, group_index, rng: np.random.Generator, size: int) -> np.ndarray:
    """Hierarchical prior draws; rates in the closed interval [0, 1] are accepted."""
    p_gamma = np.asarray(p_gamma, float)
    p_eta = np.asarray(p_eta, float)
    q = p_gamma.size
    u = rng.random((size, q + p_eta.size))
    gamma = u[:, :q] < p_gamma
    eta = gamma[:, np.asarray(group_index)] & (u[:, q:] < p_eta)
    return np.hstack([gamma, eta])


def init_particles(prior: PriorConfig, config: SmcConfig, rng: np.random.Generator,
                   marglik: MarglikEvaluator, pool=None) -> ParticleSystem:
    """``N`` iid prior draws with uniform weights and ``lambda = 0``."""
    thetas = sample_prior(prior.p_gamma, prior.p_eta, marglik.data.group_index, rng, config.N)
    log_L = marglik.evaluate_batch(thetas, pool)
    return ParticleSystem(thetas, log_L, np.full(config.N, -math.log(config.N)))


def ess(log_weights) -> float:
    """``(sum w)^2 / sum w^2`` computed from unnormalised log weights."""
    lw = np.asarray(log_weights, dtype=float)
    if lw.size == 0 or not np.any(np.isfinite(lw)):
        raise NumericalError("ESS undefined: no finite log-weight")
    return float(np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)))


def adapt_lambda(system: ParticleSystem, config: SmcConfig) -> float:
    """Next exponent: 1 if affordable, else the bisection root of ESS = tau N."""
    lam = system.lam
    if lam >= 1.0:
        raise InputError("lambda is already 1")
    target = config.ess_ratio * system.N
    log_L = system.log_L
    if ess((1.0 - lam) * log_L) >= target:
        return 1.0
    lo, hi = 0.0, 1.0 - lam
    for _ in range(MAX_BISECTION_ITER):
        if hi - lo <= config.bisection_tol:
            break
        mid = 0.5 * (lo + hi)
        if ess(mid * log_L) >= target:
            lo = mid
        else:
            hi = mid
    return lam + 0.5 * (lo + hi)


def reweight(system: ParticleSystem, lambda_next: float) -> ParticleSystem:
    """Multiply weights by ``L^(lambda_next - lambda)`` and renormalise."""
    delta = lambda_next - system.lam
    if not delta > 0:
        raise InputError(f"lambda_next={lambda_next} must exceed current lambda={system.lam}")
    lw = system.log_weights + delta * system.log_L
    log_inc = float(logsumexp(lw))
    return dataclasses.replace(
        system,
        log_weights=lw - log_inc,
        lam=float(lambda_next),
        log_evidence=system.log_evidence + log_inc,
    )


def resample_ancestors(system: ParticleSystem, M: int, rng: np.random.Generator) -> np.ndarray:
    """``M`` iid multinomial draws from the normalised weights."""
    cdf = np.cumsum(system.weights)
    idx = np.searchsorted(cdf, rng.random(M) * cdf[-1], side="right")
    return np.minimum(idx, system.N - 1)


def _mh_accept(log_u, lam, lp_new, lL_new, lq_new, lp_old, lL_old, lq_old):
    with np.errstate(invalid="ignore"):
        log_ratio = (lp_new + lam * lL_new + lq_old) - (lp_old + lam * lL_old + lq_new)
    return (log_u <= log_ratio) & np.isfinite(lp_new)


def metropolis_move(theta: Theta, log_L_theta: float, params: ProposalParams, lambda_prev: float,
                    prior: PriorConfig, marglik: MarglikEvaluator, rng: np.random.Generator):
    """One independent Metropolis step leaving ``pi_{lambda_prev}`` invariant.

    Returns ``(theta', log_L', accepted)``.
    """
    gi = marglik.data.group_index
    row = theta.to_vector()[None, :]
    u = rng.random((1, params.q + params.p + 1))
    prop, lq_new = sample_from_uniforms(params, u[:, :-1])
    lL_new = marglik.evaluate_batch(prop)
    acc = _mh_accept(np.log(u[:, -1]), lambda_prev,
                     log_prior_batch(prop, prior, gi), lL_new, lq_new,
                     log_prior_batch(row, prior, gi), log_L_theta, log_q_batch(row, params))
    if acc[0]:
        return Theta.from_vector(prop[0], params.q), float(lL_new[0]), True
    return theta, float(log_L_theta), False


@dataclass
class StageInfo:
    acceptance_rate: float
    wall_time: float
    params: ProposalParams


def waste_free_stage(system: ParticleSystem, config: SmcConfig, prior: PriorConfig,
                     marglik: MarglikEvaluator, pool=None) -> tuple[ParticleSystem, StageInfo]:
    """Resample ``M`` ancestors, run ``M`` chains of length ``P`` under
    ``pi_lambda``, keep all ``N`` states, adapt the exponent and reweight.
    """
    t0 = time.perf_counter()
    stage = system.stage + 1
    data = marglik.data
    gi, q = data.group_index, data.q
    M, P = config.M, config.P
    width = system.thetas.shape[1]
    lam = system.lam

    anc = resample_ancestors(system, M, stream(config.seed, stage, 0))
    kappa = default_kappa(config.N) if config.kappa is None else config.kappa
    params = fit_proposal(WeightedThetaSample(system.thetas, system.weights), gi,
                          p_eta_fallback=prior.p_eta, kappa=kappa, one_based=False)

    cur = system.thetas[anc].copy()
    cur_L = system.log_L[anc].copy()
    chains = np.empty((M, P, width), dtype=bool)
    chains_L = np.empty((M, P))
    chains[:, 0], chains_L[:, 0] = cur, cur_L
    n_acc = 0
    if P > 1:
        u = np.stack([stream(config.seed, stage, 1, m).random((P - 1, width + 1)) for m in range(M)])
        props, lq_p = sample_from_uniforms(params, u[:, :, :width].reshape(-1, width))
        lL_p = marglik.evaluate_batch(props, pool).reshape(M, P - 1)
        lp_p = log_prior_batch(props, prior, gi).reshape(M, P - 1)
        props = props.reshape(M, P - 1, width)
        lq_p = lq_p.reshape(M, P - 1)
        log_u = np.log(u[:, :, width])
        cur_lp = log_prior_batch(cur, prior, gi)
        cur_lq = log_q_batch(cur, params)
        for s in range(P - 1):
            acc = _mh_accept(log_u[:, s], lam, lp_p[:, s], lL_p[:, s], lq_p[:, s],
                             cur_lp, cur_L, cur_lq)
            cur[acc] = props[acc, s]
            cur_L[acc] = lL_p[acc, s]
            cur_lp[acc] = lp_p[acc, s]
            cur_lq[acc] = lq_p[acc, s]
            chains[:, s + 1], chains_L[:, s + 1] = cur, cur_L
            n_acc += int(acc.sum())
    moved = ParticleSystem(
        chains.reshape(config.N, width), chains_L.reshape(config.N),
        np.full(config.N, -math.log(config.N)), lam, stage, system.log_evidence,
    )
    new = reweight(moved, adapt_lambda(moved, config))
    rate = n_acc / ((P - 1) * M) if P > 1 else 0.0
    return new, StageInfo(rate, time.perf_counter() - t0, params)


def run(data: Dataset, prior: PriorConfig, config: SmcConfig, callback=None,
        evaluator: MarglikEvaluator | None = None) -> SmcResult:
    """Full tempering run from the prior (lambda = 0) to the posterior.

    Particles drawn from the prior are already exact draws of ``pi_0``, so
    the first exponent is chosen directly on them and moves start at the
    first intermediate target.

    Parameters
    ----------
    callback : callable, optional
        Called as ``callback(system)`` after initialisation and after every
        stage.
    evaluator : MarglikEvaluator, optional
        Reuse an evaluator (and its memo) across runs on the same data.
    """
    prior.check_dims(data.q, data.p)
    if evaluator is None:
        evaluator = MarglikEvaluator(data, prior, config.marglik_method, config.memoize)
    evals0, time0 = evaluator.n_evals, evaluator.eval_time
    pool = make_pool(evaluator, config.workers)
    wall, rates = [], []
    try:
        t0 = time.perf_counter()
        system = init_particles(prior, config, stream(config.seed, 0), evaluator, pool)
        system = reweight(system, adapt_lambda(system, config))
        wall.append(time.perf_counter() - t0)
        schedule = [0.0, system.lam]
        if callback is not None:
            callback(system)
        while system.lam < 1.0:
            if system.stage >= config.max_stages:
                raise SamplerError(
                    f"reached max_stages={config.max_stages} with lambda={system.lam:.6g}",
                    {"lambda_schedule": schedule, "acceptance_rates": rates,
                     "stage_wall_times_s": wall},
                )
            system, info = waste_free_stage(system, config, prior, evaluator, pool)
            schedule.append(system.lam)
            rates.append(info.acceptance_rate)
            wall.append(info.wall_time)
            logger.info("stage %d: lambda=%.6g acceptance=%.3f (%.2fs)",
                        system.stage, system.lam, info.acceptance_rate, info.wall_time)
            if callback is not None:
                callback(system)
    finally:
        if pool is not None:
            pool.shutdown()
    W = system.weights
    q = data.q
    return SmcResult(
        gamma_incl=W @ system.thetas[:, :q],
        eta_incl=W @ system.thetas[:, q:],
        lambda_schedule=schedule,
        acceptance_rates=rates,
        log_evidence=system.log_evidence,
        wall_times=wall,
        config=dataclasses.asdict(config),
        n_marglik_evals=evaluator.n_evals - evals0,
        marglik_time_s=evaluator.eval_time - time0,
        final_thetas=system.thetas,
        final_weights=W,
    )


def check_system(system: ParticleSystem, q: int, group_index) -> None:
    """Assert the structural invariants of a particle system."""
    if not np.all(constraint_holds(system.thetas, q, group_index)):
        raise AssertionError("a particle violates the bi-level constraint")
    total = math.fsum(np.exp(system.log_weights))
    if abs(total - 1.0) > 1e-12:
        raise AssertionError(f"weights sum to {total!r}")
