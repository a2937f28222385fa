"""Brute-force and analytic oracles for the estimator algebra.

These functions verify, on small instances, the exact identities that
make variance reduction work:

* conditional unbiasedness of the shared-perturbation minibatch
  estimator: averaged over *all* size-b minibatches with a common z,
  it equals the fullbatch estimator (an exact reordering identity);
* the control-variate identities: the centered per-sample estimator
  differences u_i sum to the zero vector, and the cross moment
  E[u_i . u_j] over i.i.d. index pairs is exactly zero.

They deliberately share no code with the optimizers; the normal-
equation solver below is the independent optimum reference for the
least-squares experiments.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import prng
from .estimators import (
    Minibatch,
    PerturbationSeed,
    SpsaConfig,
    full_batch,
    materialize,
    sample_minibatch,
    spsa_batch_shared,
    spsa_sample,
)


def ls_normal_equations(problem) -> tuple[np.ndarray, float]:
    """Solve (X^T X) w = X^T y directly; returns (w_ls, optimal mean loss).

    Works on anything exposing .X and .y. Raises numpy's LinAlgError on
    a singular system.
    """
    X, y = problem.X, problem.y
    gram = X.T @ X
    w = np.linalg.solve(gram, X.T @ y)
    r = X @ w - y
    return w, float(np.mean(r * r))


def unbiasedness_check(obj, theta: np.ndarray, z_seed: PerturbationSeed, b: int,
                       cfg: SpsaConfig | None = None) -> float:
    """Exhaustive minibatch-unbiasedness deviation, conditional on one z.

    Enumerates every size-b subset of [0, n), computes the shared
    estimator with the same z for each, and returns

        || mean_over_subsets - fullbatch ||_inf / || fullbatch ||_inf.

    Exact up to float roundoff; n must be small enough to enumerate. The
    identity holds for every perturbation scale, so the default probe
    uses a large one: with a small mu the loss differences cancel
    catastrophically and roundoff swamps the identity being checked.
    """
    if obj.n > 12:
        raise ValueError(f"enumeration oracle needs n <= 12, got n={obj.n}")
    cfg = cfg or SpsaConfig(mu=0.5)
    # estimator calls restore theta only to fp tolerance, so every probe
    # runs on a freshly reset buffer to keep the identity exact
    work = np.array(theta, dtype=np.float64, copy=True)
    acc = np.zeros(obj.d)
    count = 0
    for subset in combinations(range(obj.n), b):
        batch = Minibatch(np.asarray(subset, dtype=np.int64))
        work[:] = theta
        acc += materialize(spsa_batch_shared(obj, work, batch, z_seed, cfg))
        count += 1
    acc /= count
    work[:] = theta
    full = materialize(spsa_batch_shared(obj, work, full_batch(obj.n), z_seed, cfg))
    denom = np.max(np.abs(full))
    if denom == 0.0:
        return float(np.max(np.abs(acc)))
    return float(np.max(np.abs(acc - full)) / denom)


@dataclass
class ControlVariateReport:
    sum_inf_norm: float        # ||sum_i u_i||_inf, exactly ~0
    max_u_inf_norm: float      # max_i ||u_i||_inf, for relative comparison
    cross_moments: list[float]  # |mean over M sampled i.i.d. pairs of u_i . u_j|
    population_cross_moment: float  # ||mean_i u_i||^2, the exact closed form


def control_variate_check(obj, theta: np.ndarray, theta_prime: np.ndarray,
                          z_seed: PerturbationSeed,
                          pair_counts: tuple[int, ...] = (1000,),
                          pair_seed: int = 0,
                          cfg: SpsaConfig | None = None) -> ControlVariateReport:
    """Check the control-variate identities with a fixed perturbation z.

    u_i = est_i(theta) - est_i(theta') - (est_full(theta) - est_full(theta'))
    where every estimator shares z. Returns the exact zero-sum norm and,
    for each M in pair_counts, the Monte Carlo cross-moment magnitude
    over M i.i.d. uniformly sampled (with replacement) index pairs;
    those magnitudes shrink like 1/sqrt(M) toward the exact population
    value ||mean_i u_i||^2 = 0. As with the unbiasedness check, the
    identities are perturbation-scale independent and the default probe
    uses a large mu to stay clear of cancellation roundoff.
    """
    if obj.n > 64:
        raise ValueError(f"control-variate oracle needs n <= 64, got n={obj.n}")
    cfg = cfg or SpsaConfig(mu=0.5)
    work_a = np.array(theta, dtype=np.float64, copy=True)
    work_b = np.array(theta_prime, dtype=np.float64, copy=True)
    u = np.empty((obj.n, obj.d))
    for i in range(obj.n):
        work_a[:] = theta
        work_b[:] = theta_prime
        at_theta = materialize(spsa_sample(obj, work_a, i, z_seed, cfg))
        at_prime = materialize(spsa_sample(obj, work_b, i, z_seed, cfg))
        u[i] = at_theta - at_prime
    work_a[:] = theta
    work_b[:] = theta_prime
    full_diff = (
        materialize(spsa_batch_shared(obj, work_a, full_batch(obj.n), z_seed, cfg))
        - materialize(spsa_batch_shared(obj, work_b, full_batch(obj.n), z_seed, cfg))
    )
    u -= full_diff
    total = u.sum(axis=0)
    mean_u = total / obj.n
    moments = []
    ctr = 0
    for m in pair_counts:
        acc = 0.0
        for _ in range(m):
            i = prng.randint_below(pair_seed, ctr, obj.n)
            j = prng.randint_below(pair_seed, ctr + 1, obj.n)
            ctr += 2
            acc += float(u[i] @ u[j])
        moments.append(abs(acc / m))
    return ControlVariateReport(
        sum_inf_norm=float(np.max(np.abs(total))),
        max_u_inf_norm=float(np.max(np.abs(u))),
        cross_moments=moments,
        population_cross_moment=float(mean_u @ mean_u),
    )


@dataclass
class VarianceProbeReport:
    plain_trace_var: float
    blended_trace_var: float
    plain_se: float
    blended_se: float

    def blended_smaller_by_sigmas(self) -> float:
        """How many combined standard errors separate the two variances."""
        spread = np.hypot(self.plain_se, self.blended_se)
        if spread == 0.0:
            return float("inf")
        return (self.plain_trace_var - self.blended_trace_var) / spread


def estimator_variance_probe(obj, theta: np.ndarray, anchor_theta: np.ndarray,
                             b: int, num_seeds: int, master_seed: int = 0,
                             cfg: SpsaConfig | None = None) -> VarianceProbeReport:
    """Monte Carlo trace-of-covariance of plain vs blended directions.

    Per draw: a fresh minibatch, a fresh perturbation, and a fresh
    fullbatch anchor estimate at ``anchor_theta``. The plain direction
    is the shared minibatch estimator at theta; the blended one is the
    variance-reduced combination est(theta) - est(anchor) + anchor_full.
    """
    if num_seeds < 100:
        raise ValueError("variance probe needs at least 100 seeds")
    cfg = cfg or SpsaConfig()
    work_a = np.array(theta, dtype=np.float64, copy=True)
    work_b = np.array(anchor_theta, dtype=np.float64, copy=True)
    plain = np.empty((num_seeds, obj.d))
    blended = np.empty((num_seeds, obj.d))
    for s in range(num_seeds):
        batch = sample_minibatch(obj.n, b, prng.fold(prng.fold(master_seed, 1), s))
        z = PerturbationSeed(prng.fold(prng.fold(master_seed, 2), s))
        zg = PerturbationSeed(prng.fold(prng.fold(master_seed, 3), s))
        work_a[:] = theta
        work_b[:] = anchor_theta
        est_theta = spsa_batch_shared(obj, work_a, batch, z, cfg)
        plain[s] = materialize(est_theta)
        est_anchor = spsa_batch_shared(obj, work_b, batch, z, cfg)
        work_b[:] = anchor_theta
        est_full = spsa_batch_shared(obj, work_b, full_batch(obj.n), zg, cfg)
        blended[s] = plain[s] - materialize(est_anchor) + materialize(est_full)

    def trace_var(v):
        centered = v - v.mean(axis=0)
        per_draw = np.sum(centered * centered, axis=1)
        return float(per_draw.mean()), float(per_draw.std(ddof=1) / np.sqrt(num_seeds))

    pv, pse = trace_var(plain)
    bv, bse = trace_var(blended)
    return VarianceProbeReport(pv, bv, pse, bse)


def finite_difference_gradient(func, theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one axis at a time."""
    grad = np.empty(theta.shape[0])
    probe = theta.copy()
    for j in range(theta.shape[0]):
        orig = probe[j]
        probe[j] = orig + step
        f_plus = func(probe)
        probe[j] = orig - step
        f_minus = func(probe)
        probe[j] = orig
        grad[j] = (f_plus - f_minus) / (2.0 * step)
    return grad
