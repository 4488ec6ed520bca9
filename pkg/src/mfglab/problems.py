"""Benchmark problem definitions: dynamical optimal transport and crowd motion.

Both problems transport an initial Gaussian-mixture density rho0 toward a
target rho1 over the unit horizon, with quadratic kinetic cost scaled by
lam_L and a relaxed terminal constraint: the terminal cost is lam_KL times
the KL divergence of the transported density from rho1.  The crowd-motion
variant adds running costs, an entropy term weighted by lam_E that
penalizes congestion plus a preference field Q (an obstacle at the center
of the domain) weighted by lam_P.

All densities are Gaussian mixtures with diagonal covariance, so log
densities are analytic and never produced by log(pdf); this keeps the far
tails finite in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "GaussianMixture",
    "ProblemSpec",
    "ot_instance",
    "crowd_instance",
    "preference_q",
    "running_cost_F_hat",
    "coupling_F",
    "coupling_F_from_log",
    "terminal_cost_G_hat",
    "terminal_coupling_G",
    "gaussian_kl",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


class DomainError(ValueError):
    """Argument outside the mathematical domain (e.g. nonpositive density)."""


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of diagonal-covariance Gaussians.

    weights: (k,), nonnegative, summing to one.
    means: (k, d).
    variances: (k, d) diagonal entries of each covariance.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if mu.shape != var.shape or w.shape != (mu.shape[0],):
            raise DomainError("inconsistent mixture shapes")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DomainError("mixture weights must be nonnegative and sum to 1")
        if np.any(var <= 0):
            raise DomainError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @staticmethod
    def isotropic(mean, var: float) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        return GaussianMixture(
            weights=np.array([1.0]),
            means=mean[None, :],
            variances=np.full((1, mean.size), float(var)),
        )

    def _component_logpdfs(self, X):
        # (N, k): log w_j + log N(x; mu_j, D_j)
        X = np.atleast_2d(X)
        diff = X[:, None, :] - self.means[None, :, :]
        quad = np.sum(diff * diff / self.variances[None, :, :], axis=2)
        lognorm = 0.5 * (self.d * _LOG_2PI + np.sum(np.log(self.variances), axis=1))
        return np.log(self.weights)[None, :] - 0.5 * quad - lognorm[None, :]

    def logpdf(self, X) -> np.ndarray:
        """Stable log-density at the rows of X, shape (N,)."""
        comp = self._component_logpdfs(X)
        top = np.max(comp, axis=1)
        return top + np.log(np.sum(np.exp(comp - top[:, None]), axis=1))

    def logpdf_and_grad(self, X):
        """(logpdf, d logpdf / dx) with the gradient computed analytically."""
        X = np.atleast_2d(X)
        comp = self._component_logpdfs(X)
        top = np.max(comp, axis=1)
        expc = np.exp(comp - top[:, None])
        norm = np.sum(expc, axis=1)
        resp = expc / norm[:, None]
        diff = X[:, None, :] - self.means[None, :, :]
        grad = -np.sum(resp[:, :, None] * diff / self.variances[None, :, :], axis=1)
        return top + np.log(norm), grad

    def pdf(self, X) -> np.ndarray:
        return np.exp(self.logpdf(X))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.choice(len(self.weights), size=n, p=self.weights)
        noise = rng.standard_normal((n, self.d))
        return self.means[idx] + noise * np.sqrt(self.variances[idx])


@dataclass(frozen=True)
class ProblemSpec:
    """One potential mean field game instance.

    For kind "ot" the running costs vanish (lam_E = lam_P = 0) and the
    interaction term inside the HJB residual is identically zero.
    """

    kind: str
    d: int
    rho0: GaussianMixture
    rho1: GaussianMixture
    lam_L: float
    lam_KL: float
    lam_E: float = 0.0
    lam_P: float = 0.0
    alpha1: float = 0.0
    alpha2: float = 0.0
    T: float = 1.0
    n_t_default: int = 2
    q_gauss: Optional[GaussianMixture] = None
    q_scale: float = 0.0

    def __post_init__(self):
        if self.kind not in ("ot", "crowd"):
            raise DomainError(f"unknown problem kind {self.kind!r}")
        for name in ("lam_L", "lam_KL", "lam_E", "lam_P", "alpha1", "alpha2"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative")
        if self.lam_L <= 0 or self.T <= 0:
            raise DomainError("lam_L and T must be positive")
        if self.kind == "ot" and (self.lam_E != 0 or self.lam_P != 0):
            raise DomainError("optimal transport has no running costs")

    @property
    def has_running_cost(self) -> bool:
        return self.lam_E != 0.0 or self.lam_P != 0.0

    def replace(self, **kw) -> "ProblemSpec":
        from dataclasses import replace

        return replace(self, **kw)


def preference_q(spec: ProblemSpec, Z) -> np.ndarray:
    """Preference field at the rows of Z; depends only on the first two coordinates."""
    if spec.q_gauss is None:
        return np.zeros(np.atleast_2d(Z).shape[0])
    Z = np.atleast_2d(Z)
    return spec.q_scale * np.exp(spec.q_gauss.logpdf(Z[:, :2]))


def ot_instance(d: int, *, lam_L=2.0, lam_KL=5.0, alpha1=3.0, alpha2=3.0) -> ProblemSpec:
    """Dynamical optimal transport: eight-mode ring mixture to a centered Gaussian.

    The mixture means sit on the radius-4 circle in the first two
    coordinates; all covariances are 0.3 I.
    """
    if d < 2:
        raise DomainError("need d >= 2 for the ring of mixture means")
    j = np.arange(1, 9)
    means = np.zeros((8, d))
    means[:, 0] = 4.0 * np.cos(2.0 * np.pi * j / 8.0)
    means[:, 1] = 4.0 * np.sin(2.0 * np.pi * j / 8.0)
    rho0 = GaussianMixture(np.full(8, 1.0 / 8.0), means, np.full((8, d), 0.3))
    rho1 = GaussianMixture.isotropic(np.zeros(d), 0.3)
    return ProblemSpec(
        kind="ot",
        d=d,
        rho0=rho0,
        rho1=rho1,
        lam_L=lam_L,
        lam_KL=lam_KL,
        alpha1=alpha1,
        alpha2=alpha2,
        n_t_default=2,
    )


def crowd_instance(
    d: int, *, lam_L=2.0, lam_KL=5.0, lam_E=0.01, lam_P=1.0, alpha1=10.0, alpha2=1.0
) -> ProblemSpec:
    """Crowd motion: shifted Gaussians with an obstacle at the origin.

    rho0 is centered at +3 e2, rho1 at -3 e2; the preference field is
    50 times a Gaussian bump with covariance diag(1, 0.5) evaluated on the
    first two coordinates, so the instance is well defined for every d.
    """
    if d < 2:
        raise DomainError("need d >= 2 for the planar preference field")
    mean0 = np.zeros(d)
    mean0[1] = 3.0
    rho0 = GaussianMixture.isotropic(mean0, 0.3)
    rho1 = GaussianMixture.isotropic(-mean0, 0.3)
    q_gauss = GaussianMixture(
        weights=np.array([1.0]),
        means=np.zeros((1, 2)),
        variances=np.array([[1.0, 0.5]]),
    )
    return ProblemSpec(
        kind="crowd",
        d=d,
        rho0=rho0,
        rho1=rho1,
        lam_L=lam_L,
        lam_KL=lam_KL,
        lam_E=lam_E,
        lam_P=lam_P,
        alpha1=alpha1,
        alpha2=alpha2,
        n_t_default=4,
        q_gauss=q_gauss,
        q_scale=50.0,
    )


def running_cost_F_hat(Z, l, X_origin, spec: ProblemSpec) -> np.ndarray:
    """Running-cost integrand along trajectories.

    Z are current positions, l the accumulated log-determinants and
    X_origin the trajectory origins (needed for the analytic log rho0).
    Zero for optimal transport; for crowd motion this is
    lam_E (log rho0(x) - l) + lam_P Q(z), the entropy written in terms of
    the transported density plus the preference cost.
    """
    Z = np.atleast_2d(Z)
    if not spec.has_running_cost:
        return np.zeros(Z.shape[0])
    l = np.atleast_1d(np.asarray(l, dtype=np.float64))
    out = np.zeros(Z.shape[0])
    if spec.lam_E != 0.0:
        out += spec.lam_E * (spec.rho0.logpdf(np.atleast_2d(X_origin)) - l)
    if spec.lam_P != 0.0:
        out += spec.lam_P * preference_q(spec, Z)
    return out


def coupling_F_from_log(Z, log_rho, spec: ProblemSpec) -> np.ndarray:
    """Interaction term of the HJB residual, taking log rho directly."""
    Z = np.atleast_2d(Z)
    if not spec.has_running_cost:
        return np.zeros(Z.shape[0])
    log_rho = np.atleast_1d(np.asarray(log_rho, dtype=np.float64))
    out = np.zeros(Z.shape[0])
    if spec.lam_E != 0.0:
        out += spec.lam_E * (log_rho + 1.0)
    if spec.lam_P != 0.0:
        out += spec.lam_P * preference_q(spec, Z)
    return out


def coupling_F(Z, rho_at_z, spec: ProblemSpec) -> np.ndarray:
    """Interaction term lam_E (log rho + 1) + lam_P Q(z); zero for transport."""
    rho_at_z = np.atleast_1d(np.asarray(rho_at_z, dtype=np.float64))
    if spec.has_running_cost and np.any(rho_at_z <= 0):
        raise DomainError("density must be positive inside the coupling term")
    with np.errstate(divide="ignore"):
        log_rho = np.log(rho_at_z)
    return coupling_F_from_log(Z, log_rho, spec)


def terminal_cost_G_hat(X_origin, Z_T, l_T, spec: ProblemSpec) -> np.ndarray:
    """Terminal KL integrand lam_KL (log rho0(x) - l(T) - log rho1(z(T)))."""
    X_origin = np.atleast_2d(X_origin)
    Z_T = np.atleast_2d(Z_T)
    l_T = np.atleast_1d(np.asarray(l_T, dtype=np.float64))
    return spec.lam_KL * (spec.rho0.logpdf(X_origin) - l_T - spec.rho1.logpdf(Z_T))


def terminal_coupling_G(Z_T, rho_at_T, spec: ProblemSpec) -> np.ndarray:
    """Terminal condition value lam_KL (1 + log rho(z,T) - log rho1(z)).

    The terminal HJB mismatch compares Phi(z, T) against this quantity,
    with rho(z, T) supplied as rho0(x) exp(-l(T)).
    """
    Z_T = np.atleast_2d(Z_T)
    rho_at_T = np.atleast_1d(np.asarray(rho_at_T, dtype=np.float64))
    if np.any(rho_at_T <= 0):
        raise DomainError("transported density must be positive at the horizon")
    return spec.lam_KL * (1.0 + np.log(rho_at_T) - spec.rho1.logpdf(Z_T))


def gaussian_kl(p: GaussianMixture, q: GaussianMixture) -> float:
    """Closed-form KL(p || q) for single diagonal Gaussians (test oracle)."""
    if len(p.weights) != 1 or len(q.weights) != 1:
        raise DomainError("closed form only for single components")
    vp, vq = p.variances[0], q.variances[0]
    dm = p.means[0] - q.means[0]
    return float(0.5 * np.sum(np.log(vq / vp) + (vp + dm * dm) / vq - 1.0))
