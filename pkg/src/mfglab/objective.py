"""Sampled training/validation objective.

A batch of origins is drawn from rho0 (so every Monte-Carlo quadrature
weight is 1/N), each origin is integrated by the characteristics solver,
and the endpoint quantities are reduced into five buckets: transport cost,
running cost, terminal cost, integrated HJB violation, and terminal HJB
mismatch.  The total is

    J = L + F + G + alpha1 * C1 + alpha2 * C2.

Reductions run in a fixed order so repeated evaluations are bit-identical.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .potential import PotentialParams, eval_batch
from .problems import ProblemSpec
from .trajectories import IntegratorConfig, integrate_batch

__all__ = ["SampleBatch", "LossBreakdown", "draw_batch", "evaluate", "validate", "endpoint_terms"]


@dataclass(frozen=True)
class SampleBatch:
    """Monte-Carlo sample: points, quadrature weights and provenance."""

    points: np.ndarray  # (N, d)
    weights: np.ndarray  # (N,), summing to 1 for mu = rho0
    seed: int
    purpose: str = "train"  # train | validation

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class LossBreakdown:
    """Objective value and its five buckets."""

    total: float
    transport: float  # L
    running: float  # F
    terminal: float  # G
    hjb1: float  # C1, integrated HJB violation (unweighted by alpha)
    hjb2: float  # C2, terminal HJB mismatch (unweighted by alpha)

    @property
    def mfg(self) -> float:
        """Mean-field part L + F + G, the quantity compared across solvers."""
        return self.transport + self.running + self.terminal

    def hjb_weighted(self, alpha1: float, alpha2: float) -> float:
        return alpha1 * self.hjb1 + alpha2 * self.hjb2

    def as_dict(self) -> dict:
        return {
            "J": self.total,
            "L": self.transport,
            "F": self.running,
            "G": self.terminal,
            "C1": self.hjb1,
            "C2": self.hjb2,
        }


def draw_batch(spec: ProblemSpec, n: int, seed: int, purpose: str = "train") -> SampleBatch:
    """Draw n i.i.d. origins from rho0 with uniform weights 1/n."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    points = spec.rho0.sample(n, rng)
    return SampleBatch(points=points, weights=np.full(n, 1.0 / n), seed=int(seed), purpose=purpose)


def endpoint_terms(params, batch, spec, cfg):
    """Per-sample endpoint quantities (c_L, c_F, G_hat, c_1, C_2) as arrays."""
    Z, l, cL, cF, c1 = integrate_batch(params, batch.points, spec, cfg)
    inner = spec.rho0.logpdf(batch.points) - l - spec.rho1.logpdf(Z)
    g_hat = spec.lam_KL * inner
    S_T = np.concatenate([Z, np.full((batch.n, 1), cfg.T)], axis=1)
    phi_T, _, _ = eval_batch(params, S_T, need_derivs=False)
    c2 = np.abs(phi_T - spec.lam_KL * (1.0 + inner))
    return cL, cF, g_hat, c1, c2


def _chunks(n, k):
    bounds = np.linspace(0, n, k + 1).astype(int)
    return [(bounds[i], bounds[i + 1]) for i in range(k) if bounds[i + 1] > bounds[i]]


def evaluate(
    params: PotentialParams,
    batch: SampleBatch,
    spec: ProblemSpec,
    cfg: IntegratorConfig,
    *,
    workers: int = 1,
) -> LossBreakdown:
    """LossBreakdown of the sampled objective on ``batch``.

    With ``workers`` > 1 the batch is split into contiguous chunks that are
    integrated concurrently; bucket reductions always run in chunk order, so
    results match the single-worker path to roundoff of the blocked sum.
    """
    if batch.points.shape[1] != params.d:
        raise ValueError(f"batch dimension {batch.points.shape[1]} != model dimension {params.d}")
    if workers <= 1 or batch.n < 2 * workers:
        terms = endpoint_terms(params, batch, spec, cfg)
        parts = [batch.weights @ arr for arr in terms]
    else:
        spans = _chunks(batch.n, workers)

        def run(span):
            lo, hi = span
            sub = SampleBatch(batch.points[lo:hi], batch.weights[lo:hi], batch.seed, batch.purpose)
            return [sub.weights @ arr for arr in endpoint_terms(params, sub, spec, cfg)]

        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_chunk = list(pool.map(run, spans))
        parts = [float(np.sum([c[i] for c in per_chunk])) for i in range(5)]
    L, F, G, C1, C2 = (float(p) for p in parts)
    total = L + F + G + spec.alpha1 * C1 + spec.alpha2 * C2
    return LossBreakdown(total=total, transport=L, running=F, terminal=G, hjb1=C1, hjb2=C2)


def validate(params, val_batch, spec, cfg, *, workers: int = 1) -> LossBreakdown:
    """Objective on a held-out batch; identical math to ``evaluate``."""
    return evaluate(params, val_batch, spec, cfg, workers=workers)
