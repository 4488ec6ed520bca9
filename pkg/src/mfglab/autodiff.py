"""Gradient of the sampled objective with respect to every trainable weight.

The primal program (network forward pass, explicit gradient and Laplacian
recurrences, RK4 steps, cost assembly) is re-expressed in tape operations
and differentiated by one reverse sweep.  Since the explicit recurrences
make the potential's gradient and Laplacian ordinary compositions of smooth
vector primitives, first-order reverse mode over the primal program is all
that is needed.

The taped loss value agrees with ``objective.evaluate`` because both paths
perform the same arithmetic in the same order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .objective import SampleBatch
from .potential import PotentialParams
from .problems import ProblemSpec
from .tape import Tape, Var
from .trajectories import IntegratorConfig

__all__ = ["grad_loss", "NonFiniteLossError", "TapedPotential"]


class NonFiniteLossError(RuntimeError):
    """A loss term overflowed; ``term`` names the offending accumulator."""

    def __init__(self, term: str):
        super().__init__(f"non-finite value in loss term {term}")
        self.term = term


class TapedPotential:
    """Leaves and shared subexpressions for one parameter set on one tape."""

    def __init__(self, tape: Tape, params: PotentialParams):
        self.tape = tape
        self.h = params.h
        self.depth = params.depth
        self.d = params.d
        self.K = [tape.leaf(Ki) for Ki in params.K]
        self.b = [tape.leaf(bi) for bi in params.b]
        self.w = tape.leaf(params.w)
        self.A = tape.leaf(params.A)
        self.c = tape.leaf(params.c)
        self.const = tape.leaf(np.float64(params.const))
        self.Asym = tape.sym(self.A)
        self.K0E = tape.mat_take_cols(self.K[0], self.d)
        self.k0_rowsq = tape.rowsumsq_mat(self.K0E)
        self.a_trace = tape.spatial_trace(self.A, self.d)

    def leaves(self) -> list[Var]:
        """Leaf Vars in the canonical pack layout of PotentialParams."""
        out = []
        for Ki, bi in zip(self.K, self.b):
            out.extend([Ki, bi])
        out.extend([self.w, self.A, self.c, self.const])
        return out

    def _had(self, x: Var, z: Var) -> Var:
        # z is the (m,) output weight before the first reverse update and
        # an (N, m) block afterwards.
        if np.ndim(z.value) == 1:
            return self.tape.mul_rowvec(x, z)
        return self.tape.mul(x, z)

    def _forward(self, S: Var):
        tp = self.tape
        pre = []
        a0 = tp.affine(S, self.K[0], self.b[0])
        pre.append(a0)
        u = tp.softabs(a0)
        hidden = [u]
        for i in range(1, self.depth + 1):
            ai = tp.affine(u, self.K[i], self.b[i])
            pre.append(ai)
            u = tp.add(u, tp.scale(tp.softabs(ai), self.h))
            hidden.append(u)
        return pre, hidden

    def phi(self, S: Var) -> Var:
        """Potential values at the rows of S, shape (N,)."""
        tp = self.tape
        _, hidden = self._forward(S)
        SA = tp.right_mul(S, self.Asym)
        quad = tp.scale(tp.rowdot(S, SA), 0.5)
        lin = tp.matvec(S, self.c)
        return tp.add_scalar(tp.add(tp.add(tp.matvec(hidden[-1], self.w), quad), lin), self.const)

    def grad_lap(self, S: Var):
        """(full gradient, spatial Laplacian) at the rows of S."""
        tp = self.tape
        pre, _ = self._forward(S)
        derivs = [tp.softabs_d1d2(a) for a in pre]
        sig1 = [dv[0] for dv in derivs]
        sig2 = [dv[1] for dv in derivs]
        back = self.w
        backs = [back]  # sensitivity entering layer depth, depth-1, ..., 1
        for i in range(self.depth, 0, -1):
            upd = tp.scale(tp.right_mul(self._had(sig1[i], back), self.K[i]), self.h)
            back = tp.add_rowvec(upd, back) if np.ndim(back.value) == 1 else tp.add(back, upd)
            backs.append(back)
        backs = backs[::-1]  # backs[i] multiplies layer i's second-derivative term
        grad_nn = tp.right_mul(self._had(sig1[0], backs[0]), self.K[0])
        SA = tp.right_mul(S, self.Asym)
        grad = tp.add_rowvec(tp.add(grad_nn, SA), self.c)

        lap = tp.matvec(self._had(sig2[0], backs[0]), self.k0_rowsq)
        J = tp.colscale_mat(sig1[0], self.K0E)
        for i in range(1, self.depth + 1):
            B = tp.matmul3(self.K[i], J)
            ti = tp.rowdot(self._had(sig2[i], backs[i]), tp.colsumsq(B))
            lap = tp.add(lap, tp.scale(ti, self.h))
            if i < self.depth:
                J = tp.add(J, tp.scale(tp.colscale3(sig1[i], B), self.h))
        return grad, tp.add_scalar(lap, self.a_trace)


def _loss_nodes(tape, params, batch, spec, cfg):
    """Tape the full per-batch objective; returns bucket Vars."""
    tp = tape
    model = TapedPotential(tp, params)
    d = spec.d
    n = batch.n
    inv = 1.0 / cfg.lam_L
    crowd = spec.has_running_cost
    log_rho0 = tp.constant(spec.rho0.logpdf(batch.points))

    def stage(Z, l, t):
        S = tp.append_time(Z, t)
        grad, lap = model.grad_lap(S)
        gx = tp.take_cols(grad, d)
        dt_phi = tp.take_col(grad, d)
        kinetic = tp.scale(tp.rowdot(gx, gx), 0.5 * inv)
        dZ = tp.scale(gx, -inv)
        dl = tp.scale(lap, -inv)
        resid = tp.sub(dt_phi, kinetic)
        dcF = None
        if crowd:
            log_rho = tp.sub(log_rho0, l)
            parts_f = []
            parts_c = []
            if spec.lam_E != 0.0:
                parts_f.append(tp.scale(log_rho, spec.lam_E))
                parts_c.append(tp.scale(tp.add_const(log_rho, 1.0), spec.lam_E))
            if spec.lam_P != 0.0:
                q = tp.scale(tp.exp(tp.mixture_logpdf(tp.take_cols(Z, 2), spec.q_gauss)), spec.q_scale)
                parts_f.append(tp.scale(q, spec.lam_P))
                parts_c.append(tp.scale(q, spec.lam_P))
            dcF = parts_f[0] if len(parts_f) == 1 else tp.add(parts_f[0], parts_f[1])
            F = parts_c[0] if len(parts_c) == 1 else tp.add(parts_c[0], parts_c[1])
            resid = tp.add(resid, F)
        dc1 = tp.absolute(resid)
        return dZ, dl, kinetic, dcF, dc1

    def combine(y, k1, k2, k3, k4, w):
        # y + w * (k1 + 2 k2 + 2 k3 + k4), associating like the plain path
        s = tp.add(tp.add(tp.add(k1, tp.scale(k2, 2.0)), tp.scale(k3, 2.0)), k4)
        return tp.add(y, tp.scale(s, w))

    dt = cfg.T / cfg.n_t
    Z = tp.constant(batch.points)
    l = tp.constant(np.zeros(n))
    cL = tp.constant(np.zeros(n))
    cF = tp.constant(np.zeros(n)) if crowd else None
    c1 = tp.constant(np.zeros(n))
    for k in range(cfg.n_t):
        t = k * dt
        s1 = stage(Z, l, t)
        s2 = stage(tp.add(Z, tp.scale(s1[0], 0.5 * dt)), tp.add(l, tp.scale(s1[1], 0.5 * dt)), t + 0.5 * dt)
        s3 = stage(tp.add(Z, tp.scale(s2[0], 0.5 * dt)), tp.add(l, tp.scale(s2[1], 0.5 * dt)), t + 0.5 * dt)
        s4 = stage(tp.add(Z, tp.scale(s3[0], dt)), tp.add(l, tp.scale(s3[1], dt)), t + dt)
        w6 = dt / 6.0
        Z = combine(Z, s1[0], s2[0], s3[0], s4[0], w6)
        l = combine(l, s1[1], s2[1], s3[1], s4[1], w6)
        cL = combine(cL, s1[2], s2[2], s3[2], s4[2], w6)
        if crowd:
            cF = combine(cF, s1[3], s2[3], s3[3], s4[3], w6)
        c1 = combine(c1, s1[4], s2[4], s3[4], s4[4], w6)

    S_T = tp.append_time(Z, cfg.T)
    phi_T = model.phi(S_T)
    log_rho1_T = tp.mixture_logpdf(Z, spec.rho1)
    inner = tp.sub(tp.sub(log_rho0, l), log_rho1_T)  # log rho0(x) - l - log rho1(z_T)
    g_hat = tp.scale(inner, spec.lam_KL)
    g_terminal = tp.scale(tp.add_const(inner, 1.0), spec.lam_KL)
    c2 = tp.absolute(tp.sub(phi_T, g_terminal))

    v = batch.weights
    buckets = {
        "c_L": tp.weighted_sum(cL, v),
        "c_F": tp.weighted_sum(cF, v) if crowd else tp.constant(np.float64(0.0)),
        "G_hat": tp.weighted_sum(g_hat, v),
        "c_1": tp.weighted_sum(c1, v),
        "C_2": tp.weighted_sum(c2, v),
    }
    per_sample = {"c_L": cL, "c_F": cF, "G_hat": g_hat, "c_1": c1, "C_2": c2}
    for name in ("c_L", "c_F", "c_1", "G_hat", "C_2"):
        node = per_sample[name]
        if node is not None and not np.all(np.isfinite(node.value)):
            raise NonFiniteLossError(name)
    total = tp.add(
        tp.add(tp.add(buckets["c_L"], buckets["c_F"]), buckets["G_hat"]),
        tp.add(tp.scale(buckets["c_1"], spec.alpha1), tp.scale(buckets["C_2"], spec.alpha2)),
    )
    return model, total, buckets


def _grad_chunk(params, batch, spec, cfg):
    tape = Tape()
    model, total, _ = _loss_nodes(tape, params, batch, spec, cfg)
    grads = tape.backward(total, model.leaves())
    flat = np.concatenate([np.ravel(g) for g in grads])
    return float(total.value), flat


def grad_loss(
    params: PotentialParams,
    batch: SampleBatch,
    spec: ProblemSpec,
    cfg: IntegratorConfig,
    *,
    workers: int = 1,
):
    """Loss and its gradient as one flat vector in the pack layout.

    Deterministic for fixed inputs: the tape replays in a fixed order and
    the chunked multi-worker path reduces in chunk order.
    """
    if batch.points.shape[1] != params.d:
        raise ValueError("batch dimension does not match the model")
    if workers <= 1 or batch.n < 2 * workers:
        return _grad_chunk(params, batch, spec, cfg)
    bounds = np.linspace(0, batch.n, workers + 1).astype(int)
    spans = [(bounds[i], bounds[i + 1]) for i in range(workers) if bounds[i + 1] > bounds[i]]

    def run(span):
        lo, hi = span
        sub = SampleBatch(batch.points[lo:hi], batch.weights[lo:hi], batch.seed, batch.purpose)
        return _grad_chunk(params, sub, spec, cfg)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(run, spans))
    loss = float(np.sum([r[0] for r in results]))
    grad = np.sum([r[1] for r in results], axis=0)
    return loss, grad
