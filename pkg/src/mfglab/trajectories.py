"""Characteristics of the game: coupled ODEs for position, log-determinant,
and the three cost accumulators, integrated by classical RK4.

For the quadratic kinetic cost the agent velocity is -grad Phi / lam_L, the
log-determinant of the flow Jacobian obeys dl/dt = -lap Phi / lam_L, the
transport cost accumulates |grad Phi|^2 / (2 lam_L), the running cost
accumulates the problem's integrand, and the HJB violation accumulates
|dPhi/dt - H + F| where the density inside F is the Lagrangian estimate
rho0(x) exp(-l).  All five components are advanced jointly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .potential import PotentialParams, eval_batch
from .problems import ProblemSpec, coupling_F_from_log, preference_q

__all__ = [
    "IntegratorConfig",
    "TrajectoryState",
    "PathBundle",
    "IntegrationError",
    "rhs",
    "integrate",
    "integrate_batch",
    "integrate_backward",
    "integrate_backward_batch",
    "log_det_check",
    "straightness_defect",
]


class IntegrationError(RuntimeError):
    """Non-finite derivatives or violated monotonicity along a trajectory."""


@dataclass(frozen=True)
class IntegratorConfig:
    n_t: int
    T: float = 1.0
    lam_L: float = 2.0

    def __post_init__(self):
        if self.n_t < 1 or self.T <= 0 or self.lam_L <= 0:
            raise ValueError("need n_t >= 1, T > 0, lam_L > 0")

    @staticmethod
    def for_problem(spec: ProblemSpec, n_t: int | None = None) -> "IntegratorConfig":
        return IntegratorConfig(n_t=n_t or spec.n_t_default, T=spec.T, lam_L=spec.lam_L)


@dataclass
class TrajectoryState:
    """State of one characteristic: position, log-det, and accumulated costs."""

    z: np.ndarray
    l: float = 0.0
    c_l: float = 0.0
    c_f: float = 0.0
    c_1: float = 0.0
    t: float = 0.0


@dataclass
class PathBundle:
    """Full trajectories of a batch: arrays indexed (time node, sample)."""

    times: np.ndarray  # (n_t + 1,)
    z: np.ndarray  # (n_t + 1, N, d)
    l: np.ndarray  # (n_t + 1, N)
    c_l: np.ndarray
    c_f: np.ndarray
    c_1: np.ndarray


def _f_hat(Z, l, log_rho0_x, spec: ProblemSpec):
    """Running-cost integrand with the origin log-density precomputed."""
    if not spec.has_running_cost:
        return np.zeros(Z.shape[0])
    out = np.zeros(Z.shape[0])
    if spec.lam_E != 0.0:
        out += spec.lam_E * (log_rho0_x - l)
    if spec.lam_P != 0.0:
        out += spec.lam_P * preference_q(spec, Z)
    return out


def _rhs_arrays(params, spec, cfg, t, Z, l, log_rho0_x):
    """Batched right-hand side; returns (dZ, dl, dcL, dcF, dc1)."""
    N = Z.shape[0]
    S = np.concatenate([Z, np.full((N, 1), t)], axis=1)
    _, grad, lap = eval_batch(params, S, need_derivs=True)
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(lap))):
        bad = int(np.flatnonzero(~(np.all(np.isfinite(grad), axis=1) & np.isfinite(lap)))[0])
        raise IntegrationError(f"non-finite potential derivatives at sample {bad}, t={t:.6g}")
    gx = grad[:, : spec.d]
    dt_phi = grad[:, spec.d]
    inv = 1.0 / cfg.lam_L
    kinetic = 0.5 * inv * np.sum(gx * gx, axis=1)
    dZ = -inv * gx
    dl = -inv * lap
    dcF = _f_hat(Z, l, log_rho0_x, spec)
    F = coupling_F_from_log(Z, log_rho0_x - l, spec)
    dc1 = np.abs(dt_phi - kinetic + F)
    return dZ, dl, kinetic, dcF, dc1


def rhs(state: TrajectoryState, params: PotentialParams, spec: ProblemSpec,
        cfg: IntegratorConfig, *, log_rho0_x: float | None = None) -> TrajectoryState:
    """Time derivative of a single trajectory state.

    ``log_rho0_x`` is log rho0 at the trajectory origin; required only when
    the problem has density-dependent running costs.
    """
    Z = np.atleast_2d(np.asarray(state.z, dtype=np.float64))
    if log_rho0_x is None:
        if spec.lam_E != 0.0:
            raise ValueError("log_rho0_x is required for entropy running costs")
        log_rho0_x = 0.0
    dZ, dl, dcL, dcF, dc1 = _rhs_arrays(
        params, spec, cfg, state.t, Z, np.atleast_1d(state.l), np.atleast_1d(log_rho0_x)
    )
    return TrajectoryState(
        z=dZ[0], l=float(dl[0]), c_l=float(dcL[0]), c_f=float(dcF[0]), c_1=float(dc1[0]), t=1.0
    )


def integrate_batch(params, X, spec, cfg, *, full_path=False):
    """RK4 integration of a batch of origins X (N, d) up to t = T.

    Returns (Z, l, c_l, c_f, c_1) endpoint arrays, or a PathBundle when
    ``full_path`` is set.  The transport-cost and HJB accumulators are
    verified to be nondecreasing after every step.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    N = X.shape[0]
    log_rho0_x = spec.rho0.logpdf(X) if spec.has_running_cost else np.zeros(N)
    dt = cfg.T / cfg.n_t
    Z = X.copy()
    l = np.zeros(N)
    cL = np.zeros(N)
    cF = np.zeros(N)
    c1 = np.zeros(N)
    if full_path:
        path = PathBundle(
            times=np.linspace(0.0, cfg.T, cfg.n_t + 1),
            z=np.empty((cfg.n_t + 1, N, spec.d)),
            l=np.empty((cfg.n_t + 1, N)),
            c_l=np.empty((cfg.n_t + 1, N)),
            c_f=np.empty((cfg.n_t + 1, N)),
            c_1=np.empty((cfg.n_t + 1, N)),
        )
        _record(path, 0, Z, l, cL, cF, c1)
    for k in range(cfg.n_t):
        t = k * dt
        k1 = _rhs_arrays(params, spec, cfg, t, Z, l, log_rho0_x)
        k2 = _rhs_arrays(params, spec, cfg, t + 0.5 * dt, Z + 0.5 * dt * k1[0], l + 0.5 * dt * k1[1], log_rho0_x)
        k3 = _rhs_arrays(params, spec, cfg, t + 0.5 * dt, Z + 0.5 * dt * k2[0], l + 0.5 * dt * k2[1], log_rho0_x)
        k4 = _rhs_arrays(params, spec, cfg, t + dt, Z + dt * k3[0], l + dt * k3[1], log_rho0_x)
        sixth = dt / 6.0
        Z = Z + sixth * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        l = l + sixth * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        dcL = sixth * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
        dc1 = sixth * (k1[4] + 2.0 * k2[4] + 2.0 * k3[4] + k4[4])
        if np.any(dcL < 0.0) or np.any(dc1 < 0.0):
            raise IntegrationError("cost accumulator decreased; integrand must be nonnegative")
        cL = cL + dcL
        cF = cF + sixth * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3])
        c1 = c1 + dc1
        if full_path:
            _record(path, k + 1, Z, l, cL, cF, c1)
    if full_path:
        return path
    return Z, l, cL, cF, c1


def _record(path, k, Z, l, cL, cF, c1):
    path.z[k] = Z
    path.l[k] = l
    path.c_l[k] = cL
    path.c_f[k] = cF
    path.c_1[k] = c1


def integrate(x, params, spec, cfg) -> TrajectoryState:
    """Single-origin convenience wrapper around integrate_batch."""
    Z, l, cL, cF, c1 = integrate_batch(params, np.atleast_2d(x), spec, cfg)
    return TrajectoryState(z=Z[0], l=float(l[0]), c_l=float(cL[0]), c_f=float(cF[0]), c_1=float(c1[0]), t=cfg.T)


def integrate_backward_batch(params, Z_T, spec, cfg, *, full_path=False):
    """Integrate dz/dt = -grad Phi / lam_L from t = T back to t = 0.

    Used for invertibility diagnostics; only positions are transported.
    Returns origins (N, d) or, with ``full_path``, positions at all nodes
    ordered from t = T down to t = 0.
    """
    Z = np.atleast_2d(np.asarray(Z_T, dtype=np.float64)).copy()
    N = Z.shape[0]
    zeros = np.zeros(N)
    dt = cfg.T / cfg.n_t
    inv = 1.0 / cfg.lam_L

    def vel(t, Zc):
        S = np.concatenate([Zc, np.full((N, 1), t)], axis=1)
        _, grad, _ = eval_batch(params, S, need_derivs=True)
        if not np.all(np.isfinite(grad)):
            raise IntegrationError(f"non-finite potential gradient at t={t:.6g}")
        return -inv * grad[:, : spec.d]

    nodes = [Z.copy()] if full_path else None
    for k in range(cfg.n_t):
        t = cfg.T - k * dt
        k1 = vel(t, Z)
        k2 = vel(t - 0.5 * dt, Z - 0.5 * dt * k1)
        k3 = vel(t - 0.5 * dt, Z - 0.5 * dt * k2)
        k4 = vel(t - dt, Z - dt * k3)
        Z = Z - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if full_path:
            nodes.append(Z.copy())
    if full_path:
        return np.stack(nodes)
    return Z


def integrate_backward(z_T, params, spec, cfg) -> np.ndarray:
    return integrate_backward_batch(params, np.atleast_2d(z_T), spec, cfg)[0]


def log_det_check(x, params, spec, cfg, *, eps=1e-5):
    """Compare the integrated log-determinant with a finite-difference one.

    Builds the flow Jacobian dz(x, T)/dx by central differences over the
    origin (2d extra integrations) and returns (l, log det FD Jacobian).
    Only sensible for small d; raises when the FD Jacobian is singular or
    has nonpositive determinant, which flags crossing characteristics.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    d = spec.d
    if d > 4:
        raise ValueError("finite-difference Jacobian oracle limited to d <= 4")
    batch = [x]
    for j in range(d):
        e = np.zeros(d)
        e[j] = eps
        batch.append(x + e)
        batch.append(x - e)
    Z, l, *_ = integrate_batch(params, np.stack(batch), spec, cfg)
    jac = np.empty((d, d))
    for j in range(d):
        jac[:, j] = (Z[1 + 2 * j] - Z[2 + 2 * j]) / (2.0 * eps)
    det = float(np.linalg.det(jac))
    if det <= 0.0:
        raise IntegrationError(f"flow Jacobian determinant {det:.3e} <= 0 (characteristics cross?)")
    return float(l[0]), float(np.log(det))


def straightness_defect(path_z: np.ndarray) -> np.ndarray:
    """Per-sample straightness defect of trajectories (0 for exact lines).

    ``path_z`` has shape (n_nodes, N, d).  For each sample, the maximum
    distance of interior nodes from the line through the endpoints, divided
    by the chord length.  Stationary paths get defect zero.
    """
    z0, zT = path_z[0], path_z[-1]
    chord = zT - z0
    length = np.linalg.norm(chord, axis=1)
    safe = np.maximum(length, 1e-300)
    u = chord / safe[:, None]
    rel = path_z[1:-1] - z0[None, :, :]
    proj = np.einsum("knd,nd->kn", rel, u)
    perp = rel - proj[:, :, None] * u[None, :, :]
    dist = np.linalg.norm(perp, axis=2).max(axis=0) if path_z.shape[0] > 2 else np.zeros(z0.shape[0])
    defect = np.where(length > 1e-12, dist / safe, np.where(dist < 1e-12, 0.0, np.inf))
    return defect
