"""Training: dense BFGS (or L-BFGS / ADAM) inside a sample-average loop.

The outer loop fixes a Monte-Carlo training batch, minimizes the resulting
deterministic objective with the chosen optimizer, and redraws the batch
every ``resample_every`` iterations; a two-phase schedule first runs on a
small batch and then on the full one.  The inverse-Hessian approximation is
carried across resamples (nearby sample objectives share curvature).

Line searches are backtracked Armijo with c = 1e-4 and halving steps; the
BFGS update is skipped whenever the curvature s.y falls below a small
multiple of |s||y|, which keeps H symmetric positive definite.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .objective import LossBreakdown, draw_batch, evaluate
from .potential import init_params
from .seeding import substream, substream_seed
from .trajectories import IntegratorConfig

__all__ = [
    "TrainSchedule",
    "LineSearchResult",
    "StepInfo",
    "armijo_search",
    "BfgsStepper",
    "LbfgsStepper",
    "AdamStepper",
    "bfgs_minimize",
    "adam_minimize",
    "saa_train",
    "TraceRow",
    "TrainResult",
]

ARMIJO_C = 1e-4
MAX_BACKTRACKS = 25
CURVATURE_FLOOR = 1e-10


@dataclass
class TrainSchedule:
    iters_coarse: int = 500
    iters_fine: int = 500
    n_coarse: int = 1024
    n_fine: int = 2304
    n_val: int = 1024
    resample_every: int = 25
    optimizer: str = "bfgs"  # bfgs | lbfgs | adam
    adam_step: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lbfgs_memory: int = 20
    g_tol: float = 0.0

    def __post_init__(self):
        if min(self.n_coarse, self.n_fine, self.n_val, self.resample_every) < 1:
            raise ValueError("sample counts and the resample period must be >= 1")
        if self.optimizer not in ("bfgs", "lbfgs", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class LineSearchResult:
    ok: bool
    alpha: float
    x_new: np.ndarray
    f_new: float
    direction: np.ndarray
    gTd: float
    n_evals: int
    reset: bool  # direction was replaced by steepest descent


def armijo_search(f, x, direction, g, *, f0=None, c=ARMIJO_C, max_backtracks=MAX_BACKTRACKS) -> LineSearchResult:
    """Backtracked Armijo search along ``direction``.

    Accepts the largest step in {1, 1/2, 1/4, ...} satisfying
    f(x + a d) <= f(x) + c a g.d.  A non-descent direction is replaced by
    -g before searching.  ``ok`` is false when no step within
    ``max_backtracks`` halvings is acceptable.
    """
    direction = np.asarray(direction, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    n_evals = 0
    if f0 is None:
        f0 = f(x)
        n_evals += 1
    gTd = float(g @ direction)
    reset = False
    if gTd >= 0.0:
        direction = -g
        gTd = -float(g @ g)
        reset = True
    alpha = 1.0
    for _ in range(max_backtracks + 1):
        x_new = x + alpha * direction
        f_new = f(x_new)
        n_evals += 1
        if f_new <= f0 + c * alpha * gTd:
            return LineSearchResult(True, alpha, x_new, float(f_new), direction, gTd, n_evals, reset)
        alpha *= 0.5
    return LineSearchResult(False, 0.0, x, float(f0), direction, gTd, n_evals, reset)


@dataclass
class StepInfo:
    f_old: float
    f_new: float
    alpha: float
    grad_norm: float
    gTd: float
    accepted: bool
    converged: bool = False
    line_search_failed: bool = False
    curvature_skipped: bool = False
    direction_reset: bool = False
    n_f_evals: int = 0


class BfgsStepper:
    """Dense inverse-BFGS with retained state across objective swaps."""

    def __init__(self, x0, f0, g0, *, g_tol=0.0, scale_first=True):
        self.x = np.array(x0, dtype=np.float64)
        self.f = float(f0)
        self.g = np.array(g0, dtype=np.float64)
        self.H = np.eye(self.x.size)
        self.g_tol = float(g_tol)
        self.scale_first = scale_first
        self.n_updates = 0
        self.iteration = 0

    def set_objective(self, f0, g0):
        """Install (f, g) of a new sample objective at the current iterate.

        H is kept: nearby sample-average objectives share curvature, and no
        (s, y) pair is ever formed across the swap.
        """
        self.f = float(f0)
        self.g = np.array(g0, dtype=np.float64)

    def direction(self):
        return -(self.H @ self.g)

    def step(self, value_fn, grad_fn) -> StepInfo:
        """One BFGS iteration; ``value_fn`` drives the line search and
        ``grad_fn`` supplies the new gradient at the accepted point."""
        gnorm = float(np.linalg.norm(self.g))
        if gnorm <= self.g_tol:
            return StepInfo(self.f, self.f, 0.0, gnorm, 0.0, accepted=False, converged=True)
        ls = armijo_search(value_fn, self.x, self.direction(), self.g, f0=self.f)
        if not ls.ok:
            # Retry once from steepest descent with fresh curvature.
            self.H = np.eye(self.x.size)
            self.n_updates = 0
            ls = armijo_search(value_fn, self.x, -self.g, self.g, f0=self.f)
            if not ls.ok:
                return StepInfo(self.f, self.f, 0.0, gnorm, ls.gTd, accepted=False, line_search_failed=True, n_f_evals=ls.n_evals)
        g_new = np.asarray(grad_fn(ls.x_new), dtype=np.float64)
        s = ls.x_new - self.x
        y = g_new - self.g
        sTy = float(s @ y)
        skipped = True
        if sTy > CURVATURE_FLOOR * np.linalg.norm(s) * np.linalg.norm(y):
            if self.n_updates == 0 and self.scale_first:
                self.H *= sTy / float(y @ y)
            rho = 1.0 / sTy
            Hy = self.H @ y
            self.H -= rho * (np.outer(s, Hy) + np.outer(Hy, s))
            self.H += rho * (1.0 + rho * float(y @ Hy)) * np.outer(s, s)
            self.n_updates += 1
            skipped = False
        info = StepInfo(
            self.f, ls.f_new, ls.alpha, gnorm, ls.gTd,
            accepted=True, curvature_skipped=skipped, direction_reset=ls.reset,
            n_f_evals=ls.n_evals,
        )
        self.x, self.f, self.g = ls.x_new, ls.f_new, g_new
        self.iteration += 1
        return info


class LbfgsStepper:
    """Limited-memory variant (two-loop recursion); same line search and skip rule."""

    def __init__(self, x0, f0, g0, *, g_tol=0.0, memory=20):
        self.x = np.array(x0, dtype=np.float64)
        self.f = float(f0)
        self.g = np.array(g0, dtype=np.float64)
        self.g_tol = float(g_tol)
        self.memory = memory
        self.pairs = []  # (s, y, rho)
        self.iteration = 0
        self.n_updates = 0

    set_objective = BfgsStepper.set_objective

    def direction(self):
        q = self.g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        if self.pairs:
            s, y, _ = self.pairs[-1]
            q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            q += s * (a - rho * (y @ q))
        return -q

    def step(self, value_fn, grad_fn) -> StepInfo:
        gnorm = float(np.linalg.norm(self.g))
        if gnorm <= self.g_tol:
            return StepInfo(self.f, self.f, 0.0, gnorm, 0.0, accepted=False, converged=True)
        ls = armijo_search(value_fn, self.x, self.direction(), self.g, f0=self.f)
        if not ls.ok:
            self.pairs.clear()
            ls = armijo_search(value_fn, self.x, -self.g, self.g, f0=self.f)
            if not ls.ok:
                return StepInfo(self.f, self.f, 0.0, gnorm, ls.gTd, accepted=False, line_search_failed=True, n_f_evals=ls.n_evals)
        g_new = np.asarray(grad_fn(ls.x_new), dtype=np.float64)
        s = ls.x_new - self.x
        y = g_new - self.g
        sTy = float(s @ y)
        skipped = True
        if sTy > CURVATURE_FLOOR * np.linalg.norm(s) * np.linalg.norm(y):
            self.pairs.append((s, y, 1.0 / sTy))
            if len(self.pairs) > self.memory:
                self.pairs.pop(0)
            self.n_updates += 1
            skipped = False
        info = StepInfo(self.f, ls.f_new, ls.alpha, gnorm, ls.gTd, accepted=True,
                        curvature_skipped=skipped, direction_reset=ls.reset, n_f_evals=ls.n_evals)
        self.x, self.f, self.g = ls.x_new, ls.f_new, g_new
        self.iteration += 1
        return info


class AdamStepper:
    """Standard ADAM with bias correction."""

    def __init__(self, x0, *, step=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.x = np.array(x0, dtype=np.float64)
        self.step_size = step
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(self.x)
        self.v = np.zeros_like(self.x)
        self.t = 0

    def step(self, g) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * (g * g)
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        self.x = self.x - self.step_size * mhat / (np.sqrt(vhat) + self.eps)


def bfgs_minimize(fun, x0, *, max_iter=500, g_tol=1e-8, value_fun=None, callback=None):
    """Minimize ``fun`` (returning (f, grad)) from x0.

    Returns (x, trace, stepper); the trace holds one StepInfo per
    iteration.  ``value_fun`` may supply a cheaper value-only evaluation
    for line searches.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    f0, g0 = fun(x0)
    stepper = BfgsStepper(x0, f0, g0, g_tol=g_tol)
    value_fn = value_fun or (lambda x: fun(x)[0])
    grad_fn = lambda x: fun(x)[1]
    trace = []
    for _ in range(max_iter):
        info = stepper.step(value_fn, grad_fn)
        if info.converged:
            break
        trace.append(info)
        if callback:
            callback(stepper, info)
        if info.line_search_failed:
            break
    return stepper.x, trace, stepper


def adam_minimize(fun, x0, *, n_iter=100, step=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, callback=None):
    """Run ``n_iter`` ADAM iterations on ``fun`` (returning (f, grad))."""
    stepper = AdamStepper(x0, step=step, beta1=beta1, beta2=beta2, eps=eps)
    trace = []
    for _ in range(n_iter):
        f, g = fun(stepper.x)
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0.0:
            trace.append(StepInfo(f, f, 0.0, 0.0, 0.0, accepted=False, converged=True))
            break
        stepper.step(g)
        trace.append(StepInfo(f, f, step, gnorm, 0.0, accepted=True))
        if callback:
            callback(stepper, trace[-1])
    return stepper.x, trace


# ---------------------------------------------------------------------------
# SAA training loop


@dataclass
class TraceRow:
    iteration: int
    phase: str
    val: LossBreakdown
    train_f: float
    grad_norm: float
    alpha: float
    wall_s: float
    batch_index: int


@dataclass
class TrainResult:
    params: object
    trace: list
    val_final: LossBreakdown
    status: str
    checkpoints: dict = field(default_factory=dict)


def saa_train(spec, arch, schedule: TrainSchedule, seed: int, *, n_t=None, workers=1,
              on_iteration=None, on_phase_end=None) -> TrainResult:
    """Train a potential on ``spec`` with the two-phase SAA schedule.

    ``arch`` is a mapping with keys m, depth, h (and optional std_K, std_b).
    All randomness derives from ``seed`` through named substreams:
    "init", ("train-batch", k), and "validation".  Validation is evaluated
    and recorded every iteration on a fixed held-out batch.
    """
    from .autodiff import grad_loss  # local import keeps module load light

    cfg = IntegratorConfig.for_problem(spec, n_t)
    params0 = init_params(
        spec.d, arch["m"], arch["depth"], arch["h"], substream(seed, "init"),
        std_K=arch.get("std_K", 0.01), std_b=arch.get("std_b", 0.1),
    )
    proto = params0
    x = params0.pack()
    val_batch = draw_batch(spec, schedule.n_val, substream_seed(seed, "validation"), "validation")

    batch_holder = {}

    def value_fn(xv):
        return evaluate(proto.unpack(xv), batch_holder["batch"], spec, cfg, workers=workers).total

    def value_and_grad(xv):
        return grad_loss(proto.unpack(xv), batch_holder["batch"], spec, cfg, workers=workers)

    def grad_fn(xv):
        return value_and_grad(xv)[1]

    phases = [("coarse", schedule.iters_coarse, schedule.n_coarse),
              ("fine", schedule.iters_fine, schedule.n_fine)]
    trace = []
    stepper = None
    batch_index = 0
    iteration = 0
    status = "max_iterations"
    failed_on_fresh_batch = False
    for phase, iters, n_samples in phases:
        done = 0
        while done < iters:
            batch_holder["batch"] = draw_batch(
                spec, n_samples, substream_seed(seed, "train-batch", batch_index), "train"
            )
            window = min(schedule.resample_every, iters - done)
            if schedule.optimizer == "adam":
                if stepper is None:
                    stepper = AdamStepper(x, step=schedule.adam_step, beta1=schedule.adam_beta1,
                                          beta2=schedule.adam_beta2, eps=schedule.adam_eps)
            else:
                f0, g0 = value_and_grad(x)
                if stepper is None:
                    cls = BfgsStepper if schedule.optimizer == "bfgs" else LbfgsStepper
                    kw = {} if schedule.optimizer == "bfgs" else {"memory": schedule.lbfgs_memory}
                    stepper = cls(x, f0, g0, g_tol=schedule.g_tol, **kw)
                else:
                    stepper.set_objective(f0, g0)
            fresh_batch = True
            for _ in range(window):
                t0 = time.perf_counter()
                if schedule.optimizer == "adam":
                    f_cur, g_cur = value_and_grad(stepper.x)
                    gnorm = float(np.linalg.norm(g_cur))
                    if gnorm > 0.0:
                        stepper.step(g_cur)
                    info = StepInfo(f_cur, f_cur, schedule.adam_step, gnorm, 0.0, accepted=gnorm > 0.0)
                else:
                    info = stepper.step(value_fn, grad_fn)
                wall = time.perf_counter() - t0
                if info.converged:
                    status = "gradient_tolerance"
                    break
                if info.line_search_failed:
                    if failed_on_fresh_batch and fresh_batch:
                        status = "line_search_failed"
                    else:
                        failed_on_fresh_batch = fresh_batch
                    break
                failed_on_fresh_batch = False
                fresh_batch = False
                x = stepper.x
                iteration += 1
                done += 1
                val_bd = evaluate(proto.unpack(x), val_batch, spec, cfg, workers=workers)
                row = TraceRow(iteration, phase, val_bd, info.f_new, info.grad_norm, info.alpha, wall, batch_index)
                trace.append(row)
                if on_iteration:
                    on_iteration(row)
            batch_index += 1
            if status in ("gradient_tolerance", "line_search_failed"):
                break
        params_phase = proto.unpack(x)
        if on_phase_end:
            on_phase_end(phase, params_phase)
        if status in ("gradient_tolerance", "line_search_failed"):
            break
    if status == "max_iterations":
        status = "completed"
    params = proto.unpack(x)
    val_final = evaluate(params, val_batch, spec, cfg, workers=workers)
    return TrainResult(params=params, trace=trace, val_final=val_final, status=status)
