"""Space-time potential model: a small residual network plus a quadratic form.

The model maps s = (x, t) in R^{d+1} to a scalar

    Phi(s) = w . N(s) + 0.5 s.(A + A^T)s + c.s + const

where N is a ResNet of width m and depth M.  Besides the value, this module
evaluates the exact gradient in (x, t) by reverse sweeps through the layers
and the exact spatial Laplacian by a trace recurrence that carries the
m x d Jacobian of the hidden features.  No stochastic trace estimation and
no generic autodiff is involved; the Laplacian costs O(m^2 d) per layer.

All arrays are float64.  Evaluations are pure functions of (s, params).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PotentialParams",
    "EvalWorkspace",
    "activation",
    "activation_d1",
    "activation_d2",
    "init_params",
    "param_count",
    "forward",
    "gradient",
    "laplacian",
    "eval_batch",
    "save_checkpoint",
    "load_checkpoint",
]


def activation(x):
    """Smoothed absolute value log(exp(x) + exp(-x)).

    Evaluated as |x| + log1p(exp(-2|x|)) (one logaddexp pass), which is
    overflow-safe for large |x|.
    """
    return np.logaddexp(x, -x)


def activation_d1(x):
    return np.tanh(x)


def activation_d2(x):
    t = np.tanh(x)
    return 1.0 - t * t


class ConfigurationError(ValueError):
    """Inconsistent shapes or invalid hyperparameters."""


@dataclass
class PotentialParams:
    """All trainable weights of the potential model.

    K[0] is m x (d+1), K[1..M] are m x m, b[i] are length-m layer biases,
    w is the length-m output weight, A the (d+1) x (d+1) quadratic matrix
    (stored unconstrained, applied symmetrized), c the (d+1) linear term
    and const the scalar offset.  h is the fixed residual step size.
    """

    K: list
    b: list
    w: np.ndarray
    A: np.ndarray
    c: np.ndarray
    const: float
    h: float

    @property
    def d(self) -> int:
        return self.K[0].shape[1] - 1

    @property
    def m(self) -> int:
        return self.K[0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.K) - 1

    @property
    def n_params(self) -> int:
        return param_count(self.d, self.m, self.depth)

    def validate(self):
        d, m, M = self.d, self.m, self.depth
        if m < 1 or M < 0 or d < 1:
            raise ConfigurationError(f"invalid sizes d={d}, m={m}, M={M}")
        if not self.h > 0:
            raise ConfigurationError("h must be positive")
        if len(self.b) != M + 1:
            raise ConfigurationError("need one bias vector per layer")
        for i, Ki in enumerate(self.K[1:], start=1):
            if Ki.shape != (m, m):
                raise ConfigurationError(f"K{i} must be {m}x{m}, got {Ki.shape}")
        for i, bi in enumerate(self.b):
            if bi.shape != (m,):
                raise ConfigurationError(f"b{i} must have length {m}")
        if self.w.shape != (m,):
            raise ConfigurationError("w must have length m")
        if self.A.shape != (d + 1, d + 1):
            raise ConfigurationError("A must be (d+1)x(d+1)")
        if self.c.shape != (d + 1,):
            raise ConfigurationError("c must have length d+1")
        for name, arr in self.named_arrays():
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"non-finite entries in {name}")
        return self

    def named_arrays(self):
        """Canonical (name, array) layout: K0, b0, ..., KM, bM, w, A, c, const."""
        out = []
        for i, (Ki, bi) in enumerate(zip(self.K, self.b)):
            out.append((f"K{i}", Ki))
            out.append((f"b{i}", bi))
        out.append(("w", self.w))
        out.append(("A", self.A))
        out.append(("c", self.c))
        out.append(("const", np.asarray([self.const])))
        return out

    def pack(self) -> np.ndarray:
        """Flatten all weights into one vector in the canonical layout."""
        return np.concatenate([arr.ravel() for _, arr in self.named_arrays()])

    def unpack(self, vec: np.ndarray) -> "PotentialParams":
        """New parameter set with the same shapes, values taken from ``vec``."""
        if vec.shape != (self.n_params,):
            raise ConfigurationError(f"expected {self.n_params} entries, got {vec.shape}")
        pos = 0
        K, b = [], []
        for Ki, bi in zip(self.K, self.b):
            K.append(vec[pos : pos + Ki.size].reshape(Ki.shape).copy())
            pos += Ki.size
            b.append(vec[pos : pos + bi.size].copy())
            pos += bi.size
        m = self.m
        w = vec[pos : pos + m].copy()
        pos += m
        p = self.d + 1
        A = vec[pos : pos + p * p].reshape(p, p).copy()
        pos += p * p
        c = vec[pos : pos + p].copy()
        pos += p
        const = float(vec[pos])
        return PotentialParams(K=K, b=b, w=w, A=A, c=c, const=const, h=self.h)

    def copy(self) -> "PotentialParams":
        return self.unpack(self.pack())


def param_count(d: int, m: int, M: int) -> int:
    """Number of trainable scalars for given dimension, width and depth."""
    return m * (d + 1) + M * m * m + (M + 1) * m + m + (d + 1) ** 2 + (d + 1) + 1


def init_params(d, m, M, h, rng, *, std_K=0.01, std_b=0.1) -> PotentialParams:
    """Fresh parameters: layer matrices N(0, std_K^2), layer biases N(0, std_b^2),
    quadratic part zeroed, output weights all ones."""
    if d < 1 or m < 1 or M < 0 or h <= 0:
        raise ConfigurationError(f"invalid architecture d={d}, m={m}, M={M}, h={h}")
    K = [rng.normal(0.0, std_K, size=(m, d + 1))]
    for _ in range(M):
        K.append(rng.normal(0.0, std_K, size=(m, m)))
    b = [rng.normal(0.0, std_b, size=(m,)) for _ in range(M + 1)]
    params = PotentialParams(
        K=K,
        b=b,
        w=np.ones(m),
        A=np.zeros((d + 1, d + 1)),
        c=np.zeros(d + 1),
        const=0.0,
        h=float(h),
    )
    return params.validate()


def eval_batch(params: PotentialParams, S: np.ndarray, *, need_derivs: bool = True):
    """Evaluate Phi and, on request, its full gradient and spatial Laplacian.

    S has shape (N, d+1), rows are (x, t).  Returns (phi, grad, lap) where
    grad is (N, d+1) with the time derivative in the last column, and lap
    is the trace of the spatial Hessian; grad and lap are None when
    ``need_derivs`` is false.
    """
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    d, m, M, h = params.d, params.m, params.depth, params.h
    if S.shape[1] != d + 1:
        raise ConfigurationError(f"points must have {d + 1} columns, got {S.shape[1]}")

    K, bvecs, w = params.K, params.b, params.w
    pre = []
    hidden = []
    a0 = S @ K[0].T + bvecs[0]
    pre.append(a0)
    hidden.append(activation(a0))
    for i in range(1, M + 1):
        ai = hidden[-1] @ K[i].T + bvecs[i]
        pre.append(ai)
        hidden.append(hidden[-1] + h * activation(ai))

    Asym = params.A + params.A.T
    SA = S @ Asym
    phi = hidden[-1] @ w + 0.5 * np.sum(S * SA, axis=1) + S @ params.c + params.const
    if not need_derivs:
        return phi, None, None

    # Reverse sweep for the gradient: back[i] is the sensitivity of w.N to
    # the output of layer i-1 (back[M+1] = w).  One tanh per layer feeds
    # both derivative factors.
    back = [None] * (M + 2)
    back[M + 1] = np.broadcast_to(w, (S.shape[0], m))
    sig1 = [np.tanh(a) for a in pre]
    sig2 = [1.0 - t * t for t in sig1]
    for i in range(M, 0, -1):
        back[i] = back[i + 1] + h * ((sig1[i] * back[i + 1]) @ K[i])
    grad = (sig1[0] * back[1]) @ K[0] + SA + params.c

    # Trace recurrence for the spatial Laplacian; J carries the Jacobian of
    # each hidden layer restricted to the spatial columns, stored (m, d, N)
    # so layer products collapse into single GEMMs over the batch.
    K0E = K[0][:, :d]
    lap = (sig2[0] * back[1]) @ np.sum(K0E * K0E, axis=1)
    J = sig1[0].T[:, None, :] * K0E[:, :, None]
    for i in range(1, M + 1):
        B = (K[i] @ J.reshape(m, -1)).reshape(J.shape)
        coeff = sig2[i] * back[i + 1]  # (N, m)
        lap = lap + h * np.sum(coeff.T * np.sum(B * B, axis=1), axis=0)
        if i < M:
            J = J + h * sig1[i].T[:, None, :] * B
    lap = lap + 2.0 * np.trace(params.A[:d, :d])
    return phi, grad, lap


@dataclass
class EvalWorkspace:
    """Cache for single-point evaluations.

    Contents are only valid for the (s, params) of the most recent call;
    every operation recomputes when the key does not match, so reuse is an
    optimization and never a semantic dependency.
    """

    key: tuple = None
    phi: float = 0.0
    grad: np.ndarray = None
    lap: float = 0.0
    _filled: bool = field(default=False, repr=False)

    def _refresh(self, s, params):
        key = (id(params), s.tobytes())
        if not self._filled or key != self.key:
            phi, grad, lap = eval_batch(params, s[None, :], need_derivs=True)
            self.key = key
            self.phi = float(phi[0])
            self.grad = grad[0]
            self.lap = float(lap[0])
            self._filled = True


def _as_point(s, params):
    s = np.asarray(s, dtype=np.float64).ravel()
    if s.shape != (params.d + 1,):
        raise ConfigurationError(f"point must have {params.d + 1} entries, got {s.shape}")
    return s


def forward(s, params: PotentialParams, ws: EvalWorkspace | None = None) -> float:
    """Phi(s) for a single point s = (x, t)."""
    s = _as_point(s, params)
    if ws is None:
        phi, _, _ = eval_batch(params, s[None, :], need_derivs=False)
        return float(phi[0])
    ws._refresh(s, params)
    return ws.phi


def gradient(s, params: PotentialParams, ws: EvalWorkspace | None = None) -> np.ndarray:
    """Full gradient of Phi at s; entries 0..d-1 are spatial, entry d is time."""
    s = _as_point(s, params)
    if ws is None:
        ws = EvalWorkspace()
    ws._refresh(s, params)
    return ws.grad.copy()


def laplacian(s, params: PotentialParams, ws: EvalWorkspace | None = None) -> float:
    """Exact spatial Laplacian of Phi at s (trace of the spatial Hessian block)."""
    s = _as_point(s, params)
    if ws is None:
        ws = EvalWorkspace()
    ws._refresh(s, params)
    return ws.lap


# ---------------------------------------------------------------------------
# Checkpoint format: plain text, one named array per block.  Header lines
# carry provenance; numbers are printed with 17 significant digits so that
# a round trip reproduces the exact float64 bits.

_FMT = "%.17e"


def save_checkpoint(path, params: PotentialParams, *, header: dict | None = None, meta: dict | None = None):
    """Write parameters (and optional run metadata) to a text checkpoint."""
    buf = io.StringIO()
    items = " ".join(f"{k}={v}" for k, v in (header or {}).items())
    buf.write(f"# mfglab-checkpoint v1 {items}\n".rstrip() + "\n")
    buf.write(f"d {params.d}\nm {params.m}\ndepth {params.depth}\n")
    buf.write("h " + _FMT % params.h + "\n")
    for key, val in (meta or {}).items():
        buf.write(f"meta {key} {val}\n")
    for name, arr in params.named_arrays():
        arr = np.atleast_2d(arr)
        buf.write(f"array {name} {arr.shape[0]} {arr.shape[1]}\n")
        for row in arr:
            buf.write(" ".join(_FMT % v for v in row) + "\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Read a checkpoint; returns (params, meta dict)."""
    scalars = {}
    meta = {}
    arrays = {}
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    i = 0
    while i < len(lines):
        ln = lines[i]
        i += 1
        if not ln or ln.startswith("#"):
            continue
        parts = ln.split()
        if parts[0] == "meta":
            meta[parts[1]] = " ".join(parts[2:])
        elif parts[0] == "array":
            name, rows, cols = parts[1], int(parts[2]), int(parts[3])
            data = np.array(
                [[float(v) for v in lines[i + r].split()] for r in range(rows)]
            ).reshape(rows, cols)
            arrays[name] = data
            i += rows
        else:
            scalars[parts[0]] = parts[1]
    d, m, M = int(scalars["d"]), int(scalars["m"]), int(scalars["depth"])
    K = [arrays["K0"]]
    b = [arrays["b0"].ravel()]
    for j in range(1, M + 1):
        K.append(arrays[f"K{j}"])
        b.append(arrays[f"b{j}"].ravel())
    params = PotentialParams(
        K=K,
        b=b,
        w=arrays["w"].ravel(),
        A=arrays["A"],
        c=arrays["c"].ravel(),
        const=float(arrays["const"].ravel()[0]),
        h=float(scalars["h"]),
    )
    if params.d != d or params.m != m:
        raise ConfigurationError("checkpoint header inconsistent with array shapes")
    return params.validate(), meta
