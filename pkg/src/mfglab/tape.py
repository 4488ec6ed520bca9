"""Minimal reverse-mode tape over batched numpy arrays.

The training loss is an explicit composition of matrix-vector products,
elementwise nonlinearities, Hadamard products and reductions, so a small
fixed vocabulary of vector operations suffices; there is no need for
general-purpose autodiff.  Values are computed eagerly; ``backward``
replays the recorded operations in reverse and accumulates adjoints.

Conventions: batches are leading axes, so a hidden feature block is
(N, m) and a feature Jacobian block is (N, m, d).  Scalars are python
floats.  Every operand of an op must be a Var on the same tape; plain
numbers and arrays enter through ``constant`` (or op-specific constant
arguments, noted per op).
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tape", "Var"]


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape, idx):
        self.tape = tape
        self.idx = idx

    @property
    def value(self):
        return self.tape._values[self.idx]

    def __repr__(self):
        return f"Var({self.idx}, value={self.value!r})"


class Tape:
    def __init__(self):
        self._values = []
        self._parents = []
        self._vjps = []

    def __len__(self):
        return len(self._values)

    def _push(self, value, parents=(), vjp=None) -> Var:
        self._values.append(value)
        self._parents.append(tuple(p.idx for p in parents))
        self._vjps.append(vjp)
        return Var(self, len(self._values) - 1)

    def leaf(self, value) -> Var:
        """Differentiable input (a parameter array)."""
        return self._push(np.asarray(value, dtype=np.float64))

    def constant(self, value) -> Var:
        """Non-differentiated input; adjoint is accumulated but unused."""
        return self._push(np.asarray(value, dtype=np.float64))

    def backward(self, out: Var, wrt: list[Var]) -> list[np.ndarray]:
        """Adjoints of the scalar ``out`` with respect to each Var in ``wrt``.

        Repeated calls re-run the sweep from scratch and return identical
        results; nothing is accumulated across calls.
        """
        if np.ndim(out.value) != 0:
            raise ValueError("backward requires a scalar output")
        adj = [None] * (out.idx + 1)
        adj[out.idx] = np.float64(1.0)
        for i in range(out.idx, -1, -1):
            g = adj[i]
            if g is None or self._vjps[i] is None:
                continue
            for p, gp in zip(self._parents[i], self._vjps[i](g)):
                if gp is None:
                    continue
                if adj[p] is None:
                    adj[p] = gp
                else:
                    adj[p] = adj[p] + gp
        out_grads = []
        for v in wrt:
            g = adj[v.idx] if v.idx < len(adj) else None
            out_grads.append(np.zeros_like(self._values[v.idx]) if g is None else np.asarray(g))
        return out_grads

    # -- arithmetic ---------------------------------------------------------

    def add(self, x: Var, y: Var) -> Var:
        if np.shape(x.value) != np.shape(y.value):
            raise ValueError("add requires equal shapes; use add_rowvec/add_scalar to broadcast")
        return self._push(x.value + y.value, (x, y), lambda g: (g, g))

    def sub(self, x: Var, y: Var) -> Var:
        if np.shape(x.value) != np.shape(y.value):
            raise ValueError("sub requires equal shapes")
        return self._push(x.value - y.value, (x, y), lambda g: (g, -g))

    def neg(self, x: Var) -> Var:
        return self._push(-x.value, (x,), lambda g: (-g,))

    def scale(self, x: Var, alpha: float) -> Var:
        return self._push(alpha * x.value, (x,), lambda g: (alpha * g,))

    def add_const(self, x: Var, arr) -> Var:
        return self._push(x.value + arr, (x,), lambda g: (g,))

    def mul(self, x: Var, y: Var) -> Var:
        xv, yv = x.value, y.value
        return self._push(xv * yv, (x, y), lambda g: (g * yv, g * xv))

    def add_scalar(self, x: Var, s: Var) -> Var:
        """(N,) + () broadcast; the scalar side collects the summed adjoint."""
        return self._push(x.value + s.value, (x, s), lambda g: (g, np.sum(g)))

    def add_rowvec(self, x: Var, v: Var) -> Var:
        """(N,p) + (p,) broadcast over rows."""
        return self._push(x.value + v.value, (x, v), lambda g: (g, np.sum(g, axis=0)))

    # -- elementwise nonlinearities ------------------------------------------

    def softabs(self, x: Var) -> Var:
        xv = x.value
        t = np.tanh(xv)
        return self._push(np.logaddexp(xv, -xv), (x,), lambda g: (g * t,))

    def softabs_d1(self, x: Var) -> Var:
        t = np.tanh(x.value)
        return self._push(t, (x,), lambda g: (g * (1.0 - t * t),))

    def softabs_d1d2(self, x: Var):
        """First and second derivative of the activation, sharing one tanh."""
        t = np.tanh(x.value)
        d2 = 1.0 - t * t
        v1 = self._push(t, (x,), lambda g: (g * d2,))
        v2 = self._push(d2, (x,), lambda g: (g * (-2.0 * t * d2),))
        return v1, v2

    def softabs_d2(self, x: Var) -> Var:
        t = np.tanh(x.value)
        d2 = 1.0 - t * t
        return self._push(d2, (x,), lambda g: (g * (-2.0 * t * d2),))

    def absolute(self, x: Var) -> Var:
        s = np.sign(x.value)  # sign(0) = 0: subgradient convention at kinks
        return self._push(np.abs(x.value), (x,), lambda g: (g * s,))

    def exp(self, x: Var) -> Var:
        out = np.exp(x.value)
        return self._push(out, (x,), lambda g: (g * out,))

    # -- linear algebra -------------------------------------------------------

    def affine(self, x: Var, W: Var, b: Var) -> Var:
        """x @ W.T + b for x (N,p), W (q,p), b (q,)."""
        xv, Wv = x.value, W.value
        return self._push(
            xv @ Wv.T + b.value,
            (x, W, b),
            lambda g: (g @ Wv, g.T @ xv, np.sum(g, axis=0)),
        )

    def right_mul(self, x: Var, W: Var) -> Var:
        """x @ W for x (N,m), W (m,q)."""
        xv, Wv = x.value, W.value
        return self._push(xv @ Wv, (x, W), lambda g: (g @ Wv.T, xv.T @ g))

    def matvec(self, x: Var, v: Var) -> Var:
        """x @ v for x (N,m), v (m,)."""
        xv, vv = x.value, v.value
        return self._push(xv @ vv, (x, v), lambda g: (g[:, None] * vv[None, :], xv.T @ g))

    def mul_rowvec(self, x: Var, v: Var) -> Var:
        """x * v broadcast over rows, x (N,m), v (m,)."""
        xv, vv = x.value, v.value
        return self._push(xv * vv, (x, v), lambda g: (g * vv, np.sum(g * xv, axis=0)))

    def rowdot(self, x: Var, y: Var) -> Var:
        """Per-row inner product of two (N,m) blocks."""
        xv, yv = x.value, y.value
        return self._push(
            np.einsum("ij,ij->i", xv, yv),
            (x, y),
            lambda g: (g[:, None] * yv, g[:, None] * xv),
        )

    def sym(self, A: Var) -> Var:
        return self._push(A.value + A.value.T, (A,), lambda g: (g + g.T,))

    # Feature Jacobians are stored (m, d, N): the batch axis is trailing, so
    # per-sample matrix products collapse into one GEMM over the whole batch.

    def matmul3(self, W: Var, J: Var) -> Var:
        """Per-sample W @ J[.., n] for W (q,m), J (m,d,N) -> (q,d,N)."""
        Wv, Jv = W.value, J.value
        m = Jv.shape[0]
        flat = Jv.reshape(m, -1)
        out = (Wv @ flat).reshape(Wv.shape[0], Jv.shape[1], Jv.shape[2])

        def vjp(g):
            gf = g.reshape(g.shape[0], -1)
            return (gf @ flat.T, (Wv.T @ gf).reshape(Jv.shape))

        return self._push(out, (W, J), vjp)

    def colscale3(self, v: Var, J: Var) -> Var:
        """Scale J (m,d,N) by per-sample, per-feature factors v (N,m)."""
        vv, Jv = v.value, J.value
        vt = vv.T[:, None, :]
        return self._push(
            vt * Jv,
            (v, J),
            lambda g: (np.sum(g * Jv, axis=1).T, vt * g),
        )

    def colscale_mat(self, v: Var, Kd: Var) -> Var:
        """Outer structure v (N,m) x Kd (m,d) -> (m,d,N)."""
        vv, Kv = v.value, Kd.value
        return self._push(
            vv.T[:, None, :] * Kv[:, :, None],
            (v, Kd),
            lambda g: (np.sum(g * Kv[:, :, None], axis=1).T, np.sum(g * vv.T[:, None, :], axis=2)),
        )

    def colsumsq(self, J: Var) -> Var:
        """Sum of squares over the d axis: (m,d,N) -> (N,m)."""
        Jv = J.value
        return self._push(np.sum(Jv * Jv, axis=1).T, (J,), lambda g: (2.0 * Jv * g.T[:, None, :],))

    def rowsumsq_mat(self, Kd: Var) -> Var:
        """(m,d) -> (m,): sum of squared entries per row."""
        Kv = Kd.value
        return self._push(np.sum(Kv * Kv, axis=1), (Kd,), lambda g: (2.0 * Kv * g[:, None],))

    # -- slicing and assembly --------------------------------------------------

    def take_cols(self, x: Var, k: int) -> Var:
        n_cols = x.value.shape[1]

        def vjp(g):
            out = np.zeros((g.shape[0], n_cols))
            out[:, :k] = g
            return (out,)

        return self._push(x.value[:, :k].copy(), (x,), vjp)

    def take_col(self, x: Var, j: int) -> Var:
        n_cols = x.value.shape[1]

        def vjp(g):
            out = np.zeros((g.shape[0], n_cols))
            out[:, j] = g
            return (out,)

        return self._push(x.value[:, j].copy(), (x,), vjp)

    def mat_take_cols(self, W: Var, k: int) -> Var:
        shape = W.value.shape

        def vjp(g):
            out = np.zeros(shape)
            out[:, :k] = g
            return (out,)

        return self._push(W.value[:, :k].copy(), (W,), vjp)

    def append_time(self, z: Var, t: float) -> Var:
        """(N,d) positions -> (N,d+1) space-time points with constant time column."""
        zv = z.value
        out = np.concatenate([zv, np.full((zv.shape[0], 1), t)], axis=1)
        return self._push(out, (z,), lambda g: (g[:, :-1].copy(),))

    def spatial_trace(self, A: Var, d: int) -> Var:
        """Trace of the spatial block of A + A.T, as a scalar Var."""
        shape = A.value.shape

        def vjp(g):
            out = np.zeros(shape)
            np.fill_diagonal(out[:d, :d], 2.0 * g)
            return (out,)

        return self._push(np.float64(2.0 * np.trace(A.value[:d, :d])), (A,), vjp)

    def weighted_sum(self, x: Var, weights: np.ndarray) -> Var:
        """Scalar weights @ x; ``weights`` is a constant array."""
        return self._push(np.float64(weights @ x.value), (x,), lambda g: (g * weights,))

    def mixture_logpdf(self, z: Var, mixture) -> Var:
        """log-density of a GaussianMixture at the rows of z (N,k)."""
        val, grad = mixture.logpdf_and_grad(z.value)
        return self._push(val, (z,), lambda g: (g[:, None] * grad,))
