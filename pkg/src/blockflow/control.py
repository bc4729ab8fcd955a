"""Control routines: discretization, discrete LQR and SISO representation changes.

Matrices are dense row-major ``numpy`` arrays in double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np


class ControlError(Exception):
    pass


class DiscretizationSingularity(ControlError):
    pass


class RiccatiNoConvergence(ControlError):
    pass


class UnsupportedShape(ControlError):
    pass


class ImproperTransferFunction(ControlError):
    pass


def _mat(a, rows=None, cols=None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        if rows is not None:
            arr = arr.reshape(rows, -1)
        elif cols is not None:
            arr = arr.reshape(-1, cols)
        else:
            arr = arr.reshape(1, -1)
    return arr


@dataclass
class StateSpace:
    """``x' = A x + B u, y = C x + D u``; ``dt=None`` means continuous time."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray = None
    dt: Optional[float] = None

    def __post_init__(self):
        self.A = _mat(self.A)
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        self.B = _mat(self.B, rows=n)
        self.C = _mat(self.C, cols=n)
        m, p = self.B.shape[1], self.C.shape[0]
        self.D = np.zeros((p, m)) if self.D is None else _mat(self.D, rows=p)
        if self.B.shape[0] != n or self.C.shape[1] != n or self.D.shape != (p, m):
            raise ValueError("inconsistent state-space dimensions")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("sample time must be positive")

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def continuous(self) -> bool:
        return self.dt is None


@dataclass
class TransferFunction:
    """Coefficients in descending powers of s (or z)."""

    num: np.ndarray
    den: np.ndarray
    dt: Optional[float] = None

    def __post_init__(self):
        self.num = _trim(np.atleast_1d(np.array(self.num, dtype=float)))
        self.den = _trim(np.atleast_1d(np.array(self.den, dtype=float)))
        if self.den[0] == 0.0:
            raise ValueError("denominator leading coefficient is zero")

    @property
    def proper(self) -> bool:
        return len(self.num) <= len(self.den)

    def normalized(self) -> "TransferFunction":
        lead = self.den[0]
        return TransferFunction(self.num / lead, self.den / lead, self.dt)


def _trim(c: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(c)
    if len(nz) == 0:
        return np.zeros(1)
    return c[nz[0]:].copy()


# ---------------------------------------------------------------------------
# matrix exponential

_PADE6 = [math.factorial(12 - k) * math.factorial(6) / (math.factorial(12) * math.factorial(k) * math.factorial(6 - k))
          for k in range(7)]


def expm(a) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a (6, 6) Padé approximant."""
    a = np.array(a, dtype=float)
    n = a.shape[0]
    norm = np.linalg.norm(a, np.inf)
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    x = a / (2.0 ** s)
    eye = np.eye(n)
    power = eye
    num = _PADE6[0] * eye
    den = _PADE6[0] * eye
    for k in range(1, 7):
        power = power @ x
        term = _PADE6[k] * power
        num = num + term
        den = den + term if k % 2 == 0 else den - term
    e = np.linalg.solve(den, num)
    for _ in range(s):
        e = e @ e
    return e


# ---------------------------------------------------------------------------
# discretization


def c2d_zoh(sys: StateSpace, T: float) -> StateSpace:
    """Zero-order-hold discretization via the augmented matrix exponential."""
    if not sys.continuous:
        raise ValueError("system is already discrete")
    if not T > 0:
        raise ValueError("sample time must be positive")
    n, m = sys.B.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = sys.A
    aug[:n, n:] = sys.B
    e = expm(aug * T)
    return StateSpace(e[:n, :n], e[:n, n:], sys.C.copy(), sys.D.copy(), dt=T)


def c2d_tustin(sys: StateSpace, T: float) -> StateSpace:
    """Bilinear (Tustin) discretization."""
    if not sys.continuous:
        raise ValueError("system is already discrete")
    if not T > 0:
        raise ValueError("sample time must be positive")
    n = sys.n_states
    eye = np.eye(n)
    left = eye - sys.A * (T / 2.0)
    if n and np.linalg.cond(left) > 1e14:
        raise DiscretizationSingularity("I - A*T/2 is singular")
    inv = np.linalg.inv(left)
    ad = inv @ (eye + sys.A * (T / 2.0))
    bd = inv @ sys.B * T
    cd = sys.C @ inv
    dd = sys.D + sys.C @ inv @ sys.B * (T / 2.0)
    return StateSpace(ad, bd, cd, dd, dt=T)


def c2d(sys: StateSpace, T: float, method: str = "zoh") -> StateSpace:
    if method == "zoh":
        return c2d_zoh(sys, T)
    if method in ("tustin", "bilinear"):
        return c2d_tustin(sys, T)
    raise ValueError(f"unknown discretization method {method!r}")


# ---------------------------------------------------------------------------
# LQR


def dare_residual(A, B, Q, R, P) -> float:
    A, B, Q, R, P = map(_as2d, (A, B, Q, R, P))
    rhs = A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A) + Q
    return float(np.abs(P - rhs).max())


def _as2d(x):
    return np.atleast_2d(np.array(x, dtype=float))


def dlqr(A, B, Q, R, tol: float = 1e-12, max_iterations: int = 10000) -> Tuple[np.ndarray, np.ndarray]:
    """Discrete LQR gain ``K`` and Riccati solution ``P``.

    ``P`` is the fixed point of the Riccati recursion started at ``Q``; the
    control law is ``u = -K x``. Iteration stops once a step changes ``P``
    by at most ``tol`` relative to its largest entry.
    """
    A, Q, R = _as2d(A), _as2d(Q), _as2d(R)
    n = A.shape[0]
    B = np.array(B, dtype=float).reshape(n, -1)
    m = B.shape[1]
    if A.shape != (n, n) or Q.shape != (n, n) or R.shape != (m, m):
        raise ValueError("inconsistent LQR dimensions")
    if not np.allclose(Q, Q.T) or not np.allclose(R, R.T):
        raise ValueError("Q and R must be symmetric")
    if np.linalg.eigvalsh(R).min() <= 0:
        raise ValueError("R must be positive definite")

    P = Q.copy()
    for _ in range(max_iterations):
        G = R + B.T @ P @ B
        PA = P @ A
        with np.errstate(over="ignore", invalid="ignore"):
            nxt = A.T @ PA - A.T @ P @ B @ np.linalg.solve(G, B.T @ PA) + Q
        nxt = 0.5 * (nxt + nxt.T)
        if not np.all(np.isfinite(nxt)) or np.abs(nxt).max() > 1e150:
            raise RiccatiNoConvergence("Riccati iteration diverged; (A, B) is not stabilizable")
        step = np.abs(nxt - P).max()
        P = nxt
        if step <= tol * max(1.0, np.abs(P).max()):
            K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
            return K, P
    raise RiccatiNoConvergence(f"Riccati iteration did not settle within {max_iterations} iterations "
                               "(is (A, B) stabilizable?)")


# ---------------------------------------------------------------------------
# representation changes


def characteristic_polynomial(A) -> Tuple[np.ndarray, list]:
    """Leverrier-Faddeev: monic char. polynomial coefficients and adjugate terms.

    Returns ``(c, M)`` with ``det(sI - A) = sum c[k] s^(n-k)`` and
    ``adj(sI - A) = sum M[k] s^(n-1-k)``.
    """
    A = _as2d(A)
    n = A.shape[0]
    c = [1.0]
    M = [np.eye(n)]
    for k in range(1, n + 1):
        AM = A @ M[-1]
        ck = -np.trace(AM) / k
        c.append(ck)
        if k < n:
            M.append(AM + ck * np.eye(n))
    return np.array(c), M


def ss2tf(sys: StateSpace) -> TransferFunction:
    if sys.B.shape[1] != 1 or sys.C.shape[0] != 1:
        raise UnsupportedShape("ss2tf supports single-input single-output systems only")
    n = sys.n_states
    c, M = characteristic_polynomial(sys.A)
    d = float(sys.D[0, 0])
    num = np.zeros(n + 1)
    num[0] = d
    for k in range(1, n + 1):
        num[k] = (sys.C @ M[k - 1] @ sys.B)[0, 0] + d * c[k]
    return TransferFunction(num + 0.0, c + 0.0, sys.dt)


def tf2ss(tf: TransferFunction) -> StateSpace:
    """Controllable canonical realization."""
    if not tf.proper:
        raise ImproperTransferFunction(f"numerator degree {len(tf.num) - 1} exceeds denominator degree {len(tf.den) - 1}")
    tf = tf.normalized()
    den = tf.den
    n = len(den) - 1
    num = np.concatenate([np.zeros(n + 1 - len(tf.num)), tf.num])
    d = num[0]
    rem = num[1:] - d * den[1:]
    if n == 0:
        return StateSpace(np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), [[d]], tf.dt)
    A = np.zeros((n, n))
    A[0, :] = -den[1:]
    A[1:, :-1] = np.eye(n - 1)
    B = np.zeros((n, 1))
    B[0, 0] = 1.0
    C = rem.reshape(1, n)
    return StateSpace(A, B, C, [[d]], tf.dt)


def spectral_radius(a) -> float:
    a = _as2d(a)
    return float(np.abs(np.linalg.eigvals(a)).max()) if a.size else 0.0


def format_matrix(name: str, a) -> str:
    arr = np.atleast_2d(np.array(a, dtype=float))
    rows = ["[" + ", ".join(repr(float(v)) for v in row) + "]" for row in arr]
    return f"{name} = [" + ", ".join(rows) + "]"
