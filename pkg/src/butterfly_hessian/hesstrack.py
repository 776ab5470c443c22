"""Gradient descent preconditioned by an online butterfly Hessian estimate.

Every step turns the last move into a secant pair ``(du, dg)`` with
``H du ~= dg``, takes one relaxed SGD step of the factorization on it, and
then descends along ``H_hat^-1 grad`` using the eps-floored inverse.

Modes
-----
``track_hessian``
    Learn ``H`` from ``(du, dg)``, descend along ``inverse_apply(grad)``.
``track_inverse_hessian``
    Learn ``H^-1`` from ``(dg, du)``, descend along ``forward(grad)``.
``plain_gd``
    No curvature model; textbook gradient descent.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .factorization import GradientRecord, SymmetricFactorization, average_angle

__all__ = [
    "DivergedError",
    "LeastSquares",
    "Logistic",
    "Objective",
    "Quadratic",
    "Rosenbrock",
    "TrackerState",
    "hessian_pair_gradient",
    "iterations_to",
    "make_quadratic",
    "minibatch_schedule",
    "run",
    "step",
    "step_inverse_mode",
    "step_minibatch",
    "write_log_csv",
]

MODES = ("track_hessian", "track_inverse_hessian", "plain_gd")
MIN_STEP_NORM = 1e-14


class DivergedError(FloatingPointError):
    """The objective returned a non-finite gradient."""


# -- objectives ------------------------------------------------------------


class Objective:
    """Differentiable objective with a gradient-evaluation counter.

    Subclasses backed by a dataset also implement ``eval_on(idx, u)`` and
    ``grad_on(idx, u)`` for row subsets and expose ``num_samples``.
    """

    n: int
    num_samples: int | None = None

    def __init__(self):
        self.grad_evals = 0

    def eval(self, u: np.ndarray) -> float:
        raise NotImplementedError

    def _grad(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, u: np.ndarray) -> np.ndarray:
        self.grad_evals += 1
        return self._grad(u)

    def grad_on(self, idx, u: np.ndarray) -> np.ndarray:
        self.grad_evals += 1
        return self._grad_on(idx, u)

    def hessian(self, u: np.ndarray) -> np.ndarray | None:
        """Dense Hessian at ``u`` when cheap to form (diagnostics only)."""
        return None


class Quadratic(Objective):
    """``0.5 u^T A u - b^T u``."""

    def __init__(self, A: np.ndarray, b: np.ndarray | None = None):
        super().__init__()
        self.A = np.asarray(A, dtype=np.float64)
        self.n = self.A.shape[0]
        self.b = np.zeros(self.n) if b is None else np.asarray(b, dtype=np.float64)

    def eval(self, u):
        return 0.5 * u @ self.A @ u - self.b @ u

    def _grad(self, u):
        return self.A @ u - self.b

    def hessian(self, u):
        return self.A

    def minimum(self) -> float:
        return self.eval(np.linalg.solve(self.A, self.b))


def make_quadratic(n: int, cond: float, seed=None, basis: str = "haar") -> Quadratic:
    """Quadratic with eigenvalues log-spaced in ``[1/cond, 1]``.

    ``basis`` chooses the eigenvectors: ``"haar"`` (uniform random rotation),
    ``"butterfly"`` (random butterfly rotation, exactly representable) or
    ``"identity"``.
    """
    from .butterfly import ButterflyProduct
    from .synth import haar_rotation

    rng = np.random.default_rng(seed)
    lam = np.logspace(-np.log10(cond), 0.0, n)
    rng.shuffle(lam)
    if basis == "haar":
        R = haar_rotation(n, rng)
    elif basis == "butterfly":
        R = ButterflyProduct.random(n, rng).to_dense()
    elif basis == "identity":
        R = np.eye(n)
    else:
        raise ValueError(f"unknown basis {basis!r}")
    A = (R * lam) @ R.T
    return Quadratic(0.5 * (A + A.T))


class _Dataset(Objective):
    def __init__(self, X, y):
        super().__init__()
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.num_samples, self.n = self.X.shape

    def eval(self, u):
        return self.eval_on(slice(None), u)

    def _grad(self, u):
        return self._grad_on(slice(None), u)


class LeastSquares(_Dataset):
    """``mean_i 0.5 (x_i . u - y_i)^2`` over rows of ``X``."""

    def eval_on(self, idx, u):
        r = self.X[idx] @ u - self.y[idx]
        return 0.5 * np.mean(r * r)

    def _grad_on(self, idx, u):
        X = self.X[idx]
        return X.T @ (X @ u - self.y[idx]) / X.shape[0]

    def hessian(self, u):
        return self.X.T @ self.X / self.num_samples


class Logistic(_Dataset):
    """Mean logistic loss for labels in {0, 1} plus ``0.5 * l2 * |u|^2``."""

    def __init__(self, X, y, l2: float = 1e-3):
        super().__init__(X, y)
        self.l2 = l2

    def eval_on(self, idx, u):
        z = self.X[idx] @ u
        return np.mean(np.logaddexp(0.0, z) - self.y[idx] * z) + 0.5 * self.l2 * u @ u

    def _grad_on(self, idx, u):
        X = self.X[idx]
        p = 0.5 * (1.0 + np.tanh(0.5 * (X @ u)))
        return X.T @ (p - self.y[idx]) / X.shape[0] + self.l2 * u

    def hessian(self, u):
        p = 0.5 * (1.0 + np.tanh(0.5 * (self.X @ u)))
        w = p * (1 - p)
        return (self.X.T * w) @ self.X / self.num_samples + self.l2 * np.eye(self.n)


class Rosenbrock(Objective):
    """``sum_i 100 (u_{i+1} - u_i^2)^2 + (1 - u_i)^2``; minimum 0 at ``u = 1``."""

    def __init__(self, n: int):
        super().__init__()
        self.n = n

    def eval(self, u):
        return float(np.sum(100.0 * (u[1:] - u[:-1] ** 2) ** 2 + (1.0 - u[:-1]) ** 2))

    def _grad(self, u):
        g = np.zeros_like(u)
        t = u[1:] - u[:-1] ** 2
        g[:-1] = -400.0 * u[:-1] * t - 2.0 * (1.0 - u[:-1])
        g[1:] += 200.0 * t
        return g

    def hessian(self, u):
        H = np.zeros((self.n, self.n))
        i = np.arange(self.n - 1)
        H[i, i] = 1200.0 * u[:-1] ** 2 - 400.0 * u[1:] + 2.0
        H[i + 1, i + 1] += 200.0
        H[i, i + 1] = H[i + 1, i] = -400.0 * u[:-1]
        return H


# -- tracker ---------------------------------------------------------------


@dataclass
class TrackerState:
    """State of one preconditioned descent run.

    ``epsilon=None`` selects the adaptive floor
    ``max(1e-8, 1e-4 * median(|d|))``.  ``literal_update=True`` descends along
    ``H_hat grad`` instead of ``H_hat^-1 grad`` in ``track_hessian`` mode.
    ``line_search`` enables Armijo backtracking (halving, ``c = 1e-4``).
    """

    F: SymmetricFactorization
    u: np.ndarray
    lr_q: float = 1.0
    lr_d: float = 1.0
    beta: float = 1.0
    epsilon: float | None = None
    mode: str = "track_hessian"
    literal_update: bool = False
    line_search: bool = False
    degenerate_policy: str = "reset-identity"
    prev_u: np.ndarray | None = None
    prev_grad: np.ndarray | None = None
    prev_subset: object = None
    t: int = 0
    hessian_updates: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.u = np.array(self.u, dtype=np.float64)

    @classmethod
    def initial(cls, u0, **kw) -> TrackerState:
        """Start with ``D = I`` and ``Q = I``."""
        u0 = np.asarray(u0, dtype=np.float64)
        return cls(F=SymmetricFactorization.identity(u0.size), u=u0, **kw)

    def current_epsilon(self) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return max(1e-8, 1e-4 * float(np.median(np.abs(self.F.d))))


def hessian_pair_gradient(F: SymmetricFactorization, du, dg) -> GradientRecord:
    """Gradient of ``||H_hat du - dg||^2`` over the relaxed parameters of ``F``."""
    return F.loss_gradient(du, dg)


def _learn(state: TrackerState, du: np.ndarray, dg: np.ndarray) -> float:
    """One relaxed SGD step on the secant pair, then projection and the d floor.

    Returns the pair's loss before the update, or NaN when the pair was skipped.
    """
    if state.mode == "track_inverse_hessian":
        x, y = dg, du
    else:
        x, y = du, dg
    scale = np.linalg.norm(du)
    if not (scale >= MIN_STEP_NORM and np.isfinite(dg).all()):
        return float("nan")
    if np.linalg.norm(x) < MIN_STEP_NORM:
        return float("nan")
    x = x / scale
    y = y / scale
    F = state.F
    loss = float(F.loss(x, y))
    F.sgd_step(F.loss_gradient(x, y), state.lr_q, state.lr_d)
    F.q.project("reset" if state.degenerate_policy == "reset-identity" else "raise")
    eps = state.current_epsilon()
    F.d[F.d < 0] = eps
    state.hessian_updates += 1
    return loss


def _direction(state: TrackerState, g: np.ndarray) -> np.ndarray:
    if state.mode == "plain_gd":
        return g
    if state.mode == "track_inverse_hessian":
        return state.F.forward(g)
    if state.literal_update:
        return state.F.forward(g)
    return state.F.inverse_apply(g, state.current_epsilon())


def _descend(state: TrackerState, objective, g: np.ndarray, loss_fn) -> None:
    p = _direction(state, g)
    step_size = state.beta
    if state.line_search and step_size > 0:
        f0 = loss_fn(state.u)
        slope = float(g @ p)
        while step_size > 1e-12 and not loss_fn(state.u - step_size * p) <= f0 - 1e-4 * step_size * slope:
            step_size *= 0.5
    state.prev_u = state.u
    state.u = state.u - step_size * p


def step(state: TrackerState, objective: Objective) -> dict:
    """One full-batch iteration: gradient, secant update of ``H_hat``, descent."""
    g = objective.grad(state.u)
    if not np.isfinite(g).all():
        raise DivergedError(f"non-finite gradient at step {state.t}")
    hloss = float("nan")
    if state.t > 0 and state.mode != "plain_gd":
        hloss = _learn(state, state.u - state.prev_u, g - state.prev_grad)
    report = _report(state, objective.eval(state.u), g, hloss)
    _descend(state, objective, g, objective.eval)
    state.prev_grad = g
    state.prev_subset = None
    state.t += 1
    return report


def step_inverse_mode(state: TrackerState, objective: Objective) -> dict:
    """:func:`step` with the model trained on ``(dg, du)`` as an inverse Hessian."""
    state.mode = "track_inverse_hessian"
    return step(state, objective)


def step_minibatch(state: TrackerState, objective: Objective, subset, recompute: bool = True) -> dict:
    """One iteration on the rows ``subset`` of a dataset objective.

    The secant pair uses ``grad_on(subset, u_t) - grad_on(subset, u_{t-1})``.
    The previous-point gradient is reused when ``subset`` is the same object
    as last step and ``recompute`` is false; otherwise it is recomputed,
    costing one extra gradient evaluation.
    """
    g = objective.grad_on(subset, state.u)
    if not np.isfinite(g).all():
        raise DivergedError(f"non-finite gradient at step {state.t}")
    hloss = float("nan")
    if state.t > 0 and state.mode != "plain_gd":
        if not recompute and state.prev_subset is subset and state.prev_grad is not None:
            g_prev = state.prev_grad
        else:
            g_prev = objective.grad_on(subset, state.prev_u)
        hloss = _learn(state, state.u - state.prev_u, g - g_prev)
    report = _report(state, objective.eval_on(subset, state.u), g, hloss)
    _descend(state, objective, g, lambda v: objective.eval_on(subset, v))
    state.prev_grad = g
    state.prev_subset = subset
    state.t += 1
    return report


def _report(state: TrackerState, loss: float, g: np.ndarray, hloss: float) -> dict:
    return {
        "t": state.t,
        "loss": float(loss),
        "grad_norm": float(np.linalg.norm(g)),
        "hessian_train_loss": hloss,
        "min_d": float(state.F.d.min()),
        "max_d": float(state.F.d.max()),
    }


def minibatch_schedule(num_samples: int, size: int, steps: int, reuse: int = 1, seed=None):
    """Yield ``steps`` index arrays; each minibatch object is repeated ``reuse`` times.

    Batches come from successive shuffles of the dataset.
    """
    rng = np.random.default_rng(seed)
    perm = rng.permutation(num_samples)
    pos = 0
    current = None
    for t in range(steps):
        if t % reuse == 0:
            if pos + size > num_samples:
                perm = rng.permutation(num_samples)
                pos = 0
            current = perm[pos : pos + size]
            pos += size
        yield current


def run(
    objective: Objective,
    u0,
    steps: int,
    mode: str = "track_hessian",
    minibatch: str = "full_batch",
    batch_size: int | None = None,
    reuse: int = 4,
    tol: float | None = None,
    seed=0,
    hessian_oracle: Callable[[np.ndarray], np.ndarray] | None = None,
    angle_samples: int = 200,
    **state_kw,
) -> tuple[TrackerState, list[dict]]:
    """Drive a tracker for up to ``steps`` iterations.

    ``minibatch`` is ``"full_batch"``, ``"recompute_prev"`` or ``"reuse"``
    (each minibatch kept for ``reuse`` consecutive steps).  Stops early once
    the reported loss is ``<= tol``.  With ``hessian_oracle(u) -> dense H``,
    each log row carries ``angle_to_true_hessian``.
    """
    state = TrackerState.initial(u0, mode=mode, **state_kw)
    log = []
    if minibatch == "full_batch":
        batches = None
    elif minibatch in ("recompute_prev", "reuse"):
        r = reuse if minibatch == "reuse" else 1
        batches = minibatch_schedule(objective.num_samples, batch_size, steps, r, seed)
    else:
        raise ValueError(f"unknown minibatch policy {minibatch!r}")
    for _ in range(steps):
        if batches is None:
            row = step(state, objective)
        else:
            row = step_minibatch(state, objective, next(batches), recompute=minibatch == "recompute_prev")
        if hessian_oracle is not None:
            row["angle_to_true_hessian"] = average_angle(state.F, hessian_oracle(state.u), m=angle_samples, rng_seed=seed)
        log.append(row)
        if tol is not None and row["loss"] <= tol:
            break
        if not np.isfinite(row["loss"]):
            raise DivergedError(f"non-finite loss at step {row['t']}")
    return state, log


def iterations_to(objective: Objective, u0, tol: float, max_steps: int, **kw) -> int | None:
    """Iterations until the loss first drops to ``tol``; ``None`` if never."""
    try:
        _, log = run(objective, u0, max_steps, tol=tol, **kw)
    except (DivergedError, FloatingPointError):
        return None
    if log and log[-1]["loss"] <= tol:
        return log[-1]["t"]
    return None


LOG_FIELDS = ("t", "loss", "grad_norm", "hessian_train_loss", "min_d", "max_d", "angle_to_true_hessian")


def write_log_csv(log: Sequence[dict], path=None) -> str:
    buf = io.StringIO()
    fields = [f for f in LOG_FIELDS if not log or f in log[0]]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in log:
        w.writerow([row[f] if f == "t" else repr(float(row[f])) for f in fields])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
