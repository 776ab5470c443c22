"""Learnable symmetric matrices ``H_hat = Q D Q^T`` with a butterfly ``Q``.

The model is a linear network of ``2 lg(n) + 1`` sparse layers
(``Q_1^T .. Q_L^T``, ``diag(d)``, ``Q_L .. Q_1``) whose rotation layers share
weights with their transposes.  Training follows plain SGD on the relaxed
block entries, projecting every block back to a rotation after each update.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .butterfly import ButterflyProduct, DegenerateBlockError, pairing

__all__ = [
    "GradientRecord",
    "NoValidSamplesError",
    "SymmetricFactorization",
    "TrainConfig",
    "TrainSample",
    "average_angle",
    "rotation_loss",
    "rotation_loss_gradient",
    "train",
    "train_multistart",
    "train_rotation_only",
    "write_trace_csv",
]


class NoValidSamplesError(ValueError):
    """Every test vector produced a (numerically) zero model or oracle output."""


@dataclass
class TrainSample:
    x: np.ndarray
    y: np.ndarray


@dataclass
class TrainConfig:
    """Hyperparameters for :func:`train` and :func:`train_rotation_only`.

    ``batch_size=None`` is single-sample SGD (one compiled step per draw);
    an integer averages the gradient over that many samples per update.
    Learning rates decay as ``lr * lr_decay**epoch``.
    """

    lr_q: float = 0.05
    lr_d: float = 0.005
    epochs: int = 100
    batch_size: int | None = None
    rng_seed: int = 0
    degenerate_policy: str = "reset-identity"
    lr_decay: float = 1.0

    def __post_init__(self):
        if not (self.lr_q > 0 and self.lr_d > 0):
            raise ValueError("learning rates must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.degenerate_policy not in ("reset-identity", "abort"):
            raise ValueError(f"unknown degenerate_policy {self.degenerate_policy!r}")


@dataclass
class GradientRecord:
    """Gradient of a loss with respect to every relaxed parameter.

    ``a, b, c, d`` have the block layout of :class:`ButterflyProduct`
    (shape ``(L, n/2)``); ``diag`` is the gradient for the diagonal.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    diag: np.ndarray | None = None

    def flat(self) -> np.ndarray:
        """Rotation part in :meth:`ButterflyProduct.params` order, then ``diag``."""
        rot = np.stack([self.a, self.b, self.c, self.d], axis=-1).ravel()
        return rot if self.diag is None else np.concatenate([rot, self.diag])

    def __add__(self, other: GradientRecord) -> GradientRecord:
        diag = None if self.diag is None else self.diag + other.diag
        return GradientRecord(self.a + other.a, self.b + other.b, self.c + other.c, self.d + other.d, diag)


@dataclass
class SymmetricFactorization:
    """``H_hat = Q diag(d) Q^T``.

    ``eig_floor`` is the default floor applied to ``d`` by :meth:`inverse_apply`.
    """

    q: ButterflyProduct
    d: np.ndarray
    eig_floor: float = 1e-8

    def __post_init__(self):
        self.d = np.array(self.d, dtype=np.float64).reshape(self.q.n)

    @classmethod
    def identity(cls, n: int, eig_floor: float = 1e-8) -> SymmetricFactorization:
        return cls(ButterflyProduct.identity(n), np.ones(n), eig_floor)

    @classmethod
    def random(cls, n: int, rng=None, eig_floor: float = 1e-8) -> SymmetricFactorization:
        """Random rotation product with angles in ``[-pi, pi)`` and ``d = 1``."""
        return cls(ButterflyProduct.random(n, rng), np.ones(n), eig_floor)

    @property
    def n(self) -> int:
        return self.q.n

    def copy(self) -> SymmetricFactorization:
        return SymmetricFactorization(self.q.copy(), self.d.copy(), self.eig_floor)

    @property
    def num_params(self) -> int:
        """Stored relaxed parameters: ``2 n lg(n) + n``."""
        return self.q.num_params + self.d.size

    def params(self) -> np.ndarray:
        return np.concatenate([self.q.params(), self.d])

    def set_params(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        self.q.set_params(theta[: self.q.num_params])
        self.d = theta[self.q.num_params :].copy()

    # mul-add instrumentation lives on q; the diagonal is accounted here
    @property
    def mul_add_counter(self) -> int | None:
        return self.q.mul_add_counter

    @mul_add_counter.setter
    def mul_add_counter(self, value: int | None) -> None:
        self.q.mul_add_counter = value

    def _count(self, x: np.ndarray, per_vector: int) -> None:
        if self.q.mul_add_counter is not None:
            nvec = 1 if x.ndim == 1 else int(np.prod(x.shape[:-1]))
            self.q.mul_add_counter += per_vector * nvec

    def forward(self, x) -> np.ndarray:
        """``Q (d * (Q^T x))`` for ``x`` of shape ``(n,)`` or ``(batch, n)``."""
        z = self.q.apply_transpose(x)
        self._count(z, self.n)
        return self.q.apply(self.d * z)

    def clamped_diagonal(self, eps: float | None = None) -> np.ndarray:
        eps = self.eig_floor if eps is None else eps
        return np.maximum(self.d, eps)

    def inverse_apply(self, x, eps: float | None = None) -> np.ndarray:
        """``Q (max(d, eps)^-1 * (Q^T x))``; negative and tiny entries are floored to ``eps``."""
        eps = self.eig_floor if eps is None else eps
        if not eps > 0:
            raise ValueError("eps must be positive")
        z = self.q.apply_transpose(x)
        self._count(z, self.n)
        return self.q.apply(z / self.clamped_diagonal(eps))

    def quadratic_form(self, x) -> float | np.ndarray:
        """``x^T H_hat x`` computed as ``sum(d * (Q^T x)**2)``."""
        z = self.q.apply_transpose(x)
        self._count(z, 2 * self.n)
        return np.sum(self.d * z * z, axis=-1)

    def to_dense(self) -> np.ndarray:
        Qd = self.q.to_dense()
        return (Qd * self.d) @ Qd.T

    def project(self, on_degenerate: str = "raise") -> SymmetricFactorization:
        self.q.project(on_degenerate)
        return self

    def loss(self, x, y) -> float | np.ndarray:
        """``||H_hat x - y||^2`` (per row for batched input)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch: x {x.shape}, y {y.shape}")
        r = self.forward(x) - y
        return np.sum(r * r, axis=-1)

    def loss_gradient(self, x, y) -> GradientRecord:
        """Exact gradient of :meth:`loss` with respect to all relaxed parameters.

        Each ``Q_i`` occurs twice in the network, once as ``Q_i^T``; the
        returned block gradients are the sum of both occurrences.  For
        batched input the gradient of the mean loss is returned.
        """
        outer, inner = self._gradient_parts(x, y)
        return outer + inner

    def _gradient_parts(self, x, y) -> tuple[GradientRecord, GradientRecord]:
        """Gradient split into the ``Q`` pass (with ``diag``) and the ``Q^T`` pass."""
        x = self.q._check(x)
        y = np.asarray(y, dtype=np.float64)
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch: x {x.shape}, y {y.shape}")
        batched = x.ndim == 2
        X = x if batched else x[None, :]
        Y = y if batched else y[None, :]
        q, L = self.q, self.q.L
        self._count(X, 12 * self.n * L + 3 * self.n)

        # forward, keeping every layer input
        V = [X]
        for i in range(1, L + 1):
            V.append(_layer(q, i, V[-1], transpose=True))
        z = V[-1]
        U = [None] * (L + 1)
        U[L] = self.d * z
        for i in range(L, 0, -1):
            U[i - 1] = _layer(q, i, U[i], transpose=False)
        g = 2.0 * (U[0] - Y) / X.shape[0]

        outer = _zeros_like_blocks(q)
        for i in range(1, L + 1):
            _accumulate(outer, i - 1, g, U[i], q.n, transpose=False)
            g = _layer(q, i, g, transpose=True)
        outer.diag = np.sum(g * z, axis=0)
        g = self.d * g
        inner = _zeros_like_blocks(q)
        inner.diag = np.zeros(self.n)
        for i in range(L, 0, -1):
            _accumulate(inner, i - 1, g, V[i - 1], q.n, transpose=True)
            if i > 1:
                g = _layer(q, i, g, transpose=False)
        return outer, inner

    def sgd_step(self, grad: GradientRecord, lr_q: float, lr_d: float) -> None:
        q = self.q
        q.a -= lr_q * grad.a
        q.b -= lr_q * grad.b
        q.c -= lr_q * grad.c
        q.d -= lr_q * grad.d
        self.d -= lr_d * grad.diag

    # -- checkpoint ------------------------------------------------------

    def to_bytes(self) -> bytes:
        """Butterfly record, then ``d`` as ``n`` little-endian float64, then ``eig_floor``."""
        return self.q.to_bytes() + self.d.astype("<f8").tobytes() + struct.pack("<d", self.eig_floor)

    @classmethod
    def from_bytes(cls, data: bytes) -> SymmetricFactorization:
        q, off = ButterflyProduct._read_bytes(data)
        end = off + 8 * q.n
        if len(data) < end + 8:
            raise ValueError("truncated checkpoint")
        d = np.frombuffer(data[off:end], dtype="<f8").copy()
        (eps,) = struct.unpack_from("<d", data, end)
        return cls(q, d, eps)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> SymmetricFactorization:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _layer(q: ButterflyProduct, i: int, x: np.ndarray, transpose: bool) -> np.ndarray:
    from .butterfly import _layer as raw

    r = i - 1
    return raw(x, q.a[r], q.b[r], q.c[r], q.d[r], i, transpose)


def _zeros_like_blocks(q: ButterflyProduct) -> GradientRecord:
    z = np.zeros_like(q.a)
    return GradientRecord(z.copy(), z.copy(), z.copy(), z.copy())


def _split(x: np.ndarray, n: int, i: int):
    p = n >> i
    v = x.reshape(x.shape[0], n // (2 * p), 2, p)
    return v[:, :, 0, :].reshape(x.shape[0], -1), v[:, :, 1, :].reshape(x.shape[0], -1)


def _accumulate(rec: GradientRecord, r: int, g: np.ndarray, inp: np.ndarray, n: int, transpose: bool) -> None:
    """Add ``d loss / d block`` for layer row ``r`` given output grad ``g`` and layer input ``inp``."""
    i = r + 1
    g0, g1 = _split(g, n, i)
    x0, x1 = _split(inp, n, i)
    ga = np.sum(g0 * x0, axis=0)
    gd = np.sum(g1 * x1, axis=0)
    upper = np.sum(g0 * x1, axis=0)
    lower = np.sum(g1 * x0, axis=0)
    if transpose:
        upper, lower = lower, upper
    rec.a[r] += ga
    rec.b[r] += upper
    rec.c[r] += lower
    rec.d[r] += gd


def rotation_loss(q: ButterflyProduct, x, y) -> float | np.ndarray:
    """``||Q x - y||^2``, the loss for fitting a rotation directly."""
    r = q.apply(x) - np.asarray(y, dtype=np.float64)
    return np.sum(r * r, axis=-1)


def rotation_loss_gradient(q: ButterflyProduct, x, y) -> GradientRecord:
    """Gradient of :func:`rotation_loss` (mean over rows when batched)."""
    x = q._check(x)
    y = np.asarray(y, dtype=np.float64)
    X = x if x.ndim == 2 else x[None, :]
    Y = y if y.ndim == 2 else y[None, :]
    U = [None] * (q.L + 1)
    U[q.L] = X
    for i in range(q.L, 0, -1):
        U[i - 1] = _layer(q, i, U[i], transpose=False)
    g = 2.0 * (U[0] - Y) / X.shape[0]
    rec = _zeros_like_blocks(q)
    for i in range(1, q.L + 1):
        _accumulate(rec, i - 1, g, U[i], q.n, transpose=False)
        g = _layer(q, i, g, transpose=True)
    return rec


def _as_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple) and len(samples) == 2 and not isinstance(samples[0], TrainSample):
        X, Y = samples
    else:
        samples = list(samples)
        X = [s.x for s in samples]
        Y = [s.y for s in samples]
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if X.ndim != 2 or X.shape != Y.shape or X.shape[0] == 0:
        raise ValueError("samples must be a non-empty set of equal-length (x, y) pairs")
    if not (np.isfinite(X).all() and np.isfinite(Y).all()):
        raise ValueError("samples contain non-finite entries")
    return X, Y


def _pair_tables(n: int, L: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = np.array([pairing(n, i) for i in range(1, L + 1)], dtype=np.int64)
    return np.ascontiguousarray(pairs[..., 0]), np.ascontiguousarray(pairs[..., 1])


def _run(model, X, Y, cfg: TrainConfig, callback, evaluate, rotation_only: bool) -> list[dict]:
    q = model if rotation_only else model.q
    if X.shape[1] != q.n:
        raise ValueError(f"samples have dimension {X.shape[1]}, model has {q.n}")
    rng = np.random.default_rng(cfg.rng_seed)
    m = X.shape[0]
    lo, hi = _pair_tables(q.n, q.L)
    abort = cfg.degenerate_policy == "abort"
    trace = []
    for epoch in range(1, cfg.epochs + 1):
        scale = cfg.lr_decay ** (epoch - 1)
        lr_q, lr_d = cfg.lr_q * scale, cfg.lr_d * scale
        if cfg.batch_size is None:
            order = rng.integers(0, m, size=m)
            for arr in ("a", "b", "c", "d"):
                setattr(q, arr, np.ascontiguousarray(getattr(q, arr)))
            if rotation_only:
                loss_sum, _, bl, bk = _kernels.sgd_epoch_rotation(q.a, q.b, q.c, q.d, lo, hi, X, Y, order, lr_q, abort)
            else:
                model.d = np.ascontiguousarray(model.d)
                loss_sum, _, bl, bk = _kernels.sgd_epoch_symmetric(
                    q.a, q.b, q.c, q.d, model.d, lo, hi, X, Y, order, lr_q, lr_d, abort
                )
            if bl >= 0:
                raise DegenerateBlockError(int(bl) + 1, pairing(q.n, int(bl) + 1)[int(bk)], 0.0)
            mean_loss = loss_sum / m
        else:
            perm = rng.permutation(m)
            losses = []
            for start in range(0, m, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                if rotation_only:
                    losses.append(float(np.sum(rotation_loss(q, X[idx], Y[idx]))))
                    grad = rotation_loss_gradient(q, X[idx], Y[idx])
                    q.a -= lr_q * grad.a
                    q.b -= lr_q * grad.b
                    q.c -= lr_q * grad.c
                    q.d -= lr_q * grad.d
                else:
                    losses.append(float(np.sum(model.loss(X[idx], Y[idx]))))
                    model.sgd_step(model.loss_gradient(X[idx], Y[idx]), lr_q, lr_d)
                q.project("raise" if abort else "reset")
            mean_loss = sum(losses) / m
        row = {"epoch": epoch, "mean_loss": mean_loss, "mean_angle_deg": evaluate(model) if evaluate else float("nan")}
        trace.append(row)
        if callback is not None and callback(row) is False:
            break
    return trace


def train(
    F: SymmetricFactorization,
    samples,
    cfg: TrainConfig,
    callback: Callable[[dict], object] | None = None,
    evaluate: Callable[[SymmetricFactorization], float] | None = None,
) -> list[dict]:
    """Fit ``F`` to samples ``y = H x`` by projected SGD on the relaxed parameters.

    Parameters
    ----------
    F : SymmetricFactorization
        Model, updated in place.  Its ``q`` is projected first so training
        always starts from, and stays on, rotation products.
    samples : sequence of TrainSample, or ``(X, Y)`` arrays of shape ``(m, n)``
    cfg : TrainConfig
    callback : callable, optional
        Called with each epoch's trace row; returning ``False`` stops training.
    evaluate : callable, optional
        ``evaluate(F) -> degrees``, typically a closure over :func:`average_angle`.

    Returns
    -------
    list of dict
        One row per epoch with keys ``epoch``, ``mean_loss`` (mean pre-update
        sample loss) and ``mean_angle_deg`` (NaN without ``evaluate``).
    """
    X, Y = _as_arrays(samples)
    F.q.project("raise" if cfg.degenerate_policy == "abort" else "reset")
    return _run(F, X, Y, cfg, callback, evaluate, rotation_only=False)


def train_rotation_only(
    q: ButterflyProduct,
    samples,
    cfg: TrainConfig,
    callback: Callable[[dict], object] | None = None,
    evaluate: Callable[[ButterflyProduct], float] | None = None,
) -> list[dict]:
    """Fit a bare butterfly ``Q`` to samples ``y = R x`` (no diagonal, no transpose pass)."""
    X, Y = _as_arrays(samples)
    q.project("raise" if cfg.degenerate_policy == "abort" else "reset")
    return _run(q, X, Y, cfg, callback, evaluate, rotation_only=True)


def train_multistart(
    n: int,
    samples,
    cfg: TrainConfig,
    starts: int = 8,
    screen_epochs: int = 20,
    rotation_only: bool = False,
    callback=None,
    evaluate=None,
):
    """Train from several initializations and keep the best.

    Start 0 is the identity; the others draw uniform random angles seeded from
    ``cfg.rng_seed``.  Each start runs ``screen_epochs`` epochs, the one with
    the lowest mean training loss is trained for ``cfg.epochs`` more.

    Returns ``(model, trace)`` where ``trace`` covers the final run only.
    """
    X, Y = _as_arrays(samples)
    rng = np.random.default_rng(cfg.rng_seed)
    seeds = rng.integers(0, 2**63 - 1, size=starts)
    screen = replace(cfg, epochs=screen_epochs)
    best = None
    for k in range(starts):
        if rotation_only:
            model = ButterflyProduct.identity(n) if k == 0 else ButterflyProduct.random(n, seeds[k])
            train_rotation_only(model, (X, Y), replace(screen, rng_seed=int(seeds[k])))
            score = float(np.mean(rotation_loss(model, X, Y)))
        else:
            model = SymmetricFactorization.identity(n) if k == 0 else SymmetricFactorization.random(n, seeds[k])
            train(model, (X, Y), replace(screen, rng_seed=int(seeds[k])))
            score = float(np.mean(model.loss(X, Y)))
        if best is None or score < best[0]:
            best = (score, model)
    model = best[1]
    fit = train_rotation_only if rotation_only else train
    return model, fit(model, (X, Y), cfg, callback, evaluate)


def average_angle(
    model,
    oracle,
    m: int = 1000,
    sampler: str = "sphere",
    rng_seed: int = 0,
    xs: np.ndarray | None = None,
    dims: int | None = None,
    return_skipped: bool = False,
):
    """Mean angle in degrees between ``model(x)`` and ``oracle(x)`` over random ``x``.

    ``model`` is a :class:`SymmetricFactorization`, a :class:`ButterflyProduct`
    or any callable on a ``(m, n)`` batch; ``oracle`` is a dense matrix or such
    a callable.  With ``dims`` set, test vectors live in the first ``dims``
    coordinates and only those coordinates of both outputs are compared.
    Pairs where either output has norm below 1e-300 are skipped.
    """
    from .synth import sample_hypercube, sample_unit_sphere

    f = _as_callable(model)
    h = _as_callable(oracle)
    n = model.n if hasattr(model, "n") else np.asarray(oracle).shape[0]
    k = n if dims is None else dims
    if xs is None:
        if m < 1:
            raise ValueError("m must be >= 1")
        draw = sample_unit_sphere if sampler == "sphere" else sample_hypercube
        xs = draw(k, m, rng_seed)
    xs = np.asarray(xs, dtype=np.float64)
    if xs.shape[1] < n:
        xs = np.hstack([xs, np.zeros((xs.shape[0], n - xs.shape[1]))])
    a = np.asarray(f(xs))[:, :k]
    b = np.asarray(h(xs))[:, :k]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na >= 1e-300) & (nb >= 1e-300)
    skipped = int(np.count_nonzero(~ok))
    if not ok.any():
        raise NoValidSamplesError(f"all {len(xs)} test vectors were degenerate")
    cos = np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])
    deg = float(np.degrees(np.mean(np.arccos(np.clip(cos, -1.0, 1.0)))))
    return (deg, skipped) if return_skipped else deg


def _as_callable(obj) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(obj, SymmetricFactorization):
        return obj.forward
    if isinstance(obj, ButterflyProduct):
        return obj.apply
    if callable(obj):
        return obj
    M = np.asarray(obj, dtype=np.float64)
    return lambda X: X @ M.T


def write_trace_csv(trace: Sequence[dict], path=None) -> str:
    """Render a training trace as CSV (``epoch,mean_loss,mean_angle_deg``)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_loss", "mean_angle_deg"])
    for row in trace:
        w.writerow([row["epoch"], repr(float(row["mean_loss"])), repr(float(row["mean_angle_deg"]))])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text
