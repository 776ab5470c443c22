"""Desk-scale experiment drivers shared by the CLI and the acceptance tests.

Every driver derives all of its random streams from one integer seed through
``numpy.random.SeedSequence`` so results are reproducible bit for bit.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import hesstrack
from .butterfly import ButterflyProduct, log2_exact
from .data import DatasetMatrix, covariance, next_power_of_two, pad_columns, pad_matrix
from .factorization import (
    NoValidSamplesError,
    SymmetricFactorization,
    TrainConfig,
    average_angle,
    rotation_loss,
    train,
    train_multistart,
    train_rotation_only,
)
from .synth import SyntheticSpec, haar_rotation, sample_unit_sphere, synthetic_hessian


@dataclass
class RunResult:
    trace: list
    final_angle: float
    model: object = None
    target: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def _streams(seed: int, k: int):
    return np.random.SeedSequence(seed).spawn(k)


def _pad_target(M: np.ndarray) -> tuple[np.ndarray, int]:
    k = M.shape[0]
    n = next_power_of_two(k)
    return (pad_matrix(M, n) if n != k else M), n


def synth_approx(
    n: int = 64,
    n_mu: int = 5,
    seed: int = 0,
    epochs: int = 600,
    m: int = 1000,
    test_m: int = 1000,
    lr_q: float = 0.05,
    lr_d: float = 0.005,
    callback=None,
) -> RunResult:
    """Learn a synthetic ``R diag(|mu|) R^T`` from ``m`` unit-sphere samples.

    Dimensions that are not powers of two are zero-padded; the angle is
    measured in the original coordinates.
    """
    s_h, s_x, s_test, s_train = _streams(seed, 4)
    H, R, lam = synthetic_hessian(SyntheticSpec(n, n_mu, seed=s_h))
    Hp, N = _pad_target(H)
    X = pad_columns(sample_unit_sphere(n, m, s_x), N)
    xs = sample_unit_sphere(n, test_m, s_test)
    F = SymmetricFactorization.identity(N)
    cfg = TrainConfig(lr_q=lr_q, lr_d=lr_d, epochs=epochs, rng_seed=int(s_train.generate_state(1)[0]))
    evaluate = lambda F: average_angle(F, Hp, xs=xs, dims=n)  # noqa: E731
    trace = train(F, (X, X @ Hp), cfg, callback=callback, evaluate=evaluate)
    return RunResult(trace, trace[-1]["mean_angle_deg"] if trace else evaluate(F), F, H, {"eigenvalues": lam})


def _sweep_point(args):
    n, n_mu, seed, epochs, m, lr_q, lr_d = args
    res = synth_approx(n, n_mu, seed, epochs, m, lr_q=lr_q, lr_d=lr_d)
    return {"n_mu": n_mu, "seed": seed, "final_angle_deg": res.final_angle}


def nmu_sweep(
    n: int,
    n_mus,
    seeds,
    epochs: int = 500,
    m: int = 1000,
    lr_q: float = 0.05,
    lr_d: float = 0.005,
    workers: int = 1,
) -> list[dict]:
    """One training run per ``(n_mu, seed)``; rows come back in input order.

    Point seeds are ``1000 * n_mu + seed`` so each point redraws its matrix.
    """
    jobs = [(n, k, 1000 * k + s, epochs, m, lr_q, lr_d) for k in n_mus for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    for row, s in zip(rows, [s for _ in n_mus for s in seeds]):
        row["seed"] = s
    return rows


def summarize_sweep(rows) -> list[dict]:
    out = {}
    for r in rows:
        out.setdefault(r["n_mu"], []).append(r["final_angle_deg"])
    return [{"n_mu": k, "mean_angle_deg": float(np.mean(v)), "runs": len(v)} for k, v in out.items()]


def rotation(
    n: int = 64,
    seed: int = 0,
    epochs: int = 300,
    m: int = 1000,
    test_m: int = 1000,
    lr_q: float = 0.05,
    exact: bool = False,
    starts: int = 1,
    screen_epochs: int = 20,
    callback=None,
) -> RunResult:
    """Fit a single butterfly ``Q`` to a rotation ``R`` (Haar, or a butterfly when ``exact``)."""
    log2_exact(n)
    s_r, s_x, s_test, s_train = _streams(seed, 4)
    R = ButterflyProduct.random(n, s_r).to_dense() if exact else haar_rotation(n, s_r)
    X = sample_unit_sphere(n, m, s_x)
    Y = X @ R.T
    xs = sample_unit_sphere(n, test_m, s_test)
    cfg = TrainConfig(lr_q=lr_q, epochs=epochs, rng_seed=int(s_train.generate_state(1)[0]))
    evaluate = lambda q: average_angle(q, R, xs=xs)  # noqa: E731
    initial = float(np.mean(rotation_loss(ButterflyProduct.identity(n), X, Y)))
    if starts > 1:
        q, trace = train_multistart(n, (X, Y), cfg, starts, screen_epochs, True, callback, evaluate)
    else:
        q = ButterflyProduct.identity(n)
        trace = train_rotation_only(q, (X, Y), cfg, callback, evaluate)
    final_loss = float(np.mean(rotation_loss(q, X, Y)))
    return RunResult(trace, evaluate(q), q, R, {"initial_loss": initial, "final_loss": final_loss})


def exact_symmetric(
    n: int = 8,
    seed: int = 0,
    epochs: int = 1500,
    m: int = 500,
    starts: int = 16,
    screen_epochs: int = 300,
    lr_q: float = 0.05,
    lr_d: float = 0.005,
) -> RunResult:
    """Learn ``H = Q* diag(lam) Q*^T`` where ``Q*`` is itself a random butterfly."""
    s_q, s_x, s_test, s_train = _streams(seed, 4)
    rng = np.random.default_rng(s_q)
    target = SymmetricFactorization(ButterflyProduct.random(n, rng), rng.uniform(0.1, 1.0, n))
    H = target.to_dense()
    X = sample_unit_sphere(n, m, s_x)
    Y = X @ H
    xs = sample_unit_sphere(n, 1000, s_test)
    cfg = TrainConfig(lr_q=lr_q, lr_d=lr_d, epochs=epochs, rng_seed=int(s_train.generate_state(1)[0]))
    initial = float(np.mean(SymmetricFactorization.identity(n).loss(X, Y)))
    F, trace = train_multistart(n, (X, Y), cfg, starts, screen_epochs)
    final_loss = float(np.mean(F.loss(X, Y)))
    return RunResult(trace, average_angle(F, H, xs=xs), F, H, {"initial_loss": initial, "final_loss": final_loss})


def _spectral_scale(C: np.ndarray, iters: int = 50) -> float:
    v = np.ones(C.shape[0]) / np.sqrt(C.shape[0])
    lam = 0.0
    for _ in range(iters):
        w = C @ v
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


def covariance_run(
    data: DatasetMatrix,
    seed: int = 0,
    epochs: int = 50,
    m: int = 2000,
    test_m: int = 1000,
    lr_q: float = 0.05,
    lr_d: float = 0.005,
    callback=None,
) -> RunResult:
    """Approximate the empirical covariance of ``data``.

    Training inputs are half centered data rows and half unit-sphere vectors,
    all normalized to unit length; targets use the covariance divided by its
    spectral norm, and the learned diagonal is scaled back afterwards.  The
    reported angle uses only the unpadded coordinates and is NaN when the
    covariance is zero.
    """
    s_rows, s_x, s_test, s_train = _streams(seed, 4)
    C, mean = covariance(data.data)
    k = C.shape[0]
    Cp, N = _pad_target(C)
    scale = _spectral_scale(C)
    target = Cp / scale if scale > 0 else Cp
    rng = np.random.default_rng(s_rows)
    sphere = np.random.default_rng(s_x)
    half = m // 2
    rows = data.data[rng.integers(0, data.rows, size=half)] - mean
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    rows = np.where(norms > 0, rows / np.where(norms > 0, norms, 1.0), sample_unit_sphere(k, half, sphere))
    X = pad_columns(np.vstack([rows, sample_unit_sphere(k, m - half, sphere)]), N)
    xs = sample_unit_sphere(k, test_m, s_test)
    F = SymmetricFactorization.identity(N)
    cfg = TrainConfig(lr_q=lr_q, lr_d=lr_d, epochs=epochs, rng_seed=int(s_train.generate_state(1)[0]))

    def evaluate(F):
        try:
            return average_angle(F, target, xs=xs, dims=k)
        except NoValidSamplesError:
            return float("nan")

    trace = train(F, (X, X @ target), cfg, callback=callback, evaluate=evaluate)
    F.d *= scale if scale > 0 else 1.0
    angle = evaluate(F)
    return RunResult(trace, angle, F, C, {"scale": scale, "n_raw": k, "n_padded": N})


# -- optimizer harness -------------------------------------------------------


def make_objective(kind: str, n: int, seed: int = 0, cond: float = 100.0, samples: int = 1000):
    rng = np.random.default_rng(seed)
    if kind == "quadratic":
        return hesstrack.make_quadratic(n, cond, rng)
    if kind == "lstsq":
        X = rng.standard_normal((samples, n)) * np.logspace(0, -1, n)
        u_true = rng.standard_normal(n)
        return hesstrack.LeastSquares(X, X @ u_true + 0.01 * rng.standard_normal(samples))
    if kind == "logistic":
        X = rng.standard_normal((samples, n)) * np.logspace(0, -1, n)
        w = rng.standard_normal(n)
        y = (rng.random(samples) < 1 / (1 + np.exp(-X @ w))).astype(float)
        return hesstrack.Logistic(X, y, l2=1e-2)
    if kind == "rosenbrock":
        return hesstrack.Rosenbrock(n)
    raise ValueError(f"unknown objective {kind!r}")


def initial_point(kind: str, n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, 1])
    if kind == "rosenbrock":
        return rng.uniform(-0.5, 0.5, n)
    return rng.standard_normal(n)


def best_iterations(objective, u0, tol, max_steps, betas, **kw) -> tuple[int | None, float | None]:
    """Smallest iteration count to reach ``tol`` over a grid of constant step sizes."""
    best = (None, None)
    for b in betas:
        it = hesstrack.iterations_to(objective, u0, tol, max_steps, beta=b, **kw)
        if it is not None and (best[0] is None or it < best[0]):
            best = (it, b)
    return best


def bench(ns=(256, 1024, 4096), seed: int = 0, repeats: int = 20) -> list[dict]:
    """MulAdd counts of the fast products versus a dense mat-vec, plus wall times."""
    rows = []
    for n in ns:
        rng = np.random.default_rng([seed, n])
        F = SymmetricFactorization(ButterflyProduct.random(n, rng), rng.uniform(0.1, 1.0, n))
        x = rng.standard_normal(n)
        counts = {}
        for name, fn in (("forward", F.forward), ("quadratic_form", F.quadratic_form), ("apply", F.q.apply)):
            F.mul_add_counter = 0
            fn(x)
            counts[name] = F.mul_add_counter
        F.mul_add_counter = None
        dense = F.to_dense() if n <= 4096 else None
        t_fast = _timeit(lambda: F.forward(x), repeats)
        t_dense = _timeit(lambda: dense @ x, repeats) if dense is not None else float("nan")
        rows.append(
            {
                "n": n,
                "forward_muladds": counts["forward"],
                "quadratic_form_muladds": counts["quadratic_form"],
                "apply_muladds": counts["apply"],
                "dense_muladds": n * n,
                "forward_seconds": t_fast,
                "dense_seconds": t_dense,
            }
        )
    return rows


def _timeit(fn, repeats: int) -> float:
    fn()
    t = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t) / repeats
