import numpy as np
import pytest

from butterfly_hessian import ButterflyProduct, SymmetricFactorization, average_angle
from butterfly_hessian import experiments as ex
from butterfly_hessian import hesstrack as ht


def quadratic(n=8, seed=0, cond=10.0):
    return ht.make_quadratic(n, cond, seed)


class TestObjectives:
    @pytest.mark.parametrize("kind", ["quadratic", "lstsq", "logistic", "rosenbrock"])
    def test_gradient_matches_finite_differences(self, kind):
        obj = ex.make_objective(kind, 8, 0, samples=50)
        u = ex.initial_point(kind, 8, 0)
        h = 1e-6
        num = np.array([(obj.eval(u + h * e) - obj.eval(u - h * e)) / (2 * h) for e in np.eye(8)])
        np.testing.assert_allclose(obj.grad(u), num, rtol=1e-5, atol=1e-7)

    @pytest.mark.parametrize("kind", ["lstsq", "logistic", "rosenbrock"])
    def test_hessian_matches_gradient_differences(self, kind):
        obj = ex.make_objective(kind, 8, 1, samples=50)
        u = ex.initial_point(kind, 8, 1)
        h = 1e-6
        num = np.stack([(obj.grad(u + h * e) - obj.grad(u - h * e)) / (2 * h) for e in np.eye(8)])
        np.testing.assert_allclose(obj.hessian(u), num, rtol=1e-5, atol=1e-6)

    def test_counter(self):
        obj = quadratic()
        obj.grad(np.zeros(8))
        obj.grad(np.zeros(8))
        assert obj.grad_evals == 2

    def test_quadratic_condition(self):
        eig = np.linalg.eigvalsh(quadratic(16, 0, 100.0).A)
        assert eig.max() / eig.min() == pytest.approx(100.0)


class TestStep:
    def test_identity_hessian(self):
        obj = ht.Quadratic(np.eye(8), np.arange(8.0))
        st = ht.TrackerState.initial(np.zeros(8))
        ht.step(st, obj)
        # D = I, Q = I: the first step is plain gradient descent, which lands on the minimizer
        np.testing.assert_allclose(st.u, np.arange(8.0), atol=1e-12)
        for _ in range(3):
            ht.step(st, obj)
        np.testing.assert_allclose(st.u, np.arange(8.0), atol=1e-12)

    def test_plain_gd_is_textbook(self):
        obj = quadratic(8, 1)
        u = ex.initial_point("quadratic", 8, 1)
        st = ht.TrackerState.initial(u, mode="plain_gd", beta=0.7)
        ref = u.copy()
        for _ in range(20):
            ht.step(st, obj)
            ref = ref - 0.7 * (obj.A @ ref)
        np.testing.assert_array_equal(st.u, ref)

    def test_beta_zero_never_moves(self):
        obj = quadratic()
        u0 = np.ones(8)
        _, log = ht.run(obj, u0, 10, beta=0.0)
        assert len({r["loss"] for r in log}) == 1

    def test_floor_and_descent_direction(self):
        obj = quadratic(16, 2, 100.0)
        st = ht.TrackerState.initial(ex.initial_point("quadratic", 16, 2))
        for _ in range(30):
            ht.step(st, obj)
            eps = st.current_epsilon()
            assert np.all(st.F.clamped_diagonal(eps) >= eps) and eps > 0
            g = obj.grad(st.u)
            if np.linalg.norm(g) > 0:
                assert st.F.inverse_apply(g, eps) @ g > 0
            Q = st.F.q.to_dense()
            assert np.abs(Q.T @ Q - np.eye(16)).max() < 1e-10

    def test_rescaling_invariance(self):
        rng = np.random.default_rng(3)
        du, dg = rng.standard_normal(8), rng.standard_normal(8)
        results = []
        for c in (1.0, 4.0, 2.0**-20):
            st = ht.TrackerState.initial(np.zeros(8), mode="track_hessian")
            ht._learn(st, c * du, c * dg)
            results.append(st.F.params())
        np.testing.assert_array_equal(results[0], results[1])
        np.testing.assert_array_equal(results[0], results[2])

    def test_tiny_step_skips_update(self):
        st = ht.TrackerState.initial(np.zeros(4))
        before = st.F.params()
        assert np.isnan(ht._learn(st, np.full(4, 1e-16), np.ones(4)))
        assert np.isnan(ht._learn(st, np.ones(4), np.array([np.nan, 0, 0, 0])))
        np.testing.assert_array_equal(st.F.params(), before)
        assert st.hessian_updates == 0

    def test_flat_direction_inverse_mode_skips(self):
        # linear objective: the gradient never changes, so dg = 0
        obj = ht.Quadratic(np.zeros((4, 4)), np.ones(4))
        st = ht.TrackerState.initial(np.zeros(4), mode="track_inverse_hessian")
        for _ in range(3):
            row = ht.step(st, obj)
        assert np.isnan(row["hessian_train_loss"])
        assert st.hessian_updates == 0

    def test_diverged(self):
        class Bad(ht.Objective):
            n = 2

            def eval(self, u):
                return 0.0

            def _grad(self, u):
                return np.array([np.inf, 0.0])

        with pytest.raises(ht.DivergedError):
            ht.step(ht.TrackerState.initial(np.zeros(2)), Bad())

    def test_literal_update_uses_forward(self):
        st = ht.TrackerState.initial(np.zeros(4), literal_update=True)
        st.F.d[:] = [2.0, 2.0, 2.0, 2.0]
        np.testing.assert_allclose(ht._direction(st, np.ones(4)), 2.0 * np.ones(4))
        st.literal_update = False
        np.testing.assert_allclose(ht._direction(st, np.ones(4)), 0.5 * np.ones(4))

    def test_line_search_never_increases_loss(self):
        obj = ex.make_objective("rosenbrock", 8, 0)
        _, log = ht.run(obj, ex.initial_point("rosenbrock", 8, 0), 50, line_search=True, beta=1.0)
        losses = [r["loss"] for r in log]
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            ht.TrackerState.initial(np.zeros(2), mode="newton")


class TestInverseMode:
    def test_scalar_hessian_learns_reciprocal(self):
        c, n = 4.0, 8
        obj = ht.Quadratic(c * np.eye(n), np.ones(n))
        st = ht.TrackerState.initial(np.zeros(n), mode="track_inverse_hessian", lr_q=0.1, lr_d=0.1)
        for _ in range(60):
            ht.step_inverse_mode(st, obj)
        np.testing.assert_allclose(st.F.d, 1.0 / c, atol=1e-2)
        # from any point, a step with the learned model is a Newton step
        u = np.random.default_rng(0).standard_normal(n)
        newton = u - np.linalg.solve(obj.A, obj.grad(u))
        np.testing.assert_allclose(u - st.F.forward(obj.grad(u)), newton, atol=5e-2)
        np.testing.assert_allclose(st.u, np.ones(n) / c, atol=1e-6)


class TestMinibatch:
    def test_full_dataset_minibatch_equals_full_batch(self):
        obj = ex.make_objective("lstsq", 16, 0, samples=40)
        u0 = ex.initial_point("lstsq", 16, 0)
        a = ht.TrackerState.initial(u0)
        b = ht.TrackerState.initial(u0)
        everything = np.arange(40)
        for _ in range(15):
            ht.step(a, obj)
            ht.step_minibatch(b, obj, everything)
        np.testing.assert_allclose(a.u, b.u, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(a.F.params(), b.F.params(), rtol=1e-12, atol=1e-14)

    def test_affine_identity(self):
        rng = np.random.default_rng(0)
        F = SymmetricFactorization(ButterflyProduct.random(16, rng), rng.uniform(0.1, 1, 16))
        du = rng.standard_normal(16)
        parts = rng.standard_normal((8, 16))
        mean_of_grads = np.mean([F.loss_gradient(du, g).flat() for g in parts], axis=0)
        grad_of_mean = F.loss_gradient(du, parts.mean(axis=0)).flat()
        assert np.abs(mean_of_grads - grad_of_mean).max() < 1e-12

    def test_reuse_gradient_budget(self):
        obj = ex.make_objective("lstsq", 64, 0)
        u0 = ex.initial_point("lstsq", 64, 0)
        obj.grad_evals = 0
        ht.run(obj, u0, 1000, minibatch="reuse", batch_size=50, reuse=4, beta=0.5, lr_q=0.01, lr_d=0.01)
        assert obj.grad_evals <= 1.25 * 1000

    def test_logistic_reuse_close_to_recompute(self):
        obj = ex.make_objective("logistic", 64, 0)
        u0 = ex.initial_point("logistic", 64, 0)
        results = {}
        for policy in ("recompute_prev", "reuse"):
            obj.grad_evals = 0
            st, _ = ht.run(obj, u0, 1000, minibatch=policy, batch_size=50, reuse=4, beta=0.5, lr_q=0.01, lr_d=0.01)
            results[policy] = (obj.eval(st.u), obj.grad_evals)
        assert results["reuse"][0] <= 1.05 * results["recompute_prev"][0]
        assert results["reuse"][1] < results["recompute_prev"][1]

    def test_schedule_repeats_same_object(self):
        batches = list(ht.minibatch_schedule(100, 10, 12, reuse=4, seed=0))
        assert batches[0] is batches[3] and batches[4] is not batches[3]
        assert all(len(b) == 10 for b in batches)


class TestRunLog:
    def test_fields_and_oracle_angle(self, tmp_path):
        obj = quadratic(8, 0)
        _, log = ht.run(obj, np.ones(8), 5, hessian_oracle=obj.hessian, angle_samples=50)
        text = ht.write_log_csv(log, tmp_path / "log.csv")
        assert text.splitlines()[0] == "t,loss,grad_norm,hessian_train_loss,min_d,max_d,angle_to_true_hessian"
        assert len(text.splitlines()) == 6

    def test_tolerance_stops(self):
        obj = quadratic(8, 0)
        it = ht.iterations_to(obj, np.ones(8), 1e-6, 2000)
        assert it is not None
        _, log = ht.run(obj, np.ones(8), 2000, tol=1e-6)
        assert log[-1]["loss"] <= 1e-6 and len(log) == it + 1


@pytest.mark.xfail(strict=True, reason="tracked estimate stalls well above 5 degrees; see decisions ledger")
def test_exact_butterfly_quadratic_tracked_within_five_degrees():
    rng = np.random.default_rng(0)
    target = SymmetricFactorization(ButterflyProduct.random(16, rng), rng.uniform(0.1, 1.0, 16))
    A = target.to_dense()
    st, _ = ht.run(ht.Quadratic(A), rng.standard_normal(16), 500)
    assert average_angle(st.F, A) < 5.0
