import numpy as np
import pytest

from trajcl.config import RunConfig
from trajcl.errors import EmptyBatch, NonFiniteInput, ShapeMismatch
from trajcl.memory import AllocationPlan, ScenarioRepository, repo_update
from trajcl.trainer import (GradientMatrix, TrainerConfig, derive_seed,
                            gradient_violations, previous_losses,
                            project_gradient, qp_solve_dual, run_continual,
                            train_scenario)

import oracles


def quad_loss(theta, batch):
    centers = np.asarray(batch, dtype=np.float64)
    return float(np.mean(0.5 * np.sum((theta - centers) ** 2, axis=1)))


def quad_loss_grad(theta, batch):
    centers = np.asarray(batch, dtype=np.float64)
    return quad_loss(theta, batch), np.mean(theta - centers, axis=0)


class TestGradientViolations:
    def test_positive_inner_product(self):
        gmat = GradientMatrix([1], np.array([[1.0, 0.0]]))
        assert gradient_violations(np.array([1.0, 2.0]), gmat) == []

    def test_negative_inner_product(self):
        gmat = GradientMatrix([1], np.array([[0.0, 1.0]]))
        assert gradient_violations(np.array([1.0, -1.0]), gmat) == [1]

    def test_orthogonal_is_feasible(self):
        gmat = GradientMatrix([1], np.array([[0.0, 1.0]]))
        assert gradient_violations(np.array([1.0, 0.0]), gmat) == []

    def test_shape_mismatch(self):
        gmat = GradientMatrix([1], np.array([[0.0, 1.0, 2.0]]))
        with pytest.raises(ShapeMismatch):
            gradient_violations(np.array([1.0, 0.0]), gmat)


class TestQpSolveDual:
    def test_nonnegative_coupling_gives_zero(self):
        ggt = np.array([[2.0, 0.1], [0.1, 1.0]])
        gg = np.array([0.5, 0.3])
        sol = qp_solve_dual(ggt, gg)
        np.testing.assert_allclose(sol.v, 0.0, atol=1e-12)
        assert sol.converged

    def test_scalar_calculus_case(self):
        # g=(1,-1), g1=(0,1): minimize v^2/2 - v -> v* = 1
        sol = qp_solve_dual(np.array([[1.0]]), np.array([-1.0]))
        assert sol.v[0] == pytest.approx(1.0, abs=1e-8)
        assert sol.kkt_residual <= 1e-8

    def test_random_instances_match_primal_oracle(self):
        # check the recovered projection G'v + g against active-set enumeration
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = int(rng.integers(2, 12))
            m = int(rng.integers(1, 5))
            g = rng.standard_normal(p)
            rows = rng.standard_normal((m, p))
            sol = qp_solve_dual(rows @ rows.T, rows @ g)
            assert np.all(sol.v >= 0.0)
            recovered = rows.T @ sol.v + g
            want = oracles.project_active_set(g, rows)
            assert np.linalg.norm(recovered - want) <= 1e-6

    def test_non_finite_input(self):
        with pytest.raises(NonFiniteInput):
            qp_solve_dual(np.array([[np.nan]]), np.array([1.0]))

    def test_max_iterations_returns_best_iterate(self, caplog):
        import logging
        ggt = np.array([[2.0, 1.0], [1.0, 2.0]])
        gg = np.array([-3.0, -1.0])
        with caplog.at_level(logging.WARNING, logger="trajcl.trainer"):
            sol = qp_solve_dual(ggt, gg, qp_tol=1e-14, max_iter=2)
        assert not sol.converged
        assert sol.iterations == 2
        assert np.all(np.isfinite(sol.v)) and sol.kkt_residual > 0
        assert any("did not reach" in r.message for r in caplog.records)


class TestProjectGradient:
    def test_feasible_point_untouched(self):
        gmat = GradientMatrix([1], np.array([[1.0, 0.0]]))
        g = np.array([1.0, 2.0])
        result = project_gradient(g, gmat, gamma=0.0)
        assert not result.active
        np.testing.assert_array_equal(result.g_tilde, g)

    def test_halfspace_analytic(self):
        gmat = GradientMatrix([1], np.array([[0.0, 1.0]]))
        result = project_gradient(np.array([1.0, -1.0]), gmat, gamma=0.0)
        np.testing.assert_allclose(result.g_tilde, [1.0, 0.0], atol=1e-9)
        assert result.active and result.violations_before == [1]

    def test_two_constraint_corner(self):
        gmat = GradientMatrix([1, 2], np.array([[1.0, 0.0], [0.0, 1.0]]))
        result = project_gradient(np.array([-1.0, -1.0]), gmat, gamma=0.0)
        np.testing.assert_allclose(result.g_tilde, [0.0, 0.0], atol=1e-9)

    def test_matches_active_set_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            p = int(rng.integers(2, 21))
            m = int(rng.integers(1, 5))
            g = rng.standard_normal(p)
            rows = rng.standard_normal((m, p))
            gmat = GradientMatrix(list(range(m)), rows)
            got = project_gradient(g, gmat, gamma=0.0).g_tilde
            want = oracles.project_active_set(g, rows)
            assert np.linalg.norm(got - want) <= 1e-6
            assert np.all(rows @ got >= -1e-8)

    def test_idempotent_on_projected_point(self):
        rng = np.random.default_rng(9)
        rows = rng.standard_normal((3, 6))
        gmat = GradientMatrix([1, 2, 3], rows)
        first = project_gradient(rng.standard_normal(6), gmat, gamma=0.0)
        second = project_gradient(first.g_tilde, gmat, gamma=0.0)
        np.testing.assert_allclose(second.g_tilde, first.g_tilde, atol=1e-7)

    def test_noop_is_bitwise(self):
        rng = np.random.default_rng(11)
        rows = np.abs(rng.standard_normal((2, 5)))
        g = np.abs(rng.standard_normal(5))
        result = project_gradient(g, GradientMatrix([1, 2], rows), gamma=0.0)
        assert not result.active
        assert result.g_tilde is g or np.array_equal(result.g_tilde, g)

    def test_gamma_biases_toward_memory(self):
        gmat = GradientMatrix([1], np.array([[0.0, 1.0]]))
        result = project_gradient(np.array([1.0, -1.0]), gmat, gamma=0.1)
        # recovery adds gamma * g_1 on top of the plain projection
        np.testing.assert_allclose(result.g_tilde, [1.0, 0.1], atol=1e-9)


class TestPreviousLosses:
    def test_matches_direct_loss(self):
        theta = np.array([0.3, -0.2])
        batch = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        out = previous_losses(theta, {1: batch}, quad_loss)
        assert out[1] == pytest.approx(quad_loss(theta, batch))

    def test_identical_batches_identical_values(self):
        theta = np.array([0.5, 0.5])
        batch = [np.array([1.0, 1.0])]
        out = previous_losses(theta, {1: batch, 2: list(batch)}, quad_loss)
        assert out[1] == out[2]

    def test_two_sample_hand_mean(self):
        theta = np.zeros(2)
        b = [np.array([2.0, 0.0]), np.array([0.0, 2.0])]
        per_sample = [quad_loss(theta, [c]) for c in b]
        out = previous_losses(theta, {1: b}, quad_loss)
        assert out[1] == pytest.approx(np.mean(per_sample))

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            previous_losses(np.zeros(2), {1: []}, quad_loss)


def toy_repo(centers_by_task):
    repo = ScenarioRepository(10000)
    for sid, centers in centers_by_task.items():
        repo_update(repo, sid, centers, [], seed=sid)
    return repo


class TestTrainScenario:
    def test_no_memory_equals_plain_sgd(self):
        rng_data = np.random.default_rng(0)
        data = [rng_data.normal(0, 1, 2) for _ in range(40)]
        theta0 = np.array([5.0, -3.0])
        config = TrainerConfig(lr=0.05, epochs=3, batch_size=8, seed=123)
        theta, history = train_scenario(theta0.copy(), data, None, None, config,
                                        quad_loss_grad, quad_loss)

        # independent plain minibatch SGD with the same shuffling stream
        ref = theta0.copy()
        rng = np.random.default_rng(123)
        for _ in range(3):
            order = rng.permutation(len(data))
            for start in range(0, len(data), 8):
                batch = [data[i] for i in order[start:start + 8]]
                _, g = quad_loss_grad(ref, batch)
                ref = ref - 0.05 * g
        np.testing.assert_array_equal(theta, ref)
        assert all(r.n_violations == 0 for r in history.records)

    def test_memory_identical_to_current_never_projects(self):
        center = [np.array([2.0, 2.0])]
        repo = toy_repo({1: center})
        plan = AllocationPlan({1: 1}, 1, {1: 1.0})
        config = TrainerConfig(lr=0.1, epochs=5, batch_size=4, gamma=0.0, seed=0)
        _, history = train_scenario(np.zeros(2), list(center), repo, plan, config,
                                    quad_loss_grad, quad_loss)
        assert all(not r.projection_active for r in history.records)

    def test_conflicting_quadratic_losses(self):
        # task 1 optimum at (1, 0); the current task pulls toward (-1, 0)
        a1, a2 = np.array([1.0, 0.0]), np.array([-1.0, 0.0])
        repo = toy_repo({1: [a1]})
        plan = AllocationPlan({1: 1}, 1, {1: 1.0})
        config = TrainerConfig(lr=0.01, epochs=5, batch_size=4, gamma=0.0, seed=1)

        theta, history = train_scenario(a1.copy(), [a2] * 20, repo, plan, config,
                                        quad_loss_grad, quad_loss)
        reference = history.reference_losses[1]
        assert quad_loss(theta, [a1]) <= reference + 1e-3

        plain, _ = train_scenario(a1.copy(), [a2] * 20, None, None, config,
                                  quad_loss_grad, quad_loss)
        assert quad_loss(plain, [a1]) > reference + 1e-3

    def test_history_records_contract(self):
        a1 = np.array([1.0, 1.0])
        repo = toy_repo({1: [a1, a1 * 2]})
        plan = AllocationPlan({1: 2}, 2, {1: 1.0})
        config = TrainerConfig(lr=0.05, epochs=2, batch_size=4, seed=0)
        _, history = train_scenario(np.zeros(2), [a1] * 10, repo, plan, config,
                                    quad_loss_grad, quad_loss)
        assert len(history.records) == 2 * 3
        assert set(history.reference_losses) == {1}
        assert set(history.final_task_losses) == {1}
        for rec in history.records:
            assert 1 in rec.task_losses

    def test_empty_training_data(self):
        config = TrainerConfig()
        with pytest.raises(EmptyBatch):
            train_scenario(np.zeros(2), [], None, None, config,
                           quad_loss_grad, quad_loss)


@pytest.fixture(scope="module")
def tiny_scenarios():
    from trajcl.experiments import synthetic_sequence
    return synthetic_sequence(("straight_flow", "roundabout"), base_seed=5,
                              n_vehicles=8, duration_s=25, stride=4)


def tiny_config(**overrides) -> RunConfig:
    base = dict(memory_capacity=2000, m_cl=100, mdn_components=1, mdn_epochs=4,
                n_mc=50, condition_cap=40, lr=0.01, epochs=2, batch_size=32,
                clip_norm=25.0)
    base.update(overrides)
    return RunConfig(**base)


class TestRunContinual:
    def test_single_scenario_modes_agree(self, tiny_scenarios):
        reports = {}
        for mode in ("vanilla", "gsm", "dgsm", "joint"):
            art = run_continual(tiny_scenarios[:1], tiny_config(), mode)
            reports[mode] = art.final_report
        base = reports["vanilla"]
        for mode, rep in reports.items():
            assert rep.average_ade == base.average_ade, mode
            assert rep.per_scenario[1]["ade"] == base.per_scenario[1]["ade"]

    def test_equal_divergences_reduce_dgsm_to_gsm(self, tiny_scenarios, monkeypatch):
        import types
        from trajcl import trainer as trainer_mod

        def fake_measure(case_sets, **kwargs):
            n = len(case_sets)
            return types.SimpleNamespace(weighted=np.ones((n, n)),
                                         save=lambda path: None)

        monkeypatch.setattr(trainer_mod.div, "measure_divergence", fake_measure)
        art_d = run_continual(tiny_scenarios, tiny_config(), "dgsm")
        art_g = run_continual(tiny_scenarios, tiny_config(), "gsm")
        assert art_d.plans[1].counts == art_g.plans[1].counts
        for rep_d, rep_g in zip(art_d.eval_history, art_g.eval_history):
            assert rep_d.per_scenario == rep_g.per_scenario

    def test_artifact_directory_contract(self, tiny_scenarios, tmp_path):
        out = tmp_path / "run"
        run_continual(tiny_scenarios, tiny_config(), "gsm", out_dir=out)
        names = {p.name for p in out.iterdir()}
        assert {"config.json", "manifest.json", "checkpoint_00.json",
                "checkpoint_01.json", "eval_00.json", "eval_01.json",
                "plan_01.json", "training_log_00.csv"} <= names

    def test_joint_mode_single_phase(self, tiny_scenarios):
        art = run_continual(tiny_scenarios, tiny_config(), "joint")
        assert len(art.eval_history) == 1
        assert set(art.final_report.per_scenario) == {1, 2}

    def test_derive_seed_stable(self):
        assert derive_seed(1, 2) == derive_seed(1, 2)
        assert derive_seed(1, 2) != derive_seed(1, 3)
