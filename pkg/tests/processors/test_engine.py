"""
Tests for schedules, budgets and the federated driver.
"""
import logging

import numpy as np
import pytest

from proxfed.loaders.synthetic import HeterogeneityConfig, generate_instance
from proxfed.problems.losses import LossModel
from proxfed.processors import engine
from proxfed.processors.engine import (
    Algorithm,
    EpsPolicy,
    FedAvgConfig,
    FederatedRunner,
    RunConfig,
    ScheduleKind,
    epsilon_budget,
    run,
    schedule_eta,
    summary_metric,
)
from proxfed.utils.errors import ConfigError, DomainError
from tests.test_utils import make_homogeneous, make_instance


class TestScheduleEta:
    """Test cases for step schedules."""

    def test_smooth_fedprox(self):
        """Test (1/3L) min(T^-1/3, sqrt(I/T))."""
        assert schedule_eta(ScheduleKind.SMOOTH_FEDPROX, 1.0, 0.0, 8, 2) == pytest.approx(1 / 6)

    def test_smooth_fedprox_full_participation(self):
        """Test that I = M drops the sampling term."""
        full = schedule_eta(ScheduleKind.SMOOTH_FEDPROX, 1.0, 0.0, 8, 1, M=1)
        partial = schedule_eta(ScheduleKind.SMOOTH_FEDPROX, 1.0, 0.0, 8, 1, M=2)
        assert full == pytest.approx(1 / 6)
        assert partial == pytest.approx(np.sqrt(1 / 8) / 3)

    def test_smooth_fedmspp(self):
        """Test (1/8L) min(T^-1/3, sqrt(bI/T))."""
        assert schedule_eta(ScheduleKind.SMOOTH_FEDMSPP, 1.0, 0.0, 64, 2, b=2) == pytest.approx(1 / 32)

    def test_nonsmooth_rho(self):
        """Test rho / sqrt(T)."""
        assert schedule_eta(ScheduleKind.NONSMOOTH_RHO, None, 0.0, 100, 1, rho=0.1) == pytest.approx(0.01)

    def test_rho_limit(self):
        """Test that rho >= 1/(2 nu) raises."""
        with pytest.raises(ConfigError, match='run.rho'):
            schedule_eta(ScheduleKind.NONSMOOTH_RHO, None, 1.0, 100, 1, rho=0.5)

    def test_manual(self):
        """Test the manual schedule and its missing value."""
        assert schedule_eta('Manual', 1.0, 0.0, 10, 1, eta_manual=0.3) == 0.3
        with pytest.raises(ConfigError, match='run.eta_manual'):
            schedule_eta(ScheduleKind.MANUAL, 1.0, 0.0, 10, 1)

    def test_smooth_needs_L(self):
        """Test that smooth schedules need L."""
        with pytest.raises(ConfigError):
            schedule_eta(ScheduleKind.SMOOTH_FEDPROX, None, 0.0, 10, 1)

    def test_names(self):
        """Test enum name parsing."""
        assert ScheduleKind.from_name('smooth_fedmspp') is ScheduleKind.SMOOTH_FEDMSPP
        assert Algorithm.from_name('CentralPPA') is Algorithm.CENTRAL_PPA
        with pytest.raises(ConfigError):
            Algorithm.from_name('FedSGD')


class TestEpsilonBudget:
    """Test cases for the per-round sub-optimality budget."""

    def test_fedprox(self):
        """Test min(G/(2L sqrt(I)), G eta / I)."""
        assert epsilon_budget(Algorithm.FEDPROX, 1.0, 1.0, 0.1, 4) == pytest.approx(0.025)

    def test_fedmspp(self):
        """Test min(G/2L, G^2 eta/8b^2, G eta/2bI)."""
        assert epsilon_budget(Algorithm.FEDMSPP, 1.0, 1.0, 0.1, 2, b=2) == pytest.approx(0.003125)

    def test_monotone_in_eta(self):
        """Test that the budget vanishes with eta."""
        budgets = [epsilon_budget(Algorithm.FEDPROX, 1.0, 1.0, eta, 4) for eta in (0.1, 0.01, 1e-6)]
        assert budgets[0] > budgets[1] > budgets[2]
        assert budgets[2] < 1e-6

    def test_zero_budgets(self):
        """Test the policies and kinds that route to the exact solver."""
        assert epsilon_budget(Algorithm.FEDPROX, 1.0, 1.0, 0.1, 4, policy=EpsPolicy.EXACT) == 0.0
        assert epsilon_budget(Algorithm.FEDPROX, 1.0, None, 0.1, 4) == 0.0
        assert epsilon_budget(Algorithm.FEDAVG, 1.0, 1.0, 0.1, 4) == 0.0

    def test_fixed(self):
        """Test the fixed policy."""
        assert epsilon_budget(Algorithm.FEDPROX, 1.0, 1.0, 0.1, 4, policy='Fixed', eps_fixed=1e-3) == 1e-3


class TestRunConfig:
    """Test cases for run configuration checks."""

    def test_too_many_devices(self):
        """Test that I > M raises naming run.I."""
        with pytest.raises(ConfigError, match='run.I'):
            RunConfig(I=5).validate(make_instance(M=4))

    def test_smooth_schedule_on_nonsmooth_loss(self):
        """Test that a smooth schedule with the absolute loss raises."""
        with pytest.raises(ConfigError, match='run.schedule'):
            RunConfig(I=1).validate(make_instance('absolute'))

    def test_fixed_needs_value(self):
        """Test that the fixed policy needs eps_fixed."""
        with pytest.raises(ConfigError, match='run.eps_fixed'):
            RunConfig(I=1, eps_policy='Fixed').validate(make_instance())

    def test_manual_eta_too_large(self):
        """Test that eta >= 1/L raises."""
        inst = make_instance()
        cfg = RunConfig(I=1, schedule='Manual', eta_manual=2.0 / inst.constants.L)
        with pytest.raises(ConfigError):
            cfg.validate(inst)

    def test_fedavg_config(self):
        """Test FedAvg knob validation."""
        with pytest.raises(ConfigError, match='run.fedavg.epochs'):
            FedAvgConfig(epochs=0).validate()


class TestFederatedRunner:
    """Test cases for federated runs."""

    @pytest.fixture
    def quadratic(self):
        """Create a small heterogeneous quadratic instance."""
        return make_instance('quadratic', M=3, p=3, base_n=10)

    def test_central_ppa_recursion(self, quadratic):
        """Test CentralPPA against the hand-iterated closed-form recursion."""
        eta = 0.5 / quadratic.constants.L
        cfg = RunConfig(algorithm='CentralPPA', T=20, I=1, schedule='Manual', eta_manual=eta,
                        eps_policy='Exact')
        trace = run(quadratic, cfg)
        pooled = quadratic.pooled()
        A, c, y = pooled.features, pooled.weights, pooled.labels
        lhs = A.T @ (c[:, None] * A) + np.eye(3) / eta
        w = np.zeros(3)
        for t in range(1, 21):
            w = np.linalg.solve(lhs, A.T @ (c * y) + w / eta)
            assert np.linalg.norm(trace.iterates[t] - w) < 1e-11
        assert len(trace.records) == 20

    def test_homogeneous_reduction(self):
        """Test that FedProx with I = M on shared data matches CentralPPA."""
        inst = make_homogeneous('quadratic', M=4, p=3, n=20)
        common = dict(T=15, I=4, eps_policy='Exact', seed=3)
        fed = run(inst, RunConfig(algorithm='FedProx', **common))
        central = run(inst, RunConfig(algorithm='CentralPPA', **common))
        for a, b in zip(fed.iterates, central.iterates):
            assert np.linalg.norm(a - b) < 1e-10

    def test_fedmspp_full_batch_matches_fedprox(self, quadratic):
        """Test that full-batch FedMSPP reproduces FedProx."""
        eta = 0.5 / quadratic.constants.L
        common = dict(T=10, I=2, schedule='Manual', eta_manual=eta, eps_policy='Exact', seed=9)
        fedprox = run(quadratic, RunConfig(algorithm='FedProx', **common))
        fedmspp = run(quadratic, RunConfig(algorithm='FedMSPP', b=1, full_batch_minibatch=True,
                                           **common))
        for a, b in zip(fedprox.iterates, fedmspp.iterates):
            assert np.array_equal(a, b)
        assert [r.sampled_devices for r in fedprox.records] == \
            [r.sampled_devices for r in fedmspp.records]

    def test_deterministic_across_threads(self):
        """Test identical traces for 1 and 2 threads."""
        inst = make_instance('logistic', M=4)
        common = dict(algorithm='FedMSPP', T=8, I=2, b=3, schedule='SmoothFedMSPP', seed=4)
        first = run(inst, RunConfig(threads=1, **common))
        second = run(inst, RunConfig(threads=2, **common))
        assert first.records == second.records
        for a, b in zip(first.iterates, second.iterates):
            assert np.array_equal(a, b)
        assert first.summary['t_star'] == second.summary['t_star']

    def test_seed_changes_sampling(self):
        """Test that the seed drives device sampling."""
        inst = make_instance('logistic', M=6)
        first = run(inst, RunConfig(T=10, I=2, seed=1))
        second = run(inst, RunConfig(T=10, I=2, seed=2))
        assert [r.sampled_devices for r in first.records] != [r.sampled_devices for r in second.records]

    def test_smooth_residuals(self):
        """Test aggregation, budget and step-identity residuals of a smooth run."""
        inst = make_instance('logistic', M=4)
        trace = run(inst, RunConfig(T=10, I=4, seed=0))
        assert trace.residual_max('aggregation_residual') <= 1e-12
        assert trace.residual_max('eps_excess') <= 0.0
        assert trace.residual_max('step_identity_excess') <= 1e-9
        assert trace.residual_max('step_identity_sound_excess') <= 1e-12
        assert trace.residual_max('concentration_excess') <= 0.0
        for record in trace.records:
            assert record.eps_certified_max <= record.eps_budget
            assert record.global_grad_sq is not None
            assert record.moreau_grad_sq is None

    def test_fedmspp_budget(self):
        """Test FedMSPP certificates against the budget."""
        inst = make_instance('logistic', M=4)
        trace = run(inst, RunConfig(algorithm='FedMSPP', T=10, I=2, b=2, schedule='SmoothFedMSPP'))
        assert trace.residual_max('eps_excess') <= 0.0
        assert trace.residual_max('step_identity_sound_excess') <= 1e-12
        assert trace.residual_max('concentration_excess') is None

    def test_nonsmooth_run(self):
        """Test an absolute-loss run with the dual local solver."""
        inst = make_instance('absolute', M=4, p=3, base_n=15)
        cfg = RunConfig(T=5, I=2, schedule='NonsmoothRho', rho=0.1, eps_policy='Exact',
                        inner_solver='dual')
        trace = run(inst, cfg)
        assert trace.residual_max('step_length_excess') <= 0.0
        assert trace.residual_max('global_step_excess') <= 0.0
        for record in trace.records:
            assert record.global_grad_sq is None
            assert record.moreau_grad_sq is not None
        assert summary_metric(trace)[0] == 'avg_moreau_sq'

    def test_fedavg_zero_lr(self):
        """Test that FedAvg with lr = 0 never moves."""
        inst = make_instance('logistic', M=3)
        cfg = RunConfig(algorithm='FedAvg', T=4, I=2, fedavg=FedAvgConfig(lr=0.0))
        trace = run(inst, cfg, w0=np.ones(inst.p))
        for w in trace.iterates:
            assert np.array_equal(w, np.ones(inst.p))
        assert all(r.eps_budget is None and r.eps_certified_max is None for r in trace.records)

    def test_fedavg_decreases_risk(self):
        """Test that FedAvg makes progress on a quadratic instance."""
        inst = make_instance('quadratic', M=3, p=3, base_n=20)
        cfg = RunConfig(algorithm='FedAvg', T=30, I=3, fedavg=FedAvgConfig(epochs=2, lr=0.02, minibatch=5))
        trace = run(inst, cfg)
        assert trace.records[-1].global_grad_sq < trace.records[0].global_grad_sq

    def test_summary(self):
        """Test the summary keys and the sampled output index."""
        inst = make_instance('logistic', M=3)
        trace = run(inst, RunConfig(T=6, I=2, seed=5))
        summary = trace.summary
        assert summary['algorithm'] == 'FedProx'
        assert 0 <= summary['t_star'] < 6
        assert summary['w_t_star'] == trace.iterates[summary['t_star']].tolist()
        assert summary['final_model'] == trace.final_model.tolist()
        assert summary['avg_grad_sq'] == pytest.approx(
            np.mean([r.global_grad_sq for r in trace.records]))
        assert summary_metric(trace)[0] == 'avg_grad_sq'

    def test_domain_error(self):
        """Test that leaving the certified ball raises naming the round."""
        cfg = HeterogeneityConfig(M=2, p=2, base_n=10, shift=1.0)
        inst = generate_instance(cfg, LossModel('quadratic', domain_radius=0.01), 0)
        runner = FederatedRunner(inst, RunConfig(algorithm='CentralPPA', T=5, I=1, schedule='Manual',
                                                 eta_manual=0.5 / inst.constants.L,
                                                 eps_policy='Exact'))
        with pytest.raises(DomainError) as excinfo:
            runner.run()
        assert excinfo.value.round == 1

    def test_non_finite_iterate_raises_domain_error(self):
        """Test that a diverging FedAvg run stops with DomainError rather than a NaN downstream."""
        inst = make_instance('quadratic', M=2, p=3, base_n=10)
        cfg = RunConfig(algorithm='FedAvg', T=3, I=2,
                        fedavg=FedAvgConfig(epochs=200, lr=50.0, minibatch=1))
        with np.errstate(all='ignore'):
            with pytest.raises(DomainError) as excinfo:
                run(inst, cfg)
        assert excinfo.value.round == 1
        assert not np.isfinite(excinfo.value.norm)

    def test_full_directions_partial_participation(self):
        """Test that d_bar_t is computed on demand when I < M."""
        inst = make_instance('logistic', M=4)
        partial = run(inst, RunConfig(T=6, I=2, seed=0))
        assert partial.residual_max('concentration_excess') is None
        full = run(inst, RunConfig(T=6, I=2, seed=0, full_directions=True))
        assert all(r.invariant_residuals['concentration_excess'] is not None for r in full.records)
        assert full.residual_max('concentration_excess') <= 0.0
        for a, b in zip(partial.iterates, full.iterates):
            assert np.array_equal(a, b)

    def test_full_directions_fedprox_only(self):
        """Test that minibatch runs keep concentration_excess unrecorded."""
        inst = make_instance('logistic', M=4)
        trace = run(inst, RunConfig(algorithm='FedMSPP', T=4, I=2, b=2, schedule='SmoothFedMSPP',
                                    full_directions=True))
        assert trace.residual_max('concentration_excess') is None

    def test_progress_follows_log_level(self, monkeypatch, caplog):
        """Test that the progress bar is hidden when INFO messages are."""
        seen = []

        def fake_tqdm(iterable, **kwargs):
            seen.append(kwargs['disable'])
            return iterable

        monkeypatch.setattr(engine, 'tqdm', fake_tqdm)
        inst = make_instance('logistic', M=2)
        caplog.set_level(logging.WARNING, logger='proxfed.processors.engine')
        run(inst, RunConfig(T=2, I=1, progress=True))
        caplog.set_level(logging.INFO, logger='proxfed.processors.engine')
        run(inst, RunConfig(T=2, I=1, progress=True))
        run(inst, RunConfig(T=2, I=1, progress=False))
        assert seen == [True, False, True]

    def test_population_overrun_warns(self, caplog):
        """Test that population draws beyond the certified feature norm are counted and logged."""
        inst = make_instance('logistic', M=2, p=3, base_n=5)
        cfg = RunConfig(algorithm='FedMSPP', T=5, I=2, b=50, schedule='SmoothFedMSPP',
                        sampling_mode='Population', seed=1)
        with caplog.at_level(logging.WARNING, logger='proxfed.processors.engine'):
            trace = run(inst, cfg)
        assert trace.summary['certificate_overruns'] > 0
        assert 'larger constants than the instance certifies' in caplog.text

    def test_population_bounded_features(self, caplog):
        """Test that Rademacher populations never exceed the certified constants."""
        inst = make_instance('logistic', M=2, p=3, base_n=5, feature_law='rademacher')
        cfg = RunConfig(algorithm='FedMSPP', T=5, I=2, b=50, schedule='SmoothFedMSPP',
                        sampling_mode='Population', seed=1)
        with caplog.at_level(logging.WARNING, logger='proxfed.processors.engine'):
            trace = run(inst, cfg)
        assert trace.summary['certificate_overruns'] == 0
        assert 'larger constants' not in caplog.text
