import math
import os

import numpy as np
import pytest

import latentplan.autodiff as ad
from latentplan import expert, imitation
from latentplan.imitation import (CurriculumSampler, TrainConfig, imitate_step,
                                  sample_batch, split_dataset, train,
                                  train_baseline, validation_loss)
from latentplan.nets import load_checkpoint
from latentplan.optim import Adam
from latentplan.planner import PlannerConfig
from latentplan.worlds import EnvConfig


ENV = EnvConfig(image_size=24, max_steps=30)


@pytest.fixture(scope="module")
def dataset():
    return expert.build_dataset("fovg", 40, 13, ENV,
                                expert.ExpertConfig(action_noise=0.6,
                                                    cruise_speed=0.5))


def micro_config(**kw):
    base = dict(batch_size=12, total_updates=6, validation_period=3,
                curriculum_updates=3, horizon_max=6, val_items=12,
                planner=PlannerConfig(updates=3, horizon=6))
    base.update(kw)
    return TrainConfig(**base)


class TestSampler:
    def test_uniform_mean_over_full_range(self):
        s = CurriculumSampler(horizon_max=50, lam=10.0, switch_updates=0)
        rng = np.random.default_rng(0)
        draws = [s.sample(rng, update_index=10) for _ in range(100_000)]
        assert abs(np.mean(draws) - 25.5) < 0.5
        assert min(draws) >= 1 and max(draws) <= 50

    def test_truncated_poisson_mean(self):
        s = CurriculumSampler(horizon_max=50, lam=10.0, switch_updates=10 ** 9)
        rng = np.random.default_rng(1)
        draws = np.array([s.sample(rng, update_index=0) for _ in range(100_000)])
        # independent oracle: mean of the poisson(10) pmf truncated to [1,50]
        from math import exp, factorial
        pmf = np.array([exp(-10) * 10 ** k / factorial(k) for k in range(1, 51)])
        expected = float((np.arange(1, 51) * pmf).sum() / pmf.sum())
        assert abs(draws.mean() - expected) < 0.1
        assert expected == pytest.approx(10.0, abs=0.01)
        assert 9.3 <= draws.mean() <= 10.7
        assert draws.min() >= 1 and draws.max() <= 50

    def test_cap_respected(self):
        s = CurriculumSampler(horizon_max=50, lam=10.0, switch_updates=0)
        rng = np.random.default_rng(2)
        assert all(s.sample(rng, 5, cap=3) <= 3 for _ in range(200))
        assert s.sample(rng, 5, cap=1) == 1

    def test_switch_to_uniform_after_cutoff(self):
        s = CurriculumSampler(horizon_max=30, lam=2.0, switch_updates=100)
        rng = np.random.default_rng(3)
        early = np.mean([s.sample(rng, 0) for _ in range(5000)])
        late = np.mean([s.sample(rng, 100) for _ in range(5000)])
        assert early < 4.0 and late > 12.0


class TestSampleBatch:
    def test_horizon_one_has_single_action(self, dataset):
        s = CurriculumSampler(horizon_max=1, lam=1.0, switch_updates=0)
        groups = sample_batch(dataset, list(range(len(dataset))), s, 8,
                              np.random.default_rng(0), 0)
        assert len(groups) == 1
        assert groups[0].horizon == 1
        assert groups[0].actions.shape[1:] == (1, 2)

    def test_groups_sorted_and_consistent(self, dataset):
        s = CurriculumSampler(horizon_max=6, lam=2.0, switch_updates=10)
        groups = sample_batch(dataset, list(range(len(dataset))), s, 32,
                              np.random.default_rng(1), 0)
        horizons = [g.horizon for g in groups]
        assert horizons == sorted(horizons)
        assert sum(len(g.q) for g in groups) == 32
        for g in groups:
            assert g.obs_t.shape == g.obs_g.shape
            assert g.actions.shape == (len(g.q), g.horizon, 2)

    def test_goal_frame_is_future_frame(self, dataset):
        # horizon caps at the trajectory length, so (t0, t0+h) stays valid
        s = CurriculumSampler(horizon_max=50, lam=5.0, switch_updates=0)
        groups = sample_batch(dataset, [0], s, 16, np.random.default_rng(2), 0)
        t = dataset.trajectories[0]
        for g in groups:
            assert g.horizon <= t.steps


class TestSplit:
    def test_fractions_and_determinism(self, dataset):
        a = split_dataset(dataset)
        b = split_dataset(dataset)
        assert a == b
        train_idx, val_idx, test_idx = a
        assert len(train_idx) + len(val_idx) + len(test_idx) == len(dataset)
        assert set(train_idx).isdisjoint(val_idx)
        assert set(train_idx).isdisjoint(test_idx)
        assert len(val_idx) >= 1 and len(test_idx) >= 1

    def test_too_small_dataset(self):
        tiny = expert.build_dataset("fovg", 2, 1, ENV)
        with pytest.raises(ValueError):
            split_dataset(tiny)


class TestAdam:
    def test_first_step_is_signed_learning_rate(self):
        from latentplan.nets import ParameterSet
        p = ParameterSet()
        p.add("w", np.array([1.0, -2.0, 3.0]))
        opt = Adam(p, lr=1e-3)
        g = np.array([0.5, -0.25, 1.0])
        opt.step({"w": g})
        moved = p["w"].data - np.array([1.0, -2.0, 3.0])
        np.testing.assert_allclose(moved, -1e-3 * np.sign(g), rtol=1e-6)

    def test_zero_gradient_no_movement(self):
        from latentplan.nets import ParameterSet
        p = ParameterSet()
        p.add("w", np.array([1.0, 2.0]))
        opt = Adam(p)
        opt.step({"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])

    def test_state_roundtrip(self):
        from latentplan.nets import ParameterSet
        p = ParameterSet()
        p.add("w", np.array([1.0, 2.0]))
        opt = Adam(p)
        opt.step({"w": np.array([0.1, -0.2])})
        state = opt.state_arrays()
        opt2 = Adam(p)
        opt2.load_state_arrays(state)
        assert opt2.t == 1
        np.testing.assert_array_equal(opt2.m["w"], opt.m["w"])


class TestImitateStep:
    def test_gradients_reach_all_components(self, dataset):
        cfg = micro_config()
        from latentplan.nets import EncoderConfig, NetConfig, init_model
        net = NetConfig(kind="upn", encoder=EncoderConfig.for_image(24),
                        action_dim=2, embodiment_dim=4)
        model = init_model(net, np.random.default_rng(0))
        opt = Adam(model.params, lr=1e-3)
        before = {k: v.data.copy() for k, v in model.params.items()}
        groups = sample_batch(dataset, list(range(len(dataset))),
                              CurriculumSampler(6, 2.0, 100), cfg.batch_size,
                              np.random.default_rng(4), 0)
        loss, plan_loss = imitate_step(model, groups, cfg, opt, seed=0,
                                       update_index=0)
        assert loss > 0 and math.isfinite(plan_loss)
        changed = {k for k in before
                   if not np.array_equal(before[k], model.params[k].data)}
        # backprop must traverse the planner into dynamics, encoder and the
        # bias transform
        assert any(k.startswith("dyn.") for k in changed)
        assert any(k.startswith("enc.") for k in changed)
        assert "bias_transform" in changed

    def test_stop_inner_grad_changes_updates(self, dataset):
        from latentplan.nets import EncoderConfig, NetConfig, init_model
        results = {}
        for stop in (False, True):
            cfg = micro_config(planner=PlannerConfig(updates=2, horizon=6,
                                                     stop_inner_grad=stop))
            net = NetConfig(kind="upn", encoder=EncoderConfig.for_image(24),
                            action_dim=2, embodiment_dim=4)
            model = init_model(net, np.random.default_rng(0))
            opt = Adam(model.params, lr=1e-3)
            groups = sample_batch(dataset, list(range(len(dataset))),
                                  CurriculumSampler(6, 2.0, 100), 12,
                                  np.random.default_rng(4), 0)
            imitate_step(model, groups, cfg, opt, seed=0, update_index=0)
            results[stop] = {k: v.data.copy() for k, v in model.params.items()}
        diffs = [k for k in results[False]
                 if not np.array_equal(results[False][k], results[True][k])]
        assert diffs

    def test_loss_invariant_to_group_order(self, dataset):
        from latentplan.nets import EncoderConfig, NetConfig, init_model
        cfg = micro_config()
        net = NetConfig(kind="upn", encoder=EncoderConfig.for_image(24),
                        action_dim=2, embodiment_dim=4)
        groups = sample_batch(dataset, list(range(len(dataset))),
                              CurriculumSampler(6, 2.0, 100), 16,
                              np.random.default_rng(5), 0)
        losses = []
        for order in (groups, list(reversed(groups))):
            model = init_model(net, np.random.default_rng(1))
            opt = Adam(model.params, lr=0.0)
            loss, _ = imitate_step(model, order, cfg, opt, seed=0,
                                   update_index=0)
            losses.append(loss)
        assert losses[0] == pytest.approx(losses[1], rel=1e-6)


class TestTrainLoop:
    def test_log_shape_and_checkpoints(self, dataset, tmp_path):
        cfg = micro_config()
        res = train(dataset, cfg, seed=0, out_dir=str(tmp_path / "run"))
        lines = open(res.log_path).read().splitlines()
        assert lines[0] == "update,train_loss,plan_loss,val_loss"
        assert len(lines) == 1 + cfg.total_updates
        val_rows = [l for l in lines[1:] if l.split(",")[3]]
        assert len(val_rows) == cfg.total_updates // cfg.validation_period
        assert os.path.exists(res.best_checkpoint)
        assert os.path.exists(res.last_checkpoint)

    def test_seeded_determinism(self, dataset, tmp_path):
        cfg = micro_config()
        a = train(dataset, cfg, seed=3, out_dir=str(tmp_path / "a"))
        b = train(dataset, cfg, seed=3, out_dir=str(tmp_path / "b"))
        assert open(a.log_path).read() == open(b.log_path).read()
        assert open(a.best_checkpoint, "rb").read() == \
               open(b.best_checkpoint, "rb").read()

    def test_resume_matches_uninterrupted(self, dataset, tmp_path):
        cfg = micro_config(total_updates=6, validation_period=3,
                           checkpoint_period=3)
        full = train(dataset, cfg, seed=1, out_dir=str(tmp_path / "full"))
        part_cfg = micro_config(total_updates=3, validation_period=3,
                                checkpoint_period=3)
        out = str(tmp_path / "resumed")
        train(dataset, part_cfg, seed=1, out_dir=out)
        resumed = train(dataset, cfg, seed=1, out_dir=out, resume=True)
        assert open(full.log_path).read() == open(resumed.log_path).read()
        assert open(full.last_checkpoint, "rb").read() == \
               open(resumed.last_checkpoint, "rb").read()

    def test_resume_with_zero_extra_updates_reproduces_val(self, dataset,
                                                           tmp_path):
        cfg = micro_config(total_updates=4, validation_period=2,
                           checkpoint_period=2)
        out = str(tmp_path / "run")
        first = train(dataset, cfg, seed=2, out_dir=out)
        header, _, _ = load_checkpoint(first.best_checkpoint)
        again = train(dataset, cfg, seed=2, out_dir=out, resume=True)
        assert again.updates_run == 0
        header2, _, _ = load_checkpoint(again.best_checkpoint)
        assert header["extra"]["val_loss"] == header2["extra"]["val_loss"]


class TestBaselines:
    def test_reactive_and_autoregressive_train(self, dataset, tmp_path):
        for kind in ("ril", "ail"):
            res = train_baseline(dataset, micro_config(), seed=0,
                                 out_dir=str(tmp_path / kind), kind=kind)
            header, _, _ = load_checkpoint(res.best_checkpoint)
            assert header["config"]["kind"] == kind

    def test_unknown_kind(self, dataset, tmp_path):
        with pytest.raises(ValueError):
            train_baseline(dataset, micro_config(), 0, str(tmp_path), "vae")

    def test_reactive_uses_uniform_and_autoregressive_shares_curriculum(self):
        # the horizon sampler is the planner's for 'ail', uniform for 'ril';
        # identical streams under identical seeds
        upn = CurriculumSampler(10, 2.0, 100, mode="curriculum")
        ail = CurriculumSampler(10, 2.0, 100, mode="curriculum")
        ril = CurriculumSampler(10, 2.0, 100, mode="uniform")
        a = [upn.sample(np.random.default_rng([9, i]), 0) for i in range(500)]
        b = [ail.sample(np.random.default_rng([9, i]), 0) for i in range(500)]
        c = [ril.sample(np.random.default_rng([9, i]), 0) for i in range(500)]
        assert a == b
        assert np.mean(c) > np.mean(a)  # uniform is not short-biased

    def test_ril_validation_uses_first_action_only(self, dataset):
        from latentplan.nets import EncoderConfig, NetConfig, init_model
        net = NetConfig(kind="ril", encoder=EncoderConfig.for_image(24),
                        action_dim=2, embodiment_dim=4)
        model = init_model(net, np.random.default_rng(0))
        groups = imitation._validation_items(dataset, list(range(10)), 8,
                                             seed=0, horizon_max=6)
        loss = validation_loss(model, groups, micro_config(), seed=0)
        assert math.isfinite(loss)
