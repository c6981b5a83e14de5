import os

import numpy as np
import pytest

import latentplan.autodiff as ad
from latentplan import nets
from latentplan.nets import (AutoregressiveNets, EncoderConfig, DynamicsConfig,
                             NetConfig, ParameterSet, PlannerNets, ReactiveNets,
                             load_checkpoint, load_model, save_checkpoint)


@pytest.fixture(autouse=True)
def float64_mode():
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float32)


# a miniature stack so finite differences stay affordable
TINY_ENCODER = EncoderConfig(image_hw=(8, 8), in_channels=3,
                             conv=((4, 3, 2), (8, 3, 1)), fc=(8, 8),
                             latent_dim=8)
TINY = NetConfig(kind="upn", encoder=TINY_ENCODER,
                 dynamics=DynamicsConfig(latent_dim=8, action_enc_dim=4),
                 action_dim=2, embodiment_dim=4, bias_units=3, hidden=8)


def tiny_model(seed=0, kind="upn"):
    cfg = NetConfig(kind=kind, encoder=TINY_ENCODER, dynamics=TINY.dynamics,
                    action_dim=2, embodiment_dim=4, bias_units=3, hidden=8)
    return nets.init_model(cfg, np.random.default_rng(seed))


def rand_image(rng, n=1, size=8):
    return rng.uniform(0, 255, size=(n, size, size, 3))


class TestDefaults:
    def test_canonical_encoder_stack(self):
        cfg = EncoderConfig()
        assert cfg.conv == ((32, 8, 4), (64, 4, 2), (64, 3, 1), (16, 2, 1))
        assert cfg.fc == (128, 128)
        assert cfg.latent_dim == 128
        assert cfg.image_hw == (84, 84)
        assert cfg.conv_output_hw() == (6, 6)
        assert cfg.flat_dim() == 576

    def test_reduced_42_stack_keeps_downstream_shapes(self):
        cfg = EncoderConfig.for_image(42)
        assert cfg.conv[0] == (32, 4, 2)
        assert cfg.conv_output_hw() == (6, 6)

    def test_dynamics_defaults(self):
        d = DynamicsConfig()
        assert d.latent_dim == 128 and d.action_enc_dim == 64

    def test_bias_transform_defaults(self):
        assert nets.BIAS_TRANSFORM_UNITS == 20
        assert nets.BIAS_TRANSFORM_INIT == 0.1
        assert nets.PIXEL_SCALE == 1.0 / 255.0

    def test_conv_stack_must_fit(self):
        with pytest.raises(nets.ConfigError):
            EncoderConfig(image_hw=(4, 4)).conv_output_hw()


class TestEncoder:
    def test_identical_images_identical_latents(self):
        m = tiny_model()
        img = rand_image(np.random.default_rng(0))
        a = m.encode(img).numpy()
        b = m.encode(img.copy()).numpy()
        np.testing.assert_array_equal(a, b)

    def test_zero_image_finite(self):
        m = tiny_model()
        out = m.encode(np.zeros((1, 8, 8, 3))).numpy()
        assert np.all(np.isfinite(out))

    def test_wrong_shape_raises(self):
        m = tiny_model()
        with pytest.raises(nets.ConfigError):
            m.encode(np.zeros((1, 9, 9, 3)))

    def test_encoder_gradients_match_finite_differences(self):
        m = tiny_model()
        img = ad.tensor(rand_image(np.random.default_rng(1)))
        names = ["enc.conv0.w", "enc.conv1.w", "enc.fc0.w", "enc.ln1.g"]

        def f(inputs):
            for n, v in zip(names, inputs):
                m.params[n] = v
            return ad.square(m.encode(img)).mean()

        report = ad.check_gradients(f, [m.params[n] for n in names], names=names)
        assert report.ok, str(report)


class TestFusion:
    def test_bias_transform_tiled_across_batch(self):
        m = tiny_model()
        rng = np.random.default_rng(2)
        x_row = rng.normal(size=8)
        q_row = rng.normal(size=4)
        x = ad.tensor(np.tile(x_row, (3, 1)))
        q = ad.tensor(np.tile(q_row, (3, 1)))
        out = m.fuse_embodiment(x, q).numpy()
        np.testing.assert_array_equal(out[0], out[1])
        np.testing.assert_array_equal(out[0], out[2])

    def test_embodiment_changes_output(self):
        m = tiny_model()
        rng = np.random.default_rng(3)
        x = ad.tensor(rng.normal(size=(1, 8)))
        q1 = ad.tensor(rng.normal(size=(1, 4)))
        q2 = ad.tensor(q1.numpy() + 1.0)
        a = m.fuse_embodiment(x, q1).numpy()
        b = m.fuse_embodiment(x, q2).numpy()
        assert not np.allclose(a, b)

    def test_dimension_mismatch(self):
        m = tiny_model()
        with pytest.raises(nets.ConfigError):
            m.fuse_embodiment(ad.tensor(np.zeros((1, 8))),
                              ad.tensor(np.zeros((1, 5))))

    def test_gradient_wrt_bias_transform(self):
        m = tiny_model()
        rng = np.random.default_rng(4)
        x = ad.tensor(rng.normal(size=(2, 8)))
        q = ad.tensor(rng.normal(size=(2, 4)))

        def f(inputs):
            m.params["bias_transform"] = inputs[0]
            return ad.square(m.fuse_embodiment(x, q)).mean()

        report = ad.check_gradients(f, [m.params["bias_transform"]])
        assert report.ok, str(report)


class TestActionAndDynamics:
    def test_action_encoding_deterministic(self):
        m = tiny_model()
        a = ad.tensor(np.random.default_rng(5).uniform(-1, 1, (2, 3, 2)))
        u1 = m.encode_actions(a).numpy()
        u2 = m.encode_actions(a).numpy()
        np.testing.assert_array_equal(u1, u2)
        assert u1.shape == (2, 3, 4)

    def test_zero_action_finite(self):
        m = tiny_model()
        u = m.encode_actions(ad.tensor(np.zeros((1, 1, 2)))).numpy()
        assert np.all(np.isfinite(u))

    def test_dynamics_output_shape(self):
        m = tiny_model()
        x = ad.tensor(np.zeros((3, 8)))
        u = ad.tensor(np.zeros((3, 4)))
        assert m.dynamics_step(x, u).shape == (3, 8)

    def test_unroll_composes(self):
        m = tiny_model()
        rng = np.random.default_rng(6)
        x = ad.tensor(rng.normal(size=(1, 8)))
        actions = ad.tensor(rng.uniform(-1, 1, (1, 5, 2)))
        u = m.encode_actions(actions)
        step = x
        for k in range(5):
            uk = ad.narrow(u, 1, k, 1).reshape(1, 4)
            step = m.dynamics_step(step, uk)
        from latentplan.planner import plan_rollout_latents
        states = plan_rollout_latents(m, x, actions)
        np.testing.assert_allclose(states[-1].numpy(), step.numpy(), atol=1e-12)

    def test_unroll_gradient_wrt_first_action(self):
        m = tiny_model()
        rng = np.random.default_rng(7)
        x0 = ad.tensor(rng.normal(size=(1, 8)))
        actions = ad.tensor(rng.uniform(-1, 1, (1, 5, 2)))

        def f(inputs):
            u = m.encode_actions(inputs[0])
            x = x0
            for k in range(5):
                x = m.dynamics_step(x, ad.narrow(u, 1, k, 1).reshape(1, 4))
            return ad.square(x).mean()

        report = ad.check_gradients(f, [actions])
        assert report.ok, str(report)


class TestBaselines:
    def test_reactive_output_dim_and_determinism(self):
        m = tiny_model(kind="ril")
        rng = np.random.default_rng(8)
        ot, og = rand_image(rng), rand_image(rng)
        q = ad.tensor(rng.normal(size=(1, 4)))
        a = m.forward(ot, og, q).numpy()
        b = m.forward(ot, og, q).numpy()
        assert a.shape == (1, 2)
        np.testing.assert_array_equal(a, b)

    def test_reactive_gradcheck(self):
        m = tiny_model(kind="ril")
        rng = np.random.default_rng(9)
        ot, og = rand_image(rng), rand_image(rng)
        q = ad.tensor(rng.normal(size=(1, 4)))
        names = ["head.fc0.w", "head.out.w", "enc.conv0.w"]

        def f(inputs):
            for n, v in zip(names, inputs):
                m.params[n] = v
            return ad.square(m.forward(ot, og, q)).mean()

        report = ad.check_gradients(f, [m.params[n] for n in names], names=names)
        assert report.ok, str(report)

    def test_autoregressive_shapes_and_stepwise_difference(self):
        m = tiny_model(kind="ail")
        rng = np.random.default_rng(10)
        ot, og = rand_image(rng), rand_image(rng)
        q = ad.tensor(rng.normal(size=(1, 4)))
        one = m.forward(ot, og, q, horizon=1).numpy()
        assert one.shape == (1, 1, 2)
        seq = m.forward(ot, og, q, horizon=4).numpy()
        assert seq.shape == (1, 4, 2)
        assert not np.allclose(seq[0, 0], seq[0, 1])

    def test_autoregressive_backprop_through_time(self):
        m = tiny_model(kind="ail")
        rng = np.random.default_rng(11)
        ot, og = rand_image(rng), rand_image(rng)
        q = ad.tensor(rng.normal(size=(1, 4)))

        def last_action_loss(inputs):
            m.params["enc.conv0.w"] = inputs[0]
            out = m.forward(ot, og, q, horizon=3)
            return ad.square(ad.narrow(out, 1, 2, 1)).mean()

        g = ad.grad(last_action_loss([m.params["enc.conv0.w"]]),
                    m.params["enc.conv0.w"])
        assert np.abs(g.numpy()).max() > 0

    def test_horizon_must_be_positive(self):
        m = tiny_model(kind="ail")
        with pytest.raises(ValueError):
            m.forward(rand_image(np.random.default_rng(0)),
                      rand_image(np.random.default_rng(1)),
                      ad.tensor(np.zeros((1, 4))), horizon=0)


class TestParameterSet:
    def test_duplicate_name_rejected(self):
        p = ParameterSet()
        p.add("w", np.zeros(3))
        with pytest.raises(ValueError):
            p.add("w", np.zeros(3))

    def test_checkpoint_roundtrip_bit_exact(self, tmp_path):
        m = tiny_model(seed=3)
        state = {"adam.t": np.array([7], dtype=np.int64),
                 "adam.m.x": np.random.default_rng(1).normal(size=(3, 2))}
        path = tmp_path / "ck.lpck"
        save_checkpoint(path, m.params, m.config, extra={"update": 5},
                        state=state)
        header, params, state2 = load_checkpoint(path)
        assert header["extra"]["update"] == 5
        assert list(params) == list(m.params)
        for k in m.params:
            assert params[k].data.tobytes() == m.params[k].data.tobytes()
        for k in state:
            assert state2[k].tobytes() == state[k].tobytes()

    def test_checkpoint_bytes_stable(self, tmp_path):
        m = tiny_model(seed=4)
        p1, p2 = tmp_path / "a.lpck", tmp_path / "b.lpck"
        save_checkpoint(p1, m.params, m.config)
        save_checkpoint(p2, m.params, m.config)
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_model_reconstructs(self, tmp_path):
        m = tiny_model(seed=5)
        path = tmp_path / "m.lpck"
        save_checkpoint(path, m.params, m.config)
        m2 = load_model(path)
        assert isinstance(m2, PlannerNets)
        img = rand_image(np.random.default_rng(2))
        np.testing.assert_array_equal(m.encode(img).numpy(),
                                      m2.encode(img).numpy())

    def test_not_a_checkpoint(self, tmp_path):
        bad = tmp_path / "x.lpck"
        bad.write_bytes(b"garbage")
        with pytest.raises(ValueError):
            load_checkpoint(bad)
