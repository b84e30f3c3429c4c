import numpy as np
import pytest

from dmbn.errors import DomainError, MalformedFileError, ModeError, ShapeError, UnsupportedVersionError
from dmbn.model import (
    CHECKPOINT_MAGIC,
    GaussianPrediction,
    ModelConfig,
    ObservationSet,
    aggregate,
    blend,
    condition_target,
    decode,
    encode_image,
    encode_joints,
    forward,
    init_params,
    inject_time_channel,
    load_checkpoint,
    pte_inject,
    save_checkpoint,
)
from dmbn.synthdata import generate_trajectory
from dmbn.tensor import Tensor, backward
from dmbn.training import TrainConfig, train


SMALL = dict(hidden_dim=8, conv_widths=(2, 3), joint_widths=(4, 8), decoder_widths=(8, 8))


def small_cfg(mode, seed=0):
    return ModelConfig(time_mode=mode, seed=seed, **SMALL)


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.time_mode == "channel"
        assert cfg.hidden_dim == 64
        assert cfg.conv_widths == (8, 16)
        assert cfg.joint_widths == (32, 64)
        assert cfg.decoder_widths == (64, 64)
        assert cfg.blend_weight == 0.5
        assert cfg.var_floor == 1e-6

    def test_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(time_mode="both")
        with pytest.raises(ValueError):
            ModelConfig(hidden_dim=1)
        with pytest.raises(ValueError):
            ModelConfig(blend_weight=1.5)
        with pytest.raises(ValueError):
            ModelConfig(var_floor=0.0)
        with pytest.raises(ValueError):
            ModelConfig(joint_widths=(32, 32))  # must end at hidden_dim


class TestInjectTimeChannel:
    def test_plane_value(self):
        frame = np.zeros((16, 16))
        stacked, joints = inject_time_channel(frame, np.array([0.1, -0.2]), 0.25)
        assert stacked.shape == (2, 16, 16)
        assert np.all(stacked[1] == 0.25)

    def test_joint_append(self):
        _, joints = inject_time_channel(np.zeros((16, 16)), np.array([0.1, -0.2]), 0.5)
        np.testing.assert_array_equal(joints, [0.1, -0.2, 0.5])

    def test_zero_time_is_null_shape(self):
        stacked, joints = inject_time_channel(np.ones((16, 16)), np.array([0.3, 0.4]), 0.0)
        assert np.all(stacked[1] == 0.0)
        assert joints[-1] == 0.0

    def test_domain(self):
        with pytest.raises(DomainError):
            inject_time_channel(np.zeros((16, 16)), np.zeros(2), 1.5)


class TestEncoders:
    def test_output_shape(self):
        cfg = small_cfg("channel")
        params = init_params(cfg)
        h = encode_image(params, cfg, np.random.default_rng(0).uniform(size=(2, 16, 16)))
        assert h.data.shape == (cfg.hidden_dim,)
        hj = encode_joints(params, cfg, np.array([0.1, 0.2, 0.3]))
        assert hj.data.shape == (cfg.hidden_dim,)

    def test_zero_parameters_zero_output(self):
        cfg = small_cfg("channel")
        params = init_params(cfg)
        for _, t in params.items():
            t.data[...] = 0.0
        h = encode_image(params, cfg, np.ones((2, 16, 16)))
        np.testing.assert_array_equal(h.data, np.zeros(cfg.hidden_dim))
        hj = encode_joints(params, cfg, np.ones(3))
        np.testing.assert_array_equal(hj.data, np.zeros(cfg.hidden_dim))

    @pytest.mark.parametrize("seed", range(10))
    def test_single_pixel_sensitivity(self, seed):
        # default conv widths: a tiny 2-filter stack can be relu-blind to a
        # single pixel for unlucky seeds, the production width is not
        cfg = ModelConfig(time_mode="channel", seed=seed)
        params = init_params(cfg)
        rng = np.random.default_rng(seed + 100)
        x = rng.uniform(size=(2, 16, 16))
        y = x.copy()
        y[0, 8, 8] += 0.5
        a = encode_image(params, cfg, x).data
        b = encode_image(params, cfg, y).data
        assert not np.array_equal(a, b)

    @pytest.mark.parametrize("seed", range(10))
    def test_joint_input_sensitivity(self, seed):
        cfg = small_cfg("channel", seed=seed)
        params = init_params(cfg)
        a = encode_joints(params, cfg, np.array([0.1, 0.2, 0.3])).data
        b = encode_joints(params, cfg, np.array([0.1, 0.25, 0.3])).data
        assert not np.array_equal(a, b)

    def test_channel_count_must_match_mode(self):
        cfg = small_cfg("pte")
        params = init_params(cfg)
        with pytest.raises(ShapeError):
            encode_image(params, cfg, np.ones((2, 16, 16)))
        with pytest.raises(ShapeError):
            encode_joints(params, cfg, np.ones(3))


class TestPteInject:
    def test_zero_projection_ignores_time(self):
        cfg = small_cfg("pte")
        params = init_params(cfg)
        params["pte.proj.w"].data[...] = 0.0
        params["pte.proj.b"].data[...] = 0.0
        h = np.random.default_rng(1).normal(size=cfg.hidden_dim)
        a = pte_inject(params, cfg, h, 0.1).data
        b = pte_inject(params, cfg, h, 0.9).data
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("seed", range(10))
    def test_distinct_times_distinct_outputs(self, seed):
        cfg = small_cfg("pte", seed=seed)
        params = init_params(cfg)
        h = np.random.default_rng(seed).normal(size=cfg.hidden_dim)
        a = pte_inject(params, cfg, h, 0.2).data
        b = pte_inject(params, cfg, h, 0.8).data
        assert not np.array_equal(a, b)

    def test_output_shape(self):
        cfg = small_cfg("pte")
        params = init_params(cfg)
        out = pte_inject(params, cfg, np.zeros(cfg.hidden_dim), 0.5)
        assert out.data.shape == (cfg.hidden_dim,)

    def test_mode_error(self):
        cfg = small_cfg("channel")
        params = init_params(cfg)
        with pytest.raises(ModeError):
            pte_inject(params, cfg, np.zeros(cfg.hidden_dim), 0.5)


class TestBlendAggregate:
    def test_blend_midpoint(self):
        out = blend(Tensor([1.0, 3.0]), Tensor([3.0, 1.0]), 0.5)
        np.testing.assert_array_equal(out.data, [2.0, 2.0])

    def test_blend_boundary(self):
        img = Tensor([1.0, 2.0])
        out = blend(img, Tensor([9.0, 9.0]), 1.0)
        np.testing.assert_array_equal(out.data, img.data)

    def test_blend_quarter(self):
        out = blend(Tensor([4.0, 0.0]), Tensor([0.0, 4.0]), 0.25)
        np.testing.assert_array_equal(out.data, [1.0, 3.0])

    def test_blend_weight_domain(self):
        with pytest.raises(DomainError):
            blend(Tensor([1.0]), Tensor([2.0]), 1.2)

    def test_aggregate_mean(self):
        out = aggregate(Tensor([[1.0, 2.0], [3.0, 4.0]]), np.array([0.0, 1.0]))
        np.testing.assert_array_equal(out.data, [2.0, 3.0])

    def test_aggregate_singleton(self):
        out = aggregate(Tensor([[5.0, 7.0]]), np.array([0.3]))
        np.testing.assert_array_equal(out.data, [5.0, 7.0])

    def test_aggregate_order_invariant_bits(self):
        rng = np.random.default_rng(2)
        rows = rng.normal(size=(6, 4))
        times = rng.uniform(size=6)
        ref = aggregate(Tensor(rows), times).data.tobytes()
        for seed in range(5):
            perm = np.random.default_rng(seed).permutation(6)
            assert aggregate(Tensor(rows[perm]), times[perm]).data.tobytes() == ref

    def test_aggregate_empty(self):
        with pytest.raises(ValueError):
            aggregate(Tensor(np.zeros((0, 3))), np.zeros(0))


class TestConditionTarget:
    def test_channel_append(self):
        cfg = small_cfg("channel")
        params = init_params(cfg)
        r = Tensor(np.arange(float(cfg.hidden_dim)))
        out = condition_target(params, cfg, r, [0.5])
        assert out.data.shape == (1, cfg.hidden_dim + 1)
        assert out.data[0, -1] == 0.5
        np.testing.assert_array_equal(out.data[0, :-1], r.data)

    def test_pte_zero_projection_keeps_r(self):
        cfg = small_cfg("pte")
        params = init_params(cfg)
        params["pte.proj.w"].data[...] = 0.0
        params["pte.proj.b"].data[...] = 0.0
        r = Tensor(np.arange(float(cfg.hidden_dim)))
        out = condition_target(params, cfg, r, [0.1, 0.9])
        for row in out.data:
            np.testing.assert_array_equal(row, r.data)

    def test_pte_subtraction_identity(self):
        cfg = small_cfg("pte")
        params = init_params(cfg)
        r = Tensor(np.random.default_rng(3).normal(size=cfg.hidden_dim))
        times = np.array([0.0, 0.4, 1.0])
        out = condition_target(params, cfg, r, times)
        proj = np.asarray(times).reshape(-1, 1) @ params["pte.proj.w"].data + params["pte.proj.b"].data
        np.testing.assert_allclose(out.data + proj, np.tile(r.data, (3, 1)), atol=1e-12)

    def test_time_domain(self):
        cfg = small_cfg("channel")
        params = init_params(cfg)
        with pytest.raises(DomainError):
            condition_target(params, cfg, Tensor(np.zeros(cfg.hidden_dim)), [1.5])


class TestDecode:
    def test_variance_floor(self):
        cfg = small_cfg("channel")
        params = init_params(cfg)
        # adversarial: drive the variance head far negative
        params["dec_img.var.b"].data[...] = -40.0
        c = np.random.default_rng(4).normal(size=(3, cfg.hidden_dim + 1))
        _, var = decode(params, cfg, "image", c)
        assert var.data.min() >= cfg.var_floor

    def test_shapes(self):
        cfg = small_cfg("channel")
        params = init_params(cfg)
        c = np.zeros((5, cfg.hidden_dim + 1))
        mu, var = decode(params, cfg, "image", c)
        assert mu.data.shape == (5, 16, 16) and var.data.shape == (5, 16, 16)
        mu2, var2 = decode(params, cfg, "joints", c)
        assert mu2.data.shape == (5, 2) and var2.data.shape == (5, 2)

    def test_zero_weights_give_bias(self):
        cfg = small_cfg("channel", seed=9)
        params = init_params(cfg)
        for name, t in params.items():
            if name.startswith("dec_img.") and name.endswith(".w"):
                t.data[...] = 0.0
        c = np.random.default_rng(5).normal(size=(4, cfg.hidden_dim + 1))
        mu, var = decode(params, cfg, "image", c)
        want_mu = np.tile(params["dec_img.mean.b"].data.reshape(16, 16), (4, 1, 1))
        raw = params["dec_img.var.b"].data
        want_var = np.tile((np.log1p(np.exp(-np.abs(raw))) + np.maximum(raw, 0) + cfg.var_floor).reshape(16, 16), (4, 1, 1))
        np.testing.assert_allclose(mu.data, want_mu, atol=1e-12)
        np.testing.assert_allclose(var.data, want_var, atol=1e-12)

    def test_unknown_modality(self):
        cfg = small_cfg("channel")
        with pytest.raises(ValueError):
            decode(init_params(cfg), cfg, "audio", np.zeros((1, cfg.hidden_dim + 1)))


def make_ctx(traj, indices):
    return ObservationSet.from_trajectory(traj, indices)


class TestForward:
    @pytest.mark.parametrize("mode", ["channel", "pte"])
    def test_permutation_bit_identical(self, mode):
        cfg = small_cfg(mode)
        params = init_params(cfg)
        traj = generate_trajectory(0, 12)
        idx = np.array([0, 3, 5, 9, 11])
        ref = forward(params, cfg, make_ctx(traj, idx), traj.times)
        for seed in range(6):
            perm = np.random.default_rng(seed).permutation(len(idx))
            out = forward(params, cfg, make_ctx(traj, idx[perm]), traj.times)
            assert out.image_mean.data.tobytes() == ref.image_mean.data.tobytes()
            assert out.image_var.data.tobytes() == ref.image_var.data.tobytes()
            assert out.joint_mean.data.tobytes() == ref.joint_mean.data.tobytes()
            assert out.joint_var.data.tobytes() == ref.joint_var.data.tobytes()

    @pytest.mark.parametrize("mode", ["channel", "pte"])
    def test_per_target_independence(self, mode):
        cfg = small_cfg(mode, seed=2)
        params = init_params(cfg)
        traj = generate_trajectory(1, 10)
        ctx = make_ctx(traj, [0, 4, 9])
        batched = forward(params, cfg, ctx, traj.times)
        for k, t in enumerate(traj.times):
            single = forward(params, cfg, ctx, [t])
            assert np.max(np.abs(single.image_mean.data[0] - batched.image_mean.data[k])) <= 1e-12
            assert np.max(np.abs(single.joint_mean.data[0] - batched.joint_mean.data[k])) <= 1e-12
            assert np.max(np.abs(single.image_var.data[0] - batched.image_var.data[k])) <= 1e-12

    def test_single_observation_context(self):
        cfg = small_cfg("channel")
        params = init_params(cfg)
        traj = generate_trajectory(2, 8)
        pred = forward(params, cfg, make_ctx(traj, [3]), traj.times)
        assert pred.image_mean.data.shape == (8, 16, 16)
        assert np.all(np.isfinite(pred.image_mean.data))

    def test_variance_positive_everywhere(self):
        for mode in ("channel", "pte"):
            cfg = small_cfg(mode, seed=5)
            params = init_params(cfg)
            traj = generate_trajectory(3, 9)
            pred = forward(params, cfg, make_ctx(traj, [0, 5]), traj.times)
            assert pred.image_var.data.min() >= cfg.var_floor
            assert pred.joint_var.data.min() >= cfg.var_floor

    def test_empty_context_rejected(self):
        with pytest.raises(ValueError):
            ObservationSet(np.zeros(0), np.zeros((0, 16, 16)), np.zeros((0, 2)))

    def test_target_time_domain(self):
        cfg = small_cfg("channel")
        params = init_params(cfg)
        traj = generate_trajectory(4, 6)
        with pytest.raises(DomainError):
            forward(params, cfg, make_ctx(traj, [0]), [2.0])


class TestModeSeparation:
    def test_channel_has_no_time_projection_parameters(self):
        names = init_params(small_cfg("channel")).names()
        assert not any(n.startswith("pte.") for n in names)

    def test_pte_has_projection_and_single_channel_input(self):
        cfg = small_cfg("pte")
        names = init_params(cfg).names()
        assert "pte.proj.w" in names and "pte.mix.w" in names
        assert cfg.image_channels == 1
        assert cfg.joint_input_dim == 2

    @pytest.mark.parametrize("mode", ["channel", "pte"])
    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_reaches_every_parameter(self, mode, seed):
        from dmbn.training import nll_loss

        cfg = small_cfg(mode, seed=seed)
        params = init_params(cfg)
        traj = generate_trajectory(seed, 6)
        pred = forward(params, cfg, make_ctx(traj, [0, 2, 5]), traj.times)
        loss = nll_loss(pred, traj.frames, traj.joints)
        backward(loss, params)
        for name, t in params.items():
            assert np.linalg.norm(t.grad) > 0.0, name

    @pytest.mark.parametrize("mode", ["channel", "pte"])
    def test_one_training_step_touches_every_parameter(self, mode):
        cfg = small_cfg(mode, seed=1)
        dataset = [generate_trajectory(s, 6) for s in range(2)]
        tcfg = TrainConfig(epochs=1, n_max=2, var_warmup=0.0, seed=3)
        before = init_params(cfg).state_bytes()
        params, _ = train(dataset, cfg, tcfg)
        assert params.state_bytes() != before


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = small_cfg("pte", seed=11)
        params = init_params(cfg)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, cfg, params)
        cfg2, params2 = load_checkpoint(path)
        assert cfg2 == cfg
        assert params2.names() == params.names()
        assert params2.state_bytes() == params.state_bytes()
        # a second save of the loaded state is byte-identical
        path2 = tmp_path / "model2.ckpt"
        save_checkpoint(path2, cfg2, params2)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(MalformedFileError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        cfg = small_cfg("channel")
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, cfg, init_params(cfg))
        raw = bytearray(path.read_bytes())
        raw[: len(CHECKPOINT_MAGIC)] = b"NPXCKPT2"
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        cfg = small_cfg("channel")
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, cfg, init_params(cfg))
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 9])
        with pytest.raises(MalformedFileError):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        cfg = small_cfg("channel")
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, cfg, init_params(cfg))
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(MalformedFileError):
            load_checkpoint(path)

    def test_config_block_is_textual(self, tmp_path):
        cfg = ModelConfig(time_mode="pte", seed=3)
        path = tmp_path / "x.ckpt"
        save_checkpoint(path, cfg, init_params(cfg))
        raw = path.read_bytes()
        text = raw[12 : 12 + raw[8]]
        assert b"time_mode=pte" in text
        assert b"hidden_dim=64" in text
        assert b"conv_widths=8,16" in text
        assert b"blend_weight=0.5" in text
