import numpy as np
import pytest

from catnet import models as M
from catnet import tensor as T
from catnet.data import AudioSegment
from catnet.dsp import StftConfig
from catnet.errors import ConfigError, DimensionError, InputError
from catnet.tensor import Tensor

from helpers import numerical_grad, rel_error


def tiny_config(**kw):
    base = dict(
        stft=StftConfig(16, 4),
        unet_depth=2,
        unet_channels=[2, 3],
        wavunet_depth=2,
        wavunet_channels=[2, 3],
    )
    base.update(kw)
    return M.ModelConfig(**base)


def expected_unet_params(channels, k):
    """Closed form: two bias-free conv+BN per block, transposed conv with bias, 1x1 head."""
    total, cin = 0, 1
    for c in channels:
        total += cin * c * k * k + 2 * c + c * c * k * k + 2 * c
        cin = c
    for c in reversed(channels):
        total += cin * c * k * k + c
        total += 2 * c * c * k * k + 2 * c + c * c * k * k + 2 * c
        cin = c
    return total + channels[0] + 1


def expected_wavunet_params(channels, k, pool):
    total, cin = 0, 1
    for c in channels:
        total += cin * c * k + 2 * c
        cin = c
    for c in reversed(channels):
        total += cin * c * pool + c
        total += 2 * c * c * k + 2 * c
        cin = c
    return total + channels[0] + 1


class TestConfig:
    def test_channel_depth_mismatch(self):
        with pytest.raises(ConfigError):
            M.ModelConfig(unet_depth=2, unet_channels=[8, 16, 32])
        with pytest.raises(ConfigError):
            M.ModelConfig(wavunet_depth=4)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            M.SeparationModel("demucs", M.desk_config())

    def test_full_scale_preset(self):
        cfg = M.full_scale_config()
        assert cfg.unet_depth == cfg.wavunet_depth == 6
        assert cfg.unet_channels == cfg.wavunet_channels == [32, 64, 128, 256, 512, 1024]
        assert (cfg.unet_kernel, cfg.unet_pool, cfg.wavunet_kernel, cfg.wavunet_pool) == (3, 2, 3, 4)
        assert (cfg.stft.window_size, cfg.stft.hop, cfg.stft.window_kind) == (2048, 441, "hann")

    def test_dict_round_trip(self):
        cfg = M.desk_config()
        assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestParameterCount:
    def test_desk_closed_form(self):
        cfg = M.desk_config()
        u = expected_unet_params(cfg.unet_channels, cfg.unet_kernel)
        w = expected_wavunet_params(cfg.wavunet_channels, cfg.wavunet_kernel, cfg.wavunet_pool)
        assert M.build_unet(cfg).parameter_count() == u == 69705
        assert M.build_wavunet(cfg).parameter_count() == w
        assert M.build_catnet(cfg).parameter_count() == u + w

    def test_tiny_closed_form(self):
        cfg = tiny_config()
        assert M.build_catnet(cfg).parameter_count() == expected_unet_params([2, 3], 3) + expected_wavunet_params([2, 3], 3, 4)

    def test_pure_function_of_config(self):
        cfg = M.desk_config()
        assert M.build_catnet(cfg, seed=1).parameter_count() == M.build_catnet(cfg, seed=2).parameter_count()


class TestUNet:
    def test_mask_shape_and_range(self, rng):
        cfg = M.desk_config()
        model = M.build_unet(cfg)
        x = rng.standard_normal((2, 4000)).astype(np.float32) * 0.1
        M.unet_forward(model, x)
        mask = model.unet.last_mask.data
        frames = int(np.ceil(4000 / cfg.stft.hop)) + 1
        assert mask.shape == (2, frames, cfg.stft.bins)
        assert np.all(mask > 0) and np.all(mask < 1)

    def test_unit_mask_reconstructs(self, rng):
        model = M.build_unet(M.desk_config())
        model.unet.mask_override = 1.0
        x = rng.standard_normal((1, 5000)).astype(np.float32)
        wav, _ = M.unet_forward(model, x)
        assert rel_error(wav.data, x) < 1e-4

    def test_zero_input(self):
        model = M.build_unet(M.desk_config())
        wav, _ = M.unet_forward(model, np.zeros((1, 2000), dtype=np.float32))
        assert np.max(np.abs(wav.data)) < 1e-10

    @pytest.mark.parametrize("length", [256, 257, 1000, 8000])
    def test_output_length(self, rng, length):
        model = M.build_unet(M.desk_config())
        wav, mag = M.unet_forward(model, rng.standard_normal((1, length)))
        assert wav.shape == (1, length)
        assert mag.shape[-1] == 129

    def test_shorter_than_frame(self):
        with pytest.raises(DimensionError):
            M.unet_forward(M.build_unet(M.desk_config()), np.zeros((1, 100)))

    def test_wrong_kind(self):
        with pytest.raises(ConfigError):
            M.unet_forward(M.build_wavunet(M.desk_config()), np.zeros((1, 1000)))


class TestWavUNet:
    def test_zero_input_zero_output(self):
        model = M.build_wavunet(M.desk_config())
        assert np.all(M.wavunet_forward(model, np.zeros((2, 1000))).data == 0)

    @pytest.mark.parametrize("length", [1, 63, 64, 65, 1001])
    def test_output_length(self, rng, length):
        model = M.build_wavunet(M.desk_config())
        assert M.wavunet_forward(model, rng.standard_normal((1, length))).shape == (1, length)

    def test_first_layer_gradient(self, rng):
        model = M.build_wavunet(tiny_config(), dtype=np.float64)
        x = rng.standard_normal((2, 40))
        s = rng.standard_normal((2, 40)) * 0.01
        w = model.params["wavunet.enc0.conv0.weight"]

        def loss():
            return T.mae_loss(M.wavunet_forward(model, x), Tensor(s))

        T.backward(loss())
        analytic = w.grad.copy()
        with T.no_grad():
            (numeric,) = numerical_grad(lambda: loss().item(), [w.data], h=1e-6)
        assert rel_error(analytic, numeric) < 1e-4


class TestCatNet:
    def _model(self, seed=0):
        return M.build_catnet(M.desk_config(), seed=seed, dtype=np.float64)

    def test_branch_additivity(self, rng):
        model = self._model()
        x = rng.standard_normal((2, 3000)) * 0.1
        out = M.catnet_forward(model, x).data
        u, _ = M.unet_forward(model, x)
        w = M.wavunet_forward(model, x)
        assert np.max(np.abs(out - (u.data + w.data))) < 1e-10
        assert np.max(np.abs(model(x).data - out)) < 1e-10

    def test_wavunet_forced_zero(self, rng):
        model = self._model()
        model.wavunet.output_override = 0.0
        x = rng.standard_normal((1, 2000))
        np.testing.assert_array_equal(M.catnet_forward(model, x).data, M.unet_forward(model, x)[0].data)

    def test_mask_forced_zero(self, rng):
        model = self._model()
        model.unet.mask_override = 0.0
        x = rng.standard_normal((1, 2000))
        out = M.catnet_forward(model, x).data
        np.testing.assert_allclose(out, M.wavunet_forward(model, x).data, atol=1e-12)

    def test_joint_gradients(self, rng):
        model = M.build_catnet(M.desk_config())
        x = rng.standard_normal((2, 2000)).astype(np.float32) * 0.1
        loss = T.mae_loss(model(x), Tensor(np.zeros_like(x)))
        T.backward(loss)
        norms = {
            b: sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for k, p in model.params.items() if k.startswith(b))
            for b in ("unet.", "wavunet.")
        }
        assert norms["unet."] > 0 and norms["wavunet."] > 0

    def test_deterministic(self, rng):
        x = rng.standard_normal((1, 2000))
        a, b = self._model(3), self._model(3)
        for k in a.params:
            assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
        assert a(x).data.tobytes() == b(x).data.tobytes()
        assert self._model(4)(x).data.tobytes() != a(x).data.tobytes()

    def test_wrong_kind(self):
        with pytest.raises(ConfigError):
            M.catnet_forward(M.build_unet(M.desk_config()), np.zeros((1, 1000)))

    def test_channels_share_parameters(self, rng):
        model = self._model().eval()
        x = rng.standard_normal((1, 2, 1500))
        stereo = model(x).data
        for c in range(2):
            np.testing.assert_allclose(stereo[0, c], model(x[:, c]).data[0], atol=1e-12)

    def test_state_dict_round_trip(self, rng):
        a, b = self._model(1).eval(), self._model(2).eval()
        b.load_state_dict(a.state_dict())
        x = rng.standard_normal((1, 1000))
        assert a(x).data.tobytes() == b(x).data.tobytes()

    def test_pipeline_gradients(self, rng):
        # every parameter of a tiny double-precision CatNet against central differences
        model = M.build_catnet(tiny_config(), dtype=np.float64).eval()
        # zero-padded spectrogram regions would otherwise sit exactly on a ReLU kink
        for k, p in model.params.items():
            if k.endswith(".bn.beta"):
                p.data[:] = rng.uniform(0.1, 0.3, p.shape)
            elif k.endswith(".bn.gamma"):
                p.data[:] = rng.uniform(0.5, 1.5, p.shape)
        x = rng.standard_normal((1, 48))
        proj = rng.standard_normal((1, 48))

        def loss():
            return T.tsum(model(x) * Tensor(proj))

        T.backward(loss())
        params = list(model.params.values())
        with T.no_grad():
            numeric = numerical_grad(lambda: loss().item(), [p.data for p in params], h=1e-5)
        analytic = np.concatenate([p.grad.ravel() for p in params])
        assert rel_error(analytic, np.concatenate([n.ravel() for n in numeric])) < 1e-4


class TestSeparateTrack:
    def _identity(self, target="vocals"):
        model = M.build_catnet(M.desk_config(), target=target)
        model.unet.mask_override = 1.0
        model.wavunet.output_override = 0.0
        return model

    def test_crossfade_partition_of_unity(self):
        for total, seg, overlap in [(10_000, 1000, 250), (999, 1000, 250), (5000, 300, 0), (4321, 512, 256)]:
            offsets, weights = M.crossfade_weights(total, seg, overlap)
            acc = np.zeros(offsets[-1] + seg)
            for off, w in zip(offsets, weights):
                acc[off : off + seg] += w
            np.testing.assert_allclose(acc[:total], 1.0, atol=1e-12)
            assert offsets[-1] + seg >= total

    def test_bad_overlap(self):
        for overlap in (-1, 6, 10):
            with pytest.raises(InputError):
                M.crossfade_weights(100, 10, overlap)

    def test_identity_model(self, rng):
        mix = AudioSegment(rng.standard_normal((1, 20_000)).astype(np.float32) * 0.1, 8000)
        out = M.separate_track(self._identity(), mix)
        assert rel_error(out["vocals"].samples, mix.samples) < 1e-4

    def test_short_track(self, rng):
        mix = AudioSegment(rng.standard_normal((1, 500)).astype(np.float32), 8000)
        out = M.separate_track(self._identity(), mix)
        assert out["vocals"].length == 500
        assert rel_error(out["vocals"].samples, mix.samples) < 1e-4

    def test_accompaniment_is_residual(self, rng):
        model = M.build_catnet(M.desk_config())
        mix = AudioSegment(rng.standard_normal((1, 9000)).astype(np.float32) * 0.1, 8000)
        out = M.separate_track(model, mix)
        total = out["vocals"].samples.astype(np.float64) + out["accompaniment"].samples
        assert np.max(np.abs(total - mix.samples)) < 1e-6

    def test_non_vocal_target(self, rng):
        out = M.separate_track(self._identity("drums"), AudioSegment(np.zeros((1, 3000), np.float32), 8000))
        assert set(out) == {"drums"}

    def test_sample_rate_mismatch(self):
        with pytest.raises(InputError):
            M.separate_track(self._identity(), AudioSegment(np.zeros((1, 3000), np.float32), 16000))

    def test_restores_training_flag(self, rng):
        model = self._identity()
        M.separate_track(model, AudioSegment(np.zeros((1, 3000), np.float32), 8000))
        assert model.training
