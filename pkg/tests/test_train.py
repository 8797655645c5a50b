import struct

import numpy as np
import pytest

from catnet import models as M
from catnet import tensor as T
from catnet import train as TR
from catnet.data import AugmentConfig, generate_synthetic_dataset
from catnet.errors import (
    CheckpointIntegrityError,
    CheckpointVersionError,
    ConfigError,
    TrainingError,
)
from catnet.tensor import Tensor


def scalar_adam(theta, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on one float, written without numpy."""
    m = v = 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta = theta - lr * m_hat / (v_hat**0.5 + eps)
        path.append(theta)
    return path


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic_dataset(seed=0, n_tracks=2, seconds=2.0)


def small_trainer(data, seed=0, kind="catnet", steps=4):
    model = M.build_model(kind, M.desk_config(), seed=seed)
    cfg = TR.TrainConfig(batch_size=2, steps=steps, seed=seed)
    return TR.Trainer(model, data, cfg, AugmentConfig(enable=True, segment_seconds=0.25))


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        TR.adam_step(p, {"w": np.zeros(2)}, TR.AdamState())
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        g = np.array([0.3, -5.0, 1e-3])
        p = {"w": np.zeros(3)}
        TR.adam_step(p, {"w": g}, TR.AdamState(lr=0.01))
        np.testing.assert_allclose(p["w"], -0.01 * np.sign(g), rtol=1e-4)

    def test_scalar_trajectory(self):
        oracle = scalar_adam(1.0, lambda th: 2 * th, 10)
        p = {"theta": np.array([1.0])}
        state = TR.AdamState()
        for expected in oracle:
            TR.adam_step(p, {"theta": 2 * p["theta"]}, state)
            assert abs(p["theta"][0] - expected) < 1e-12
        assert state.t == 10

    def test_missing_gradient_skipped(self):
        p = {"a": np.ones(2), "b": np.ones(2)}
        state = TR.AdamState()
        TR.adam_step(p, {"a": np.ones(2)}, state)
        np.testing.assert_array_equal(p["b"], 1.0)
        assert "b" not in state.m

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            TR.adam_step({"a": np.ones(2)}, {"a": np.ones(3)}, TR.AdamState())

    def test_optimizer_wraps_tensors(self):
        w = Tensor(np.array([0.5]), requires_grad=True)
        opt = TR.Adam({"w": w}, lr=0.1)
        T.backward(T.tsum(w * w))
        opt.step()
        opt.zero_grad()
        assert w.data[0] == pytest.approx(0.4)
        assert w.grad is None or np.all(w.grad == 0)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"lr": 0}, {"batch_size": 0}, {"steps": -1}, {"loss": "l2"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TR.TrainConfig(**kw)

    def test_defaults(self):
        cfg = TR.TrainConfig()
        assert cfg.lr == 1e-3 and cfg.loss == "waveform_mae" and cfg.grad_clip is None


class TestLoss:
    def test_finite_positive(self, tiny_data):
        trainer = small_trainer(tiny_data)
        x, s = trainer.next_batch()
        value = TR.compute_loss(trainer.model, x, s).item()
        assert np.isfinite(value) and value > 0

    def test_spectrogram_loss_selected(self, tiny_data, rng):
        model = M.build_unet(M.desk_config(), spectrogram_loss=True)
        x = rng.standard_normal((2, 1, 2000)).astype(np.float32) * 0.1
        spec = TR.compute_loss(model, x, x * 0.5).item()
        wav = TR.compute_loss(model, x, x * 0.5, "waveform_mae").item()
        assert spec != wav and spec > 0

    def test_spectrogram_loss_needs_unet(self, rng):
        x = rng.standard_normal((1, 1, 1000))
        with pytest.raises(ConfigError):
            TR.compute_loss(M.build_wavunet(M.desk_config()), x, x, "spectrogram_mae")

    def test_identity_override_zero_loss_no_update(self, rng):
        model = M.build_catnet(M.desk_config())
        model.unet.mask_override = 1.0
        model.wavunet.output_override = 0.0
        x = rng.standard_normal((2, 1, 2000)).astype(np.float32) * 0.1
        before = {k: v.data.copy() for k, v in model.params.items()}
        loss = TR.train_step(model, (x, x), TR.Adam(model.params))
        assert loss < 1e-6
        for k, v in model.params.items():
            assert v.data.tobytes() == before[k].tobytes()

    def test_non_finite(self, rng):
        model = M.build_wavunet(M.desk_config())
        x = np.full((1, 1, 1000), np.nan, dtype=np.float32)
        with pytest.raises(TrainingError, match="step 7"):
            TR.train_step(model, (x, x), TR.Adam(model.params), step=7)

    def test_grad_clip(self, tiny_data):
        batch = small_trainer(tiny_data).next_batch()
        model = M.build_catnet(M.desk_config())
        opt = TR.Adam(model.params)
        TR.train_step(model, batch, opt, grad_clip=0.01)
        # after one step m = (1 - beta1) * clipped gradient
        norm = np.sqrt(sum(float(np.sum(m.astype(np.float64) ** 2)) for m in opt.state.m.values()))
        assert norm == pytest.approx(0.1 * 0.01, rel=1e-4)


class TestTrainer:
    def test_both_branches_get_gradients(self, tiny_data):
        trainer = small_trainer(tiny_data)
        x, s = trainer.next_batch()
        T.backward(TR.compute_loss(trainer.model, x, s))
        norms = TR.branch_grad_norms(trainer.model)
        assert norms["unet"] > 0 and norms["wavunet"] > 0

    def test_deterministic_curves(self, tiny_data):
        a = small_trainer(tiny_data, seed=3).run()
        b = small_trainer(tiny_data, seed=3).run()
        assert np.array(a).tobytes() == np.array(b).tobytes()
        assert a != small_trainer(tiny_data, seed=4).run()

    def test_loss_log(self, tiny_data, tmp_path):
        log = tmp_path / "loss.csv"
        losses = small_trainer(tiny_data, steps=3).run(log_path=log)
        lines = log.read_text().splitlines()
        assert lines[0] == "step,loss"
        assert [float(l.split(",")[1]) for l in lines[1:]] == losses
        assert [int(l.split(",")[0]) for l in lines[1:]] == [1, 2, 3]

    def test_periodic_checkpoints(self, tiny_data, tmp_path):
        trainer = small_trainer(tiny_data, steps=3)
        trainer.config.checkpoint_interval = 2
        ckpt = tmp_path / "m.ckpt"
        trainer.run(steps=2, checkpoint_path=ckpt)
        assert TR.load_checkpoint(ckpt).step == 2


class TestCheckpoint:
    def _saved(self, tiny_data, tmp_path):
        trainer = small_trainer(tiny_data, steps=2)
        trainer.run()
        path = tmp_path / "m.ckpt"
        trainer.save(path)
        return trainer, path

    def test_forward_bitwise(self, tiny_data, tmp_path, rng):
        trainer, path = self._saved(tiny_data, tmp_path)
        model = TR.load_checkpoint(path).build_model()
        x = rng.standard_normal((1, 1, 3000)).astype(np.float32)
        trainer.model.eval()
        model.eval()
        assert model(x).data.tobytes() == trainer.model(x).data.tobytes()
        assert model.kind == "catnet" and model.target == "vocals"

    def test_state_round_trip(self, tiny_data, tmp_path):
        trainer, path = self._saved(tiny_data, tmp_path)
        ckpt = TR.load_checkpoint(path)
        assert ckpt.step == 2
        assert ckpt.rng_state == trainer.rng.bit_generator.state
        adam = ckpt.adam_state(ckpt.build_model())
        assert adam.t == trainer.optimizer.state.t
        for k, m in trainer.optimizer.state.m.items():
            assert adam.m[k].tobytes() == m.tobytes()
            assert adam.v[k].tobytes() == trainer.optimizer.state.v[k].tobytes()
        for k, buf in trainer.model.buffers.items():
            assert ckpt.arrays[f"buffer/{k}"].tobytes() == buf.tobytes()
        assert ckpt.meta["train"]["batch_size"] == 2

    def test_bad_magic(self, tiny_data, tmp_path):
        _, path = self._saved(tiny_data, tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointIntegrityError):
            TR.load_checkpoint(path)

    def test_truncated(self, tiny_data, tmp_path):
        _, path = self._saved(tiny_data, tmp_path)
        raw = path.read_bytes()
        for cut in (6, 20, len(raw) // 2, len(raw) - 1):
            path.write_bytes(raw[:cut])
            with pytest.raises(CheckpointIntegrityError):
                TR.load_checkpoint(path)

    def test_flipped_byte(self, tiny_data, tmp_path):
        _, path = self._saved(tiny_data, tmp_path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointIntegrityError):
            TR.load_checkpoint(path)

    def test_version_mismatch(self, tiny_data, tmp_path):
        _, path = self._saved(tiny_data, tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", TR.VERSION + 1)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            TR.load_checkpoint(path)

    def test_shape_mismatch_on_load(self, tiny_data, tmp_path):
        _, path = self._saved(tiny_data, tmp_path)
        other = M.build_catnet(M.ModelConfig(unet_depth=2, unet_channels=[4, 8]))
        with pytest.raises((ConfigError, KeyError)):
            other.load_state_dict(TR.load_checkpoint(path).arrays)

    def test_generic_chunks(self, tmp_path):
        path = tmp_path / "c.bin"
        arrays = {
            "f4": np.arange(6, dtype=np.float32).reshape(2, 3),
            "f8": np.array(3.5),
            "i8": np.arange(4, dtype=np.int64),
            "empty": np.zeros((0, 2)),
        }
        TR.write_chunks(path, [("text", "héllo")] + list(arrays.items()))
        back = TR.read_chunks(path)
        assert back["text"] == "héllo"
        for k, v in arrays.items():
            assert back[k].dtype == v.dtype and back[k].shape == v.shape
            assert back[k].tobytes() == v.tobytes()
