import numpy as np
import pytest

from cuehunt.checkpoint import FORMAT_VERSION, Checkpoint, load_checkpoint, save_checkpoint
from cuehunt.errors import CheckpointError
from cuehunt.model import init_params
from cuehunt.optim import AdamState


@pytest.fixture
def checkpoint(tiny_arch, tiny_params):
    rng = np.random.default_rng(0)
    adam = AdamState.for_params(tiny_params.tensors, lr=3e-4)
    adam.m = {k: rng.normal(size=v.shape) for k, v in tiny_params.items()}
    adam.v = {k: rng.uniform(size=v.shape) for k, v in tiny_params.items()}
    adam.t = 17
    return Checkpoint(architecture=tiny_arch, params=tiny_params, adam=adam, step=17, seed=5,
                      metrics={"val_mse": 0.25}, train_config={"protocol": "shapes"})


class TestRoundTrip:

    def test_bit_identical(self, checkpoint, tmp_path):
        loaded = load_checkpoint(save_checkpoint(checkpoint, tmp_path / "m.ckpt"))
        assert loaded.architecture == checkpoint.architecture
        assert loaded.params.digest() == checkpoint.params.digest()
        for name in checkpoint.params:
            np.testing.assert_array_equal(loaded.adam.m[name], checkpoint.adam.m[name])
            np.testing.assert_array_equal(loaded.adam.v[name], checkpoint.adam.v[name])
        assert loaded.adam.hyperparameters() == checkpoint.adam.hyperparameters()
        assert (loaded.step, loaded.seed, loaded.version) == (17, 5, FORMAT_VERSION)
        assert loaded.metrics == {"val_mse": 0.25}
        assert loaded.train_config == {"protocol": "shapes"}
        assert loaded.params.seed == checkpoint.params.seed

    def test_float32(self, checkpoint, tmp_path):
        single = Checkpoint(
            architecture=checkpoint.architecture,
            params=checkpoint.params.astype(np.float32),
            adam=AdamState.for_params(checkpoint.params.astype(np.float32).tensors),
        )
        loaded = load_checkpoint(save_checkpoint(single, tmp_path / "f32.ckpt"))
        assert loaded.dtype == np.float32
        assert loaded.params.digest() == single.params.digest()

    def test_no_leftover_temp_file(self, checkpoint, tmp_path):
        save_checkpoint(checkpoint, tmp_path / "m.ckpt")
        assert sorted(p.name for p in tmp_path.iterdir()) == ["m.ckpt"]


class TestDamagedFiles:

    def test_truncated(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, tmp_path / "m.ckpt")
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(CheckpointError) as info:
            load_checkpoint(path)
        assert not info.value.incompatible

    def test_flipped_byte(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, tmp_path / "m.ckpt")
        blob = bytearray(path.read_bytes())
        blob[-20] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello world, definitely not tensors")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.ckpt")


class TestIncompatible:

    def test_version_mismatch(self, checkpoint, tmp_path):
        checkpoint.version = FORMAT_VERSION + 1
        path = save_checkpoint(checkpoint, tmp_path / "future.ckpt")
        with pytest.raises(CheckpointError, match="version") as info:
            load_checkpoint(path)
        assert info.value.incompatible

    def test_parameters_do_not_fit_architecture(self, tiny_arch, tmp_path):
        wide = init_params(tiny_arch.scaled(2.0), seed=0)
        ckpt = Checkpoint(architecture=tiny_arch, params=wide, adam=AdamState.for_params(wide.tensors))
        path = save_checkpoint(ckpt, tmp_path / "wide.ckpt")
        with pytest.raises(CheckpointError, match="architecture") as info:
            load_checkpoint(path)
        assert info.value.incompatible
