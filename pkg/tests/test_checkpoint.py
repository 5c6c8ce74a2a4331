import struct

import numpy as np
import pytest

from dvrec import checkpoint
from dvrec.exceptions import CacheFormatError
from dvrec.recmodel import init_model
from dvrec.trainer import TrainConfig, Trainer
from dvrec.valuator import init_valuator


def _config(**kw):
    base = dict(seed=1, d=6, lr=1e-2, outer_batch=16, inner_batch=8, epochs=4, k=5, reward_users=10,
                widths=[8, 4], tau=[3, 2], cosine_every=1)
    base.update(kw)
    return TrainConfig(**base)


def test_raw_round_trip(tmp_path):
    arrays = {"a": np.random.default_rng(0).normal(size=(3, 4)), "b": np.arange(5), "c": np.eye(3, dtype=bool)}
    checkpoint.save(tmp_path / "x.dvrc", arrays, {"k": [1, 2]}, "lightgcn", 3, 4, 5)
    header, back, meta = checkpoint.load(tmp_path / "x.dvrc")
    assert header == {"version": 1, "backbone": "lightgcn", "m": 3, "n": 4, "d": 5}
    assert meta == {"k": [1, 2]}
    for k in arrays:
        assert np.array_equal(arrays[k], back[k]) and back[k].dtype.kind == arrays[k].dtype.kind


def test_model_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    theta = init_model(7, 9, d=4, rng=rng)
    theta.P += rng.normal(size=theta.P.shape)
    params = init_valuator(5, d=4, widths=[5, 3], tau=2, rng=rng)
    checkpoint.save_model(tmp_path / "m.dvrc", theta, params, {"note": "x"})
    t2, p2, meta = checkpoint.load_model(tmp_path / "m.dvrc")
    assert t2.P.tobytes() == theta.P.tobytes() and t2.Q.tobytes() == theta.Q.tobytes()
    for name, arr in params.arrays().items():
        assert arr.tobytes() == p2.arrays()[name].tobytes()
    assert all(np.array_equal(a.mask, b.mask) for a, b in zip(params.blocks, p2.blocks))
    checkpoint.save_model(tmp_path / "m2.dvrc", t2, p2, {"note": "x"})
    assert (tmp_path / "m.dvrc").read_bytes() == (tmp_path / "m2.dvrc").read_bytes()


def test_lightgcn_needs_pairs(tmp_path, small_dataset):
    theta = init_model(30, 40, d=4, backbone="lightgcn", train_pairs=small_dataset.train_pairs,
                       rng=np.random.default_rng(0))
    checkpoint.save_model(tmp_path / "g.dvrc", theta)
    with pytest.raises(CacheFormatError):
        checkpoint.load_model(tmp_path / "g.dvrc")
    t2, _, _ = checkpoint.load_model(tmp_path / "g.dvrc", small_dataset.train_pairs)
    assert all(np.array_equal(a, b) for a, b in zip(t2.embeddings(), theta.embeddings()))


class TestCorruption:
    @pytest.fixture
    def blob(self, tmp_path):
        theta = init_model(3, 4, d=2, rng=np.random.default_rng(0))
        path = tmp_path / "m.dvrc"
        checkpoint.save_model(path, theta)
        return path, path.read_bytes()

    def test_truncated(self, blob):
        path, data = blob
        for cut in (10, len(data) // 2, len(data) - 1):
            path.write_bytes(data[:cut])
            with pytest.raises(CacheFormatError):
                checkpoint.load(path)

    def test_bad_magic(self, blob):
        path, data = blob
        path.write_bytes(b"XXXX" + data[4:])
        with pytest.raises(CacheFormatError, match="magic"):
            checkpoint.load(path)

    def test_bad_version(self, blob):
        path, data = blob
        path.write_bytes(data[:4] + struct.pack("<I", 99) + data[8:])
        with pytest.raises(CacheFormatError, match="version"):
            checkpoint.load(path)

    def test_trailing_bytes(self, blob):
        path, data = blob
        path.write_bytes(data + b"\0")
        with pytest.raises(CacheFormatError, match="trailing"):
            checkpoint.load(path)


def test_resume_reproduces_uninterrupted_run(tmp_path, small_dataset):
    whole = Trainer(_config(), small_dataset)
    whole.run()
    part = Trainer(_config(), small_dataset)
    part.run(max_iterations=2 * part.iters_per_epoch + 1)
    checkpoint.save_trainer(tmp_path / "state.dvrc", part)
    resumed = checkpoint.load_trainer(tmp_path / "state.dvrc", small_dataset)
    resumed.run()
    assert resumed.trace == whole.trace and resumed.cosine == whole.cosine
    assert resumed.theta.P.tobytes() == whole.theta.P.tobytes()
    assert resumed.valuator.W1.tobytes() == whole.valuator.W1.tobytes()
    checkpoint.save_trainer(tmp_path / "a.dvrc", whole)
    checkpoint.save_trainer(tmp_path / "b.dvrc", resumed)
    assert (tmp_path / "a.dvrc").read_bytes() == (tmp_path / "b.dvrc").read_bytes()


def test_model_only_cannot_resume(tmp_path, small_dataset):
    t = Trainer(_config(), small_dataset)
    checkpoint.save_model(tmp_path / "m.dvrc", t.theta)
    with pytest.raises(CacheFormatError):
        checkpoint.load_trainer(tmp_path / "m.dvrc", small_dataset)
