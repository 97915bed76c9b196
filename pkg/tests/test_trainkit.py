import json

import numpy as np
import pytest

from volsr.errors import DivergenceError, ValidationError
from volsr.losses import LossSpec
from volsr.models import ModelConfig, Network, init_parameters, parameter_layout
from volsr.phantom import PhantomSpec, generate_dataset
from volsr.trainkit import (
    AdamState,
    EarlyStopper,
    SamplePair,
    SplitAssignment,
    TrainConfig,
    adam_step,
    make_pair,
    make_pairs,
    predict_volume,
    sample_patch,
    split_subjects,
    train,
)
from volsr.volgrid import Volume

TINY_MODEL = ModelConfig("resnet", channels=4, blocks=1, seed=3)


@pytest.fixture(scope="module")
def tiny_pairs():
    return make_pairs(generate_dataset(PhantomSpec(dims=(16, 16, 8)), subjects=5, master_seed=2))


def tiny_config(**kw):
    base = dict(model=TINY_MODEL, loss=LossSpec("mse"), learning_rate=1e-3, batch_size=2, patch_dims=(8, 8, 8),
                patience=2, max_epochs=3, batches_per_epoch=3, seed=5)
    base.update(kw)
    return TrainConfig(**base)


class TestSplit:
    def test_thirteen_subjects(self):
        s = split_subjects(range(13), (0.6, 0.2, 0.2), seed=0)
        assert (len(s.train), len(s.validation), len(s.test)) == (9, 2, 2)

    def test_deterministic(self):
        assert split_subjects(range(13), seed=4) == split_subjects(range(13), seed=4)
        assert split_subjects(range(13), seed=4) != split_subjects(range(13), seed=5)

    def test_disjoint_and_echo_complete_over_seeds(self):
        records = [(s, e, None) for s in range(13) for e in range(3)]
        for seed in range(100):
            split = split_subjects(range(13), seed=seed)
            parts = [set(split.train), set(split.validation), set(split.test)]
            assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
            assert parts[0] | parts[1] | parts[2] == set(range(13))
            for part in parts:
                echoes = [e for s, e, _ in records if s in part]
                assert len(echoes) == 3 * len(part)

    def test_errors(self):
        with pytest.raises(ValidationError):
            split_subjects([0, 1])
        with pytest.raises(ValidationError):
            split_subjects(range(5), (0.5, 0.2, 0.2))
        with pytest.raises(ValidationError):
            SplitAssignment((0, 1), (1,), (2,))

    def test_round_trip(self):
        s = split_subjects(range(7), seed=1)
        assert SplitAssignment.from_dict(json.loads(json.dumps(s.to_dict()))) == s


class TestPairs:
    def test_bandlimited_input_equals_target(self):
        rng = np.random.default_rng(0)
        k = np.zeros((16, 16, 8), dtype=complex)
        k[6:11, 6:11, 3:6] = rng.standard_normal((5, 5, 3))
        x = np.fft.ifftn(np.fft.ifftshift(k)).real
        p = make_pair(Volume(x))
        np.testing.assert_allclose(p.input.data, p.target.data, atol=1e-5)

    def test_zero_mean(self, tiny_pairs):
        for p in tiny_pairs[:3]:
            assert abs(p.input.data.mean()) < 1e-5 and abs(p.target.data.mean()) < 1e-5
            assert p.input.dims == p.target.dims

    def test_ids(self, tiny_pairs):
        assert [(p.subject, p.echo) for p in tiny_pairs[:4]] == [(0, 0), (0, 1), (0, 2), (1, 0)]


class TestPatches:
    def test_raw_crop(self, tiny_pairs):
        pair = tiny_pairs[0]
        rng = np.random.default_rng(1)
        x, y = sample_patch(pair, rng, (8, 8, 4), flip=False, rotate=False)
        rng = np.random.default_rng(1)
        ox, oy, oz = (int(rng.integers(0, n - p + 1)) for n, p in zip((16, 16, 8), (8, 8, 4)))
        np.testing.assert_array_equal(y, pair.target.data[ox : ox + 8, oy : oy + 8, oz : oz + 4])
        np.testing.assert_array_equal(x, pair.input.data[ox : ox + 8, oy : oy + 8, oz : oz + 4])

    def test_flip_involution(self, tiny_pairs):
        pair = tiny_pairs[1]
        raw, _ = sample_patch(pair, np.random.default_rng(2), (8, 8, 4), flip=False, rotate=False)
        flipped, _ = sample_patch(pair, np.random.default_rng(2), (8, 8, 4), flip=True, rotate=False)
        flips = np.random.default_rng(2)
        for n, q in zip((16, 16, 8), (8, 8, 4)):
            flips.integers(0, n - q + 1)
        axes = tuple(np.flatnonzero(flips.random(3) < 0.5))
        np.testing.assert_array_equal(np.flip(flipped, axis=axes) if axes else flipped, raw)

    def test_zero_angle_rotation_is_identity(self, tiny_pairs):
        pair = tiny_pairs[2]
        a = sample_patch(pair, np.random.default_rng(3), (8, 8, 4), rotate=True, max_inplane_deg=0,
                         max_throughplane_deg=0)
        b = sample_patch(pair, np.random.default_rng(3), (8, 8, 4), rotate=False)
        np.testing.assert_allclose(a[0], b[0], atol=1e-6)
        np.testing.assert_allclose(a[1], b[1], atol=1e-6)

    def test_rotation_applied_identically(self, tiny_pairs):
        pair = SamplePair(tiny_pairs[0].target, tiny_pairs[0].target, 0, 0)
        x, y = sample_patch(pair, np.random.default_rng(4), (12, 12, 6))
        np.testing.assert_array_equal(x, y)

    def test_too_large(self, tiny_pairs):
        with pytest.raises(ValidationError):
            sample_patch(tiny_pairs[0], np.random.default_rng(0), (32, 8, 8))


class TestAdam:
    def test_first_step_is_signed_lr(self):
        g = np.array([3.0, -0.2, 0.05])  # |g| >> eps/1e-6 keeps the eps bias below 1e-6 lr
        theta = np.zeros(3)
        adam_step([theta], [g], AdamState.for_params([theta]), 0.01)
        np.testing.assert_allclose(theta, -0.01 * np.sign(g), rtol=0, atol=1e-6 * 0.01)

    def test_zero_gradient_and_zero_lr(self):
        theta = np.array([1.0, 2.0])
        state = AdamState.for_params([theta])
        adam_step([theta], [np.zeros(2)], state, 0.1)
        np.testing.assert_array_equal(theta, [1.0, 2.0])
        adam_step([theta], [np.ones(2)], state, 0.0)
        np.testing.assert_array_equal(theta, [1.0, 2.0])
        assert state.t == 2

    def test_quadratic(self):
        theta = np.array([1.0])
        state = AdamState.for_params([theta])
        history = []
        for _ in range(100):
            adam_step([theta], [2 * theta], state, 0.1)
            history.append(abs(theta[0]))
        assert abs(theta[0]) < 0.1

    def test_shape_mismatch(self):
        theta = np.zeros(2)
        with pytest.raises(ValidationError):
            adam_step([theta], [np.zeros(3)], AdamState.for_params([theta]), 0.1)


class TestEarlyStopping:
    def test_paper_patience(self):
        stopper = EarlyStopper(100)
        scores = [0.5, 0.6] + [0.6 - 0.001 * (i % 5) for i in range(200)]
        for epoch, s in enumerate(scores, start=1):
            stopper.update(epoch, s)
            if stopper.stop:
                break
        assert epoch == 102 and stopper.best_epoch == 2

    def test_patience_zero(self):
        stopper = EarlyStopper(0)
        for epoch, s in enumerate([0.1, 0.2, 0.15, 0.3], start=1):
            stopper.update(epoch, s)
            if stopper.stop:
                break
        assert epoch == 3 and stopper.best_epoch == 2


class TestTrain:
    def test_deterministic_with_log(self, tiny_pairs, tmp_path):
        split = split_subjects(range(5), seed=0)
        a = train(tiny_config(), tiny_pairs, split, log_path=tmp_path / "a.jsonl")
        b = train(tiny_config(), tiny_pairs, split, log_path=tmp_path / "b.jsonl")
        assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
        assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
        lines = [json.loads(s) for s in (tmp_path / "a.jsonl").read_text().splitlines()]
        assert set(lines[0]) == {"epoch", "train_loss", "val_ssim", "best_epoch"}
        best = a.checkpoint.metadata
        assert best["best_val_ssim"] == max(r["val_ssim"] for r in lines)
        assert best["split"] == split.to_dict()
        assert a.steps == 3 * len(lines)

    def test_best_checkpoint_never_regresses(self, tiny_pairs):
        split = split_subjects(range(5), seed=1)
        result = train(tiny_config(max_epochs=4, patience=4), tiny_pairs, split)
        best = result.checkpoint.metadata
        for record in result.log[: best["epoch"]]:
            assert record["val_ssim"] <= best["best_val_ssim"]

    def test_divergence(self, tiny_pairs):
        split = split_subjects(range(5), seed=0)
        with pytest.raises(DivergenceError) as info:
            train(tiny_config(learning_rate=1e200), tiny_pairs, split)
        assert info.value.epoch >= 1

    def test_empty_partition(self, tiny_pairs):
        with pytest.raises(ValidationError):
            train(tiny_config(), tiny_pairs, SplitAssignment((0, 1, 2, 3), (), (4,)))

    def test_config_round_trip(self, tmp_path):
        config = tiny_config()
        (tmp_path / "c.json").write_text(json.dumps(config.to_dict()))
        assert TrainConfig.load(tmp_path / "c.json") == config
        with pytest.raises(ValidationError):
            TrainConfig.from_dict({"learning_rate": 1e-4, "momentum": 0.9})

    def test_paper_defaults(self):
        c = TrainConfig.from_dict({"model": {"architecture": "resnet"}, "loss": {"kind": "mse"},
                                   "learning_rate": 1e-4, "patience": 100})
        assert (c.batch_size, c.patch_dims, c.model.blocks, c.model.channels) == (4, (64, 64, 16), 16, 32)


class TestPredict:
    def test_identity_and_determinism(self, tiny_pairs):
        zero = {n: np.zeros(s) for n, s in parameter_layout(TINY_MODEL)}
        ckpt = Network(TINY_MODEL, zero).to_checkpoint()
        v = tiny_pairs[0].input
        assert predict_volume(ckpt, v) == v
        trained = init_parameters(TINY_MODEL)
        assert predict_volume(trained, v) == predict_volume(trained, v)

    def test_too_small(self):
        with pytest.raises(ValidationError):
            predict_volume(init_parameters(TINY_MODEL), Volume(np.zeros((8, 8, 2))))
