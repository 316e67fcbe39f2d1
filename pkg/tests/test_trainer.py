import numpy as np
import pytest

from sse import tensor as tc
from sse.checkpoint import load_checkpoint
from sse.data import Batch, FeatureFrame
from sse.model import ModelParams, bind, forward_many_to_many, logits_cube
from sse.objective import sequence_loss, softmax
from sse.trainer import (MANY_TO_ONE, AdamState, Ensemble, TrainConfig, TrainingDiverged,
                         adam_step, best_epoch, cross_validate, ensemble_predict, read_config_file,
                         train_fold)
from sse.synthetic import generate_synthetic
from sse.data import build_vocab, featurize_all

from .conftest import SMALL_CARDS, small_config

FAST = TrainConfig(epochs=3, folds=2, batch_size=32, learning_rate=0.01, precision=64)


def split(frames, n_val=60):
    return frames[n_val:], frames[:n_val]


def tiny_model(vocab, **kw):
    return small_config(hidden_dim=8, city_dim=8, **kw), vocab.cardinalities()


class TestAdam:
    def test_zero_gradient_is_noop(self, rng):
        params = ModelParams.init(small_config(), SMALL_CARDS, rng)
        zero = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        new, state = adam_step(params, zero, AdamState(), FAST)
        for k in params.arrays:
            np.testing.assert_array_equal(new.arrays[k], params.arrays[k])
        assert state.step == 1

    def test_first_step_moves_by_learning_rate(self, rng):
        params = ModelParams.init(small_config(), SMALL_CARDS, rng)
        grads = {k: rng.normal(size=v.shape) for k, v in params.arrays.items()}
        new, _ = adam_step(params, grads, AdamState(), FAST)
        for k in params.arrays:
            step = new.arrays[k] - params.arrays[k]
            g = grads[k]
            expect = -FAST.learning_rate * g / (np.abs(g) + FAST.adam_epsilon)
            np.testing.assert_allclose(step, expect, rtol=1e-9, atol=1e-15)

    def test_deterministic(self, rng):
        params = ModelParams.init(small_config(), SMALL_CARDS, rng)
        grads = {k: rng.normal(size=v.shape) for k, v in params.arrays.items()}
        runs = []
        for _ in range(2):
            p, s = params, AdamState()
            for _ in range(3):
                p, s = adam_step(p, grads, s, FAST)
            runs.append(p)
        for k in params.arrays:
            assert runs[0].arrays[k].tobytes() == runs[1].arrays[k].tobytes()

    def test_nan_gradient_diverges(self, rng):
        params = ModelParams.init(small_config(), SMALL_CARDS, rng)
        grads = {"emb.city": np.full(params.arrays["emb.city"].shape, np.nan)}
        with pytest.raises(TrainingDiverged):
            adam_step(params, grads, AdamState(), FAST)


def test_best_epoch_first_maximum():
    assert best_epoch([0.1, 0.3, 0.3]) == 2


def test_config_file(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# comment\nlearning_rate = 0.01\nepochs=4\n")
    cfg = TrainConfig.from_mapping(read_config_file(path))
    assert cfg.learning_rate == 0.01 and cfg.epochs == 4
    path.write_text("nonsense\n")
    with pytest.raises(ValueError):
        read_config_file(path)


class TestTrainFold:
    def test_loss_decreases(self, synthetic_frames):
        vocab, frames = synthetic_frames
        cfg, cards = tiny_model(vocab)
        train, val = split(frames[:200], 40)
        result = train_fold(train, val, cfg, FAST.replace(epochs=5), cards)
        losses = [h.train_loss for h in result.history]
        assert losses[-1] < losses[0]
        assert all(np.isfinite(losses))

    def test_many_to_one_counts_one_step_per_trip(self, synthetic_frames):
        vocab, frames = synthetic_frames
        cfg, cards = tiny_model(vocab)
        train, val = split(frames)
        m2o = train_fold(train, val, cfg, FAST.replace(epochs=1, model_type=MANY_TO_ONE), cards)
        m2m = train_fold(train, val, cfg, FAST.replace(epochs=1), cards)
        assert m2o.history[0].loss_steps == len(train)
        assert m2m.history[0].loss_steps == sum(f.steps for f in train)

    def test_reproducible(self, synthetic_frames, tmp_path):
        vocab, frames = synthetic_frames
        cfg, cards = tiny_model(vocab, input_dropout=0.3, recurrent_dropout=0.1)
        train, val = split(frames)
        a = train_fold(train, val, cfg, FAST.replace(precision=32), cards, out_dir=tmp_path / "a")
        b = train_fold(train, val, cfg, FAST.replace(precision=32), cards, out_dir=tmp_path / "b")
        assert a.history == b.history and a.best_epoch == b.best_epoch
        assert (tmp_path / "a/checkpoint.sse").read_bytes() == (tmp_path / "b/checkpoint.sse").read_bytes()
        loaded = load_checkpoint(a.checkpoint)
        for k, v in a.params.arrays.items():
            assert loaded.arrays[k].tobytes() == v.tobytes()

    def test_validation_does_not_leak(self, synthetic_frames):
        vocab, frames = synthetic_frames
        cfg, cards = tiny_model(vocab)
        train, val = split(frames)
        shuffled = [FeatureFrame(f.utrip_id, f.features[:, ::-1].copy() % 2 + 1, f.targets[::-1].copy(),
                                 f.mask) for f in val]
        a = train_fold(train, val, cfg, FAST, cards)
        b = train_fold(train, shuffled, cfg, FAST, cards)
        assert [h.train_loss for h in a.history] == [h.train_loss for h in b.history]
        assert [h.train_recall for h in a.history] == [h.train_recall for h in b.history]

    def test_best_epoch_matches_history(self, synthetic_frames):
        vocab, frames = synthetic_frames
        cfg, cards = tiny_model(vocab)
        result = train_fold(*split(frames), cfg, FAST.replace(epochs=4), cards)
        recalls = [h.val_recall for h in result.history]
        assert result.best_epoch == best_epoch(recalls)
        assert result.best_recall == max(recalls)


def test_final_step_mask_selects_last_prediction(rng):
    cfg = small_config()
    from sse.oracle import random_frame, random_params

    frames = [random_frame(n, SMALL_CARDS, rng) for n in (3, 1, 4)]
    batch = Batch.from_frames(frames)
    logits = forward_many_to_many(batch, bind(random_params(cfg, SMALL_CARDS, rng)), cfg)
    loss = sequence_loss(logits, batch.targets, batch.final_step_mask()).item()
    cube = logits_cube(logits, batch.size)
    expect = np.mean([-np.log(softmax(cube[b, n - 1])[batch.targets[b, n - 1]])
                      for b, n in enumerate(batch.lengths)])
    assert abs(loss - expect) < 1e-12


class TestEnsemble:
    def _member(self, rng, city_bias):
        cfg = small_config(decoder="feedforward")
        params = ModelParams.init(cfg, SMALL_CARDS, rng)
        arrays = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        b = np.full((1, SMALL_CARDS[0]), -50.0)
        b[0, city_bias] = 50.0
        arrays["dec.b"] = b
        return ModelParams(cfg, SMALL_CARDS, arrays)

    def test_average_of_one_hot_members(self, rng):
        from sse.oracle import random_frame

        ens = Ensemble([self._member(rng, 1), self._member(rng, 2)])
        pmf = ensemble_predict(random_frame(3, SMALL_CARDS, rng), ens)
        np.testing.assert_allclose(pmf[[1, 2]], [0.5, 0.5], atol=1e-12)

    def test_identical_members(self, rng):
        from sse.oracle import random_frame, random_params

        p = random_params(small_config(), SMALL_CARDS, rng)
        frames = [random_frame(4, SMALL_CARDS, rng)]
        single = Ensemble([p]).predict(frames)
        np.testing.assert_allclose(Ensemble([p, p.copy(), p.copy()]).predict(frames), single, atol=1e-15)

    def test_vocabulary_mismatch(self, rng):
        a = ModelParams.init(small_config(), SMALL_CARDS, rng)
        b = ModelParams.init(small_config(), [10] + SMALL_CARDS[1:], rng)
        with pytest.raises(ValueError):
            Ensemble([a, b])


@pytest.mark.slow
def test_cross_validate_ten_folds(tmp_path):
    sessions = generate_synthetic(1000, 30, 3, seed=11)
    vocab = build_vocab(sessions)
    frames = featurize_all(sessions, vocab)
    cfg, cards = tiny_model(vocab)
    result = cross_validate(frames, cfg, FAST.replace(epochs=1, folds=10, batch_size=128),
                            cards, out_dir=tmp_path)
    assert not result.failures and len(result.folds) == 10
    held = sorted(i for fold in result.fold_indices for i in fold)
    assert held == list(range(len(frames)))
    for i in range(10):
        assert (tmp_path / f"fold{i}" / "checkpoint.sse").exists()
    assert len(result.ensemble) == 10
    pmfs = result.ensemble.predict(frames[:5])
    np.testing.assert_allclose(pmfs.sum(axis=1), 1, atol=1e-9)
