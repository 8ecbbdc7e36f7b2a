import io
import math

import numpy as np
import pytest

from dualsub import autodiff as ad
from dualsub.autodiff import Tensor
from dualsub.model import ModelConfig, Transformer
from dualsub.training import (
    Adam,
    Checkpoint,
    EarlyStopping,
    Example,
    TrainConfig,
    Trainer,
    average_checkpoints,
    collate,
    decoder_prefix,
    joint_loss,
    lr_schedule,
    make_batches,
    sequence_loss,
    train,
)


def small(variant="dual", **kw):
    base = dict(vocab_size=30, d_model=16, d_ff=32, n_heads=2, n_enc_layers=1, n_dec_layers=1, max_len=40)
    return ModelConfig(**{**base, **kw, "variant": variant})


def corpus(n=6, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        src = list(rng.integers(8, 30, size=int(rng.integers(2, 6)))) + [2]
        out.append(Example([int(x) for x in src], [int(x) for x in rng.integers(8, 30, size=3)],
                           [int(x) for x in rng.integers(8, 30, size=int(rng.integers(2, 5)))]))
    return out


# -- schedule ---------------------------------------------------------------------


def test_lr_peaks_at_warmup():
    cfg = TrainConfig()
    assert lr_schedule(4000, cfg) == pytest.approx(0.0007)
    assert lr_schedule(16000, cfg) == pytest.approx(0.00035)
    assert lr_schedule(1, cfg) == pytest.approx(0.0007 / 4000)


def test_lr_continuous_at_warmup():
    cfg = TrainConfig(warmup_steps=100)
    left = cfg.max_lr * (100 - 1e-9) / 100
    assert lr_schedule(100, cfg) == pytest.approx(left, rel=1e-9)


def test_finetune_lr_constant():
    cfg = TrainConfig(mode="finetune")
    assert {lr_schedule(s, cfg) for s in (1, 10, 99999)} == {8e-5}
    assert lr_schedule(5, TrainConfig(), "finetune") == 8e-5


def test_config_guards():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=0)
    with pytest.raises(ValueError):
        TrainConfig(patience_checkpoints=0)
    with pytest.raises(ValueError):
        lr_schedule(0, TrainConfig())


# -- losses -----------------------------------------------------------------------


def test_uniform_logits_give_length_times_log_v():
    V = 7
    l1, l2 = Tensor(np.zeros((4, V))), Tensor(np.zeros((6, V)))
    value = joint_loss(l1, l2, [3, 4, 5], [3, 3, 3, 3, 3], pad_id=0)
    assert float(value.total.data) == pytest.approx(8 * math.log(V))
    assert value.n_tokens == 8
    assert float(value.mean.data) == pytest.approx(math.log(V))


def test_one_hot_predictions_have_zero_loss():
    logits = np.full((3, 5), -50.0)
    logits[[0, 1, 2], [3, 4, 1]] = 50.0
    value = joint_loss(Tensor(logits), Tensor(logits), [3, 4, 1], [3, 4], pad_id=0)
    assert float(value.total.data) == pytest.approx(0.0, abs=1e-6)


def test_scalar_oracle_v3():
    a, b = np.array([[0.2, -1.0, 0.5]]), np.array([[1.5, 0.0, -0.3]])

    def nll(row, k):
        return -(row[k] - math.log(sum(math.exp(x) for x in row)))

    value = joint_loss(Tensor(a), Tensor(b), [2], [1], pad_id=0)
    assert float(value.total.data) == pytest.approx(nll(a[0], 2) + nll(b[0], 1), abs=1e-12)


def test_joint_is_sum_of_single(rng):
    l1, l2 = Tensor(rng.normal(size=(5, 9))), Tensor(rng.normal(size=(5, 9)))
    s1, _ = sequence_loss(l1, [3, 4], 0)
    s2, _ = sequence_loss(l2, [5, 6, 7], 0)
    assert float(joint_loss(l1, l2, [3, 4], [5, 6, 7], 0).total.data) == float(s1.data) + float(s2.data)


def test_loss_errors():
    with pytest.raises(ValueError, match="PAD"):
        sequence_loss(Tensor(np.zeros((3, 4))), [0, 1], 0)
    with pytest.raises(ValueError):
        sequence_loss(Tensor(np.zeros((2, 4))), [1, 2, 3], 0)


# -- batching ---------------------------------------------------------------------


def test_collate_pads_streams_to_common_length():
    cfg = small()
    batch = collate([Example([9, 2], [10, 11, 12], [13])], cfg)
    assert batch.inputs[0].tolist() == [[1, 10, 11, 12]]
    assert batch.refs[0].tolist() == [[10, 11, 12, 2]]
    assert batch.inputs[1].tolist() == [[1, 13, 2, 0]]
    assert batch.refs[1].tolist() == [[13, 2, 0, 0]]


def test_collate_shared_prefix_has_tag():
    cfg = small("shared")
    batch = collate([Example([9, 2], [10], [11])], cfg)
    assert decoder_prefix(cfg, 2) == [1, cfg.tag2_id]
    assert batch.inputs[0][0, :2].tolist() == [1, cfg.tag1_id]
    assert batch.inputs[1].shape[1] == batch.refs[1].shape[1] + 1
    assert batch.prefix_len == 2


def test_make_batches_respects_budget_and_covers_all():
    examples = corpus(40)
    batches = make_batches(examples, 40, np.random.default_rng(0))
    seen = [id(e) for b in batches for e in b]
    assert sorted(seen) == sorted(id(e) for e in examples)
    for b in batches:
        assert len(b) == 1 or max(e.length() + 2 for e in b) * len(b) <= 40


# -- optimisation -----------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    from dualsub.model import Parameters

    params = Parameters.initialize(small("base"), 0)
    before = params["embed"].data.copy()
    adam = Adam(params)
    for name in params:
        params[name].grad = np.ones_like(params[name].data)
    adam.step(0.01)
    np.testing.assert_allclose(before - params["embed"].data, 0.01, rtol=1e-6)


def test_early_stopping_patience_example():
    stopper = EarlyStopping(4)
    decisions = [stopper.update(x) for x in [3, 2, 2.1, 2.2, 2.3, 2.4]]
    assert decisions == [False] * 5 + [True]
    assert stopper.best_index == 1


def test_train_stops_within_best_plus_patience():
    cfg = TrainConfig(max_lr=1e-2, warmup_steps=5, checkpoint_interval_steps=2, patience_checkpoints=2,
                      max_steps=400, batch_tokens=200)
    data = corpus(6)
    dev = corpus(4, seed=9)
    checkpoints = train(Transformer(small(), seed=0), data, cfg, "joint", dev=dev)
    losses = [c.dev_loss for c in checkpoints]
    best = int(np.argmin(losses))
    assert len(checkpoints) <= best + 1 + cfg.patience_checkpoints
    assert checkpoints[-1].step <= cfg.max_steps


def test_train_log_lines():
    out = io.StringIO()
    cfg = TrainConfig(warmup_steps=5, checkpoint_interval_steps=3, max_steps=6, batch_tokens=200)
    train(Transformer(small("base"), seed=0), [Example(e.src, e.tgt1) for e in corpus(4)], cfg, "single",
          log_file=out)
    lines = out.getvalue().splitlines()
    assert [line.split("\t")[0] for line in lines] == ["3", "6"]
    assert all(len(line.split("\t")) == 4 for line in lines)


def test_train_errors():
    with pytest.raises(ValueError):
        train(Transformer(small(), seed=0), [], TrainConfig())
    with pytest.raises(ValueError, match="tri-parallel"):
        train(Transformer(small(), seed=0), [Example([9, 2], [10])], TrainConfig())
    with pytest.raises(ValueError):
        Trainer(Transformer(small("base"), seed=0), TrainConfig(), "joint")


def test_single_example_overfit():
    cfg = TrainConfig(max_lr=3e-3, warmup_steps=20, checkpoint_interval_steps=20, max_steps=200)
    checkpoints = train(Transformer(small(), seed=0), [Example([9, 10, 11, 2], [12, 13, 14, 15], [16, 17, 18])],
                        cfg, "joint")
    losses = [c.train_loss for c in checkpoints]
    assert len(checkpoints) == 10
    assert np.mean(losses[5:]) < np.mean(losses[:5])
    assert losses[-1] < 0.1


def test_same_seed_gives_identical_checkpoints():
    cfg = TrainConfig(warmup_steps=4, checkpoint_interval_steps=5, max_steps=10, batch_tokens=60)

    def run():
        return train(Transformer(small(), seed=3), corpus(8), cfg, "joint")

    a, b = run(), run()
    for ca, cb in zip(a, b):
        for name in ca.arrays:
            assert ca.arrays[name].tobytes() == cb.arrays[name].tobytes()


def test_resume_reproduces_next_update(tmp_path):
    cfg = TrainConfig(warmup_steps=3)
    data = corpus(4)
    trainer = Trainer(Transformer(small(), seed=0), cfg)
    for _ in range(3):
        trainer.train_step(data)
    trainer.checkpoint().save(tmp_path / "c.ckpt", "v")
    trainer.train_step(data[:2])
    expected = trainer.model.params.arrays()

    ckpt = Checkpoint.load(tmp_path / "c.ckpt", "v")
    resumed = Trainer(ckpt.model(), cfg)
    resumed.restore(ckpt)
    assert resumed.step_count == 3
    resumed.train_step(data[:2])
    got = resumed.model.params.arrays()
    for name in expected:
        assert got[name].tobytes() == expected[name].tobytes()


def test_checkpoint_vocab_hash_check(tmp_path):
    trainer = Trainer(Transformer(small(), seed=0), TrainConfig())
    trainer.checkpoint(1.5).save(tmp_path / "c.ckpt", "abc")
    assert Checkpoint.load(tmp_path / "c.ckpt").dev_loss == 1.5
    with pytest.raises(ValueError, match="vocabulary hash"):
        Checkpoint.load(tmp_path / "c.ckpt", "xyz")


def test_gradient_check_through_joint_loss(rng):
    model = Transformer(small(n_enc_layers=2, n_dec_layers=2, vocab_size=64), seed=0)
    trainer = Trainer(model, TrainConfig())
    batch = collate(corpus(2), model.config)
    err = ad.gradient_check(lambda p: trainer.batch_loss(batch).mean, dict(model.params.items()),
                            samples_per_tensor=2, rng=rng)
    assert err < 1e-4


# -- averaging --------------------------------------------------------------------


def _ckpt(cfg, arrays):
    return Checkpoint(cfg, arrays, 0)


def test_average_of_identical_is_identity():
    m = Transformer(small(), seed=0)
    arrays = m.params.arrays()
    avg = average_checkpoints([_ckpt(m.config, arrays)] * 5)
    for name in arrays:
        assert avg[name].data.tobytes() == arrays[name].tobytes()


def test_average_of_opposites_is_zero():
    m = Transformer(small(), seed=0)
    arrays = m.params.arrays()
    neg = {k: -v for k, v in arrays.items()}
    avg = average_checkpoints([_ckpt(m.config, arrays), _ckpt(m.config, neg)])
    for name in arrays:
        np.testing.assert_allclose(avg[name].data, 0.0, atol=1e-15)


def test_average_matches_scalar_mean():
    cfg = small()
    arrays = [Transformer(cfg, seed=s).params.arrays() for s in range(3)]
    avg = average_checkpoints([_ckpt(cfg, a) for a in arrays])
    name = "embed"
    for idx in [(0, 0), (5, 3), (29, 15)]:
        expect = sum(float(a[name][idx]) for a in arrays) / 3
        assert float(avg[name].data[idx]) == pytest.approx(expect, abs=1e-14)


def test_average_rejects_mismatch():
    a = Transformer(small(), seed=0).params.arrays()
    b = Transformer(small("shared"), seed=0).params.arrays()
    with pytest.raises(ValueError):
        average_checkpoints([_ckpt(small(), a), _ckpt(small("shared"), b)])
    with pytest.raises(ValueError):
        average_checkpoints([])
