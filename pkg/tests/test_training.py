import math

import numpy as np
import pytest

from mat_caption.data import Bucket, Example, batch_from_examples, build_vocabulary
from mat_caption.experiments import make_split
from mat_caption.model import Variant
from mat_caption.numerics import Parameter
from mat_caption.training import (
    PlateauHalver,
    TrainConfig,
    TrainingDiverged,
    apply_dropout,
    clip_grad_norm,
    history_csv,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train,
)


def param(values, grad=None):
    v = np.asarray(values, dtype=np.float64)
    return Parameter("p", v, np.zeros_like(v) if grad is None else np.asarray(grad, dtype=np.float64))


def test_sgd_zero_grad_is_noop():
    p = param([1.0, -2.0, 3.0])
    sgd_step([p], 0.5)
    np.testing.assert_array_equal(p.value, [1.0, -2.0, 3.0])


def test_sgd_lr_one_grad_theta_gives_zero():
    p = param([1.5, -0.25], [1.5, -0.25])
    sgd_step([p], 1.0)
    np.testing.assert_array_equal(p.value, [0.0, 0.0])
    np.testing.assert_array_equal(p.grad, [0.0, 0.0])


def test_sgd_quadratic_step():
    p = param([1.0])
    p.grad = p.value.copy()  # d/dθ of θ²/2
    sgd_step([p], 0.1)
    assert p.value[0] == pytest.approx(0.9, abs=1e-15)


def test_clip_grad_norm():
    a, b = param([0.0, 0.0], [3.0, 0.0]), param([0.0], [4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    total = math.sqrt(np.sum(a.grad ** 2) + np.sum(b.grad ** 2))
    assert total == pytest.approx(1.0)
    np.testing.assert_allclose(b.grad, [0.8])
    c = param([0.0], [0.5])
    clip_grad_norm([c], 1.0)
    assert c.grad[0] == 0.5
    clip_grad_norm([c], 0.0)  # disabled
    assert c.grad[0] == 0.5


def test_dropout_identity_when_off():
    v = np.arange(5.0)
    assert apply_dropout(v, 0.0, np.random.default_rng(0)) is v
    assert apply_dropout(v, 0.5, None) is v


def test_dropout_preserves_expectation():
    rng = np.random.default_rng(1)
    v = np.linspace(0.5, 2.0, 8)
    masks = np.stack([apply_dropout(v, 0.3, rng) for _ in range(100_000)])
    np.testing.assert_allclose(masks.mean(axis=0), v, rtol=0.01)


def test_dropout_zero_fraction():
    out = apply_dropout(np.ones(1_000_000), 0.5, np.random.default_rng(2))
    frac = np.mean(out == 0.0)
    assert 0.498 <= frac <= 0.502
    assert set(np.unique(out)) == {0.0, 2.0}


def test_plateau_halving_sequence():
    sched = PlateauHalver(0.1, patience=2)
    lrs = [sched.step(loss) for loss in [1.0, 0.8, 0.8, 0.8, 0.8]]
    assert lrs == [0.1, 0.1, 0.1, 0.05, 0.05]
    # improvements below the relative tolerance count as a plateau
    sched = PlateauHalver(0.1, patience=1, tolerance=1e-2)
    sched.step(1.0)
    assert sched.step(0.995) == 0.05


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(dropout=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_initial=0.0)
    with pytest.raises(ValueError):
        TrainConfig(variant="bogus")
    cfg = TrainConfig(variant="no-attention", buckets=[(3, 7)])
    assert cfg.variant is Variant.NO_ATTENTION and cfg.buckets == (Bucket(3, 7),)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.fixture(scope="module")
def small_split():
    return make_split(num_train=120, num_val=30)


def small_config(**kw):
    base = dict(hidden_size=16, batch_size=16, dropout=0.2, init_scale=0.4, max_epochs=3)
    base.update(kw)
    return TrainConfig(**base)


def test_training_reduces_loss_and_lr_never_increases(small_split):
    tr, va = small_split.examples()
    r = train(small_config(max_epochs=6), tr, va, len(small_split.vocab), 16)
    hist = r.history
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]
    assert all(a["lr"] >= b["lr"] for a, b in zip(hist, hist[1:]))
    assert r.best_val_loss == min(h["val_loss"] for h in hist)


def test_training_is_deterministic(small_split):
    tr, va = small_split.examples()
    a = train(small_config(), tr, va, len(small_split.vocab), 16)
    b = train(small_config(), tr, va, len(small_split.vocab), 16)
    assert history_csv(a.history) == history_csv(b.history)
    c = train(small_config(seed=1), tr, va, len(small_split.vocab), 16)
    assert history_csv(a.history) != history_csv(c.history)


def test_early_stopping_restores_best(small_split):
    tr, va = small_split.examples()
    # lr this large makes validation loss bounce; patience 1 stops at the first rise
    r = train(small_config(lr_initial=2.0, early_stop_patience=1, max_epochs=20, clip_norm=0.0), tr, va,
              len(small_split.vocab), 16)
    vals = [h["val_loss"] for h in r.history]
    if len(vals) < 20:
        assert vals[-1] >= vals[-2]
    assert r.best_epoch == int(np.argmin(vals)) + 1


def test_first_batch_loss_near_log_vocab(small_split):
    tr, _ = small_split.examples()
    from mat_caption.model import CaptionModel, ModelConfig
    V = len(small_split.vocab)
    m = CaptionModel(ModelConfig(V, 16, 512, init_scale=0.08), 0)
    batch = batch_from_examples(tr[:64])
    per_token = m.loss(batch) / batch.num_targets
    assert abs(per_token - math.log(V)) < 0.2 * math.log(V)


def test_divergence_raises(small_split):
    tr, va = small_split.examples()
    bad = [Example(np.full_like(e.objects, np.nan), e.tokens, e.id) for e in tr[:5]]
    with pytest.raises(TrainingDiverged, match="non-finite"):
        train(small_config(), bad, va, len(small_split.vocab), 16)


@pytest.mark.parametrize("variant", list(Variant))
def test_checkpoint_round_trip_bitwise(tmp_path, small_split, variant):
    tr, va = small_split.examples()
    cfg = small_config(max_epochs=1, variant=variant)
    r = train(cfg, tr, va, len(small_split.vocab), 16, small_split.vocab, tmp_path)
    path = tmp_path / "best.npz"
    assert path.exists()
    ck = load_checkpoint(path)
    assert ck.config == cfg and ck.vocab.itos == small_split.vocab.itos and ck.epoch == 1
    assert ck.model.config.variant is variant
    batch = batch_from_examples(va[:8])
    assert ck.model.loss(batch) == r.model.loss(batch)
    save_checkpoint(tmp_path / "again.npz", ck.model, ck.config, ck.vocab, ck.epoch, ck.rng_state)
    assert load_checkpoint(tmp_path / "again.npz").model.loss(batch) == r.model.loss(batch)


def test_checkpoint_version_checked(tmp_path, small_split):
    from mat_caption.model import CaptionModel, ModelConfig
    import json
    m = CaptionModel(ModelConfig(10, 4, 4), 0)
    save_checkpoint(tmp_path / "m.npz", m)
    with np.load(tmp_path / "m.npz") as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays["__meta__"]))
    meta["version"] = 99
    arrays["__meta__"] = np.array(json.dumps(meta))
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "bad.npz")


def test_history_csv_format():
    text = history_csv([{"epoch": 1, "train_loss": 0.5, "val_loss": 0.25, "lr": 0.1}])
    assert text == "epoch,train_loss,val_loss,lr\n1,0.5,0.25,0.1\n"


def test_empty_sets_rejected():
    with pytest.raises(ValueError):
        train(small_config(), [], [], 10, 4)
