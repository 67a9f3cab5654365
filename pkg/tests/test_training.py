import math

import numpy as np
import pytest

from dfadapter import autodiff as ad
from dfadapter.model import Param, build_model, forward
from dfadapter.training import (
    ContractError,
    Dataset,
    SyntheticSpec,
    TrainConfig,
    clip_grad_norm,
    lr_schedule,
    sgd_step,
    synth_dataset,
    synth_splits,
    train_loop,
)
from dfadapter.vit import ConfigError

from conftest import micro_config

CFG = TrainConfig(base_lr=0.1, warmup_epochs=10, total_epochs=30)
SPE = 25


def test_lr_end_of_warmup_is_base():
    assert lr_schedule(10 * SPE - 1, SPE, CFG) == 0.1


def test_lr_half_warmup():
    assert lr_schedule(5 * SPE - 1, SPE, CFG) == pytest.approx(0.05, abs=1e-15)


def test_lr_final_step_is_zero():
    assert lr_schedule(30 * SPE - 1, SPE, CFG) < 1e-6 * 0.1


def test_lr_monotone_phases():
    lrs = [lr_schedule(s, SPE, CFG) for s in range(30 * SPE)]
    warm, decay = lrs[:10 * SPE], lrs[10 * SPE - 1:]
    assert all(a < b for a, b in zip(warm, warm[1:]))
    assert all(a >= b for a, b in zip(decay, decay[1:]))


def test_lr_no_warmup_and_bad_step():
    cfg = TrainConfig(base_lr=0.2, warmup_epochs=0, total_epochs=4)
    assert lr_schedule(0, 1, cfg) == pytest.approx(0.2 * 0.5 * (1 + math.cos(math.pi / 4)))
    with pytest.raises(ValueError):
        lr_schedule(-1, 1, cfg)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_epochs=40, total_epochs=30)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 0.1})


def scalar_param(w=1.0, trainable=True):
    return Param("w", ad.Tensor(np.array([w]), requires_grad=trainable), trainable, "gba")


def test_sgd_hand_iteration():
    p = scalar_param()
    cfg = TrainConfig(momentum=0.9, weight_decay=0.0, warmup_epochs=0)
    v = {}
    out = []
    for _ in range(2):
        p.tensor.grad = np.array([1.0])
        sgd_step([p], v, 0.1, cfg)
        out.append(p.tensor.data.item())
    assert out == pytest.approx([0.9, 0.71], abs=1e-15)


def test_sgd_zero_lr_leaves_weights():
    p = scalar_param(3.0)
    p.tensor.grad = np.array([5.0])
    sgd_step([p], {}, 0.0, TrainConfig())
    assert p.tensor.data.item() == 3.0


def test_sgd_decay_only():
    p = scalar_param(2.0)
    p.tensor.grad = np.array([0.0])
    cfg = TrainConfig(weight_decay=0.01)
    sgd_step([p], {}, 0.5, cfg)
    assert p.tensor.data.item() == pytest.approx(2.0 - 0.5 * 0.01 * 2.0, abs=1e-15)


def test_sgd_rejects_grad_on_frozen():
    p = scalar_param(trainable=False)
    p.tensor.grad = np.array([1.0])
    with pytest.raises(ContractError):
        sgd_step([p], {}, 0.1, TrainConfig())


@pytest.mark.parametrize("mode", ["boundary", "texture", "both"])
def test_synth_count_balance_range(mode):
    d = synth_dataset(SyntheticSpec(count=100, image_size=32, texture_patch_size=8, artifact_mode=mode))
    assert d.images.shape == (100, 3, 32, 32) and d.images.dtype == np.float32
    assert d.labels.sum() == 50
    assert d.images.min() >= 0.0 and d.images.max() <= 1.0


def test_synth_determinism():
    spec = SyntheticSpec(count=20, image_size=32, texture_patch_size=8, seed=4)
    a, b = synth_dataset(spec), synth_dataset(spec)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = synth_dataset(SyntheticSpec(count=20, image_size=32, texture_patch_size=8, seed=5))
    assert not np.array_equal(a.images, c.images)


@pytest.mark.parametrize("mode", ["boundary", "texture", "both"])
def test_synth_artifacts_confined_to_support(mode):
    spec = SyntheticSpec(count=40, image_size=32, texture_patch_size=8, artifact_mode=mode)
    d = synth_dataset(spec, return_bases=True)
    outside = ~d.support[:, None, :, :].repeat(3, axis=1)
    np.testing.assert_array_equal(d.images[outside], d.bases[outside])
    assert not d.support[d.labels == 0].any()
    fakes = d.labels == 1
    assert all(not np.array_equal(d.images[i], d.bases[i]) for i in np.flatnonzero(fakes))


def test_splits_are_independent_and_sized():
    spec = SyntheticSpec(count=20, val_count=10, image_size=32, texture_patch_size=8)
    train, val = synth_splits(spec)
    assert len(train) == 20 and len(val) == 10 and val.labels.sum() == 5
    assert not np.array_equal(train.images[:10], val.images)
    assert synth_splits(SyntheticSpec(count=20, image_size=32, texture_patch_size=8))[1] is None


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(count=7)
    with pytest.raises(ConfigError):
        SyntheticSpec(artifact_mode="swap")
    with pytest.raises(ConfigError):
        SyntheticSpec(image_size=32, texture_patch_size=40)


def test_dataset_save_load(tmp_path):
    d = synth_dataset(SyntheticSpec(count=6, image_size=32, texture_patch_size=8))
    d.save(tmp_path / "d.npz")
    e = Dataset.load(tmp_path / "d.npz")
    np.testing.assert_array_equal(d.images, e.images)
    np.testing.assert_array_equal(d.support, e.support)


def small_data():
    return synth_splits(SyntheticSpec(count=16, val_count=8, image_size=32, texture_patch_size=8))


def test_train_loop_deterministic(tmp_path):
    train, val = small_data()
    cfg = TrainConfig(base_lr=0.05, warmup_epochs=1, total_epochs=2, batch_size=8, seed=3)
    m1, log1 = train_loop(build_model(micro_config(), 0), train, cfg, val, log_path=tmp_path / "log.jsonl")
    m2, log2 = train_loop(build_model(micro_config(), 0), train, cfg, val)
    assert log1 == log2
    for n, arr in m1.state().items():
        np.testing.assert_array_equal(arr, m2.state()[n])
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 2
    assert set(log1[0]) == {"epoch", "lr", "loss", "train_acc", "val_acc"}


def test_zero_lr_keeps_weights_bitwise():
    train, _ = small_data()
    m = build_model(micro_config(), 0)
    before = {n: p.tensor.data.copy() for n, p in m.params.items()}
    cfg = TrainConfig(base_lr=0.0, warmup_epochs=0, total_epochs=2, batch_size=8, weight_decay=0.0)
    train_loop(m, train, cfg)
    for n, p in m.params.items():
        np.testing.assert_array_equal(p.tensor.data, before[n])


def test_first_batch_loss_near_ln2():
    train, _ = small_data()
    m = build_model(micro_config(), 0)
    loss = ad.cross_entropy(forward(m, train.images[:8]), train.labels[:8])
    assert abs(float(loss.data) - math.log(2)) < 0.05


def test_empty_dataset():
    empty = Dataset(np.zeros((0, 3, 32, 32), np.float32), np.zeros(0, np.int64), np.zeros((0, 32, 32), bool))
    with pytest.raises(ValueError, match="empty"):
        train_loop(build_model(micro_config(), 0), empty, TrainConfig())


def test_clip_grad_norm_rescales_jointly():
    a, b = scalar_param(), Param("v", ad.Tensor(np.zeros(2), requires_grad=True), True, "head")
    a.tensor.grad = np.array([3.0])
    b.tensor.grad = np.array([0.0, 4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.r_[a.tensor.grad, b.tensor.grad], [0.6, 0.0, 0.8])
    # below the ceiling nothing changes
    assert clip_grad_norm([a, b], 2.0) == pytest.approx(1.0)
    np.testing.assert_allclose(a.tensor.grad, [0.6])
