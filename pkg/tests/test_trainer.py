import csv
import math

import numpy as np
import pytest

import placedrop.place
from placedrop.augment import AugmentConfig
from placedrop.core.network import Network
from placedrop.core.proto import LayerId
from placedrop.domains import Dataset, Split, leave_one_out
from placedrop.errors import ConfigError, ContractError, NumericalError
from placedrop.place import PlaceConfig, num_dropped, schedule_ratio
from placedrop.streams import StreamFactory
from placedrop.style import StyleConfig
from placedrop.trainer import (
    EpochRecord,
    SgdConfig,
    StagePlan,
    TrainConfig,
    compose_batch,
    lr_at,
    sgd_step,
    train,
    write_epoch_log,
)
from tests.general_utils import quick_train_config


IDENTITY_AUGMENT = AugmentConfig(standard_enabled=False, rand_enabled=False)


def _step(param, grad, velocity, **sgd):
    sgd_step([param], [grad], [velocity], SgdConfig(**sgd), sgd.get("lr0", 1e-3))


def test_plain_gradient_step():
    param, grad, velocity = np.array([1.0, 2.0]), np.array([0.5, -1.0]), np.zeros(2)
    _step(param, grad, velocity, lr0=0.1, momentum=0.0, weight_decay=0.0)
    assert np.allclose(param, [0.95, 2.1])


def test_momentum_accumulates():
    param, grad, velocity = np.zeros(1), np.array([2.0]), np.zeros(1)
    for _ in range(2):
        _step(param, grad, velocity, lr0=0.1, momentum=0.9, weight_decay=0.0)
    assert np.allclose(param, -0.1 * 2.0 * (1 + 1.9))


def test_weight_decay_shrinks_parameters():
    param, velocity = np.array([3.0]), np.zeros(1)
    _step(param, np.zeros(1), velocity, lr0=1e-3, momentum=0.0, weight_decay=5e-4)
    assert np.allclose(param, 3.0 * (1 - 5e-7), rtol=0, atol=1e-15)


def test_nesterov_looks_ahead():
    param, grad, velocity = np.zeros(1), np.array([1.0]), np.zeros(1)
    _step(param, grad, velocity, lr0=0.1, momentum=0.9, weight_decay=0.0, nesterov=True)
    assert np.allclose(param, -0.1 * 1.9)


def test_sgd_step_checks_alignment():
    with pytest.raises(ContractError, match="one gradient and one velocity"):
        sgd_step([np.zeros(2)], [], [np.zeros(2)], SgdConfig(), 0.1)
    with pytest.raises(ContractError, match="do not align"):
        sgd_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], SgdConfig(), 0.1)


@pytest.mark.parametrize(
    "kwargs, key",
    [
        (dict(lr0=0), "train.lr"),
        (dict(momentum=1.0), "train.momentum"),
        (dict(weight_decay=-1), "train.weight_decay"),
        (dict(decay_at_fraction=1.0), "train.decay_at"),
    ],
)
def test_sgd_config_validation(kwargs, key):
    with pytest.raises(ConfigError) as info:
        SgdConfig(**kwargs)
    assert key in info.value.fields


@pytest.mark.parametrize(
    "epoch, expected",
    [(0, 1e-3), (23, 1e-3), (24, 1e-4), (29, 1e-4)],
)
def test_learning_rate_decays_once(epoch, expected):
    assert lr_at(epoch, 30, SgdConfig()) == pytest.approx(expected)


def test_learning_rate_outside_stage():
    with pytest.raises(ContractError, match="outside a stage"):
        lr_at(30, 30, SgdConfig())


def test_stage_plan():
    assert StagePlan(15, 15).stages == ((1, 15), (2, 15))
    assert StagePlan(15, 15, one_stage_mode=True).stages == ((2, 15),)
    assert StagePlan(0, 30, one_stage_mode=True).total_epochs == 30
    assert StagePlan(0, 0).stages == ()
    with pytest.raises(ConfigError) as info:
        StagePlan(-1, 2)
    assert "train.stage1_epochs" in info.value.fields


def test_composed_batch_doubles_samples(tiny_datasets):
    dataset = tiny_datasets[0]
    images, labels = compose_batch(
        dataset.images[:4], dataset.labels[:4], AugmentConfig(), StreamFactory(0), 0, 0
    )
    assert images.shape == (8, 3, 16, 16)
    assert labels.tolist() == dataset.labels[:4].tolist() * 2


def test_composed_batch_without_augmentation_is_two_copies(tiny_datasets):
    dataset = tiny_datasets[1]
    images, _ = compose_batch(
        dataset.images[:3], dataset.labels[:3], IDENTITY_AUGMENT, StreamFactory(0), 0, 0
    )
    assert np.array_equal(images[:3], dataset.images[:3])
    assert np.array_equal(images[3:], dataset.images[:3])


def test_composed_batch_replays(tiny_datasets):
    dataset = tiny_datasets[2]
    first, _ = compose_batch(
        dataset.images[:4], dataset.labels[:4], AugmentConfig(), StreamFactory(9), 2, 1
    )
    second, _ = compose_batch(
        dataset.images[:4], dataset.labels[:4], AugmentConfig(), StreamFactory(9), 2, 1
    )
    assert np.array_equal(first, second)


def test_no_epochs_leaves_network_untouched(tiny_datasets):
    net = Network.initialize(5, seed=0)
    before = {name: array.copy() for name, array in net.named_arrays()}
    split = leave_one_out(tiny_datasets, 0, val_fraction=0.34, seed=0)
    result = train(net, split, TrainConfig(plan=StagePlan(0, 0)), seed=0)
    assert result.log == []
    assert all(np.array_equal(before[name], array) for name, array in net.named_arrays())


def _toy_split(tiny_datasets):
    """Disks against squares from two domains, with no validation samples"""
    sources = [d.subset(np.flatnonzero(d.labels < 2)) for d in tiny_datasets[:2]]
    empty = tuple(d.subset(np.array([], dtype=int)) for d in sources)
    return Split(3, tuple(sources), empty, tiny_datasets[3])


def test_full_batch_loss_decreases(tiny_datasets):
    split = _toy_split(tiny_datasets)
    config = TrainConfig(
        sgd=SgdConfig(lr0=0.01, momentum=0.0, weight_decay=0.0),
        plan=StagePlan(5, 0),
        place=PlaceConfig(enabled=False),
        style=StyleConfig(mode="off"),
        augment=IDENTITY_AUGMENT,
        batch_size=len(split.train_pool),
    )
    result = train(Network.initialize(5, seed=0), split, config, seed=0)
    losses = [record.train_loss for record in result.log]
    assert len(losses) == 5
    assert all(later < earlier for earlier, later in zip(losses, losses[1:]))
    assert all(math.isnan(record.val_acc) for record in result.log)


def test_training_is_deterministic(tiny_datasets):
    split = leave_one_out(tiny_datasets, "sketch", val_fraction=0.34, seed=1)
    results = [
        train(Network.initialize(5, seed=1), split, quick_train_config(), seed=1, run_id="r")
        for _ in range(2)
    ]
    first, second = (dict(r.net.named_arrays()) for r in results)
    assert all(np.array_equal(first[name], second[name]) for name in first)
    assert results[0].log == results[1].log


def test_epoch_log_follows_the_schedule(tiny_datasets):
    split = leave_one_out(tiny_datasets, 0, val_fraction=0.34, seed=0)
    net = Network.initialize(5, seed=0)
    log = train(net, split, quick_train_config(stage1=1, stage2=2), seed=0, run_id="r").log
    assert [(r.stage, r.epoch) for r in log] == [(1, 0), (2, 1), (2, 2)]
    assert log[0].P == 0 and log[0].gamma == 0 and log[0].layer == ""
    for e, record in enumerate(log[1:], start=1):
        P = schedule_ratio(e, 0.33, 4)
        assert record.P == P
        assert record.layer in ("L3", "L4")
        assert record.gamma == num_dropped(net.width(LayerId(record.layer)), P)
    assert all(0 <= r.test_acc <= 1 and 0 <= r.val_acc <= 1 for r in log)


def test_place_without_dropped_units_matches_baseline(tiny_datasets):
    split = leave_one_out(tiny_datasets, "texture", val_fraction=0.34, seed=3)
    # the ratio stays small enough that no channel of any layer is dropped
    silent = quick_train_config(stage1=1, stage2=2, p_max=0.01)
    baseline = quick_train_config(stage1=1, stage2=2, enabled=False)
    results = [
        train(Network.initialize(5, seed=3), split, config, seed=3)
        for config in (silent, baseline)
    ]
    assert all(record.gamma == 0 for record in results[0].log)
    losses = [[record.train_loss for record in result.log] for result in results]
    assert losses[0] == losses[1]
    first, second = (dict(r.net.named_arrays()) for r in results)
    assert all(np.array_equal(first[name], second[name]) for name in first)


def test_place_only_runs_in_the_second_stage(tiny_datasets, mocker):
    spy = mocker.spy(placedrop.place, "place_hook")
    split = leave_one_out(tiny_datasets, 0, val_fraction=0.34, seed=0)
    net = Network.initialize(5, seed=0)
    train(net, split, quick_train_config(stage1=2, stage2=0), seed=0)
    assert spy.call_count == 0
    train(net, split, quick_train_config(stage1=1, stage2=1), seed=0)
    assert spy.call_count == len(split.train_pool) // 8


def test_non_finite_input_aborts(tiny_datasets):
    split = _toy_split(tiny_datasets)
    images = split.train[0].images.copy()
    images[0, 0, 0, 0] = np.nan
    poisoned = Dataset(images, split.train[0].labels, split.train[0].domains, split.train[0].indices)
    split = Split(split.target, (poisoned, split.train[1]), split.val, split.test)
    config = TrainConfig(
        plan=StagePlan(1, 0),
        style=StyleConfig(mode="off"),
        augment=IDENTITY_AUGMENT,
        batch_size=len(split.train_pool),
    )
    with pytest.raises(NumericalError) as info:
        train(Network.initialize(5, seed=0), split, config, seed=0, run_id="poisoned")
    context = info.value.context
    assert [context[k] for k in ("run", "stage", "epoch", "iteration")] == ["poisoned", 1, 0, 0]


def test_batch_larger_than_pool(tiny_datasets):
    split = _toy_split(tiny_datasets)
    config = TrainConfig(plan=StagePlan(1, 0), batch_size=1000)
    with pytest.raises(ConfigError) as info:
        train(Network.initialize(5, seed=0), split, config, seed=0)
    assert "train.batch_size" in info.value.fields


def test_write_epoch_log(tmp_path):
    record = EpochRecord("r", 0, 2, 3, 1e-3, 0.165, 84, 0.5, math.nan, 0.25, "L4")
    path = write_epoch_log([record], tmp_path / "logs" / "r.csv")
    with path.open() as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == EpochRecord.columns()
    assert rows[0]["gamma"] == "84"
    assert rows[0]["val_acc"] == "nan"
    assert not (tmp_path / "logs" / "r.csv.tmp").exists()
