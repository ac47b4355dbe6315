import math

import numpy as np
import pytest

from placedrop.core.network import Network
from placedrop.core.tensor import Tensor, no_grad
from placedrop.domains import Dataset
from placedrop.errors import ContractError, ShapeError
from placedrop.metrics import (
    DomainFeatureSummary,
    ReportRow,
    check_trends,
    evaluate,
    extract_features,
    inter_domain_distance,
    intra_class_distance,
    method_means,
    predict,
    read_report,
    top1_accuracy,
    write_report,
)
from placedrop.place import PlaceConfig, PlaceDropout, ScheduleState
from placedrop.streams import StreamFactory


def _summary(points, labels, domains, num_classes=None):
    return DomainFeatureSummary.from_features(np.array(points, float), labels, domains, num_classes)


def test_top1_accuracy():
    logits = np.eye(3)
    assert top1_accuracy(logits, [0, 1, 2]) == 1.0
    assert top1_accuracy(logits, [1, 2, 0]) == 0.0
    assert top1_accuracy(np.eye(4), [0, 1, 2, 0]) == 0.75


def test_top1_accuracy_breaks_ties_toward_lowest_class():
    assert top1_accuracy(np.zeros((2, 3)), [0, 1]) == 0.5


def test_top1_accuracy_errors():
    with pytest.raises(ShapeError, match="do not match"):
        top1_accuracy(np.eye(3), [0, 1])
    with pytest.raises(ContractError, match="empty set"):
        top1_accuracy(np.zeros((0, 3)), [])


def test_inter_domain_two_domains():
    summary = _summary([[0, 0], [3, 4]], [0, 0], [0, 1])
    assert inter_domain_distance(summary) == 5.0


def test_inter_domain_three_domains():
    summary = _summary([[0, 0], [1, 0], [0, 1]], [0, 0, 0], [0, 1, 2])
    assert abs(inter_domain_distance(summary) - (2 + math.sqrt(2)) / 3) < 1e-12


def test_inter_domain_equal_means():
    summary = _summary([[1, 2], [1, 2], [0, 4], [2, 0]], [0, 0, 0, 0], [0, 1, 2, 2])
    assert inter_domain_distance(summary) == 0


def test_inter_domain_needs_two_domains():
    with pytest.raises(ContractError, match="at least 2 domains"):
        inter_domain_distance(_summary([[0, 0]], [0], [0]))


def test_intra_class_single_domain():
    summary = _summary([[1, 0], [-1, 0]], [0, 1], [0, 0])
    assert intra_class_distance(summary) == 1.0


def test_intra_class_symmetric_domains():
    summary = _summary([[1, 0], [-1, 0], [1, 5], [-1, 5]], [0, 1, 0, 1], [0, 0, 1, 1])
    assert intra_class_distance(summary) == 1.0


def test_intra_class_zero_when_classes_coincide():
    summary = _summary([[2, 2], [2, 2], [5, 1], [5, 1]], [0, 1, 0, 1], [0, 0, 3, 3])
    assert summary.domains == (0, 3)
    assert intra_class_distance(summary) == 0


def test_intra_class_rejects_empty_cell():
    summary = _summary([[1, 0], [-1, 0]], [0, 1], [1, 1], num_classes=3)
    with pytest.raises(ContractError, match=r"Cell \(domain=sketch, class=triangle\)"):
        intra_class_distance(summary)


def test_summary_shapes():
    summary = _summary([[1, 0, 0], [0, 1, 0], [0, 0, 1]], [0, 1, 1], [0, 0, 1])
    assert (summary.K, summary.C) == (2, 2)
    assert summary.counts.tolist() == [[1, 1], [0, 1]]
    assert np.isnan(summary.cell_means[1, 0]).all()
    with pytest.raises(ShapeError, match="one label and one domain"):
        _summary([[1, 0]], [0, 1], [0, 0])


@pytest.fixture(scope="module")
def net():
    return Network.initialize(5, seed=0)


def test_extract_features_shape(net, tiny_datasets):
    dataset = tiny_datasets[0].subset(slice(0, 10))
    assert extract_features(net, dataset, batch_size=4).shape == (10, 128)


def test_duplicate_inputs_give_identical_features(net, tiny_datasets):
    image = tiny_datasets[1].images[:1]
    twice = Dataset(np.concatenate([image, image]), np.zeros(2, int), np.ones(2, int), np.arange(2))
    features = extract_features(net, twice)
    assert np.allclose(features[0], features[1], rtol=0, atol=1e-6)


def test_predict_runs_in_evaluation_mode(net, tiny_datasets):
    dataset = tiny_datasets[2]
    net.train()
    first = predict(net, dataset, batch_size=4)
    assert net.training
    net.eval()
    assert np.allclose(first, predict(net, dataset, batch_size=15), atol=1e-5)
    assert 0 <= evaluate(net, dataset) <= 1


@pytest.mark.parametrize(
    "config",
    [
        PlaceConfig(enabled=False),
        PlaceConfig(p_max=0.5),
        PlaceConfig(p_max=0.5, layer_wise=False, channel_wise=False),
    ],
)
def test_features_do_not_depend_on_place_dropout(net, tiny_datasets, config):
    dataset = tiny_datasets[3]
    expected = extract_features(net, dataset)
    was_training = net.training
    net.eval()
    try:
        dropout = PlaceDropout(config, ScheduleState(30))
        streams = StreamFactory(0)
        hooks = dropout.hooks(
            streams("layer"),
            lambda ordinal, n: streams.per_sample("place", 0, 0, n),
            training=net.training,
        )
        assert hooks == ()
        with no_grad():
            features = net.features(Tensor(dataset.images), hooks).data
    finally:
        net.training = was_training
    assert np.allclose(features, expected, atol=1e-6)

def _row(method, seed, acc, inter=1.0, intra=1.0, target="flat"):
    return ReportRow(f"{method}-{target}-s{seed}", seed, method, target, acc, inter, intra, 0.33, "L3+L4")


def test_report_round_trip(tmp_path):
    rows = [_row("deepall", 0, 0.5), _row("strong_baseline+place", 1, 0.625, 0.1, 0.2)]
    path = write_report(rows, tmp_path / "report.csv")
    assert path.read_text().splitlines()[0] == ",".join(ReportRow.columns())
    assert read_report(path) == rows


def test_method_means():
    rows = [_row("deepall", 0, 0.5), _row("deepall", 1, 0.7), _row("strong_baseline", 0, 0.9)]
    assert method_means(rows) == pytest.approx({"deepall": 0.6, "strong_baseline": 0.9})


def _ladder(place_acc=0.6, place_inter=0.5):
    rows = []
    for seed in range(5):
        rows.append(_row("deepall", seed, 0.45))
        rows.append(_row("strong_baseline", seed, 0.50))
        rows.append(_row("strong_baseline+place", seed, place_acc, place_inter, 0.5))
    return rows


def test_trends_pass_on_a_clean_ladder():
    checks = check_trends(_ladder())
    assert [c.name for c in checks] == [
        "deepall < strong_baseline",
        "strong_baseline < strong_baseline+place",
        "inter_domain lower with place",
        "intra_class lower with place",
    ]
    assert all(c.passed for c in checks)


def test_trends_fail_when_place_does_not_help():
    checks = {c.name: c for c in check_trends(_ladder(place_acc=0.505, place_inter=2.0))}
    assert not checks["strong_baseline < strong_baseline+place"].passed
    assert not checks["inter_domain lower with place"].passed
    assert checks["intra_class lower with place"].passed


def test_one_stage_within_tolerance_warns():
    rows = _ladder() + [_row("one_stage_place", seed, 0.603) for seed in range(5)]
    (check,) = [c for c in check_trends(rows) if c.name == "two-stage >= one-stage"]
    assert check.passed and check.warning


def test_one_stage_far_ahead_fails():
    rows = _ladder() + [_row("one_stage_place", seed, 0.7) for seed in range(5)]
    (check,) = [c for c in check_trends(rows) if c.name == "two-stage >= one-stage"]
    assert not check.passed


def test_trends_skip_missing_methods():
    assert check_trends([_row("deepall", 0, 0.5)]) == []
