import csv

import pytest

from placedrop.cli import (
    EXIT_CHECK_FAILED,
    EXIT_CONFIG,
    EXIT_NUMERICAL,
    EXIT_OK,
    build_parser,
    main,
)
from placedrop.core.network import Network
from placedrop.core.tensor import record
from placedrop.domains import CLASSES, DOMAINS
from placedrop.errors import NumericalError
from placedrop.metrics import ReportRow, write_report


TINY = ["--set", "data.per_class=1", "--set", "data.size=16"]


def test_every_command_is_registered():
    parser = build_parser()
    for command in ["gen-data", "train", "eval", "sweep-pmax", "sweep-layers", "gradcheck", "report"]:
        assert parser.parse_args([command] + (["x.ckpt"] if command == "eval" else [])).command == command


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--set", "place.p_max=2"],
        ["train", "--set", "place.p_max"],
        ["train", "--seeds", "zero"],
        ["train", "--method", "dropblock"],
        ["train", "--target", "paint"],
        ["sweep-pmax", "--values", "0.1,big"],
        ["sweep-layers", "--layer-sets", "L3;L4,L3;L3,L4"],
    ],
)
def test_invalid_configuration_exits_with_one(argv, tmp_path):
    assert main(argv + ["--out", str(tmp_path)]) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.txt")]) == EXIT_CONFIG


def test_numerical_failure_exits_with_two(mocker, tmp_path):
    mocker.patch("placedrop.cli.run_experiment", side_effect=NumericalError("Loss became nan"))
    assert main(["train", "--out", str(tmp_path)]) == EXIT_NUMERICAL


def test_gradcheck_command(mocker):
    assert main(["gradcheck", "--suite", "relu", "--suite", "matmul"]) == EXIT_OK
    mocker.patch(
        "placedrop.core.ops.relu",
        lambda x: record("relu", x.data.clip(min=0), (x,), lambda grad: (grad,)),
    )
    assert main(["gradcheck", "--suite", "relu"]) == EXIT_CHECK_FAILED


def test_gen_data_verifies_round_trip(tmp_path):
    assert main(["gen-data", "--verify", "--out", str(tmp_path)] + TINY) == EXIT_OK
    assert len(list((tmp_path / "data").glob("*.ppm"))) == len(DOMAINS) * len(CLASSES)


def test_eval_writes_one_row_per_target(tmp_path):
    checkpoint = Network.initialize(len(CLASSES), seed=0).save(tmp_path / "model.ckpt")
    argv = ["eval", str(checkpoint), "--out", str(tmp_path), "--target", "sketch,texture"]
    assert main(argv + TINY) == EXIT_OK
    with (tmp_path / "eval.csv").open() as f:
        rows = list(csv.DictReader(f))
    assert [row["target_domain"] for row in rows] == ["sketch", "texture"]
    assert {row["run_id"] for row in rows} == {"model"}


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)] + TINY) == EXIT_CONFIG


def _report(path, place_acc):
    rows = []
    for seed in range(5):
        for method, acc in [("deepall", 0.4), ("strong_baseline", 0.5), ("strong_baseline+place", place_acc)]:
            inter = 0.5 if method == "strong_baseline+place" else 1.0
            rows.append(ReportRow(f"{method}-s{seed}", seed, method, "flat", acc, inter, inter, 0.33, "L3+L4"))
    return write_report(rows, path)


def test_report_command(tmp_path):
    assert main(["report", str(_report(tmp_path / "good.csv", 0.6))]) == EXIT_OK
    assert main(["report", str(_report(tmp_path / "flat.csv", 0.5))]) == EXIT_CHECK_FAILED


def test_report_defaults_to_output_directory(tmp_path):
    _report(tmp_path / "report.csv", 0.6)
    assert main(["report", "--out", str(tmp_path)]) == EXIT_OK


def test_eval_rejects_foreign_file(tmp_path):
    path = tmp_path / "notes.ckpt"
    path.write_bytes(b"hello world")
    assert main(["eval", str(path), "--out", str(tmp_path)] + TINY) == EXIT_CONFIG
