from pathlib import Path

import pytest

from placedrop.config import PLACEDROP_NUM_WORKERS
from placedrop.core.proto import LayerId
from placedrop.errors import ConfigError
from placedrop.experiment import (
    DEFAULTS,
    METHODS,
    SWEEP_LAYER_SETS,
    ExperimentConfig,
    RunSpec,
    coerce,
    dump_config,
    load_config,
    method_config,
    parse_config_text,
    plan_runs,
    resolve_values,
    run_experiment,
    sweep_layers,
    sweep_pmax,
)
from placedrop.metrics import read_report
from placedrop.trainer import StagePlan, TrainConfig


TINY = {
    "data.per_class": "3",
    "data.size": "16",
    "data.val_fraction": "0.34",
    "train.stage1_epochs": "1",
    "train.stage2_epochs": "1",
    "train.batch_size": "8",
    "train.lr": "0.01",
}


def _config_error(**overrides):
    with pytest.raises(ConfigError) as info:
        load_config(overrides={k.replace("__", "."): v for k, v in overrides.items()})
    return info.value.fields


def test_parse_config_text():
    text = """
    # a comment
    place.p_max = 0.5   # trailing comment
    run.seeds=1, 2

    """
    assert parse_config_text(text) == {"place.p_max": "0.5", "run.seeds": "1, 2"}


def test_parse_config_text_errors():
    with pytest.raises(ConfigError) as info:
        parse_config_text("place.v = 2\nno separator here\nplace.v = 3\n")
    assert set(info.value.fields) == {"line 2", "place.v"}
    assert "line 3" in info.value.fields["place.v"]


def test_coerce():
    assert coerce("place.enabled", "yes") is True
    assert coerce("train.nesterov", "Off") is False
    assert coerce("run.seeds", "3, 1,") == [3, 1]
    assert coerce("place.p_max", "0.5") == 0.5
    assert coerce("sweep.layer_sets", "L3; L3, L4") == [["L3"], ["L3", "L4"]]
    with pytest.raises(ValueError, match="expected true or false"):
        coerce("run.checkpoints", "maybe")


def test_defaults_validate():
    config = load_config()
    assert config == ExperimentConfig(out=config.out)
    assert config.train.place.candidate_layers == (LayerId.L3, LayerId.L4)
    assert config.train.augment.policy.alpha == 8
    assert config.sweep_layer_sets == SWEEP_LAYER_SETS


def test_unknown_and_malformed_keys():
    fields = _config_error(place__pmax="0.5", data__seed="abc")
    assert fields["place.pmax"] == "unknown key"
    assert "data.seed" in fields


@pytest.mark.parametrize(
    "key, value",
    [
        ("place.p_max", "1.5"),
        ("data.size", "20"),
        ("style.mode", "shuffle"),
        ("run.methods", "strong_baseline, dropblock"),
        ("run.seeds", "1, 1"),
        ("place.layers", "L3, L5"),
        ("sweep.p_max", "0.2, 1.0"),
        ("sweep.layer_sets", "L3; L9"),
    ],
)
def test_schema_errors_name_their_key(key, value):
    assert key in _config_error(**{key.replace(".", "__"): value})


def test_module_errors_are_collected():
    fields = _config_error(run__targets="paint", aug__alpha="11")
    assert set(fields) == {"run.targets", "aug.alpha"}


def test_alpha_follows_a_small_pool():
    values = resolve_values({"aug.pool": "invert, solarize"})
    assert values["aug.alpha"] == 2
    assert resolve_values({"aug.alpha": "3"})["aug.alpha"] == 3


def test_targets():
    assert load_config(overrides={"run.targets": "all"}).targets == (0, 1, 2, 3)
    assert load_config(overrides={"run.targets": "sketch, 3"}).targets == (1, 3)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "paper.txt"
    path.write_text("train.stage1_epochs = 30\ntrain.stage2_epochs = 30\nplace.p_max = 0.5\n")
    config = load_config(path, {"place.p_max": "0.2"}, out=tmp_path / "out")
    assert config.train.plan == StagePlan(30, 30)
    assert config.train.place.p_max == 0.2
    assert config.out == tmp_path / "out"


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_config(tmp_path / "missing.txt")
    assert "--config" in info.value.fields


def test_dumped_config_reads_back(tmp_path):
    config = load_config(overrides={**TINY, "sweep.layer_sets": "L3; L2, L4"}, out=tmp_path)
    path = tmp_path / "config.txt"
    path.write_text(dump_config(config))
    assert load_config(path, out=tmp_path) == config
    assert set(parse_config_text(path.read_text())) == set(DEFAULTS)


def _switches(method, base=None):
    config = method_config(method, base or TrainConfig())
    return (
        config.style.mode,
        config.augment.rand_enabled,
        config.place.enabled,
        config.place.layer_wise,
        config.place.progressive,
        config.place.channel_wise,
    )


METHOD_SWITCHES = [
    ("deepall", ("off", False, False, True, True, True)),
    ("deepall+swap", ("swap", False, False, True, True, True)),
    ("deepall+rand", ("off", True, False, True, True, True)),
    ("strong_baseline", ("swap", True, False, True, True, True)),
    ("strong_baseline+place", ("swap", True, True, True, True, True)),
    ("mixstyle_baseline", ("mix", True, False, True, True, True)),
    ("deepall+place", ("off", False, True, True, True, True)),
    ("deepall+mix", ("mix", False, False, True, True, True)),
    ("deepall+swap+place", ("swap", False, True, True, True, True)),
    ("deepall+rand+place", ("off", True, True, True, True, True)),
    ("deepall+place_wo_layer", ("off", False, True, False, True, True)),
    ("deepall+place_wo_progressive", ("off", False, True, True, False, True)),
    ("deepall+place_wo_channel", ("off", False, True, True, True, False)),
    ("one_stage_place", ("swap", True, True, True, True, True)),
    ("strong_baseline+place_wo_layer", ("swap", True, True, False, True, True)),
    ("strong_baseline+place_wo_progressive", ("swap", True, True, True, False, True)),
    ("strong_baseline+place_wo_channel", ("swap", True, True, True, True, False)),
]
"""Style mode, RandAugment, PLACE, layer-wise, progressive and channel-wise per method"""


@pytest.mark.parametrize("method, expected", METHOD_SWITCHES)
def test_method_ladder(method, expected):
    assert _switches(method) == expected


def test_every_method_is_on_the_ladder():
    assert sorted(method for method, _ in METHOD_SWITCHES) == sorted(METHODS)


def test_one_stage_keeps_the_epoch_budget():
    config = method_config("one_stage_place", TrainConfig(plan=StagePlan(15, 15)))
    assert config.plan.stages == ((2, 30),)
    assert config.place.enabled


def test_place_kill_switch():
    base = load_config(overrides={"place.enabled": "false"}).train
    assert not any(method_config(m, base).place.enabled for m in METHODS)


def test_unknown_method():
    with pytest.raises(ConfigError) as info:
        method_config("dropblock", TrainConfig())
    assert "run.methods" in info.value.fields


def test_run_ids():
    base = TrainConfig()
    place = RunSpec("strong_baseline+place", 0, 2, method_config("strong_baseline+place", base))
    plain = RunSpec("strong_baseline", 3, 2, method_config("strong_baseline", base))
    assert place.run_id == "strong_baseline+place-p0.33-L3+L4-flat-s2"
    assert plain.run_id == "strong_baseline-inverted-s2"
    assert plain.layers == "none"


def test_plan_runs():
    config = load_config(overrides={"run.seeds": "0, 1"})
    specs = plan_runs(config)
    assert len(specs) == 2 * 2 * 4
    assert len({spec.run_id for spec in specs}) == len(specs)
    assert {spec.method for spec in plan_runs(config, ["deepall"])} == {"deepall"}


@pytest.mark.parametrize("values", [[0.0, 0.5], [0.2, 0.2], []])
def test_sweep_pmax_validation(tmp_path, values):
    with pytest.raises(ConfigError) as info:
        sweep_pmax(load_config(out=tmp_path), values)
    assert "sweep.p_max" in info.value.fields


def test_sweep_layers_rejects_duplicates(tmp_path):
    with pytest.raises(ConfigError, match=r"repeats the layer sets \['L3\+L4'\]"):
        sweep_layers(load_config(out=tmp_path), [["L3", "L4"], ["L4", "L3"]])
    with pytest.raises(ConfigError) as info:
        sweep_layers(load_config(out=tmp_path), [])
    assert "sweep.layer_sets" in info.value.fields


def _tiny_config(out, **overrides):
    return load_config(overrides={**TINY, **overrides}, out=out)


@pytest.mark.slow
def test_experiment_outputs_replay(tmp_path, tiny_datasets):
    overrides = {"run.seeds": "0", "run.methods": "strong_baseline+place"}
    first = run_experiment(_tiny_config(tmp_path / "a", **overrides), tiny_datasets)
    with PLACEDROP_NUM_WORKERS.scoped(2):
        run_experiment(_tiny_config(tmp_path / "b", **overrides), tiny_datasets)

    a, b = tmp_path / "a", tmp_path / "b"
    assert [row.target_domain for row in first] == ["flat", "inverted", "sketch", "texture"]
    assert read_report(a / "report.csv") == first
    assert len(list((a / "logs").glob("*.csv"))) == 4
    for name in ["report.csv", "config.txt"] + [
        str(Path(d) / f"{row.run_id}.{ext}")
        for row in first
        for d, ext in (("logs", "csv"), ("checkpoints", "ckpt"))
    ]:
        assert (a / name).read_bytes() == (b / name).read_bytes()


@pytest.mark.slow
def test_sweeps_tag_their_groups(tmp_path, tiny_datasets):
    overrides = {"run.seeds": "0", "run.targets": "sketch", "run.checkpoints": "no"}
    config = _tiny_config(tmp_path, **overrides)

    rows = sweep_pmax(config, [0.2, 0.5], tiny_datasets)
    assert sorted(row.p_max for row in rows) == [0.2, 0.5]
    assert (tmp_path / "sweep_pmax.csv").exists()

    rows = sweep_layers(config, [["L3"], ["L3", "L4"]], datasets=tiny_datasets)
    assert sorted(row.layers for row in rows) == ["L3", "L3+L4", "none"]
    assert not (tmp_path / "sweep_layers" / "checkpoints").exists()
