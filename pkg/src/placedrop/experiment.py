"""Experiment configuration and the leave-one-domain-out runner

Configuration files are flat ``key = value`` text with dotted keys::

    # full-scale epochs
    train.stage1_epochs = 30
    train.stage2_epochs = 30
    place.layers = L3, L4
    run.seeds = 0, 1, 2

Lists are comma separated and the groups of ``sweep.layer_sets`` are separated by
``;``. Every key has a default (see :data:`DEFAULTS`). Values are coerced to the type
of their default, checked against :data:`CONFIG_SCHEMA` and then against the
constraints of the module which uses them. Every problem found is reported at once in
a single :class:`~placedrop.errors.ConfigError`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import partial
from logging import getLogger
from pathlib import Path
from typing import (
    Any,
    Callable,
    Dict,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import anyio
from anyio import CapacityLimiter, create_task_group, to_thread
from fastjsonschema import JsonSchemaValueException
from fastjsonschema import compile as compile_json_schema
from typing_extensions import Literal

from placedrop.augment import TRANSFORMS, AugmentConfig, AugPolicy
from placedrop.config import PLACEDROP_NUM_WORKERS, PLACEDROP_OUTPUT_DIR
from placedrop.core.network import Network
from placedrop.core.proto import ALL_LAYERS, LayerId
from placedrop.domains import (
    CLASSES,
    DOMAINS,
    Dataset,
    domain_id,
    generate_dataset,
    leave_one_out,
)
from placedrop.errors import ConfigError
from placedrop.metrics import (
    DomainFeatureSummary,
    ReportRow,
    evaluate,
    extract_features,
    inter_domain_distance,
    intra_class_distance,
    method_means,
    write_report,
)
from placedrop.place import PlaceConfig
from placedrop.style import StyleConfig
from placedrop.trainer import SgdConfig, StagePlan, TrainConfig, train, write_epoch_log


logger = getLogger(__name__)


@dataclass(frozen=True)
class Recipe:
    """Which components one method turns on

    ``without`` names the PLACE component an ablation switches off.
    """

    style: Literal["off", "swap", "mix"] = "off"
    rand: bool = False
    place: bool = False
    without: Literal["", "layer", "progressive", "channel"] = ""
    one_stage: bool = False


_STRONG = Recipe(style="swap", rand=True)

RECIPES: Dict[str, Recipe] = {
    "deepall": Recipe(),
    "deepall+swap": Recipe(style="swap"),
    "deepall+rand": Recipe(rand=True),
    "deepall+mix": Recipe(style="mix"),
    "strong_baseline": _STRONG,
    "strong_baseline+place": dataclasses.replace(_STRONG, place=True),
    "one_stage_place": dataclasses.replace(_STRONG, place=True, one_stage=True),
    "mixstyle_baseline": Recipe(style="mix", rand=True),
    "deepall+place": Recipe(place=True),
    "deepall+swap+place": Recipe(style="swap", place=True),
    "deepall+rand+place": Recipe(rand=True, place=True),
    "deepall+place_wo_layer": Recipe(place=True, without="layer"),
    "deepall+place_wo_progressive": Recipe(place=True, without="progressive"),
    "deepall+place_wo_channel": Recipe(place=True, without="channel"),
    "strong_baseline+place_wo_layer": dataclasses.replace(
        _STRONG, place=True, without="layer"
    ),
    "strong_baseline+place_wo_progressive": dataclasses.replace(
        _STRONG, place=True, without="progressive"
    ),
    "strong_baseline+place_wo_channel": dataclasses.replace(
        _STRONG, place=True, without="channel"
    ),
}

METHODS = tuple(RECIPES)
"""Every training recipe, from plain DeepAll up the ablation ladder"""

PLACE_METHODS = frozenset(m for m, recipe in RECIPES.items() if recipe.place)

SWEEP_LAYER_SETS = (
    ("L1",),
    ("L2",),
    ("L3",),
    ("L4",),
    ("L1", "L2"),
    ("L2", "L3"),
    ("L3", "L4"),
    ("L1", "L2", "L3"),
    ("L2", "L3", "L4"),
    ("L1", "L2", "L3", "L4"),
)
"""Candidate layer sets compared by the layer sweep (alongside a run without PLACE)"""

DEFAULTS: Dict[str, Any] = {
    "data.seed": 0,
    "data.per_class": 300,
    "data.size": 32,
    "data.val_fraction": 0.1,
    "place.enabled": True,
    "place.p_max": 0.33,
    "place.v": 4.0,
    "place.layers": ["L3", "L4"],
    "place.layer_wise": True,
    "place.progressive": True,
    "place.channel_wise": True,
    "style.mode": "swap",
    "style.layers": ["L1"],
    "style.eps": 1e-6,
    "style.p": 1.0,
    "aug.alpha": 8,
    "aug.beta": 4,
    "aug.pool": list(TRANSFORMS),
    "aug.standard.enabled": True,
    "aug.rand.enabled": True,
    "train.stage1_epochs": 15,
    "train.stage2_epochs": 15,
    "train.one_stage": False,
    "train.batch_size": 32,
    "train.lr": 1e-3,
    "train.momentum": 0.9,
    "train.weight_decay": 5e-4,
    "train.decay_factor": 0.1,
    "train.decay_at": 0.8,
    "train.nesterov": False,
    "train.global_decay": False,
    "run.seeds": [0, 1, 2, 3, 4],
    "run.targets": ["all"],
    "run.methods": ["strong_baseline", "strong_baseline+place"],
    "run.checkpoints": True,
    "sweep.p_max": [0.1, 0.2, 0.33, 0.5],
    "sweep.layer_sets": [list(s) for s in SWEEP_LAYER_SETS],
}
"""Every configuration key with its desk-scale default"""

_LAYER_NAMES = [layer.value for layer in ALL_LAYERS]
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_FRACTION = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_EPOCHS = {"type": "integer", "minimum": 0}
_BOOLEAN = {"type": "boolean"}


def _layer_list(names: Sequence[str]) -> Dict[str, Any]:
    return {"type": "array", "items": {"enum": list(names)}, "minItems": 1, "uniqueItems": True}


CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data.seed": {"type": "integer", "minimum": 0},
        "data.per_class": {"type": "integer", "minimum": 1},
        "data.size": {"type": "integer", "minimum": 16, "multipleOf": 16},
        "data.val_fraction": _FRACTION,
        "place.enabled": _BOOLEAN,
        "place.p_max": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "place.v": _POSITIVE,
        "place.layers": _layer_list(_LAYER_NAMES),
        "place.layer_wise": _BOOLEAN,
        "place.progressive": _BOOLEAN,
        "place.channel_wise": _BOOLEAN,
        "style.mode": {"enum": ["off", "swap", "mix"]},
        "style.layers": _layer_list(["L1", "L2"]),
        "style.eps": _POSITIVE,
        "style.p": {"type": "number", "minimum": 0, "maximum": 1},
        "aug.alpha": {"type": "integer", "minimum": 0},
        "aug.beta": {"type": "integer", "minimum": 0, "maximum": 10},
        "aug.pool": {
            "type": "array",
            "items": {"enum": list(TRANSFORMS)},
            "uniqueItems": True,
        },
        "aug.standard.enabled": _BOOLEAN,
        "aug.rand.enabled": _BOOLEAN,
        "train.stage1_epochs": _EPOCHS,
        "train.stage2_epochs": _EPOCHS,
        "train.one_stage": _BOOLEAN,
        "train.batch_size": {"type": "integer", "minimum": 1},
        "train.lr": _POSITIVE,
        "train.momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "train.weight_decay": {"type": "number", "minimum": 0},
        "train.decay_factor": _POSITIVE,
        "train.decay_at": _FRACTION,
        "train.nesterov": _BOOLEAN,
        "train.global_decay": _BOOLEAN,
        "run.seeds": {
            "type": "array",
            "items": {"type": "integer", "minimum": 0},
            "minItems": 1,
            "uniqueItems": True,
        },
        "run.targets": {
            "type": "array",
            "items": {"type": "string"},
            "minItems": 1,
            "uniqueItems": True,
        },
        "run.methods": {
            "type": "array",
            "items": {"enum": list(METHODS)},
            "minItems": 1,
            "uniqueItems": True,
        },
        "run.checkpoints": _BOOLEAN,
        "sweep.p_max": {"type": "array", "items": _FRACTION, "minItems": 1},
        "sweep.layer_sets": {
            "type": "array",
            "items": _layer_list(_LAYER_NAMES),
            "minItems": 1,
        },
    },
}
"""JSON Schema of a configuration after its values have been coerced"""


_COMPILED_CONFIG_VALIDATOR = compile_json_schema(CONFIG_SCHEMA)


# --- parsing ---------------------------------------------------------------------------


def parse_config_text(text: str) -> Dict[str, str]:
    """Split ``key = value`` lines into a mapping of raw strings"""
    raw: Dict[str, str] = {}
    problems: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            problems[f"line {number}"] = f"expected 'key = value', got {line!r}"
        elif key in raw:
            problems[key] = f"given twice (again on line {number})"
        else:
            raw[key] = value.strip()
    if problems:
        raise ConfigError(problems)
    return raw


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce_scalar(text: str, like: Any) -> Any:
    if isinstance(like, bool):
        lowered = text.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ValueError(f"expected true or false, not {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _split(text: str, sep: str) -> List[str]:
    return [part.strip() for part in text.split(sep) if part.strip()]


def coerce(key: str, text: str) -> Any:
    """Turn the raw text of ``key`` into a value of its default's type"""
    default = DEFAULTS[key]
    if not isinstance(default, list):
        return _coerce_scalar(text, default)
    if default and isinstance(default[0], list):
        return [_split(group, ",") for group in _split(text, ";")]
    like = default[0] if default else ""
    return [_coerce_scalar(item, like) for item in _split(text, ",")]


def _schema_field(error: JsonSchemaValueException) -> Tuple[str, str]:
    name = error.name[len("data.") :] if error.name.startswith("data.") else error.name
    for key in sorted(DEFAULTS, key=len, reverse=True):
        if name == key or name.startswith((key + "[", key + ".")):
            return key, error.message.replace(error.name, "").strip()
    return "config", error.message


def resolve_values(raw: Mapping[str, str]) -> Dict[str, Any]:
    """Coerce raw strings, fill in defaults and validate against the schema"""
    problems: Dict[str, str] = {}
    values = dict(DEFAULTS)
    for key, text in raw.items():
        if key not in DEFAULTS:
            problems[key] = "unknown key"
            continue
        try:
            values[key] = coerce(key, text)
        except ValueError as error:
            problems[key] = str(error)
    if "aug.alpha" not in raw:
        values["aug.alpha"] = min(DEFAULTS["aug.alpha"], len(values["aug.pool"]))
    if problems:
        raise ConfigError(problems)
    try:
        _COMPILED_CONFIG_VALIDATOR(values)
    except JsonSchemaValueException as error:
        key, why = _schema_field(error)
        raise ConfigError({key: why})
    return values


# --- typed configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    per_class: int = 300
    size: int = 32
    val_fraction: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a batch of runs needs, validated"""

    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    targets: Tuple[int, ...] = tuple(range(len(DOMAINS)))
    methods: Tuple[str, ...] = ("strong_baseline", "strong_baseline+place")
    checkpoints: bool = True
    sweep_p_max: Tuple[float, ...] = (0.1, 0.2, 0.33, 0.5)
    sweep_layer_sets: Tuple[Tuple[str, ...], ...] = SWEEP_LAYER_SETS
    out: Path = field(default_factory=lambda: Path(PLACEDROP_OUTPUT_DIR.current))
    values: Mapping[str, Any] = field(default_factory=lambda: dict(DEFAULTS), compare=False)

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_place(self, **changes: Any) -> "ExperimentConfig":
        """A copy whose PLACE settings differ"""
        place = dataclasses.replace(self.train.place, **changes)
        return self.replace(train=dataclasses.replace(self.train, place=place))


def _collect(problems: Dict[str, str], build: Callable[[], Any]) -> Any:
    try:
        return build()
    except ConfigError as error:
        problems.update(error.fields)
        return None


def _targets(names: Sequence[str]) -> Tuple[int, ...]:
    if list(names) == ["all"]:
        return tuple(range(len(DOMAINS)))
    return tuple(domain_id(name) for name in names)


def build_config(values: Mapping[str, Any], out: Optional[Path] = None) -> ExperimentConfig:
    """Construct the typed configuration, collecting every module's complaints"""
    v = values
    problems: Dict[str, str] = {}

    def place_config() -> PlaceConfig:
        return PlaceConfig(
            p_max=v["place.p_max"],
            v=v["place.v"],
            candidate_layers=LayerId.parse_set(v["place.layers"], "place.layers"),
            enabled=v["place.enabled"],
            layer_wise=v["place.layer_wise"],
            progressive=v["place.progressive"],
            channel_wise=v["place.channel_wise"],
        )

    def style_config() -> StyleConfig:
        layers = LayerId.parse_set(v["style.layers"], "style.layers")
        return StyleConfig(v["style.mode"], layers, v["style.eps"], v["style.p"])

    def sgd_config() -> SgdConfig:
        return SgdConfig(
            lr0=v["train.lr"],
            momentum=v["train.momentum"],
            weight_decay=v["train.weight_decay"],
            decay_factor=v["train.decay_factor"],
            decay_at_fraction=v["train.decay_at"],
            nesterov=v["train.nesterov"],
            global_decay=v["train.global_decay"],
        )

    place = _collect(problems, place_config)
    style = _collect(problems, style_config)
    sgd = _collect(problems, sgd_config)
    policy = _collect(
        problems, lambda: AugPolicy(v["aug.alpha"], v["aug.beta"], tuple(v["aug.pool"]))
    )
    plan = _collect(
        problems,
        lambda: StagePlan(
            v["train.stage1_epochs"], v["train.stage2_epochs"], v["train.one_stage"]
        ),
    )
    targets = _collect(problems, lambda: _targets(v["run.targets"]))
    for index, names in enumerate(v["sweep.layer_sets"]):
        key = f"sweep.layer_sets[{index}]"
        _collect(problems, partial(LayerId.parse_set, names, key))
    if problems:
        raise ConfigError(problems)

    augment = AugmentConfig(
        standard_enabled=v["aug.standard.enabled"],
        rand_enabled=v["aug.rand.enabled"],
        policy=policy,
    )
    return ExperimentConfig(
        data=DataConfig(
            v["data.seed"], v["data.per_class"], v["data.size"], v["data.val_fraction"]
        ),
        train=TrainConfig(sgd, plan, place, style, augment, v["train.batch_size"]),
        seeds=tuple(v["run.seeds"]),
        targets=targets,
        methods=tuple(v["run.methods"]),
        checkpoints=v["run.checkpoints"],
        sweep_p_max=tuple(v["sweep.p_max"]),
        sweep_layer_sets=tuple(tuple(s) for s in v["sweep.layer_sets"]),
        out=Path(out) if out is not None else Path(PLACEDROP_OUTPUT_DIR.current),
        values=dict(v),
    )


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, str]] = None,
    out: Optional[Union[str, Path]] = None,
) -> ExperimentConfig:
    """Read a configuration file (if any), apply ``overrides`` and validate the result"""
    raw: Dict[str, str] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as error:
            raise ConfigError({"--config": f"cannot read {path}: {error.strerror}"})
        raw.update(parse_config_text(text))
    raw.update(overrides or {})
    return build_config(resolve_values(raw), Path(out) if out is not None else None)


def dump_config(config: ExperimentConfig) -> str:
    """The configuration as ``key = value`` lines which :func:`load_config` reads back"""
    lines = []
    for key, value in config.values.items():
        if isinstance(value, list) and value and isinstance(value[0], list):
            text = "; ".join(", ".join(group) for group in value)
        elif isinstance(value, list):
            text = ", ".join(str(item) for item in value)
        elif isinstance(value, bool):
            text = str(value).lower()
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


# --- methods ---------------------------------------------------------------------------


def method_config(method: str, base: TrainConfig) -> TrainConfig:
    """The training configuration of one rung of the method ladder

    The method decides which of SwapStyle/MixStyle, RandAugment and PLACE are on;
    every other setting comes from ``base``. ``place.enabled = false`` in ``base``
    keeps PLACE off even for PLACE methods.
    """
    if method not in RECIPES:
        raise ConfigError({"run.methods": f"unknown method {method!r}"})
    recipe = RECIPES[method]
    style = dataclasses.replace(base.style, mode=recipe.style)
    augment = dataclasses.replace(base.augment, rand_enabled=recipe.rand)
    place = dataclasses.replace(
        base.place,
        enabled=base.place.enabled and recipe.place,
        layer_wise=base.place.layer_wise and recipe.without != "layer",
        progressive=base.place.progressive and recipe.without != "progressive",
        channel_wise=base.place.channel_wise and recipe.without != "channel",
    )
    plan = base.plan
    if recipe.one_stage or plan.one_stage_mode:
        # same number of epochs as two-stage training, all of them with PLACE
        plan = StagePlan(0, plan.stage1_epochs + plan.stage2_epochs, one_stage_mode=True)
    return dataclasses.replace(base, style=style, augment=augment, place=place, plan=plan)


# --- runs ------------------------------------------------------------------------------


@dataclass(frozen=True)
class RunSpec:
    """One (method, target, seed) triple and the tags it is reported with"""

    method: str
    target: int
    seed: int
    train: TrainConfig

    @property
    def layers(self) -> str:
        if not self.train.place.enabled:
            return "none"
        return "+".join(layer.value for layer in self.train.place.candidate_layers)

    @property
    def run_id(self) -> str:
        tag = ""
        if self.train.place.enabled:
            tag = f"-p{self.train.place.p_max:g}-{self.layers}"
        return f"{self.method}{tag}-{DOMAINS[self.target]}-s{self.seed}"


def run_single(
    spec: RunSpec,
    datasets: Sequence[Dataset],
    data: DataConfig,
    out: Path,
    checkpoints: bool = True,
) -> ReportRow:
    """Train and evaluate one run, writing its epoch log (and checkpoint)"""
    split = leave_one_out(datasets, spec.target, data.val_fraction, spec.seed)
    net = Network.initialize(len(CLASSES), spec.seed)
    result = train(net, split, spec.train, spec.seed, spec.run_id)
    write_epoch_log(result.log, out / "logs" / f"{spec.run_id}.csv")
    if checkpoints:
        net.save(out / "checkpoints" / f"{spec.run_id}.ckpt")

    sources = Dataset.concat([d for k, d in enumerate(datasets) if k != spec.target])
    summary = DomainFeatureSummary.from_features(
        extract_features(net, sources), sources.labels, sources.domains, len(CLASSES)
    )
    test_acc = result.log[-1].test_acc if result.log else evaluate(net, split.test)
    logger.info(f"Finished {spec.run_id} in {result.elapsed:.1f}s - test_acc={test_acc:.4f}")
    return ReportRow(
        run_id=spec.run_id,
        seed=spec.seed,
        method=spec.method,
        target_domain=DOMAINS[spec.target],
        test_acc=test_acc,
        inter_domain=inter_domain_distance(summary),
        intra_class=intra_class_distance(summary),
        p_max=spec.train.place.p_max,
        layers=spec.layers,
    )


def plan_runs(config: ExperimentConfig, methods: Optional[Iterable[str]] = None) -> List[RunSpec]:
    return [
        RunSpec(method, target, seed, method_config(method, config.train))
        for method in (config.methods if methods is None else tuple(methods))
        for seed in config.seeds
        for target in config.targets
    ]


async def _run_all(
    jobs: Sequence[Callable[[], ReportRow]], workers: int
) -> List[ReportRow]:
    limiter = CapacityLimiter(workers)
    results: Dict[int, ReportRow] = {}
    failures: Dict[int, BaseException] = {}

    async def run_job(index: int) -> None:
        try:
            results[index] = await to_thread.run_sync(jobs[index], limiter=limiter)
        except Exception as error:
            logger.exception(f"Run {index} failed")
            failures[index] = error

    async with create_task_group() as task_group:
        for index in range(len(jobs)):
            task_group.start_soon(run_job, index)

    if failures:
        raise failures[min(failures)]
    return [results[i] for i in range(len(jobs))]


def execute(
    specs: Sequence[RunSpec],
    config: ExperimentConfig,
    out: Path,
    datasets: Optional[Sequence[Dataset]] = None,
) -> List[ReportRow]:
    """Run every spec on up to ``PLACEDROP_NUM_WORKERS`` threads, sorted rows out"""
    if datasets is None:
        datasets = generate_dataset(config.data.seed, config.data.per_class, config.data.size)
    jobs = [
        partial(run_single, spec, datasets, config.data, out, config.checkpoints)
        for spec in specs
    ]
    workers = PLACEDROP_NUM_WORKERS.current
    logger.info(f"Starting {len(jobs)} runs on {workers} worker(s)")
    rows = anyio.run(_run_all, jobs, workers)
    return sorted(rows, key=ReportRow.sort_key)


def log_method_means(rows: Sequence[ReportRow]) -> Dict[str, float]:
    means = method_means(rows)
    for method, mean in means.items():
        logger.info(f"{method}: mean test accuracy {100 * mean:.2f}")
    return means


def run_experiment(
    config: ExperimentConfig,
    datasets: Optional[Sequence[Dataset]] = None,
) -> List[ReportRow]:
    """Every (method, seed, target) run of ``config``; writes ``report.csv``"""
    out = config.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(config))
    rows = execute(plan_runs(config), config, out, datasets)
    write_report(rows, out / "report.csv")
    log_method_means(rows)
    return rows


def _place_methods(config: ExperimentConfig) -> Tuple[str, ...]:
    chosen = tuple(m for m in config.methods if m in PLACE_METHODS)
    return chosen or ("strong_baseline+place",)


def sweep_pmax(
    config: ExperimentConfig,
    values: Optional[Sequence[float]] = None,
    datasets: Optional[Sequence[Dataset]] = None,
) -> List[ReportRow]:
    """One run group per ``p_max``, nothing else varied; writes ``sweep_pmax.csv``"""
    values = tuple(config.sweep_p_max if values is None else values)
    bad = [p for p in values if not 0 < p < 1]
    if bad or not values:
        raise ConfigError({"sweep.p_max": f"values must lie in (0, 1), got {list(values)}"})
    if len(set(values)) != len(values):
        raise ConfigError({"sweep.p_max": f"repeats a value in {list(values)}"})
    if datasets is None:
        datasets = generate_dataset(config.data.seed, config.data.per_class, config.data.size)
    methods = _place_methods(config)
    specs = [
        spec
        for p_max in values
        for spec in plan_runs(config.with_place(p_max=p_max), methods)
    ]
    rows = execute(specs, config, config.out / "sweep_pmax", datasets)
    write_report(rows, config.out / "sweep_pmax.csv")
    return rows


def sweep_layers(
    config: ExperimentConfig,
    layer_sets: Optional[Sequence[Sequence[str]]] = None,
    baseline: bool = True,
    datasets: Optional[Sequence[Dataset]] = None,
) -> List[ReportRow]:
    """One run group per candidate layer set; writes ``sweep_layers.csv``

    With ``baseline`` an extra group runs the strong baseline without PLACE.
    """
    given = config.sweep_layer_sets if layer_sets is None else layer_sets
    parsed = [
        LayerId.parse_set(names, f"sweep.layer_sets[{i}]") for i, names in enumerate(given)
    ]
    if not parsed:
        raise ConfigError({"sweep.layer_sets": "must hold at least one layer set"})
    if len(set(parsed)) != len(parsed):
        duplicates = sorted(
            "+".join(layer.value for layer in layers)
            for layers in set(parsed)
            if parsed.count(layers) > 1
        )
        raise ConfigError({"sweep.layer_sets": f"repeats the layer sets {duplicates}"})
    if datasets is None:
        datasets = generate_dataset(config.data.seed, config.data.per_class, config.data.size)
    methods = _place_methods(config)
    specs = [
        spec
        for layers in parsed
        for spec in plan_runs(config.with_place(candidate_layers=layers), methods)
    ]
    if baseline:
        specs += plan_runs(config, ("strong_baseline",))
    rows = execute(specs, config, config.out / "sweep_layers", datasets)
    write_report(rows, config.out / "sweep_layers.csv")
    return rows
