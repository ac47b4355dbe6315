"""The training protocol

A run has two stages. Stage 1 trains the baseline with every augmentation it uses but
no PLACE dropout. Stage 2 continues from the stage 1 weights with PLACE dropout active,
its schedule counting epochs from the start of the stage. The learning rate restarts
at its initial value at the beginning of each stage and is decayed once, late in the
stage. The model after the last epoch is the result: there is no early stopping.

One iteration::

    compose_batch -> style hook -> PLACE hook (stage 2) -> loss -> backward -> sgd_step
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from logging import getLogger
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from placedrop.augment import AugmentConfig, augment_batch
from placedrop.core import ops
from placedrop.core.network import Network
from placedrop.core.proto import HookList, LayerId
from placedrop.core.tensor import Tensor, backward, check_finite
from placedrop.domains import Split
from placedrop.errors import ConfigError, ContractError, NumericalError
from placedrop.metrics import evaluate
from placedrop.place import PlaceConfig, PlaceDropout, SampleStreams, ScheduleState
from placedrop.streams import StreamFactory
from placedrop.style import StyleAugment, StyleConfig


logger = getLogger(__name__)


@dataclass(frozen=True)
class SgdConfig:
    """Stochastic gradient descent with momentum, weight decay and one step decay

    ``global_decay`` places the decay at a fraction of all epochs of the run instead
    of each stage. ``nesterov`` switches to Nesterov momentum.
    """

    lr0: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_factor: float = 0.1
    decay_at_fraction: float = 0.8
    nesterov: bool = False
    global_decay: bool = False

    def __post_init__(self) -> None:
        problems = {}
        if not self.lr0 > 0:
            problems["train.lr"] = f"must be positive, not {self.lr0}"
        if not 0 <= self.momentum < 1:
            problems["train.momentum"] = f"must lie in [0, 1), not {self.momentum}"
        if not self.weight_decay >= 0:
            problems["train.weight_decay"] = f"must be non-negative, not {self.weight_decay}"
        if not self.decay_factor > 0:
            problems["train.decay_factor"] = f"must be positive, not {self.decay_factor}"
        if not 0 < self.decay_at_fraction < 1:
            problems["train.decay_at"] = f"must lie in (0, 1), not {self.decay_at_fraction}"
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class StagePlan:
    """Epochs per stage

    In one-stage mode there is no stage 1: PLACE is active from the first epoch of the
    run, whatever ``stage1_epochs`` says.
    """

    stage1_epochs: int = 15
    stage2_epochs: int = 15
    one_stage_mode: bool = False

    def __post_init__(self) -> None:
        problems = {}
        if self.stage1_epochs < 0:
            problems["train.stage1_epochs"] = f"must be non-negative, not {self.stage1_epochs}"
        if self.stage2_epochs < 0:
            problems["train.stage2_epochs"] = f"must be non-negative, not {self.stage2_epochs}"
        if problems:
            raise ConfigError(problems)

    @property
    def stages(self) -> Tuple[Tuple[int, int], ...]:
        """``(stage, epochs)`` for every stage that runs"""
        first = 0 if self.one_stage_mode else self.stage1_epochs
        return tuple((stage, n) for stage, n in ((1, first), (2, self.stage2_epochs)) if n)

    @property
    def total_epochs(self) -> int:
        return sum(n for _, n in self.stages)


@dataclass(frozen=True)
class TrainConfig:
    sgd: SgdConfig = field(default_factory=SgdConfig)
    plan: StagePlan = field(default_factory=StagePlan)
    place: PlaceConfig = field(default_factory=PlaceConfig)
    style: StyleConfig = field(default_factory=StyleConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    batch_size: int = 32
    """Raw samples per iteration; the composed batch is twice as large"""

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError({"train.batch_size": f"must be positive, not {self.batch_size}"})


# --- optimization ----------------------------------------------------------------------


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    velocity: Sequence[np.ndarray],
    cfg: SgdConfig,
    lr: float,
) -> Tuple[Sequence[np.ndarray], Sequence[np.ndarray]]:
    """Update parameters and velocities in place

    ``g' = g + weight_decay * p``, ``v = momentum * v + g'`` and ``p -= lr * v``
    (or ``p -= lr * (g' + momentum * v)`` with Nesterov momentum).
    """
    if not len(params) == len(grads) == len(velocity):
        raise ContractError("Need one gradient and one velocity per parameter")
    for index, grad in enumerate(grads):
        check_finite("sgd_step", grad, parameter=index)
    for param, grad, v in zip(params, grads, velocity):
        if not param.shape == grad.shape == v.shape:
            raise ContractError(
                f"Parameter {param.shape}, gradient {grad.shape} and velocity "
                f"{v.shape} do not align"
            )
        decayed = grad + cfg.weight_decay * param
        v *= cfg.momentum
        v += decayed
        if cfg.nesterov:
            param -= lr * (decayed + cfg.momentum * v)
        else:
            param -= lr * v
    return params, velocity


class Sgd:
    """Holds the velocity of each parameter tensor between steps"""

    def __init__(self, params: Sequence[Tensor], config: SgdConfig) -> None:
        self.params = list(params)
        self.config = config
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        sgd_step([p.data for p in self.params], grads, self.velocity, self.config, lr)


def lr_at(epoch: int, stage_length: int, cfg: SgdConfig) -> float:
    """``lr0`` before epoch ``floor(decay_at_fraction * stage_length)``, decayed from it on"""
    if not 0 <= epoch < stage_length:
        raise ContractError(f"Epoch {epoch} lies outside a stage of {stage_length} epochs")
    # rounding first keeps products like 0.8 * 30 from landing just below an integer
    boundary = math.floor(round(cfg.decay_at_fraction * stage_length, 9))
    return cfg.lr0 if epoch < boundary else cfg.lr0 * cfg.decay_factor


# --- batches ---------------------------------------------------------------------------


def compose_batch(
    images: np.ndarray,
    labels: np.ndarray,
    augment: AugmentConfig,
    streams: StreamFactory,
    epoch: int,
    iteration: int,
) -> Tuple[np.ndarray, np.ndarray]:
    """Stack a standard view and a RandAugment view of every sample

    The first half of the result holds the standard views, the second half the
    RandAugment views, and the labels are repeated to match. Sample ``i`` draws from
    its own ``standard`` and ``randaug`` streams.
    """
    n = len(images)
    if len(labels) != n:
        raise ContractError(f"Got {len(labels)} labels for {n} images")
    standard = augment_batch(
        images, augment.standard_view, streams.per_sample("standard", epoch, iteration, n)
    )
    rand = augment_batch(
        images, augment.rand_view, streams.per_sample("randaug", epoch, iteration, n)
    )
    return np.concatenate([standard, rand]), np.concatenate([labels, labels])


# --- the loop --------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    """One row of the per-epoch log

    ``gamma`` and ``layer`` describe the PLACE dropout of the epoch's last iteration.
    ``gamma`` counts single activations when channel-wise dropout is off.
    """

    run_id: str
    seed: int
    stage: int
    epoch: int
    lr: float
    P: float
    gamma: int
    train_loss: float
    val_acc: float
    test_acc: float
    layer: str = ""

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TrainResult:
    net: Network
    log: List[EpochRecord]
    elapsed: float


def write_epoch_log(records: Iterable[EpochRecord], path: Union[str, Path]) -> Path:
    """Write the per-epoch log as CSV, replacing any previous file at once"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=EpochRecord.columns(), lineterminator="\n")
        writer.writeheader()
        for record in records:
            writer.writerow(
                {k: repr(v) if isinstance(v, float) else v for k, v in asdict(record).items()}
            )
    tmp.replace(path)
    return path


def _logged_gamma(
    place: PlaceDropout, net: Network, layer: Optional[LayerId], size: int
) -> int:
    if layer is None:
        return 0
    C, H, W = net.feature_shape(layer, size)
    return place.gamma(C, H * W)


def _place_streams(streams: StreamFactory, epoch: int, iteration: int) -> SampleStreams:
    def sample_streams(ordinal: int, n: int) -> Tuple[np.random.Generator, ...]:
        return tuple(streams("place", epoch, iteration, ordinal * n + i) for i in range(n))

    return sample_streams


def train(
    net: Network,
    split: Split,
    config: TrainConfig,
    seed: int,
    run_id: str = "run",
) -> TrainResult:
    """Train ``net`` in place through every stage of ``config.plan``

    The validation accuracy is NaN when the split leaves no validation samples.

    Raises:
        NumericalError: if the loss or a gradient stops being finite. Its context names
            the run, stage, epoch and iteration.
    """
    start = time.perf_counter()
    streams = StreamFactory(seed)
    pool = split.train_pool
    val = split.val_pool
    batch_size = config.batch_size
    iterations = len(pool) // batch_size
    log: List[EpochRecord] = []
    if config.plan.total_epochs and iterations == 0:
        raise ConfigError(
            {"train.batch_size": f"{batch_size} exceeds the {len(pool)} training samples"}
        )

    optimizer = Sgd(net.parameters(), config.sgd)
    style = StyleAugment(config.style)
    place = PlaceDropout(config.place, ScheduleState())
    global_epoch = 0

    for stage, length in config.plan.stages:
        place_active = stage == 2 and config.place.enabled
        place.state = ScheduleState()
        for stage_epoch in range(length):
            if config.sgd.global_decay:
                lr = lr_at(global_epoch, config.plan.total_epochs, config.sgd)
            else:
                lr = lr_at(stage_epoch, length, config.sgd)
            if place_active:
                place.state.advance()
            P = place.ratio() if place_active else 0.0

            net.train()
            order = streams("shuffle", global_epoch).permutation(len(pool))
            losses = []
            layer: Optional[LayerId] = None
            for iteration in range(iterations):
                rows = order[iteration * batch_size : (iteration + 1) * batch_size]
                images, labels = compose_batch(
                    pool.images[rows],
                    pool.labels[rows],
                    config.augment,
                    streams,
                    global_epoch,
                    iteration,
                )
                hooks: HookList = style.hooks(
                    streams("style", global_epoch, iteration),
                    streams("mix", global_epoch, iteration),
                )
                if place_active:
                    place_hooks = place.hooks(
                        streams("layer", global_epoch, iteration),
                        _place_streams(streams, global_epoch, iteration),
                    )
                    hooks += place_hooks
                    layer = place_hooks[-1][0] if place_hooks else None
                context = {
                    "run": run_id,
                    "stage": stage,
                    "epoch": global_epoch,
                    "iteration": iteration,
                }
                net.zero_grad()
                try:
                    loss = ops.softmax_cross_entropy(net(Tensor(images), hooks), labels)
                except NumericalError as error:
                    raise NumericalError(
                        "Non-finite activation", {**error.context, **context}
                    ) from error
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"Loss became {value}", context)
                backward(loss)
                try:
                    optimizer.step(lr)
                except NumericalError as error:
                    raise NumericalError(
                        "Non-finite gradient", {**error.context, **context}
                    ) from error
                losses.append(value)

            record = EpochRecord(
                run_id=run_id,
                seed=seed,
                stage=stage,
                epoch=global_epoch,
                lr=lr,
                P=P,
                gamma=_logged_gamma(place, net, layer, pool.images.shape[-1]),
                train_loss=float(np.mean(losses)),
                val_acc=evaluate(net, val) if len(val) else math.nan,
                test_acc=evaluate(net, split.test),
                layer=layer.value if layer is not None else "",
            )
            log.append(record)
            logger.info(
                f"{run_id} | stage {stage} epoch {global_epoch} | lr={lr:.1e} "
                f"P={P:.4f} gamma={record.gamma} loss={record.train_loss:.4f} "
                f"val={record.val_acc:.4f} test={record.test_acc:.4f}"
            )
            global_epoch += 1

    net.eval()
    return TrainResult(net, log, time.perf_counter() - start)

