"""
placedrop provides a series of process-wide options that can be set using environment
variables or, for those which allow it, a programatic interface.

Experiment settings (learning rates, dropout ratios, seeds, ...) are not options. They
live in the flat key-value files described in :mod:`placedrop.experiment`.
"""

from pathlib import Path

import numpy as np

from ._option import Option as _Option


def _as_bool(value: object) -> bool:
    return value if isinstance(value, bool) else bool(int(str(value)))


def _as_dtype(value: object) -> "np.dtype[np.floating]":
    dtype = np.dtype(str(value) if not isinstance(value, np.dtype) else value)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Expected float32 or float64, not {dtype}")
    return dtype


def _as_positive_int(value: object) -> int:
    number = int(str(value))
    if number < 1:
        raise ValueError(f"Expected a positive integer, not {number}")
    return number


PLACEDROP_DEBUG_MODE = _Option(
    "PLACEDROP_DEBUG_MODE",
    default=False,
    mutable=False,
    validator=_as_bool,
)
"""This immutable option turns on/off debug mode

The string values ``1`` and ``0`` are mapped to ``True`` and ``False`` respectively.

When debug is on, the default log level for placedrop is set to ``DEBUG`` and the
finite-value check below is turned on.
"""

PLACEDROP_CHECK_FINITE = _Option(
    "PLACEDROP_CHECK_FINITE",
    default=PLACEDROP_DEBUG_MODE.current,
    mutable=False,
    validator=_as_bool,
)
"""This immutable option makes every tensor operation verify its output is finite

A non-finite value raises :class:`~placedrop.errors.NumericalError` naming the
operation which produced it. By default it follows ``PLACEDROP_DEBUG_MODE``.
"""

PLACEDROP_DEFAULT_DTYPE = _Option(
    "PLACEDROP_DEFAULT_DTYPE",
    default=np.dtype(np.float32),
    validator=_as_dtype,
)
"""The floating point type of newly created tensors

Training runs in single precision. Gradient checks switch this to ``float64`` for
their duration.
"""

PLACEDROP_NUM_WORKERS = _Option(
    "PLACEDROP_NUM_WORKERS",
    default=1,
    validator=_as_positive_int,
)
"""How many independent runs :func:`~placedrop.experiment.run_experiment` executes at once"""

PLACEDROP_OUTPUT_DIR = _Option(
    "PLACEDROP_OUTPUT_DIR",
    default=Path("placedrop-out"),
    validator=Path,
)
"""Where outputs go when no ``--out`` directory is given on the command line"""
