"""Global floating-point precision switch.

Training runs in float32; verification (gradient checks, bit-exact filter
comparisons) runs in float64. The active dtype is a process-global setting:
graphs are precision-agnostic and cast leaves on the fly, so the same graph
can be evaluated under either mode.
"""

from contextlib import contextmanager

import numpy as np

from .errors import ConfigError

_MODES = {"float32": np.float32, "float64": np.float64}
_active = {"mode": "float32"}


def set_precision(mode: str) -> None:
    if mode not in _MODES:
        raise ConfigError(f"unknown precision mode {mode!r}; expected one of {sorted(_MODES)}")
    _active["mode"] = mode


def precision_mode() -> str:
    return _active["mode"]


def active_dtype() -> np.dtype:
    return np.dtype(_MODES[_active["mode"]])


@contextmanager
def use_precision(mode: str):
    """Temporarily switch the global precision mode."""
    prev = _active["mode"]
    set_precision(mode)
    try:
        yield
    finally:
        _active["mode"] = prev
