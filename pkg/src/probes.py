"""
Probe dictionary T1..T4 applied to the response before forming Stein moments.

T1(y) = y, T2(y) = y^2, T3(y; a) = arctan(a y), T4(y; a) = a y^2 / (1 + a y^2).
"""
import re
from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence

import numpy as np

from src.errors import ConfigError

DEFAULT_SCALES = (0.1, 0.5, 1.0)


class ProbeKind(str, Enum):
    IDENTITY = 'identity'
    SQUARE = 'square'
    ARCTAN = 'arctan'
    RATIONAL_EVEN = 'rational_even'


SCALED_KINDS = (ProbeKind.ARCTAN, ProbeKind.RATIONAL_EVEN)


@dataclass(frozen=True)
class Probe:
    """A response transform; the scale a only matters for arctan and rational_even."""

    kind: ProbeKind
    a: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'kind', ProbeKind(self.kind))
        if self.kind in SCALED_KINDS and not float(self.a) > 0:
            raise ConfigError(f"Probe {self.kind.value} needs a > 0, got {self.a}")
        object.__setattr__(self, 'a', float(self.a))

    @property
    def label(self) -> str:
        if self.kind in SCALED_KINDS:
            return f"{self.kind.value}(a={self.a:g})"
        return self.kind.value

    @classmethod
    def from_label(cls, label: str) -> 'Probe':
        match = re.fullmatch(r'(\w+)(?:\(a=([^)]+)\))?', label.strip())
        if not match:
            raise ConfigError(f"Unrecognised probe label '{label}'")
        kind, a = match.group(1), match.group(2)
        return cls(ProbeKind(kind), float(a) if a is not None else 1.0)

    def apply(self, y: np.ndarray) -> np.ndarray:
        return apply(self, y)


def apply(probe: Probe, y: np.ndarray) -> np.ndarray:
    """Elementwise probe transform of y."""
    y = np.asarray(y, dtype=float)
    if probe.kind is ProbeKind.IDENTITY:
        return y.copy()
    if probe.kind is ProbeKind.SQUARE:
        return y * y
    if probe.kind is ProbeKind.ARCTAN:
        return np.arctan(probe.a * y)
    ay2 = probe.a * y * y
    return ay2 / (1.0 + ay2)


def scan_order(scales: Sequence[float] = DEFAULT_SCALES) -> List[Probe]:
    """
    Ordered probe list: T1, T2, T3 at each scale ascending, T4 at each scale ascending.
    """
    scales = [float(a) for a in scales]
    if not scales:
        raise ConfigError("Probe scale list must not be empty")
    if any(not a > 0 for a in scales):
        raise ConfigError(f"Probe scales must be positive, got {scales}")
    ascending = sorted(set(scales))
    probes = [Probe(ProbeKind.IDENTITY), Probe(ProbeKind.SQUARE)]
    probes += [Probe(ProbeKind.ARCTAN, a) for a in ascending]
    probes += [Probe(ProbeKind.RATIONAL_EVEN, a) for a in ascending]
    return probes


def probe_values(probe: Probe, y: np.ndarray, standardize: bool = True) -> np.ndarray:
    """
    Centered probe values T(y_i) - mean, optionally scaled to unit sample variance.

    A constant transform stays at zero rather than being scaled.
    """
    values = apply(probe, y)
    values = values - values.mean()
    if standardize:
        scale = values.std()
        if scale > 1e-12:
            values = values / scale
        else:
            values = np.zeros_like(values)
    return values
