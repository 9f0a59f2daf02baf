"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Tuple

import numpy as np

from .autograd import Tape, Tensor, backward

# gradients smaller than this are compared in absolute terms
GRAD_FLOOR = 1e-6

Forward = Callable[[Tape, Dict[str, Tensor]], Tensor]


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    threshold: float
    entries: List[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def failures(self) -> List[GradCheckEntry]:
        return [e for e in self.entries if e.rel_error > self.threshold]

    @property
    def passed(self) -> bool:
        return not self.failures

    def per_parameter(self) -> Dict[str, float]:
        worst: Dict[str, float] = {}
        for e in self.entries:
            worst[e.name] = max(worst.get(e.name, 0.0), e.rel_error)
        return worst


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_FLOOR)


def _loss_value(forward: Forward, params: Mapping[str, np.ndarray]) -> float:
    tape = Tape("float64")
    return forward(tape, tape.watch_all(params)).item()


def grad_check(
    forward: Forward,
    params: Mapping[str, np.ndarray],
    seed: int = 0,
    samples: int = 200,
    step: float = 1e-5,
    threshold: float = 1e-4,
) -> GradCheckReport:
    """Compare ``backward`` against central differences on sampled coordinates.

    ``forward(tape, theta)`` must be deterministic and return a scalar tensor.
    Everything runs in 64-bit floats.
    """
    base = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    tape = Tape("float64")
    grads = backward(tape, forward(tape, tape.watch_all(base)))

    coords = [(name, flat) for name, value in base.items() for flat in range(value.size)]
    rng = np.random.default_rng(seed)
    if samples < len(coords):
        picked = sorted(rng.choice(len(coords), size=samples, replace=False))
        coords = [coords[i] for i in picked]

    report = GradCheckReport(threshold=threshold)
    for name, flat in coords:
        original = base[name].flat[flat]
        base[name].flat[flat] = original + step
        plus = _loss_value(forward, base)
        base[name].flat[flat] = original - step
        minus = _loss_value(forward, base)
        base[name].flat[flat] = original

        numeric = (plus - minus) / (2.0 * step)
        analytic = float(grads[name].flat[flat])
        report.entries.append(GradCheckEntry(
            name=name,
            index=tuple(int(i) for i in np.unravel_index(flat, base[name].shape)),
            analytic=analytic,
            numeric=numeric,
            rel_error=relative_error(analytic, numeric),
        ))
    return report
