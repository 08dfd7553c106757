"""Cumulative race time bookkeeping and target normalisation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class TargetError(ValueError):
    pass


class ClampWarning(UserWarning):
    """A CRT outside the fitted range was clamped before normalising."""


def cumulative_crt(segment_times: Sequence[float]) -> float:
    """First arrival time plus every later segment duration.

    Telescopes to the last arrival time; kept as an explicit sum so raw split
    exports can be checked against manifest CRTs.
    """
    times = list(segment_times)
    if not times:
        raise TargetError("cumulative_crt needs at least one arrival time")
    for prev, cur in zip(times, times[1:]):
        if cur <= prev:
            raise TargetError(f"arrival times must be strictly increasing: {prev} then {cur}")
    total = times[0]
    for j in range(1, len(times)):
        total += times[j] - times[j - 1]
    return total


@dataclass(frozen=True)
class TargetScaler:
    """``(crt - min0) / maxP``; min0 from the first recording point, maxP from the last."""

    min0: float
    maxP: float

    def __post_init__(self):
        if not 0 <= self.min0 < self.maxP:
            raise TargetError(f"scaler needs 0 <= min0 < maxP, got min0={self.min0}, maxP={self.maxP}")

    def normalize(self, crt, warn: bool = True):
        crt = np.asarray(crt, dtype=np.float64)
        clamped = np.clip(crt, self.min0, self.maxP)
        if warn and np.any(clamped != crt):
            n = int(np.count_nonzero(clamped != crt))
            msg = f"{n} CRT value(s) outside [{self.min0}, {self.maxP}] s clamped before normalising"
            log.warning(msg)
            warnings.warn(msg, ClampWarning, stacklevel=2)
        out = (clamped - self.min0) / self.maxP
        return float(out) if out.ndim == 0 else out

    def denormalize_error(self, mae_normalized: float) -> float:
        """Normalised absolute error to minutes."""
        return float(mae_normalized) * self.maxP / 60.0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TargetScaler":
        return cls(float(obj["min0"]), float(obj["maxP"]))


def fit_scaler(
    train_targets: Iterable[tuple[int, float]],
    first_rp: int | None = None,
    last_rp: int | None = None,
) -> TargetScaler:
    """Fit on ``(rp_index, crt_seconds)`` pairs from the training split only.

    ``first_rp``/``last_rp`` default to the smallest and largest index present.
    """
    pairs = [(int(rp), float(crt)) for rp, crt in train_targets]
    if not pairs:
        raise TargetError("cannot fit a scaler on no observations")
    rps = [rp for rp, _ in pairs]
    first_rp = min(rps) if first_rp is None else first_rp
    last_rp = max(rps) if last_rp is None else last_rp
    first = [crt for rp, crt in pairs if rp == first_rp]
    last = [crt for rp, crt in pairs if rp == last_rp]
    if not first:
        raise TargetError(f"no training observation at the first recording point ({first_rp})")
    if not last:
        raise TargetError(f"no training observation at the last recording point ({last_rp})")
    return TargetScaler(min0=min(first), maxP=max(last))


def normalize(scaler: TargetScaler, crt, warn: bool = True):
    return scaler.normalize(crt, warn=warn)


def denormalize_error(scaler: TargetScaler, mae_normalized: float) -> float:
    return scaler.denormalize_error(mae_normalized)
