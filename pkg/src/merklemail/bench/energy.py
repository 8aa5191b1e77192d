"""Daily and annual energy estimate from measured per-action charge."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import InvalidArgumentError

DAYS_PER_YEAR = 365


@dataclass(frozen=True)
class EnergyModelParams:
    append_micro_ah: float
    fetch_micro_ah: float
    sync_micro_ah_per_100: float
    daily_messages: float
    pue: float
    redundancy_factor: float
    voltage: float

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value > 0:
                raise InvalidArgumentError(f"{name} must be strictly positive, got {value}")
        if self.pue < 1:
            raise InvalidArgumentError(f"pue must be at least 1, got {self.pue}")


@dataclass(frozen=True)
class EnergyEstimate:
    sync_micro_ah: float
    daily_micro_ah: float
    daily_wh: float
    annual_wh: float


def energy_model(p: EnergyModelParams) -> EnergyEstimate:
    sync = p.sync_micro_ah_per_100 * p.daily_messages / 100
    daily = (p.append_micro_ah + p.fetch_micro_ah + sync) * p.pue * p.redundancy_factor
    daily_wh = daily * p.voltage / 1e6
    return EnergyEstimate(sync, daily, daily_wh, daily_wh * DAYS_PER_YEAR)
