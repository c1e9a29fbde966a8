"""Driver model: scripted speed keeping, then full service braking after a warning."""
from __future__ import annotations

from ..braking import SERVICE_BRAKE_NOTCH
from .config import DriverConfig


def driver_model(
    warning_time: float | None,
    scripted_notch: int,
    reaction_time: float,
    now: float,
) -> int:
    """Notch to apply at ``now``: the scripted one until ``reaction_time`` after a warning."""
    if warning_time is not None and now >= warning_time + reaction_time - 1e-9:
        return SERVICE_BRAKE_NOTCH
    return scripted_notch


class DriverModel:
    """Bang-bang speed keeping on the traction notch, pure-delay reaction to warnings.

    Once braking starts it is held until the end of the run.
    """

    def __init__(self, cfg: DriverConfig, traction_notch: int = 1, overspeed_band: float = 0.5):
        self.cfg = cfg
        self.traction_notch = traction_notch
        self.overspeed_band = overspeed_band
        self.warned_at: float | None = None
        self.braking_since: float | None = None

    def on_warning(self, t: float) -> None:
        if self.warned_at is None:
            self.warned_at = t

    def scripted(self, now: float, v: float) -> int:
        if self.cfg.behavior == "stationary":
            return SERVICE_BRAKE_NOTCH
        target = self.cfg.target_at(now)
        if target <= 0:
            return SERVICE_BRAKE_NOTCH
        if v > target + self.overspeed_band:
            return -1
        return self.traction_notch if v < target else 0

    def command(self, now: float, v: float) -> int:
        if self.braking_since is not None:
            return SERVICE_BRAKE_NOTCH
        notch = driver_model(self.warned_at, self.scripted(now, v), self.cfg.reaction_time, now)
        if self.warned_at is not None and notch == SERVICE_BRAKE_NOTCH:
            self.braking_since = now
        return notch
