"""Simplified CAM/DENM records, their binary codec, and a broadcast channel.

Wire layouts (big-endian)::

    CAM  (29 B): 0xCA | ver | station u32 | time_ms u64 | lat i32 | lon i32
                 | speed u16 | heading u16 | length u16 | direction u8
    DENM (23 B): 0xDE | ver | station u32 | time_ms u64 | cause u8
                 | lat i32 | lon i32

Positions are in 1e-7 degree, speed in 0.01 m/s, heading in 0.1 degree
clockwise from north, vehicle length in 0.1 m.
"""
from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from .track_map import GeoPoint, geo_distance

VERSION = 1
CAM_MAGIC = 0xCA
DENM_MAGIC = 0xDE
_CAM = struct.Struct(">BBIQiiHHHB")
_DENM = struct.Struct(">BBIQBii")
CAM_SIZE = _CAM.size
DENM_SIZE = _DENM.size

_U32 = 2**32 - 1
_U64 = 2**64 - 1


class DecodeError(ValueError):
    """Raised for malformed or out-of-range wire data."""


class DriveDirection(IntEnum):
    FORWARD = 0
    BACKWARD = 1


class DenmCause(IntEnum):
    # ETSI cause code "collision risk"
    LONGITUDINAL_COLLISION_WARNING = 97


def _deg_to_raw(deg: float) -> int:
    return round(deg * 1e7)


def _check_u(value: int, limit: int, name: str) -> None:
    if not 0 <= value <= limit:
        raise ValueError(f"{name}={value} outside [0, {limit}]")


@dataclass(frozen=True)
class CamMessage:
    """Cooperative awareness record, quantized to wire resolution on creation."""

    station_id: int
    timestamp_ms: int
    position: GeoPoint
    speed: float
    heading: float
    vehicle_length: float
    drive_direction: DriveDirection = DriveDirection.FORWARD

    def __post_init__(self):
        _check_u(self.station_id, _U32, "station_id")
        _check_u(self.timestamp_ms, _U64, "timestamp_ms")
        if not self.speed >= 0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")
        if not self.vehicle_length > 0:
            raise ValueError(f"vehicle length must be > 0, got {self.vehicle_length}")
        speed_raw = round(self.speed * 100)
        heading_raw = round((self.heading % 360.0) * 10) % 3600
        length_raw = round(self.vehicle_length * 10)
        _check_u(speed_raw, 0xFFFF, "speed (0.01 m/s)")
        if not 0 < length_raw <= 0xFFFF:
            raise ValueError(f"vehicle length {self.vehicle_length} not representable")
        pos = GeoPoint(_deg_to_raw(self.position.lon) / 1e7, _deg_to_raw(self.position.lat) / 1e7)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "speed", speed_raw / 100)
        object.__setattr__(self, "heading", heading_raw / 10)
        object.__setattr__(self, "vehicle_length", length_raw / 10)
        object.__setattr__(self, "drive_direction", DriveDirection(self.drive_direction))

    @property
    def time(self) -> float:
        return self.timestamp_ms / 1000.0


@dataclass(frozen=True)
class DenmMessage:
    station_id: int
    timestamp_ms: int
    position: GeoPoint
    cause: DenmCause = DenmCause.LONGITUDINAL_COLLISION_WARNING

    def __post_init__(self):
        _check_u(self.station_id, _U32, "station_id")
        _check_u(self.timestamp_ms, _U64, "timestamp_ms")
        pos = GeoPoint(_deg_to_raw(self.position.lon) / 1e7, _deg_to_raw(self.position.lat) / 1e7)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "cause", DenmCause(self.cause))


def encode_cam(m: CamMessage) -> bytes:
    return _CAM.pack(
        CAM_MAGIC,
        VERSION,
        m.station_id,
        m.timestamp_ms,
        _deg_to_raw(m.position.lat),
        _deg_to_raw(m.position.lon),
        round(m.speed * 100),
        round(m.heading * 10),
        round(m.vehicle_length * 10),
        int(m.drive_direction),
    )


def _check_header(data: bytes, magic: int, size: int, kind: str) -> None:
    if len(data) < size:
        raise DecodeError(f"truncated {kind}: {len(data)} of {size} bytes")
    if len(data) > size:
        raise DecodeError(f"trailing bytes after {kind}: {len(data)} > {size}")
    if data[0] != magic:
        raise DecodeError(f"wrong magic byte 0x{data[0]:02X} for {kind}")
    if data[1] != VERSION:
        raise DecodeError(f"unsupported {kind} version {data[1]}")


def _decode_position(lat_raw: int, lon_raw: int) -> GeoPoint:
    if abs(lat_raw) > 900_000_000 or abs(lon_raw) > 1_800_000_000:
        raise DecodeError(f"position out of range: lat={lat_raw} lon={lon_raw}")
    return GeoPoint(lon_raw / 1e7, lat_raw / 1e7)


def decode_cam(data: bytes) -> CamMessage:
    data = bytes(data)
    _check_header(data, CAM_MAGIC, CAM_SIZE, "CAM")
    _, _, station, ts, lat, lon, speed, heading, length, direction = _CAM.unpack(data)
    if heading >= 3600:
        raise DecodeError(f"heading {heading} out of range")
    if length == 0:
        raise DecodeError("vehicle length must be positive")
    try:
        direction = DriveDirection(direction)
    except ValueError:
        raise DecodeError(f"unknown drive direction {direction}") from None
    return CamMessage(station, ts, _decode_position(lat, lon), speed / 100, heading / 10, length / 10, direction)


def encode_denm(m: DenmMessage) -> bytes:
    return _DENM.pack(
        DENM_MAGIC,
        VERSION,
        m.station_id,
        m.timestamp_ms,
        int(m.cause),
        _deg_to_raw(m.position.lat),
        _deg_to_raw(m.position.lon),
    )


def decode_denm(data: bytes) -> DenmMessage:
    data = bytes(data)
    _check_header(data, DENM_MAGIC, DENM_SIZE, "DENM")
    _, _, station, ts, cause, lat, lon = _DENM.unpack(data)
    try:
        cause = DenmCause(cause)
    except ValueError:
        raise DecodeError(f"unsupported DENM cause {cause}") from None
    return DenmMessage(station, ts, _decode_position(lat, lon), cause)


def decode_message(data: bytes) -> CamMessage | DenmMessage:
    if not data:
        raise DecodeError("empty message")
    if data[0] == CAM_MAGIC:
        return decode_cam(data)
    if data[0] == DENM_MAGIC:
        return decode_denm(data)
    raise DecodeError(f"unknown magic byte 0x{data[0]:02X}")


@dataclass(frozen=True)
class CamTriggers:
    min_interval: float = 0.1
    max_interval: float = 1.0
    position: float = 4.0
    speed: float = 0.5
    heading: float = 4.0


def cam_due(
    last_sent: CamMessage | None,
    last_send_time: float | None,
    current: CamMessage,
    now: float,
    triggers: CamTriggers = CamTriggers(),
) -> bool:
    """Generation rule: at least every second, at most 10 Hz, earlier on change."""
    if last_sent is None or last_send_time is None:
        return True
    elapsed = now - last_send_time
    eps = 1e-9
    if elapsed < triggers.min_interval - eps:
        return False
    if elapsed >= triggers.max_interval - eps:
        return True
    d_heading = abs(current.heading - last_sent.heading) % 360.0
    d_heading = min(d_heading, 360.0 - d_heading)
    return (
        geo_distance(current.position, last_sent.position) > triggers.position
        or abs(current.speed - last_sent.speed) > triggers.speed
        or d_heading > triggers.heading
    )


@dataclass(frozen=True)
class ChannelConfig:
    latency_mean: float = 0.02
    latency_jitter: float = 0.005
    loss_probability: float = 0.0
    range: float = 500.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError("loss_probability must be in [0, 1]")
        if not self.range > 0:
            raise ValueError("range must be positive")
        if self.latency_mean < 0 or self.latency_jitter < 0:
            raise ValueError("latency parameters must be non-negative")


class BroadcastChannel:
    """Single-hop broadcast with range cut, independent loss and jittered latency.

    Jitter is drawn uniformly from ``[-latency_jitter, +latency_jitter]``;
    latency never goes below zero.  One loss draw and one jitter draw are
    consumed per in-range receiver, in the order the receivers are given.
    """

    def __init__(self, cfg: ChannelConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)

    def broadcast(
        self,
        msg: bytes,
        sender_pos: GeoPoint,
        receivers: Sequence[tuple[int, GeoPoint]],
        now: float,
    ) -> tuple[list[tuple[int, float]], list[tuple[int, str]]]:
        """Return ``(deliveries, drops)``; drops carry a reason string."""
        delivered, dropped = [], []
        for agent_id, pos in receivers:
            if geo_distance(sender_pos, pos) > self.cfg.range:
                dropped.append((agent_id, "out-of-range"))
                continue
            lost = self.rng.random() < self.cfg.loss_probability
            jitter = self.rng.uniform(-self.cfg.latency_jitter, self.cfg.latency_jitter)
            if lost:
                dropped.append((agent_id, "lost"))
                continue
            delivered.append((agent_id, now + max(0.0, self.cfg.latency_mean + jitter)))
        return delivered, dropped


def channel_broadcast(
    msg: bytes,
    sender_pos: GeoPoint,
    receivers: Sequence[tuple[int, GeoPoint]],
    cfg: ChannelConfig,
    now: float,
    rng: np.random.Generator | None = None,
) -> list[tuple[int, float]]:
    return BroadcastChannel(cfg, rng).broadcast(msg, sender_pos, receivers, now)[0]


class Inbox:
    """Per-receiver delivery queue ordered by (time, sender id, sequence)."""

    def __init__(self):
        self._heap: list[tuple[float, int, int, bytes]] = []

    def push(self, deliver_at: float, sender_id: int, seq: int, payload: bytes) -> None:
        heapq.heappush(self._heap, (deliver_at, sender_id, seq, payload))

    def pop_due(self, now: float) -> list[tuple[float, int, int, bytes]]:
        out = []
        while self._heap and self._heap[0][0] <= now + 1e-9:
            out.append(heapq.heappop(self._heap))
        return out

    def drain(self) -> list[tuple[float, int, int, bytes]]:
        out = sorted(self._heap)
        self._heap.clear()
        return out

    def __len__(self) -> int:
        return len(self._heap)

