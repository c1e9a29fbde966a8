"""Digital track map: polyline segments with a successor graph.

Positions along the track are expressed as a one-dimensional coordinate ``s``
measured from the first point of the first segment of a *path* (an ordered
tuple of segment ids).  Geographic coordinates are converted to a local
east/north plane with an equirectangular projection centred at the map's
reference point.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

EARTH_RADIUS = 6378137.0

DEFAULT_MAX_OFFSET = 25.0
DEFAULT_WINDOW = 200.0


class MapError(ValueError):
    """Raised for malformed or inconsistent map documents."""


class OffTrackError(ValueError):
    """Raised when a point is farther than the allowed offset from every track."""


class BeyondTrackEndError(ValueError):
    """Raised when a track position lies outside its path."""


@dataclass(frozen=True)
class GeoPoint:
    lon: float
    lat: float

    def __post_init__(self):
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise ValueError(f"non-finite coordinates {self.lon}, {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} out of range")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} out of range")


@dataclass(frozen=True)
class TrackPosition:
    s: float
    path: tuple[int, ...]
    lateral_offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "path", tuple(int(p) for p in self.path))
        if not self.path:
            raise ValueError("track position needs a non-empty path")
        if self.s < 0 or not math.isfinite(self.s):
            raise ValueError(f"invalid track position s={self.s}")
        if not math.isfinite(self.lateral_offset):
            raise ValueError("lateral offset must be finite")


@dataclass(frozen=True, eq=False)
class Segment:
    id: int
    points: tuple[GeoPoint, ...]
    xy: np.ndarray
    cum: np.ndarray
    slope: np.ndarray
    next: tuple[int, ...]

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def point_at(self, local_s: float) -> tuple[np.ndarray, np.ndarray]:
        """Local-plane point and unit tangent at arc length ``local_s``."""
        local_s = min(max(local_s, 0.0), self.length)
        i = int(np.searchsorted(self.cum, local_s, side="right")) - 1
        i = min(max(i, 0), len(self.cum) - 2)
        seg_len = self.cum[i + 1] - self.cum[i]
        frac = (local_s - self.cum[i]) / seg_len
        d = self.xy[i + 1] - self.xy[i]
        return self.xy[i] + frac * d, d / seg_len

    def project(self, p: np.ndarray) -> tuple[float, float, float]:
        """Orthogonal projection of a local-plane point.

        Returns ``(local_s, distance, signed_offset)``; the offset is positive
        to the right of the direction of travel.
        """
        a = self.xy[:-1]
        d = self.xy[1:] - a
        ap = p - a
        l2 = np.einsum("ij,ij->i", d, d)
        t = np.clip(np.einsum("ij,ij->i", ap, d) / l2, 0.0, 1.0)
        foot = a + t[:, None] * d
        dist = np.hypot(*(p - foot).T)
        i = int(np.argmin(dist))
        cross = d[i, 0] * ap[i, 1] - d[i, 1] * ap[i, 0]
        sign = -1.0 if cross > 0 else 1.0
        local_s = float(self.cum[i] + t[i] * (self.cum[i + 1] - self.cum[i]))
        return local_s, float(dist[i]), sign * float(dist[i])


class TrackMap:
    """Immutable track network built by :func:`build_map`."""

    def __init__(self, reference: GeoPoint, segments: Sequence[Segment]):
        self.reference = reference
        self.segments: dict[int, Segment] = {seg.id: seg for seg in segments}
        self._cos_lat0 = math.cos(math.radians(reference.lat))

    def to_local(self, p: GeoPoint) -> np.ndarray:
        x = math.radians(p.lon - self.reference.lon) * EARTH_RADIUS * self._cos_lat0
        y = math.radians(p.lat - self.reference.lat) * EARTH_RADIUS
        return np.array([x, y])

    def to_geo(self, xy: Sequence[float]) -> GeoPoint:
        lon = self.reference.lon + math.degrees(xy[0] / (EARTH_RADIUS * self._cos_lat0))
        lat = self.reference.lat + math.degrees(xy[1] / EARTH_RADIUS)
        return GeoPoint(lon, lat)

    @property
    def switches(self) -> list[int]:
        """Ids of segments that end in a switch (two or more successors)."""
        return sorted(sid for sid, seg in self.segments.items() if len(seg.next) >= 2)

    @property
    def total_length(self) -> float:
        return sum(seg.length for seg in self.segments.values())

    def successors(self, seg_id: int) -> tuple[int, ...]:
        return self.segments[seg_id].next

    def path_length(self, path: Sequence[int]) -> float:
        return sum(self.segments[sid].length for sid in path)

    def locate(self, path: Sequence[int], s: float) -> tuple[int, int, float]:
        """Map ``s`` on ``path`` to ``(index in path, segment id, local s)``.

        Boundary points belong to the downstream segment, except at the very
        end of the path.
        """
        if s < -1e-9:
            raise BeyondTrackEndError(f"s={s} is negative")
        offset = 0.0
        for i, sid in enumerate(path):
            length = self.segments[sid].length
            if s < offset + length:
                return i, sid, max(s - offset, 0.0)
            offset += length
        if s <= offset + 1e-6:
            return len(path) - 1, path[-1], self.segments[path[-1]].length
        raise BeyondTrackEndError(f"s={s:.3f} beyond path length {offset:.3f}")

    def segment_offset(self, path: Sequence[int], index: int) -> float:
        return sum(self.segments[sid].length for sid in path[:index])

    def bbox(self) -> tuple[float, float, float, float]:
        pts = np.vstack([seg.xy for seg in self.segments.values()])
        return float(pts[:, 0].min()), float(pts[:, 1].min()), float(pts[:, 0].max()), float(pts[:, 1].max())

    def extensions(self, path: Sequence[int], budget: float) -> Iterator[tuple[int, ...]]:
        """Yield successor chains leaving the end of ``path``.

        A chain is extended while its start lies less than ``budget`` meters
        beyond the end of the path.
        """

        def walk(last: int, chain: tuple[int, ...], remaining: float):
            if remaining <= 0:
                return
            for succ in self.segments[last].next:
                if succ in chain:
                    continue
                ext = chain + (succ,)
                yield ext
                yield from walk(succ, ext, remaining - self.segments[succ].length)

        yield from walk(path[-1], (), budget)


def _parse_point(raw, what: str) -> GeoPoint:
    try:
        lon, lat = raw
        return GeoPoint(float(lon), float(lat))
    except (TypeError, ValueError) as exc:
        raise MapError(f"malformed {what}: {raw!r} ({exc})") from exc


def build_map(document: Mapping | str) -> TrackMap:
    """Build a :class:`TrackMap` from a parsed (or raw JSON) map document."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise MapError(f"malformed map document: {exc}") from exc
    if not isinstance(document, Mapping):
        raise MapError("map document must be a JSON object")
    if "reference" not in document or "segments" not in document:
        raise MapError("map document needs 'reference' and 'segments'")
    reference = _parse_point(document["reference"], "reference point")
    raw_segments = document["segments"]
    if not isinstance(raw_segments, list) or not raw_segments:
        raise MapError("'segments' must be a non-empty list")

    proto = TrackMap(reference, [])
    segments = []
    seen: set[int] = set()
    for raw in raw_segments:
        try:
            sid = int(raw["id"])
            raw_points = raw["points"]
        except (KeyError, TypeError, ValueError) as exc:
            raise MapError(f"malformed segment entry {raw!r}") from exc
        if sid in seen:
            raise MapError(f"duplicate segment id {sid}")
        seen.add(sid)
        if not isinstance(raw_points, list) or len(raw_points) < 2:
            raise MapError(f"segment {sid} needs at least two points")
        points = tuple(_parse_point(p, f"point of segment {sid}") for p in raw_points)
        xy = np.array([proto.to_local(p) for p in points])
        step = np.hypot(*np.diff(xy, axis=0).T)
        if np.any(step <= 1e-6):
            raise MapError(f"degenerate segment {sid}: repeated or zero-length points")
        cum = np.concatenate([[0.0], np.cumsum(step)])
        slope = np.asarray(raw.get("slope", []) or [], dtype=float).reshape(-1, 2)
        if len(slope) and np.any(np.diff(slope[:, 0]) <= 0):
            raise MapError(f"slope samples of segment {sid} must have increasing s")
        try:
            nxt = tuple(int(n) for n in raw.get("next", []) or [])
        except (TypeError, ValueError) as exc:
            raise MapError(f"malformed successor list of segment {sid}") from exc
        segments.append(Segment(sid, points, xy, cum, slope, nxt))

    for seg in segments:
        for n in seg.next:
            if n not in seen:
                raise MapError(f"dangling successor {n} referenced by segment {seg.id}")
    return TrackMap(reference, segments)


def load_map(path: str | Path) -> TrackMap:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise MapError(f"cannot read map file {path}: {exc}") from exc
    return build_map(text)


def map_to_document(track_map: TrackMap) -> dict:
    """Inverse of :func:`build_map` (coordinates at 1e-9 degree precision)."""
    return {
        "reference": [round(track_map.reference.lon, 9), round(track_map.reference.lat, 9)],
        "segments": [
            {
                "id": seg.id,
                "points": [[round(p.lon, 9), round(p.lat, 9)] for p in seg.points],
                "slope": seg.slope.tolist(),
                "next": list(seg.next),
            }
            for seg in track_map.segments.values()
        ],
    }


def _candidates(track_map: TrackMap, hint: TrackPosition | None, window: float):
    if hint is None:
        for sid in track_map.segments:
            yield (sid,), 0, 0.0
        return
    offset = 0.0
    for i, sid in enumerate(hint.path):
        yield hint.path, i, offset
        offset += track_map.segments[sid].length
    budget = window - (offset - hint.s)
    for chain in track_map.extensions(hint.path, budget):
        yield hint.path + chain, len(hint.path) + len(chain) - 1, offset + track_map.path_length(chain[:-1])


def project_to_track(
    p: GeoPoint,
    track_map: TrackMap,
    hint: TrackPosition | None = None,
    *,
    window: float = DEFAULT_WINDOW,
    max_offset: float = DEFAULT_MAX_OFFSET,
) -> TrackPosition:
    """Project a geographic point orthogonally onto the nearest track.

    Without a hint every segment is a candidate and the returned path is the
    single matched segment.  With a hint, candidates are the segments of
    ``hint.path`` plus successor chains reaching up to ``window`` meters past
    ``hint.s``; the returned path is the hint path, extended by the chain
    leading to the matched segment when needed.
    """
    xy = track_map.to_local(p)
    best = None
    for path, index, seg_offset in _candidates(track_map, hint, window):
        seg = track_map.segments[path[index]]
        local_s, dist, signed = seg.project(xy)
        if best is None or dist < best[0]:
            best = (dist, path, seg_offset + local_s, signed)
    dist, path, s, signed = best
    if dist > max_offset:
        raise OffTrackError(f"point {p} is {dist:.1f} m from the nearest track (limit {max_offset} m)")
    return TrackPosition(max(s, 0.0), path, signed)


def track_to_geo(tp: TrackPosition, track_map: TrackMap) -> GeoPoint:
    _, sid, local = track_map.locate(tp.path, tp.s)
    xy, _ = track_map.segments[sid].point_at(local)
    return track_map.to_geo(xy)


def heading_at(tp: TrackPosition, track_map: TrackMap) -> float:
    """Track heading in degrees clockwise from north, in [0, 360)."""
    _, sid, local = track_map.locate(tp.path, tp.s)
    _, tangent = track_map.segments[sid].point_at(local)
    return math.degrees(math.atan2(tangent[0], tangent[1])) % 360.0


def slope_at(tp: TrackPosition, track_map: TrackMap) -> float:
    try:
        _, sid, local = track_map.locate(tp.path, tp.s)
    except BeyondTrackEndError:
        sid = tp.path[-1]
        local = track_map.segments[sid].length
    samples = track_map.segments[sid].slope
    if len(samples) == 0:
        return 0.0
    return float(np.interp(local, samples[:, 0], samples[:, 1]))


def path_gap(
    rear: TrackPosition,
    front: TrackPosition,
    track_map: TrackMap,
    horizon: float | None = None,
) -> float | None:
    """Along-track distance from ``rear`` forward to ``front``.

    The rear's own path is followed first (its branch choice is binding);
    beyond its end every successor is explored.  Returns ``None`` when the
    front is not ahead of the rear on a reachable track, or lies farther than
    ``horizon``.
    """
    r_idx, r_sid, r_local = track_map.locate(rear.path, rear.s)
    _, f_sid, f_local = track_map.locate(front.path, front.s)
    limit = math.inf if horizon is None else horizon

    if r_sid == f_sid:
        gap = f_local - r_local
        if gap < -1e-9:
            return None
        return max(gap, 0.0) if gap <= limit else None

    dist = track_map.segments[r_sid].length - r_local
    for sid in rear.path[r_idx + 1 :]:
        if dist > limit:
            return None
        if sid == f_sid:
            gap = dist + f_local
            return gap if gap <= limit else None
        dist += track_map.segments[sid].length

    best = None
    visited = set(rear.path[r_idx:])
    stack = [(rear.path[-1], dist)]
    while stack:
        sid, d = stack.pop()
        if d > limit:
            continue
        for succ in track_map.segments[sid].next:
            if succ == f_sid:
                gap = d + f_local
                if gap <= limit and (best is None or gap < best):
                    best = gap
            elif succ not in visited:
                visited.add(succ)
                stack.append((succ, d + track_map.segments[succ].length))
    return best


def geo_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters."""
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS * math.asin(min(1.0, math.sqrt(h)))


def straight_map_document(
    length: float,
    *,
    origin: tuple[float, float] = (18.2625, 49.8209),
    heading_deg: float = 0.0,
    segment_id: int = 1,
) -> dict:
    """Document for a single straight segment starting at ``origin``."""
    cos_lat = math.cos(math.radians(origin[1]))
    dx = length * math.sin(math.radians(heading_deg))
    dy = length * math.cos(math.radians(heading_deg))
    end = (
        origin[0] + math.degrees(dx / (EARTH_RADIUS * cos_lat)),
        origin[1] + math.degrees(dy / EARTH_RADIUS),
    )
    return {
        "reference": list(origin),
        "segments": [{"id": segment_id, "points": [list(origin), list(end)], "slope": [], "next": []}],
    }
