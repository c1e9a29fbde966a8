"""Map documents built from an independent equirectangular oracle."""
import math

import numpy as np

R_EARTH = 6378137.0
LON0, LAT0 = 18.2625, 49.8209


def local_to_geo(x, y):
    return [
        LON0 + math.degrees(x / (R_EARTH * math.cos(math.radians(LAT0)))),
        LAT0 + math.degrees(y / R_EARTH),
    ]


def polyline(xs, ys):
    return [local_to_geo(x, y) for x, y in zip(xs, ys)]


def parallel_junction_document(offset=9.0, trunk=300.0, crossover=30.0, end=600.0):
    """Trunk north to a switch; branch 2 continues north, branch 3 shifts ``offset`` m east."""
    return {
        "reference": [LON0, LAT0],
        "segments": [
            {"id": 1, "points": polyline([0, 0, 0], [0, trunk / 2, trunk]), "slope": [], "next": [2, 3]},
            {"id": 2, "points": polyline([0, 0], [trunk, end]), "slope": [], "next": []},
            {
                "id": 3,
                "points": polyline([0, offset, offset], [trunk, trunk + crossover, end]),
                "slope": [],
                "next": [],
            },
        ],
    }


def branch3_local(s, offset=9.0, trunk=300.0, crossover=30.0):
    """Local (x, y) at path position ``s`` along (1, 3)."""
    if s <= trunk:
        return np.array([0.0, s])
    d = s - trunk
    diag = math.hypot(offset, crossover)
    if d <= diag:
        return np.array([offset * d / diag, trunk + crossover * d / diag])
    return np.array([offset, trunk + crossover + (d - diag)])
