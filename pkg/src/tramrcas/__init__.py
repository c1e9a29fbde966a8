"""V2V-based rail collision avoidance for trams: estimation, braking prediction, warning."""

__version__ = "0.1.0"
