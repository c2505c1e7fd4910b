import hashlib
import logging
import math

import numpy as np
import pandas as pd

from errors import InvalidParams

logger = logging.getLogger(__name__)


def wrap_angle(angle):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    wrapped = math.pi - np.mod(math.pi - np.asarray(angle, dtype=float), 2.0 * math.pi)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def rot2(yaw):
    """Planar rotation matrix for a yaw angle about z."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def validate_positive(name, val):
    """Raise InvalidParams unless val is a finite number > 0."""
    if not (np.isfinite(val) and val > 0):
        raise InvalidParams(f"{name} must be > 0, got {val!r}")


def validate_range(name, val, lo, hi, hi_inclusive=False):
    """Raise InvalidParams unless lo <= val < hi (or <= hi)."""
    ok = lo <= val <= hi if hi_inclusive else lo <= val < hi
    if not (np.isfinite(val) and ok):
        bracket = "]" if hi_inclusive else ")"
        raise InvalidParams(f"{name} must be in [{lo}, {hi}{bracket}, got {val!r}")


def validate_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise InvalidParams(f"{name} must be finite, got {arr!r}")


def config_hash(settings):
    """Short stable hash of a flat settings mapping."""
    canonical = "\n".join(f"{key} = {settings[key]}" for key in sorted(settings))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def write_csv(path, frame, meta=None):
    """Write a DataFrame as UTF-8 CSV preceded by `# key=value` metadata lines."""
    meta = meta or {}
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for key, value in meta.items():
            fh.write(f"# {key}={value}\n")
        frame.to_csv(fh, index=False, float_format="%.17g")
    logger.debug("wrote %d rows to %s", len(frame), path)


def read_csv(path):
    """Read a CSV written by write_csv, returning (frame, metadata dict)."""
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
    return pd.read_csv(path, comment="#"), meta
