"""
File formats shared by the CLI and the HTTP surface.

Time series are stored either as CSV (``time_s,signal``) or in a binary layout:
a 64-byte little-endian header followed by float64 frames. The header holds
the magic ``SPNOISE\\0``, the format version, a reserved word, the sample rate
(Hz), the frame count and the seed; the rest is zero padding.
"""
import json
import logging
import math
import struct

import numpy as np
import pandas as pd

from spinnoise.exceptions import InvalidInputError

logger = logging.getLogger(__name__)

SERIES_MAGIC = b"SPNOISE\0"
SERIES_VERSION = 1
SERIES_HEADER = struct.Struct("<8sIIdQQ")
SERIES_HEADER_SIZE = 64
SIGNIFICANT_DIGITS = 9
FLOAT_FORMAT = f"%.{SIGNIFICANT_DIGITS}g"

SWEEP_COLUMNS = ["nu_ghz", "chi_a", "chi_b", "xi_plus", "xi_minus", "xi_total", "phi2_total"]
PSD_COLUMNS = ["freq_hz", "psd"]
SERIES_COLUMNS = ["time_s", "signal"]

SCHEMAS = {
    "sweep": {"schema": "spinnoise.sweep/1", "format": "csv", "columns": SWEEP_COLUMNS},
    "spectrum": {"schema": "spinnoise.psd/1", "format": "csv", "columns": PSD_COLUMNS},
    "series": {
        "schema": "spinnoise.series/1",
        "format": "binary or csv",
        "header": {"size": SERIES_HEADER_SIZE, "layout": SERIES_HEADER.format,
                   "fields": ["magic", "version", "reserved", "sample_rate_hz", "count", "seed"]},
        "frames": "<f8",
        "columns": SERIES_COLUMNS,
    },
    "polar": {"schema": "spinnoise.polar/1", "format": "json",
              "fields": {"roots": [{"nu_ghz": "float", "kind": "plus|minus", "near_resonance": "bool"}]}},
    "rates": {"schema": "spinnoise.rates/1", "format": "json",
              "fields": {"gamma_se": "float", "eigen": "RateSet", "analytic": "RateSet",
                         "gamma_a_over_pi_hz": "float", "gamma_minus_over_gamma_a": "float"}},
    "fit": {"schema": "spinnoise.fit/1", "format": "json",
            "fields": {"converged": "bool", "flags": "list[str]", "iterations": "int",
                       "residual_norm": "float", "condition": "float",
                       "parameters": {"<name>": {"value": "float", "error": "float"}},
                       "derived": "object", "stages": "object"}},
    "pipeline": {"schema": "spinnoise.pipeline/1", "format": "json",
                 "fields": {"nu_ghz": "float", "xi_plus": "float", "xi_plus_err": "float",
                            "xi": "float", "gamma_minus_over_pi_hz": "float",
                            "diagnostics": "object", "fit": "fit"}},
}


def round_significant(value, digits=SIGNIFICANT_DIGITS):
    """Round floats (recursively) to ``digits`` significant digits; NaN and inf become None."""
    if isinstance(value, dict):
        return {key: round_significant(item, digits) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [round_significant(item, digits) for item in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        if not math.isfinite(value):
            return None
        return float(f"{float(value):.{digits}g}")
    return value


def dumps_json(payload):
    return json.dumps(round_significant(payload), indent=2)


def write_csv(frame: pd.DataFrame, target):
    frame.to_csv(target, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def read_psd_csv(source):
    frame = pd.read_csv(source)
    missing = set(PSD_COLUMNS) - set(frame.columns)
    if missing:
        raise InvalidInputError(f"PSD file lacks columns {sorted(missing)}")
    frame = frame[PSD_COLUMNS].astype(float)
    if not np.all(np.isfinite(frame.to_numpy())):
        raise InvalidInputError("PSD file holds non-finite values")
    return frame


def write_series_binary(path, series, sample_rate_hz, seed):
    series = np.asarray(series, dtype="<f8")
    header = SERIES_HEADER.pack(SERIES_MAGIC, SERIES_VERSION, 0, float(sample_rate_hz),
                                series.size, int(seed))
    with open(path, "wb") as handle:
        handle.write(header.ljust(SERIES_HEADER_SIZE, b"\0"))
        handle.write(series.tobytes())
    logger.info("Wrote %d frames to %s", series.size, path)


def read_series_binary(path):
    """Return ``(series, header)`` where header has sample_rate_hz, count and seed."""
    with open(path, "rb") as handle:
        raw = handle.read(SERIES_HEADER_SIZE)
        if len(raw) < SERIES_HEADER_SIZE:
            raise InvalidInputError(f"{path} is too short for a series header")
        magic, version, _, sample_rate, count, seed = SERIES_HEADER.unpack_from(raw)
        if magic != SERIES_MAGIC:
            raise InvalidInputError(f"{path} is not a spin-noise series file")
        if version != SERIES_VERSION:
            raise InvalidInputError(f"unsupported series version {version}")
        series = np.frombuffer(handle.read(), dtype="<f8")
    if series.size != count:
        raise InvalidInputError(f"{path}: header announces {count} frames, found {series.size}")
    return series.astype(float), {"sample_rate_hz": sample_rate, "count": count, "seed": seed}


def write_series_csv(target, series, sample_rate_hz):
    series = np.asarray(series, dtype=float)
    frame = pd.DataFrame({"time_s": np.arange(series.size) / sample_rate_hz, "signal": series})
    write_csv(frame, target)


def input_kind(path):
    """``series_binary``, ``series_csv`` or ``psd``, judged from the file head."""
    with open(path, "rb") as handle:
        if handle.read(len(SERIES_MAGIC)) == SERIES_MAGIC:
            return "series_binary"
    try:
        columns = list(pd.read_csv(path, nrows=0).columns)
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise InvalidInputError(f"{path} is neither a series nor a PSD file: {exc}") from exc
    return "series_csv" if columns[:2] == SERIES_COLUMNS else "psd"


def read_series_csv(source):
    """Return ``(series, sample_rate_hz)`` from a ``time_s,signal`` CSV."""
    frame = pd.read_csv(source)
    if list(frame.columns[:2]) != SERIES_COLUMNS:
        raise InvalidInputError(f"series CSV must start with columns {SERIES_COLUMNS}")
    times = frame["time_s"].to_numpy(dtype=float)
    if times.size < 2:
        raise InvalidInputError("series CSV needs at least two rows")
    return frame["signal"].to_numpy(dtype=float), 1.0 / float(np.median(np.diff(times)))
