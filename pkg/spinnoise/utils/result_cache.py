import hashlib
import json
import logging
import os
import pickle

from spinnoise import __version__

logger = logging.getLogger(__name__)

CACHE_VERSION = 1


def config_stamp(config):
    """Stable digest of a run configuration's flat values."""
    canonical = json.dumps(
        {"values": dict(config.values), "package": __version__},
        sort_keys=True, default=str,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _cache_path(cache_dir, stamp):
    return os.path.join(cache_dir, f"pipeline-{stamp[:16]}.pkl")


def load_result(cache_dir, config):
    stamp = config_stamp(config)
    cache_path = _cache_path(cache_dir, stamp)
    if not os.path.exists(cache_path):
        return None

    try:
        with open(cache_path, "rb") as cache_file:
            payload = pickle.load(cache_file)
    except Exception:
        logger.warning("Ignoring unreadable cache file %s", cache_path)
        return None

    if not isinstance(payload, dict):
        return None
    if payload.get("cache_version") != CACHE_VERSION:
        return None
    if payload.get("config_stamp") != stamp:
        return None

    return payload["result"]


def save_result(cache_dir, config, result):
    stamp = config_stamp(config)
    os.makedirs(cache_dir, exist_ok=True)
    cache_path = _cache_path(cache_dir, stamp)
    payload = {
        "cache_version": CACHE_VERSION,
        "config_stamp": stamp,
        "result": result,
    }

    tmp_path = f"{cache_path}.tmp"
    try:
        with open(tmp_path, "wb") as cache_file:
            pickle.dump(payload, cache_file, protocol=pickle.HIGHEST_PROTOCOL)
        os.replace(tmp_path, cache_path)
        return True
    except Exception:
        logger.exception("Failed to write cache file %s", cache_path)
        try:
            if os.path.exists(tmp_path):
                os.remove(tmp_path)
        except OSError:
            pass
        return False
