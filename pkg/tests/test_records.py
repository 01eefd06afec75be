import io
import json
import math

import numpy as np
import pandas as pd
import pytest

from spinnoise.exceptions import InvalidInputError
from spinnoise.utils.records import (
    SCHEMAS,
    SERIES_HEADER_SIZE,
    dumps_json,
    read_psd_csv,
    read_series_binary,
    read_series_csv,
    round_significant,
    write_csv,
    write_series_binary,
    write_series_csv,
)


def test_round_significant():
    assert round_significant(1.23456789012345) == 1.23456789
    assert round_significant({"a": [math.nan, math.inf, np.float64(2.0)], "b": np.int64(3)}) == {
        "a": [None, None, 2.0], "b": 3,
    }
    assert round_significant(np.bool_(True)) is True


def test_dumps_json_is_valid_json():
    payload = json.loads(dumps_json({"xi": float("nan"), "value": 0.1 + 0.2}))
    assert payload == {"xi": None, "value": 0.3}


def test_series_binary(tmp_path):
    path = tmp_path / "series.bin"
    series = np.linspace(-1.0, 1.0, 101)
    write_series_binary(path, series, 20000.0, 7)
    assert path.stat().st_size == SERIES_HEADER_SIZE + 8 * 101
    restored, header = read_series_binary(path)
    assert np.array_equal(restored, series)
    assert header == {"sample_rate_hz": 20000.0, "count": 101, "seed": 7}


def test_series_binary_rejects_foreign_files(tmp_path):
    path = tmp_path / "other.bin"
    path.write_bytes(b"\0" * 80)
    with pytest.raises(InvalidInputError):
        read_series_binary(path)
    short = tmp_path / "short.bin"
    short.write_bytes(b"SPNOISE")
    with pytest.raises(InvalidInputError):
        read_series_binary(short)


def test_series_csv(tmp_path):
    path = tmp_path / "series.csv"
    write_series_csv(path, [0.5, -0.25, 0.125], 4.0)
    series, rate = read_series_csv(path)
    assert series.tolist() == [0.5, -0.25, 0.125]
    assert rate == pytest.approx(4.0)


def test_psd_csv():
    buffer = io.StringIO()
    write_csv(pd.DataFrame({"freq_hz": [0.0, 1.0], "psd": [1.0 / 3, 2.0]}), buffer)
    assert buffer.getvalue().splitlines() == ["freq_hz,psd", "0,0.333333333", "1,2"]
    buffer.seek(0)
    assert read_psd_csv(buffer)["psd"].tolist() == pytest.approx([1.0 / 3, 2.0])
    with pytest.raises(InvalidInputError):
        read_psd_csv(io.StringIO("f,p\n0,1\n"))


def test_schemas_cover_every_output():
    assert set(SCHEMAS) == {"sweep", "spectrum", "series", "polar", "rates", "fit", "pipeline"}
