import numpy as np
import pytest

from codedml.errors import InvalidParameter
from codedml.matrix_io import (
    fixture_latencies,
    read_binary,
    read_csv,
    read_latencies,
    read_matrix,
    read_vector,
    write_binary,
    write_csv,
    write_matrix,
)


def test_binary_round_trip_and_header(tmp_path):
    A = np.random.default_rng(0).standard_normal((5, 3))
    p = tmp_path / "a.bin"
    write_binary(p, A)
    raw = p.read_bytes()
    assert raw[:4] == b"CDM1"
    assert int.from_bytes(raw[4:12], "little") == 5 and int.from_bytes(raw[12:20], "little") == 3
    assert len(raw) == 20 + 15 * 8
    np.testing.assert_array_equal(read_binary(p), A)
    np.testing.assert_array_equal(read_matrix(p), A)


def test_binary_truncated(tmp_path):
    p = tmp_path / "a.bin"
    write_binary(p, np.ones((2, 2)))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(InvalidParameter):
        read_binary(p)


def test_csv_round_trip_exact(tmp_path):
    A = np.random.default_rng(1).standard_normal((4, 2))
    p = tmp_path / "a.csv"
    write_csv(p, A)
    np.testing.assert_array_equal(read_csv(p), A)
    np.testing.assert_array_equal(read_matrix(p), A)


def test_write_matrix_picks_format(tmp_path):
    A = np.eye(2)
    write_matrix(tmp_path / "x.csv", A)
    write_matrix(tmp_path / "x.dat", A)
    assert (tmp_path / "x.dat").read_bytes()[:4] == b"CDM1"
    assert (tmp_path / "x.csv").read_text().startswith("1.0,0.0")


def test_read_vector(tmp_path):
    p = tmp_path / "v.csv"
    p.write_text("1\n2\n3\n")
    np.testing.assert_array_equal(read_vector(p), [1.0, 2.0, 3.0])
    p.write_text("1,2\n3,4\n")
    with pytest.raises(InvalidParameter):
        read_vector(p)


def test_ragged_csv_rejected(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("1,2\n3\n")
    with pytest.raises(InvalidParameter):
        read_csv(p)


def test_latencies_skip_header(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("seconds\n0.1\n# comment\n0.2\n")
    np.testing.assert_array_equal(read_latencies(p), [0.1, 0.2])


def test_fixture_statistics():
    x = fixture_latencies()
    assert x.size == 1000
    assert abs(x.mean() - 0.11) < 0.002
    assert abs(np.quantile(x, 0.95) - 0.20) < 0.002
