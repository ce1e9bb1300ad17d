import numpy as np
import pytest

from axvector.serialize import FormatError, read_records, write_records


def test_round_trip_bit_exact(tmp_path, rng):
    path = str(tmp_path / "records.axvr")
    records = [
        ("alpha", rng.normal(size=(3, 4))),
        ("beta", rng.normal(size=7)),
        ("scalarish", np.array(2.5)),
    ]
    header = {"kind": "test", "note": "round trip"}
    write_records(path, header, records)
    loaded_header, loaded = read_records(path)
    assert loaded_header == header
    assert [name for name, _ in loaded] == [name for name, _ in records]
    for (_, original), (_, copy) in zip(records, loaded):
        assert original.shape == copy.shape
        assert np.array_equal(original, copy)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.axvr"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError, match="magic"):
        read_records(str(path))


def test_truncated_payload(tmp_path, rng):
    path = str(tmp_path / "records.axvr")
    write_records(path, {}, [("x", rng.normal(size=16))])
    data = open(path, "rb").read()
    trimmed = tmp_path / "trimmed.axvr"
    trimmed.write_bytes(data[:-8])
    with pytest.raises(FormatError, match="truncated|trailing"):
        read_records(str(trimmed))


def test_trailing_garbage(tmp_path, rng):
    path = str(tmp_path / "records.axvr")
    write_records(path, {}, [("x", rng.normal(size=4))])
    extended = tmp_path / "extended.axvr"
    extended.write_bytes(open(path, "rb").read() + b"xx")
    with pytest.raises(FormatError, match="trailing"):
        read_records(str(extended))


def test_atomic_write_leaves_no_temp_files(tmp_path, rng):
    path = str(tmp_path / "records.axvr")
    write_records(path, {}, [("x", rng.normal(size=4))])
    leftovers = [p.name for p in tmp_path.iterdir() if p.name != "records.axvr"]
    assert leftovers == []
