import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evoforest.checkpoint import (
    FORMAT_VERSION,
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    canonical,
    read_checkpoint,
    write_checkpoint,
)

PAYLOAD = {"epoch": 3, "forest": {"trees": ["t0"]}, "note": "ünïcode"}


def test_round_trip_and_header(tmp_path):
    path = write_checkpoint(tmp_path / "run" / "checkpoint.json", PAYLOAD, "abc123")
    header, payload = read_checkpoint(path)
    assert payload == PAYLOAD
    assert header["format_version"] == FORMAT_VERSION and header["config_hash"] == "abc123"
    assert set(header) == {"format_version", "created_at", "config_hash", "checksum"}
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2 and lines[1] == canonical(PAYLOAD)
    assert not (tmp_path / "run" / "checkpoint.json.tmp").exists()


@given(st.recursive(
    st.none() | st.booleans() | st.integers() | st.floats(allow_nan=False, allow_infinity=False) | st.text(),
    lambda kids: st.lists(kids, max_size=4) | st.dictionaries(st.text(max_size=5), kids, max_size=4),
    max_leaves=20,
))
@settings(max_examples=60, deadline=None)
def test_round_trip_property(tmp_path_factory, value):
    path = tmp_path_factory.mktemp("ck") / "c.json"
    write_checkpoint(path, {"v": value}, "h")
    assert read_checkpoint(path)[1] == {"v": value}


def test_truncation_detected(tmp_path):
    path = write_checkpoint(tmp_path / "c.json", PAYLOAD, "h")
    data = path.read_bytes()
    body_start = data.index(b"\n") + 1
    for cut in (len(data) - 5, body_start + 20, body_start):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointIntegrityError, match="checksum mismatch, file is truncated or corrupt"):
            read_checkpoint(path)
    path.write_bytes(data[:10])
    with pytest.raises(CheckpointIntegrityError, match="unreadable header"):
        read_checkpoint(path)


def test_flipped_byte_detected(tmp_path):
    path = write_checkpoint(tmp_path / "c.json", PAYLOAD, "h")
    data = bytearray(path.read_bytes())
    i = data.rindex(b"3")
    data[i] = ord("4")
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointIntegrityError):
        read_checkpoint(path)


def test_header_tampering_detected(tmp_path):
    path = write_checkpoint(tmp_path / "c.json", PAYLOAD, "h")
    head, body = path.read_text().split("\n", 1)
    header = json.loads(head)
    header["config_hash"] = "other"
    path.write_text(json.dumps(header) + "\n" + body)
    with pytest.raises(CheckpointIntegrityError):
        read_checkpoint(path)


def test_version_mismatch_reported_before_checksum(tmp_path):
    path = write_checkpoint(tmp_path / "c.json", PAYLOAD, "h")
    head, body = path.read_text().split("\n", 1)
    header = json.loads(head)
    header["format_version"] = 99
    path.write_text(json.dumps(header) + "\n" + body)
    with pytest.raises(CheckpointVersionError, match="version 99 is not supported"):
        read_checkpoint(path)


def test_missing_and_binary_files(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        read_checkpoint(tmp_path / "none.json")
    (tmp_path / "bin").write_bytes(b"\xff\xfe\x00")
    with pytest.raises(CheckpointIntegrityError, match="not valid UTF-8"):
        read_checkpoint(tmp_path / "bin")


def test_non_finite_payload_refused(tmp_path):
    with pytest.raises(ValueError):
        write_checkpoint(tmp_path / "c.json", {"x": float("nan")}, "h")
