import struct

import numpy as np
import pytest

from utils.binio import PayloadReader, PayloadWriter, read_container, write_container
from utils.errors import ChecksumError, FormatError, InvalidInputError, TruncatedFileError

MAGIC = b"TESTBIN1"
HEADER = struct.Struct("<H")
# magic, header, payload byte count
PAYLOAD_START = len(MAGIC) + HEADER.size + 8


@pytest.fixture
def container(tmp_path):
    writer = PayloadWriter("<f4")
    writer.add_array([1.0, 2.0, 3.0])
    writer.add_integers([7, -1])
    path = tmp_path / "c.bin"
    write_container(path, MAGIC, HEADER.pack(1), writer.payload())
    return path, writer.payload()


def _flip(path, offset):
    data = bytearray(path.read_bytes())
    data[offset] ^= 0x5A
    path.write_bytes(bytes(data))


def test_container_round_trip(container):
    path, payload = container
    fields, loaded = read_container(path, MAGIC, 1, HEADER)
    assert fields == (1,)
    assert loaded == payload
    reader = PayloadReader(loaded)
    np.testing.assert_array_equal(reader.read_array(expected=3), [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(reader.read_integers(expected=2), [7, -1])
    assert reader.done()


def test_every_corrupted_payload_byte_is_a_checksum_error(container):
    path, payload = container
    original = path.read_bytes()
    # includes bytes inside the per-array length prefixes
    for offset in range(PAYLOAD_START, PAYLOAD_START + len(payload)):
        path.write_bytes(original)
        _flip(path, offset)
        with pytest.raises(ChecksumError):
            read_container(path, MAGIC, 1, HEADER)


def test_short_file_is_truncated(container):
    path, _ = container
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(TruncatedFileError):
        read_container(path, MAGIC, 1, HEADER)


def test_extra_bytes_are_a_format_error(container):
    path, _ = container
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(FormatError) as info:
        read_container(path, MAGIC, 1, HEADER)
    assert type(info.value) is FormatError


@pytest.mark.parametrize("values", [[2**24 + 1], [0.5], [np.nan]])
def test_integers_beyond_float32_precision_are_rejected(values):
    with pytest.raises(InvalidInputError):
        PayloadWriter("<f4").add_integers(values)


def test_wide_payload_holds_larger_integers():
    writer = PayloadWriter("<f8")
    writer.add_integers([2**24 + 1])
    assert PayloadReader(writer.payload(), "<f8").read_integers(expected=1)[0] == 2**24 + 1


def test_reader_reports_inconsistent_lengths():
    writer = PayloadWriter()
    writer.add_array([1.0, 2.0])
    with pytest.raises(FormatError):
        PayloadReader(writer.payload()).read_array(expected=3)
    with pytest.raises(FormatError):
        PayloadReader(writer.payload()[:-2]).read_array()
