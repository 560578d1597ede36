import struct

import numpy as np
import pytest

from taskmerge.checkpoint import (MAGIC, VERSION, CheckpointFormatError, CheckpointIOError,
                                  CheckpointVersionError, ChecksumError, decode_checkpoint,
                                  encode_checkpoint, load_checkpoint, save_checkpoint)


def test_roundtrip_at_single_precision(tmp_path, small_model):
    spec, theta = small_model
    p = save_checkpoint(tmp_path / "a" / "m.tvck", theta, spec, {"task": 2, "note": "x"})
    ck = load_checkpoint(p)
    np.testing.assert_array_equal(ck.theta.values, theta.values.astype(np.float32))
    assert ck.theta.shape_map == theta.shape_map
    assert ck.spec == spec and ck.meta == {"task": 2, "note": "x"}
    assert p.read_bytes()[:4] == MAGIC


def test_encoding_is_deterministic(small_model):
    assert encode_checkpoint(*small_model[::-1]) == encode_checkpoint(*small_model[::-1])


def test_flipped_payload_byte(small_model):
    raw = bytearray(encode_checkpoint(*small_model[::-1]))
    raw[-10] ^= 0x01
    with pytest.raises(ChecksumError) as info:
        decode_checkpoint(bytes(raw))
    assert info.value.found != info.value.expected


def test_future_version(small_model):
    raw = encode_checkpoint(*small_model[::-1], version=VERSION + 1)
    with pytest.raises(CheckpointVersionError) as info:
        decode_checkpoint(raw)
    assert (info.value.found, info.value.expected) == (VERSION + 1, VERSION)


@pytest.mark.parametrize("mutate", [
    lambda r: b"XXXX" + r[4:],
    lambda r: r[:-1],
    lambda r: r[:8] + struct.pack("<I", 10**6) + r[12:],
    lambda r: r + b"\x00",
])
def test_malformed_files(small_model, mutate):
    raw = encode_checkpoint(*small_model[::-1])
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(mutate(raw))


def test_io_errors(tmp_path, small_model):
    with pytest.raises(CheckpointIOError):
        load_checkpoint(tmp_path / "missing.tvck")
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        save_checkpoint(blocker / "x.tvck", small_model[1])
