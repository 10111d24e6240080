import struct

import numpy as np
import pytest

from mecam import checkpoint
from mecam.errors import BadMagic, CRCMismatch, MissingFileError, TruncatedCheckpoint, UnsupportedVersion
from mecam.model import ModelConfig, build, forward

CFG = ModelConfig(stage_widths=(4, 8, 8, 8), exit_stages=(2, 4), input_size=16)


@pytest.fixture
def blob():
    m = build(CFG, 3)
    m.buffers["stage1.down.bn.running_mean"][:] = 0.125
    return m, checkpoint.to_bytes(m)


def test_round_trip_is_bit_exact(blob, tmp_path):
    m, data = blob
    checkpoint.save(m, tmp_path / "m.ckpt")
    m2 = checkpoint.load(tmp_path / "m.ckpt")
    assert m2.config == m.config
    for k, v in m.state().items():
        assert v.tobytes() == m2.state()[k].tobytes()
    x = np.random.default_rng(0).random((2, 1, 16, 16)).astype(np.float32)
    assert forward(m, x).final_logits.data.tobytes() == forward(m2, x).final_logits.data.tobytes()
    assert checkpoint.to_bytes(m2) == data


def test_bad_magic(blob):
    with pytest.raises(BadMagic):
        checkpoint.from_bytes(b"XXXX" + blob[1][4:])


def test_future_version(blob):
    data = bytearray(blob[1])
    data[4:8] = struct.pack("<I", checkpoint.VERSION + 1)
    with pytest.raises(UnsupportedVersion):
        checkpoint.from_bytes(bytes(data))


def test_truncated(blob):
    with pytest.raises(TruncatedCheckpoint):
        checkpoint.from_bytes(blob[1][:-10])
    with pytest.raises(TruncatedCheckpoint):
        checkpoint.from_bytes(blob[1][:10])


def test_flipped_byte_fails_crc(blob):
    data = bytearray(blob[1])
    data[len(data) // 2] ^= 0x01
    with pytest.raises(CRCMismatch):
        checkpoint.from_bytes(bytes(data))


def test_missing_file(tmp_path):
    with pytest.raises(MissingFileError):
        checkpoint.load(tmp_path / "nope.ckpt")
