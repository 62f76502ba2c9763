import struct

import numpy as np
import pytest

from checkpoint import (
    CheckpointData,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from errors import CheckpointVersionError, CorruptCheckpointError


def sample_data():
    return CheckpointData(
        tensors={"encoder.fc0.weight": np.arange(6.0).reshape(2, 3), "scalar": np.array(1.5)},
        optimizer={"m.encoder.fc0.weight": np.ones((2, 3))},
        meta={"step": 7, "config": {"preset": "mazebase-small"}, "rng": {"state": 2 ** 100}},
    )


def test_decode_restores_tensors_and_meta():
    data = decode_checkpoint(encode_checkpoint(sample_data()))
    np.testing.assert_array_equal(data.tensors["encoder.fc0.weight"], np.arange(6.0).reshape(2, 3))
    assert data.tensors["scalar"].shape == ()
    assert data.meta["rng"]["state"] == 2 ** 100
    assert list(data.optimizer) == ["m.encoder.fc0.weight"]


def test_reencoding_is_byte_identical():
    payload = encode_checkpoint(sample_data())
    assert encode_checkpoint(decode_checkpoint(payload)) == payload


def test_header_layout():
    payload = encode_checkpoint(sample_data())
    assert payload[:4] == b"ICF1"
    assert struct.unpack("<I", payload[4:8]) == (1,)
    assert struct.unpack("<Q", payload[8:16]) == (2,)


@pytest.mark.parametrize("cut", [3, 10, 40, -1])
def test_truncated_payload_is_corrupt(cut):
    payload = encode_checkpoint(sample_data())
    with pytest.raises(CorruptCheckpointError):
        decode_checkpoint(payload[:cut])


def test_bad_magic_and_trailing_bytes():
    payload = encode_checkpoint(sample_data())
    with pytest.raises(CorruptCheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + payload[4:])
    with pytest.raises(CorruptCheckpointError, match="trailing"):
        decode_checkpoint(payload + b"\x00")


def test_unsupported_version():
    payload = encode_checkpoint(sample_data())
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(payload[:4] + struct.pack("<I", 2) + payload[8:])


def test_save_and_load(tmp_path):
    path = tmp_path / "ckpt" / "latest.icf"
    path.parent.mkdir()
    save_checkpoint(str(path), sample_data())
    assert load_checkpoint(str(path)).meta["step"] == 7
    assert [p.name for p in path.parent.iterdir()] == ["latest.icf"]


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / "missing.icf"))
