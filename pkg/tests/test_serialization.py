import io
import struct
from collections import OrderedDict

import numpy as np
import pytest

from mamfsd.lab.base import FormatError
from mamfsd.lab.serialization import (Checkpoint, checkpoint_bytes, load_checkpoint, load_tensor,
                                      read_tensor, save_checkpoint, save_tensor, split_moments,
                                      write_tensor)


def test_mft1_layout():
    buf = io.BytesIO()
    write_tensor(buf, np.arange(6, dtype=np.float32).reshape(2, 3))
    raw = buf.getvalue()
    assert raw[:4] == b"MFT1"
    assert struct.unpack('<III', raw[4:16]) == (2, 2, 3)
    assert np.frombuffer(raw[16:], dtype='<f4').tolist() == [0, 1, 2, 3, 4, 5]


def test_scalar_and_file_round_trip(tmp_path):
    buf = io.BytesIO()
    write_tensor(buf, np.float32(2.5))
    assert len(buf.getvalue()) == 12
    buf.seek(0)
    assert read_tensor(buf).shape == ()

    video = np.random.default_rng(0).random((4, 3, 5, 5)).astype(np.float32)
    save_tensor(tmp_path / "v.mft", video)
    np.testing.assert_array_equal(load_tensor(tmp_path / "v.mft"), video)


def test_malformed_tensor_files(tmp_path):
    with pytest.raises(FormatError):
        read_tensor(io.BytesIO(b"MFT2" + b"\0" * 8))
    buf = io.BytesIO()
    write_tensor(buf, np.ones(4, dtype=np.float32))
    with pytest.raises(FormatError):
        read_tensor(io.BytesIO(buf.getvalue()[:-2]))
    path = tmp_path / "trailing.mft"
    path.write_bytes(buf.getvalue() + b"\0")
    with pytest.raises(FormatError):
        load_tensor(path)


def test_checkpoint_round_trip_with_optimizer_block(tmp_path):
    tensors = OrderedDict([("stem.w", np.ones((2, 3, 3, 3), dtype=np.float32)),
                           ("stem.b", np.zeros(2, dtype=np.float32))])
    moments = OrderedDict([("stem.w.m", np.full((2, 3, 3, 3), 0.1, dtype=np.float32)),
                           ("stem.w.v", np.full((2, 3, 3, 3), 0.2, dtype=np.float32)),
                           ("stem.b.m", np.zeros(2, dtype=np.float32)),
                           ("stem.b.v", np.zeros(2, dtype=np.float32))])
    path = tmp_path / "run.mfck"
    save_checkpoint(path, Checkpoint(tensors, optimizer_step=7, optimizer_tensors=moments))
    loaded = load_checkpoint(path)
    assert list(loaded.tensors) == ["stem.w", "stem.b"]
    assert loaded.optimizer_step == 7
    m, v = split_moments(loaded)
    np.testing.assert_array_equal(m["stem.w"], moments["stem.w.m"])
    np.testing.assert_array_equal(v["stem.b"], moments["stem.b.v"])


def test_checkpoint_without_optimizer_and_bad_magic(tmp_path):
    raw = checkpoint_bytes(Checkpoint(OrderedDict([("a", np.ones(1, dtype=np.float32))])))
    assert raw[:4] == b"MFCK" and struct.unpack('<I', raw[4:8]) == (1,)
    assert struct.unpack('<H', raw[8:10]) == (1,) and raw[10:11] == b"a"
    path = tmp_path / "plain.mfck"
    path.write_bytes(raw)
    assert load_checkpoint(path).optimizer_step is None

    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(raw + b"JUNK")
    with pytest.raises(FormatError):
        load_checkpoint(path)
