import struct

import numpy as np
import pytest

from avdet.checkpoint import MAGIC, load_checkpoint, save_checkpoint


def test_round_trip_and_bytes(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"b": rng.standard_normal((3, 4)).astype(np.float32), "a": np.arange(5, dtype=np.float32)}
    meta = {"kind": "x", "params": {"lr": 0.1, "grid": [4, 12]}}
    save_checkpoint(tmp_path / "one", arrays, meta)
    save_checkpoint(tmp_path / "two", dict(reversed(list(arrays.items()))), meta)
    assert (tmp_path / "one").read_bytes() == (tmp_path / "two").read_bytes()
    got, m = load_checkpoint(tmp_path / "one")
    assert m == meta
    assert set(got) == {"a", "b"}
    assert all(np.array_equal(got[k], arrays[k]) for k in arrays)


def test_rejects_foreign_files(tmp_path):
    (tmp_path / "junk").write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "junk")
    (tmp_path / "future").write_bytes(MAGIC + struct.pack("<IQ", 99, 2) + b"{}")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "future")
