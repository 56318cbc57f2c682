import struct

import numpy as np
import pytest

from shoeprint_lab import checkpoint as C
from shoeprint_lab import training as TR
from shoeprint_lab import zoo
from shoeprint_lab.optim import AdamState


def _trained(seed=0):
    g = zoo.build("mm-early", zoo.ArchConfig.check(), seed=seed)
    r = np.random.default_rng(seed)
    X, y = r.random((6, 16, 16)), r.uniform(10, 60, 6)
    TR.init_output_bias(g, y)
    res = TR.train(g, X, y, "mse", epochs=1, batch_size=3)
    return g, res.state


def test_round_trip_is_bit_exact(tmp_path):
    g, state = _trained()
    path = tmp_path / "m.ckpt"
    C.save_model(g, path, step=state.step, optimizer=state)
    g2, ckpt = C.load_model(path)
    assert ckpt.step == state.step == ckpt.optimizer.step
    for k, v in g.state_arrays().items():
        assert g2.state_arrays()[k].tobytes() == v.astype(np.float32).astype(np.float64).tobytes()
    for k in state.m:
        assert np.array_equal(ckpt.optimizer.m[k], state.m[k].astype(np.float32))
    # a second save of the restored graph reproduces the file exactly
    C.save_model(g2, tmp_path / "again.ckpt", step=ckpt.step, optimizer=ckpt.optimizer)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_file_size_arithmetic(tmp_path):
    g, state = _trained(1)
    arrays = g.state_arrays()
    size = C.save_checkpoint(g, tmp_path / "a", 3)
    by_hand = 8 + 4 + 32 + 8 + 4 + sum(2 + len(k) + 1 + 4 * v.ndim + 4 * v.size for k, v in arrays.items()) + 1
    assert size == by_hand == C.expected_size(arrays) == (tmp_path / "a").stat().st_size
    size = C.save_checkpoint(g, tmp_path / "b", 3, state)
    assert size == C.expected_size(arrays, state) == (tmp_path / "b").stat().st_size


def test_header_layout(tmp_path):
    g, _ = _trained()
    C.save_checkpoint(g, tmp_path / "h", step=77)
    data = (tmp_path / "h").read_bytes()
    assert data[:8] == b"SHNET1\0\0"
    assert struct.unpack_from("<I", data, 8)[0] == C.VERSION
    assert data[12:44] == g.fingerprint()
    assert struct.unpack_from("<Q", data, 44)[0] == 77
    assert struct.unpack_from("<I", data, 52)[0] == len(g.state_arrays())


def test_fingerprint_mismatch(tmp_path):
    g, _ = _trained()
    C.save_checkpoint(g, tmp_path / "m")
    other = zoo.build("mm-early", zoo.ArchConfig(input_hw=(16, 16), base_filters=2, blocks=3,
                                                 convs_per_block=2, fc_widths=(8, 8, 9)))
    with pytest.raises(C.CheckpointError, match="fingerprint"):
        C.restore(other, C.load_checkpoint(tmp_path / "m"))


def test_corrupt_and_truncated(tmp_path):
    g, state = _trained()
    C.save_checkpoint(g, tmp_path / "m", optimizer=state)
    data = (tmp_path / "m").read_bytes()
    with pytest.raises(C.CheckpointError, match="magic"):
        C.decode(b"XXXXXXXX" + data[8:])
    for cut in (5, 30, 60, len(data) // 2, len(data) - 1):
        with pytest.raises(C.CheckpointError):
            C.decode(data[:cut])
    with pytest.raises(C.CheckpointError):
        C.decode(data + b"\0")


def test_missing_sidecar(tmp_path):
    g, _ = _trained()
    C.save_checkpoint(g, tmp_path / "m")
    with pytest.raises(C.CheckpointError, match="sidecar"):
        C.load_model(tmp_path / "m")


def test_empty_optimizer_state_round_trip():
    g, _ = _trained()
    ck = C.decode(C.encode(C.from_graph(g, 2, AdamState())))
    assert ck.optimizer.step == 0 and ck.optimizer.m == {}
