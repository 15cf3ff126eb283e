import struct

import numpy as np
import pytest

from gplab import tensor as T
from gplab.checkpoint import (
    BadMagicError, Checkpoint, CheckpointError, ConfigMismatchError, DigestMismatchError,
    TruncatedCheckpointError, VersionMismatchError, load_checkpoint, save_checkpoint,
)
from gplab.model import build, forward, get_spec
from gplab.tensor import Tensor


def _trained_like(seed=0):
    """A network whose running statistics have moved off their initial values."""
    net = build(get_spec("toy-B0"), seed=seed)
    x = Tensor(np.random.default_rng(seed).normal(size=(4, 3, 16, 16)).astype(np.float32))
    with T.no_grad():
        forward(net, x, "train")
    return net


@pytest.fixture
def saved(tmp_path):
    net = _trained_like()
    ck = Checkpoint("toy-B0", 7, dict(net.state()), {"note": "x"}, bytes(range(32)))
    path = save_checkpoint(tmp_path / "c.gplb", ck)
    return net, path


def test_round_trip_logits_bit_identical(saved):
    net, path = saved
    probe = Tensor(np.random.default_rng(5).normal(size=(3, 3, 24, 24)).astype(np.float32))
    with T.no_grad():
        before = forward(net, probe, "eval").data
        after = forward(load_checkpoint(path).network(), probe, "eval").data
    assert before.tobytes() == after.tobytes()


def test_metadata_round_trip(saved):
    _, path = saved
    ck = load_checkpoint(path)
    assert (ck.model_name, ck.epoch, ck.meta, ck.config_digest) == ("toy-B0", 7, {"note": "x"}, bytes(range(32)))


def test_header_layout(saved):
    _, path = saved
    raw = path.read_bytes()
    magic, version = struct.unpack_from("<4sI", raw)
    assert magic == b"GPLB" and version == 1
    (length,) = struct.unpack_from("<Q", raw, 40)
    assert len(raw) == 80 + length


def test_save_is_deterministic(saved, tmp_path):
    net, path = saved
    ck = Checkpoint("toy-B0", 7, dict(net.state()), {"note": "x"}, bytes(range(32)))
    assert save_checkpoint(tmp_path / "again.gplb", ck).read_bytes() == path.read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_bad_magic(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError, match="magic"):
        load_checkpoint(path)


def test_version_mismatch(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError, match="version 99"):
        load_checkpoint(path)


@pytest.mark.parametrize("keep", [10, 79, 500])
def test_truncated(saved, keep):
    _, path = saved
    path.write_bytes(path.read_bytes()[:keep])
    with pytest.raises(TruncatedCheckpointError, match="truncated"):
        load_checkpoint(path)


def test_digest_mismatch(saved):
    _, path = saved
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(DigestMismatchError, match="digest"):
        load_checkpoint(path)


def test_config_mismatch(saved):
    _, path = saved
    assert load_checkpoint(path, expected_digest=bytes(range(32))).epoch == 7
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expected_digest=bytes(32))


def test_errors_are_distinct():
    kinds = {BadMagicError, VersionMismatchError, TruncatedCheckpointError, DigestMismatchError, ConfigMismatchError}
    assert all(issubclass(k, CheckpointError) for k in kinds)
    assert len(kinds) == 5


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "nope.gplb")


def test_cross_spec_rejected(saved):
    _, path = saved
    ck = load_checkpoint(path)
    with pytest.raises(CheckpointError, match="toy-B1"):
        ck.load_into(build(get_spec("toy-B1")))
    # the registry check itself, independent of the name guard
    with pytest.raises(ValueError, match="registry mismatch|shape mismatch"):
        build(get_spec("toy-B1")).load_state(ck.model_state)


def test_shape_mismatch_named(saved):
    net, _ = saved
    state = dict(net.state())
    state["param/classifier.bias"] = np.zeros(7, np.float32)
    with pytest.raises(ValueError, match="classifier.bias"):
        build(get_spec("toy-B0")).load_state(state)
