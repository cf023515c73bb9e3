import struct

import numpy as np
import pytest

from uniadapt.checkpoint import (MAGIC, Checkpoint, CheckpointError, checksum, decode, encode, from_store,
                                 load_checkpoint, save_checkpoint)

from conftest import make_model


def adapted_store():
    m = make_model("uniadapter", sharing="share_both", include_decoder=True, dtype=np.float32)
    return m.store


def test_round_trip_byte_identical(tmp_path):
    store = adapted_store()
    save_checkpoint(tmp_path / "a.ckpt", store, config_hash="abc", meta={"kind": "adapted"})
    raw = (tmp_path / "a.ckpt").read_bytes()
    ck = load_checkpoint(tmp_path / "a.ckpt")
    assert encode(ck) == raw
    save_checkpoint(tmp_path / "b.ckpt", ck.to_store(), config_hash="abc", meta={"kind": "adapted"})
    assert (tmp_path / "b.ckpt").read_bytes() == raw


def test_aliases_and_trainable_survive(tmp_path):
    store = adapted_store()
    save_checkpoint(tmp_path / "a.ckpt", store)
    back = load_checkpoint(tmp_path / "a.ckpt").to_store()
    assert back.aliases() == store.aliases()
    assert back.trainable == store.trainable
    assert back["adapter.decoder.0.down"] is back["adapter.text.0.down"]
    for n in store.names():
        assert back[n].data.tobytes() == store[n].data.tobytes()


def test_canonical_tensors_written_once():
    store = adapted_store()
    ck = from_store(store)
    assert set(ck.tensors) == set(store.canonical_names())
    assert not set(ck.aliases) & set(ck.tensors)


def test_subset_snapshot_keeps_alias_closure():
    store = adapted_store()
    ck = from_store(store, names=["adapter.visual.0.down"])
    assert list(ck.tensors) == ["adapter.text.0.down"]
    assert ck.aliases["adapter.visual.0.down"] == "adapter.text.0.down"


def test_header_is_little_endian():
    buf = encode(Checkpoint({"w": np.array([1.0, 2.0], dtype=np.float32)}))
    assert buf[:4] == MAGIC
    assert struct.unpack_from("<II", buf, 4) == (1, 1)
    assert struct.unpack_from("<I", buf, 12) == (1,)
    assert buf[16:17] == b"w"
    assert struct.unpack_from("<IQ", buf, 17) == (1, 2)
    assert struct.unpack_from("<2f", buf, 29) == (1.0, 2.0)


def test_scalar_tensor_round_trip():
    ck = Checkpoint({"t": np.array(0.07, dtype=np.float32)})
    back = decode(encode(ck))
    assert back.tensors["t"].shape == () and back.tensors["t"] == np.float32(0.07)


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:-5], "truncated"),
    (lambda b: b + b"\0", "trailing"),
])
def test_corrupt_inputs_rejected(mutate, msg):
    buf = encode(Checkpoint({"w": np.ones(3, dtype=np.float32)}, meta={"k": 1}))
    with pytest.raises(CheckpointError, match=msg):
        decode(mutate(buf))


def test_dangling_alias_and_unknown_trainable():
    with pytest.raises(CheckpointError, match="dangling"):
        decode(encode(Checkpoint({"w": np.ones(1, np.float32)}, aliases={"v": "nope"})))
    with pytest.raises(CheckpointError, match="unknown"):
        decode(encode(Checkpoint({"w": np.ones(1, np.float32)}, trainable=["z"])))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_checksum_tracks_bytes():
    store = adapted_store()
    names = ["visual.0.attn.q", "text.0.ffn.w1"]
    a = checksum(store, names)
    assert a == checksum(store, list(reversed(names)))
    store["visual.0.attn.q"].data[0, 0] += 1e-3
    assert checksum(store, names) != a
