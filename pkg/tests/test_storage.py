import struct

import numpy as np
import pytest
import torch

from udaseg import storage
from udaseg.phantom import LabeledVolume


def test_volume_round_trip_and_header_order(tmp_path, rng):
    img = rng.normal(size=(2, 5, 6)).astype(np.float32)
    lab = rng.integers(0, 4, img.shape).astype(np.uint8)
    conf = rng.random(img.shape).astype(np.float32)
    p = tmp_path / "v.vol"
    storage.write_volume(p, img, lab, (2.0, 1.0, 0.5), "pseudo_B", {"id": "x", "k": 1}, extra={"confidence": conf})
    raw = p.read_bytes()
    assert raw.startswith(storage.VOLUME_MAGIC)
    d = storage.read_volume(p)
    assert np.array_equal(d["intensities"], img) and np.array_equal(d["labels"], lab)
    assert np.array_equal(d["confidence"], conf)
    assert d["spacing"] == (2.0, 1.0, 0.5) and d["domain_tag"] == "pseudo_B" and d["meta"]["k"] == 1
    n = struct.unpack("<I", raw[len(storage.VOLUME_MAGIC):len(storage.VOLUME_MAGIC) + 4])[0]
    header = raw[len(storage.VOLUME_MAGIC) + 4:len(storage.VOLUME_MAGIC) + 4 + n].decode()
    keys = ["shape", "spacing", "domain_tag", "dtype", "label_dtype", "blobs", "meta"]
    assert [header.index(f'"{k}"') for k in keys] == sorted(header.index(f'"{k}"') for k in keys)
    # payload is little-endian intensities then labels
    body = raw[len(storage.VOLUME_MAGIC) + 4 + n:]
    assert np.array_equal(np.frombuffer(body[:img.nbytes], "<f4").reshape(img.shape), img)


def test_labeled_volume_round_trip(tmp_path, rng):
    v = LabeledVolume(rng.normal(size=(2, 4, 4)), np.ones((2, 4, 4), np.int16), (1, 1, 1), "B", "anat1", {"a": 2})
    v.save(tmp_path / "x.vol")
    w = LabeledVolume.load(tmp_path / "x.vol")
    assert w.id == "anat1" and w.meta == {"a": 2} and w.domain_tag == "B"
    assert w.labels.dtype == np.int16 and np.array_equal(w.intensities, v.intensities)


def test_bad_magic_and_truncation(tmp_path, rng):
    p = tmp_path / "bad.vol"
    p.write_bytes(b"nope")
    with pytest.raises(storage.FormatError, match="magic"):
        storage.read_volume(p)
    storage.write_volume(p, np.zeros((2, 2)), np.zeros((2, 2), np.uint8), (1, 1), "A")
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(storage.FormatError, match="truncated"):
        storage.read_volume(p)
    with pytest.raises(OSError, match="missing.vol"):
        storage.read_volume(tmp_path / "missing.vol")


def test_checkpoint_round_trip_and_meta_update(tmp_path):
    sd = {"w": torch.randn(3, 2), "b": torch.arange(4, dtype=torch.int64)}
    p = tmp_path / "m.ckpt"
    storage.write_checkpoint(p, sd, "segmentation", {"x": 1}, 7, 3, {"note": "n"})
    header, state = storage.read_checkpoint(p)
    assert list(header)[:6] == ["kind", "config", "iteration", "seed", "params", "meta"]
    assert header["iteration"] == 7 and header["seed"] == 3
    assert all(torch.equal(sd[k], state[k]) for k in sd)
    storage.update_meta(p, {"provenance": {"config_hash": "abc"}})
    assert storage.read_meta(p) == {"note": "n", "provenance": {"config_hash": "abc"}}
    _, state2 = storage.read_checkpoint(p)
    assert all(torch.equal(sd[k], state2[k]) for k in sd)


def test_hashes_are_canonical(tmp_path):
    assert storage.hash_obj({"a": 1, "b": (1, 2)}) == storage.hash_obj({"b": [1, 2], "a": 1})
    f = tmp_path / "f"
    f.write_bytes(b"abc")
    assert storage.hash_file(f) == storage.hash_file(f)
