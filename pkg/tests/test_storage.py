import json

import numpy as np
import pytest

from volsynth.storage import (
    Manifest,
    ManifestEntry,
    checkpoint_id,
    load_checkpoint,
    read_array,
    save_checkpoint,
    write_array,
    write_csv_log,
)


def test_array_round_trip_float32(tmp_path, rng):
    arr = rng.random((5, 4, 3)).astype(np.float32)
    write_array(tmp_path / "vol", arr)
    back = read_array(tmp_path / "vol.bin")
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)
    sidecar = json.loads((tmp_path / "vol.json").read_text())
    assert sidecar["shape"] == [5, 4, 3]
    assert sidecar["dtype"] == "float32"
    assert sidecar["byte_order"] == "little"


def test_array_round_trip_uint8_has_class_names(tmp_path, rng):
    arr = rng.integers(0, 5, size=(4, 4, 2)).astype(np.uint8)
    write_array(tmp_path / "lab", arr)
    assert np.array_equal(read_array(tmp_path / "lab"), arr)
    sidecar = json.loads((tmp_path / "lab.json").read_text())
    assert sidecar["class_names"][0] == "background"
    assert len(sidecar["class_names"]) == 5


def test_array_rejects_other_dtypes(tmp_path):
    with pytest.raises(ValueError, match="dtype"):
        write_array(tmp_path / "bad", np.zeros((2, 2), dtype=np.float64))


def _entry(i, split="train"):
    return ManifestEntry(
        id=f"item_{i}", volume=f"v{i}.bin", label=f"l{i}.bin",
        split=split, provenance="phantom", seed=i,
    )


def test_manifest_round_trip(tmp_path):
    manifest = Manifest(entries=[_entry(0), _entry(1, "val"), _entry(2, "test")])
    path = manifest.save(tmp_path / "manifest.json")
    back = Manifest.load(path)
    assert [e.id for e in back.entries] == ["item_0", "item_1", "item_2"]
    assert back.by_split("val")[0].id == "item_1"
    assert back.root == tmp_path


def test_manifest_rejects_duplicate_ids():
    with pytest.raises(ValueError, match="unique"):
        Manifest(entries=[_entry(0), _entry(0)])


def test_manifest_rejects_bad_split():
    with pytest.raises(ValueError, match="split"):
        Manifest(entries=[_entry(0, split="holdout")])


def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"w": rng.random((3, 3)).astype(np.float32), "b": np.zeros(3, dtype=np.float32)}
    save_checkpoint(tmp_path / "ckpt", arrays, {"stage": "test", "steps": 5})
    back, meta = load_checkpoint(tmp_path / "ckpt")
    assert set(back) == {"w", "b"}
    assert np.array_equal(back["w"], arrays["w"])
    assert meta["stage"] == "test"
    assert meta["checkpoint_id"] == checkpoint_id(arrays)


def test_checkpoint_id_is_content_addressed(rng):
    a = rng.random((4, 4)).astype(np.float32)
    b = rng.random(4).astype(np.float32)
    assert checkpoint_id({"a": a, "b": b}) == checkpoint_id({"b": b, "a": a})
    assert checkpoint_id({"a": a}) != checkpoint_id({"a": a + 1})


def test_csv_log_deterministic_format(tmp_path):
    rows = [[0, 0.5, 0.25], [1, 0.125, 0.0625]]
    p1 = write_csv_log(tmp_path / "a.csv", ["step", "loss", "recon"], rows)
    p2 = write_csv_log(tmp_path / "b.csv", ["step", "loss", "recon"], rows)
    assert p1.read_text() == p2.read_text()
    assert p1.read_text().splitlines()[0] == "step,loss,recon"
