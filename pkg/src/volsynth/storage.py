"""On-disk formats: raw array containers, dataset manifests, checkpoints, logs.

Arrays are stored chunk-free as little-endian C-order bytes (`float32` for
volumes, `uint8` for labels) next to a JSON sidecar carrying shape/dtype
metadata, so any language can read them back bit-exactly.
"""

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import CLASS_NAMES

_DTYPES = {"float32": "<f4", "uint8": "|u1"}

SPLITS = ("train", "val", "test")
PROVENANCES = ("phantom", "synthetic")


def write_array(base: Path, arr: np.ndarray) -> Path:
    """Write ``base.bin`` + ``base.json``; returns the ``.bin`` path."""
    base = Path(base)
    if arr.dtype == np.float32:
        dtype = "float32"
    elif arr.dtype == np.uint8:
        dtype = "uint8"
    else:
        raise ValueError(f"unsupported array dtype {arr.dtype}; use float32 or uint8")
    data = np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes()
    bin_path = base.with_suffix(".bin")
    bin_path.write_bytes(data)
    sidecar = {
        "shape": list(arr.shape),
        "dtype": dtype,
        "order": "C",
        "byte_order": "little",
    }
    if dtype == "uint8":
        sidecar["class_names"] = list(CLASS_NAMES)
    base.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return bin_path


def read_array(path: Path) -> np.ndarray:
    """Read an array written by :func:`write_array` (accepts .bin or bare base path)."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".bin", ".json") else path
    meta = json.loads(base.with_suffix(".json").read_text())
    raw = base.with_suffix(".bin").read_bytes()
    arr = np.frombuffer(raw, dtype=_DTYPES[meta["dtype"]]).reshape(meta["shape"])
    return arr.astype(meta["dtype"])


@dataclass
class ManifestEntry:
    id: str
    volume: str  # path relative to the manifest file
    label: str
    split: str
    provenance: str
    seed: int


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None  # directory the relative paths resolve against

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("manifest ids must be unique")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"bad split {e.split!r} for id {e.id}")
            if e.provenance not in PROVENANCES:
                raise ValueError(f"bad provenance {e.provenance!r} for id {e.id}")

    def by_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def volume_path(self, entry: ManifestEntry) -> Path:
        return (self.root / entry.volume) if self.root else Path(entry.volume)

    def label_path(self, entry: ManifestEntry) -> Path:
        return (self.root / entry.label) if self.root else Path(entry.label)

    def load_volume(self, entry: ManifestEntry) -> np.ndarray:
        return read_array(self.volume_path(entry))

    def load_label(self, entry: ManifestEntry) -> np.ndarray:
        return read_array(self.label_path(entry))

    def to_json(self) -> str:
        payload = {
            "format": "volsynth-manifest-v1",
            "entries": [vars(e) for e in self.entries],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        self.root = path.parent
        return path

    @classmethod
    def load(cls, path: Path) -> "Manifest":
        path = Path(path)
        payload = json.loads(path.read_text())
        entries = [ManifestEntry(**e) for e in payload["entries"]]
        return cls(entries=entries, root=path.parent)


def save_checkpoint(base: Path, arrays: dict[str, np.ndarray], config: dict) -> Path:
    """Persist named arrays as ``base.npz`` plus a JSON config echo at ``base.json``."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    np.savez(base.with_suffix(".npz"), **arrays)
    meta = dict(config)
    meta["checkpoint_id"] = checkpoint_id(arrays)
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return base.with_suffix(".npz")


def load_checkpoint(base: Path) -> tuple[dict[str, np.ndarray], dict]:
    base = Path(base)
    with np.load(base.with_suffix(".npz")) as npz:
        arrays = {k: npz[k] for k in npz.files}
    config = json.loads(base.with_suffix(".json").read_text())
    return arrays, config


def checkpoint_id(arrays: dict[str, np.ndarray]) -> str:
    """Content hash of named arrays (independent of file timestamps)."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:12]


def write_csv_log(path: Path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    path.write_text(buf.getvalue())
    return path
