"""Dataset ingestion (MNIST IDX, CIFAR-10 binary), PPM/PGM images, containers.

Pixels ingest from [0,255] bytes to [-1,1] floats via v/127.5 - 1 and are
kept as float32 thereafter; adversarial perturbations are sub-byte, so
containers persist float tensors (BFT1) rather than re-quantized bytes,
with a JSON manifest carrying provenance, the attack configuration, and
alignment back to the clean sources.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .networks import load_tensors, save_tensors

__all__ = [
    "Dataset",
    "read_idx",
    "read_cifar",
    "read_ppm",
    "write_ppm",
    "bytes_to_unit",
    "unit_to_bytes",
    "perturbation_to_bytes",
    "load_mnist",
    "load_cifar10",
    "save_dataset",
    "load_dataset",
    "data_root",
]

IDX_MAGIC_LABELS = 0x00000801
IDX_MAGIC_IMAGES = 0x00000803
CIFAR_RECORD = 3073


def bytes_to_unit(b: np.ndarray) -> np.ndarray:
    """Map [0,255] bytes to [-1,1] floats (byte 0 -> -1.0, byte 255 -> +1.0)."""
    return (b.astype(np.float32) / np.float32(127.5)) - np.float32(1.0)


def unit_to_bytes(v: np.ndarray) -> np.ndarray:
    """Quantize [-1,1] floats to bytes: round(127.5*(v+1)), clamped."""
    return np.clip(np.rint(127.5 * (np.asarray(v, dtype=np.float64) + 1.0)), 0, 255).astype(np.uint8)


def perturbation_to_bytes(delta: np.ndarray):
    """Render a perturbation at full byte range; returns (bytes, scale used)."""
    delta = np.asarray(delta, dtype=np.float64)
    scale = float(np.abs(delta).max())
    if scale == 0.0:
        return np.full(delta.shape, 128, dtype=np.uint8), 0.0
    return unit_to_bytes(delta / scale), scale


@dataclass
class Dataset:
    """Images (N,H,W,C) in [-1,1] with integer labels and provenance."""

    images: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=lambda: {"kind": "natural"})
    alignment: np.ndarray | None = None  # indices into the clean source set

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (N,H,W,C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.images[idx],
            self.labels[idx],
            provenance=self.provenance,
            alignment=None if self.alignment is None else self.alignment[idx],
        )

    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# IDX (MNIST)
# ---------------------------------------------------------------------------


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Read one IDX file; images come back as (N,H,W,1) float32 in [-1,1], labels as int64."""
    data = _read_maybe_gzip(path)
    if len(data) < 4:
        raise DataFormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic == IDX_MAGIC_LABELS:
        ndim = 1
    elif magic == IDX_MAGIC_IMAGES:
        ndim = 3
    else:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    if any(d <= 0 for d in dims) or int(np.prod(dims, dtype=np.int64)) > 1 << 33:
        raise DataFormatError(f"{path}: implausible IDX dimensions {dims}")
    need = 4 + 4 * ndim + int(np.prod(dims, dtype=np.int64))
    if len(data) != need:
        raise DataFormatError(f"{path}: expected {need} bytes, got {len(data)}")
    body = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)
    if magic == IDX_MAGIC_LABELS:
        return body.astype(np.int64)
    return bytes_to_unit(body)[..., None]


def load_mnist(root=None) -> tuple[Dataset, Dataset]:
    """Load the four canonical MNIST IDX files from `root`/mnist (gzipped or plain)."""
    root = Path(root) if root else data_root() / "mnist"

    def find(stem):
        for suffix in ("", ".gz"):
            p = root / (stem + suffix)
            if p.exists():
                return p
        raise DataFormatError(f"missing MNIST file {stem} under {root}")

    train = Dataset(read_idx(find("train-images-idx3-ubyte")), read_idx(find("train-labels-idx1-ubyte")))
    test = Dataset(read_idx(find("t10k-images-idx3-ubyte")), read_idx(find("t10k-labels-idx1-ubyte")))
    return train, test


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------


def planar_to_interleaved(planes: np.ndarray) -> np.ndarray:
    """(N,3,32,32) channel-planar to (N,32,32,3)."""
    return planes.transpose(0, 2, 3, 1)


def interleaved_to_planar(images: np.ndarray) -> np.ndarray:
    return images.transpose(0, 3, 1, 2)


def read_cifar(path) -> Dataset:
    """Read one CIFAR-10 binary batch file (3073-byte records, channel-planar)."""
    data = Path(path).read_bytes()
    if len(data) == 0 or len(data) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {len(data)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    planes = rec[:, 1:].reshape(-1, 3, 32, 32)
    return Dataset(bytes_to_unit(planar_to_interleaved(planes)), labels)


def load_cifar10(root=None) -> tuple[Dataset, Dataset]:
    root = Path(root) if root else data_root() / "cifar10"
    hits = sorted(root.rglob("data_batch_*.bin"))
    if not hits:
        raise DataFormatError(f"no CIFAR-10 data_batch_*.bin under {root}")
    parts = [read_cifar(p) for p in hits]
    train = Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))
    test_files = sorted(root.rglob("test_batch.bin"))
    if not test_files:
        raise DataFormatError(f"no CIFAR-10 test_batch.bin under {root}")
    test = read_cifar(test_files[0])
    return train, test


# ---------------------------------------------------------------------------
# PPM / PGM
# ---------------------------------------------------------------------------


def _read_token(data: bytes, off: int):
    while off < len(data):
        if data[off : off + 1].isspace():
            off += 1
        elif data[off : off + 1] == b"#":
            while off < len(data) and data[off] != 0x0A:
                off += 1
        else:
            break
    start = off
    while off < len(data) and not data[off : off + 1].isspace():
        off += 1
    if start == off:
        raise DataFormatError("malformed PPM/PGM header")
    return data[start:off], off


def read_ppm(path) -> np.ndarray:
    """Binary P5 (grayscale) or P6 (RGB), maxval 255; returns uint8 (H,W,C)."""
    data = Path(path).read_bytes()
    tag, off = _read_token(data, 0)
    if tag not in (b"P5", b"P6"):
        raise DataFormatError(f"{path}: unsupported format {tag!r} (binary P5/P6 only)")
    channels = 1 if tag == b"P5" else 3
    w, off = _read_token(data, off)
    h, off = _read_token(data, off)
    maxval, off = _read_token(data, off)
    if int(maxval) != 255:
        raise DataFormatError(f"{path}: unsupported maxval {int(maxval)} (255 only)")
    off += 1  # single whitespace after maxval
    w, h = int(w), int(h)
    need = w * h * channels
    if len(data) - off < need:
        raise DataFormatError(f"{path}: expected {need} pixel bytes, got {len(data) - off}")
    return np.frombuffer(data, np.uint8, count=need, offset=off).reshape(h, w, channels).copy()


def write_ppm(path, image: np.ndarray) -> None:
    """Write (H,W), (H,W,1) or (H,W,3); float inputs are quantized from [-1,1]."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = unit_to_bytes(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DataFormatError(f"cannot write image of shape {np.asarray(image).shape}")
    tag = b"P5" if img.shape[2] == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{img.shape[1]} {img.shape[0]}\n255\n".encode())
        f.write(np.ascontiguousarray(img).tobytes())


# ---------------------------------------------------------------------------
# Dataset container (tensor checkpoint + JSON manifest)
# ---------------------------------------------------------------------------


def save_dataset(path, ds: Dataset) -> None:
    path = Path(path)
    tensors = [ds.images, ds.labels.astype(np.float32)]
    if ds.alignment is not None:
        tensors.append(np.asarray(ds.alignment, dtype=np.float32))
    save_tensors(path, tensors)
    manifest = {
        "schema": "bfshield-dataset-v1",
        "count": len(ds),
        "image_shape": list(ds.images.shape[1:]),
        "provenance": ds.provenance,
        "has_alignment": ds.alignment is not None,
        "sha256": ds.sha256(),
    }
    path.with_name(path.name + ".json").write_text(json.dumps(manifest, indent=2))


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = json.loads(path.with_name(path.name + ".json").read_text())
    tensors = load_tensors(path)
    images, labels = tensors[0], tensors[1].astype(np.int64)
    alignment = tensors[2].astype(np.int64) if manifest.get("has_alignment") else None
    ds = Dataset(images, labels, provenance=manifest.get("provenance", {}), alignment=alignment)
    if ds.sha256() != manifest["sha256"]:
        raise DataFormatError(f"{path}: dataset hash mismatch against manifest")
    return ds


def data_root() -> Path:
    return Path(os.environ.get("BFSHIELD_DATA", "data"))
