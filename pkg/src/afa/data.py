"""Dataset ingestion (IDX and CIFAR-10 binary), batching, and persistence.

Loaders are pure functions of file bytes and never emit a pixel outside
[0, 1] or a label out of range; malformed input is rejected with the byte
offset of the problem, never half parsed.  Checkpoints live in a custom
versioned container: a magic string, a JSON header (sorted keys), and a raw
little-endian float64 payload with a SHA-256 integrity digest.  Writes are
atomic (temp file + rename) and the bytes are a deterministic function of
the stored state, so identical runs produce identical files.
"""

from __future__ import annotations

import dataclasses
import gzip
import hashlib
import json
import os
import struct

import numpy as np

from . import nn

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 pixel bytes
CKPT_MAGIC = b"AFACKPT1"
CKPT_VERSION = 1


class DataFormatError(ValueError):
    """Malformed dataset file (message carries the byte offset)."""


class CheckpointError(ValueError):
    """Unreadable, corrupted, or version-incompatible checkpoint."""


@dataclasses.dataclass
class Dataset:
    """Images as N x C x H x W floats in [0,1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    name: str
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.labels) != len(self.images):
            raise DataFormatError(
                f"inconsistent dataset: images {self.images.shape}, labels {self.labels.shape}")

    def __len__(self):
        return len(self.images)

    def take(self, n: int) -> "Dataset":
        """First n records in canonical order (the reproducible subset rule)."""
        if not 1 <= n <= len(self):
            raise ValueError(f"cannot take {n} of {len(self)} records")
        name = self.name if n == len(self) else f"{self.name}_SUBSET"
        return Dataset(self.images[:n], self.labels[:n], self.split, name, self.num_classes)


# ---------------------------------------------------------------------------
# IDX (MNIST layout)


def _read_file(path: str) -> bytes:
    if os.path.exists(path):
        with open(path, "rb") as f:
            return f.read()
    if os.path.exists(path + ".gz"):
        with gzip.open(path + ".gz", "rb") as f:
            return f.read()
    raise FileNotFoundError(path)


def _read_idx(path: str, want_magic: int) -> np.ndarray:
    raw = _read_file(path)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header at byte 0 (need 4, have {len(raw)})")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != want_magic:
        raise DataFormatError(
            f"{path}: bad magic 0x{magic:08x} at byte 0 (expected 0x{want_magic:08x})")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError(f"{path}: truncated dimension table at byte {len(raw)} "
                              f"(need {head})")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) != head + count:
        raise DataFormatError(f"{path}: payload length mismatch at byte {len(raw)} "
                              f"(expected {head + count} bytes for dims {dims})")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist(data_dir: str, split: str = "train") -> Dataset:
    """Parse the two IDX files of one MNIST-layout split, scaled to [0, 1]."""
    if split not in _MNIST_FILES:
        raise ValueError(f"split must be train or test, got {split!r}")
    img_name, lbl_name = _MNIST_FILES[split]
    images = _read_idx(os.path.join(data_dir, img_name), IDX_IMAGE_MAGIC)
    labels = _read_idx(os.path.join(data_dir, lbl_name), IDX_LABEL_MAGIC)
    if images.ndim != 3:
        raise DataFormatError(f"{img_name}: expected 3 dimensions, got {images.ndim}")
    if len(labels) != len(images):
        raise DataFormatError(
            f"{lbl_name}: {len(labels)} labels for {len(images)} images")
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"{lbl_name}: label {labels.max()} out of range")
    x = (images.astype(np.float64) / 255.0)[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), split, "MNIST")


def write_idx_images(path: str, images: np.ndarray):
    """Serialize (N, H, W) uint8 images in IDX layout (re-serialization oracle)."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGE_MAGIC))
        f.write(struct.pack(">3I", *images.shape))
        f.write(images.tobytes())


def write_idx_labels(path: str, labels: np.ndarray):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", IDX_LABEL_MAGIC))
        f.write(struct.pack(">I", len(labels)))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches


_CIFAR_FILES = {
    "train": ("data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
              "data_batch_4.bin", "data_batch_5.bin"),
    "test": ("test_batch.bin",),
}


def _parse_cifar_file(path: str):
    raw = _read_file(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
        raise DataFormatError(f"{path}: length {len(raw)} is not a multiple of "
                              f"{CIFAR_RECORD}-byte records (offset {len(raw) % CIFAR_RECORD} "
                              f"into the last record)")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0]
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{path}: label {labels[bad]} out of range at byte "
                              f"{bad * CIFAR_RECORD}")
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(data_dir: str, split: str = "train") -> Dataset:
    """Parse CIFAR-10 binary batches: 3073-byte records, R/G/B planes."""
    if split not in _CIFAR_FILES:
        raise ValueError(f"split must be train or test, got {split!r}")
    parts = []
    for fname in _CIFAR_FILES[split]:
        path = os.path.join(data_dir, fname)
        if not (os.path.exists(path) or os.path.exists(path + ".gz")):
            if fname == "data_batch_1.bin" or split == "test":
                raise FileNotFoundError(path)
            continue  # fewer than five training batches is fine for subsets
        parts.append(_parse_cifar_file(path))
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    x = images.astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), split, "CIFAR10")


def write_cifar10(path: str, images: np.ndarray, labels: np.ndarray):
    """Serialize (N, 3, 32, 32) uint8 images + labels as one binary batch file."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    records = np.empty((len(images), CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images.reshape(len(images), -1)
    with open(path, "wb") as f:
        f.write(records.tobytes())


# ---------------------------------------------------------------------------
# batching and augmentation


def batches(ds: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True):
    """Deterministic shuffled partition; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = (np.random.default_rng(seed).permutation(len(ds)) if shuffle
             else np.arange(len(ds)))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def augment(images: np.ndarray, rng) -> np.ndarray:
    """Pad-4 random crop plus random horizontal flip (training-time only)."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (4, 4), (4, 4)))
    out = np.empty_like(images)
    offs = rng.integers(0, 9, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offs[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


# ---------------------------------------------------------------------------
# checkpoint container


@dataclasses.dataclass
class Checkpoint:
    format_version: int
    arch: nn.Architecture
    tensors: dict
    training_state: dict


def save_checkpoint(path: str, arch: nn.Architecture, tensors: dict,
                    training_state: dict = None):
    """Write the container atomically; bytes are deterministic in the inputs."""
    names = sorted(tensors)
    payload = bytearray()
    table = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        table.append([name, list(arr.shape), len(payload), arr.nbytes])
        payload.extend(arr.tobytes())
    header = {
        "format_version": CKPT_VERSION,
        "architecture": arch.to_dict(),
        "tensors": table,
        "training_state": training_state or {},
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(bytes(payload))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    """Parse and integrity-check a container; never returns partial state."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header (need {16 + hlen} bytes)")
    try:
        header = json.loads(raw[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from None
    if not isinstance(header, dict) or header.get("format_version") != CKPT_VERSION:
        got = header.get("format_version") if isinstance(header, dict) else None
        raise CheckpointError(f"{path}: format version {got!r} unsupported "
                              f"(want {CKPT_VERSION})")
    payload = raw[16 + hlen:]
    try:
        digest = hashlib.sha256(payload).hexdigest()
        if digest != header["payload_sha256"]:
            raise CheckpointError(f"{path}: payload checksum mismatch")
        tensors = {}
        for name, shape, offset, nbytes in header["tensors"]:
            if offset < 0 or nbytes % 8 or offset + nbytes > len(payload):
                raise CheckpointError(f"{path}: tensor {name} overruns payload")
            arr = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=offset)
            tensors[str(name)] = arr.reshape(shape).astype(np.float64)
        arch = nn.Architecture.from_dict(header["architecture"])
        state = header.get("training_state", {})
        if not isinstance(state, dict):
            raise CheckpointError(f"{path}: training state is not a mapping")
    except CheckpointError:
        raise
    except Exception as e:  # corrupted header fields of any stripe
        raise CheckpointError(f"{path}: malformed header ({e})") from None
    return Checkpoint(format_version=CKPT_VERSION, arch=arch, tensors=tensors,
                      training_state=state)


def save_model(path: str, model: nn.Model, training_state: dict = None,
               extra_tensors: dict = None):
    """Persist model parameters and statistics (plus optional optimizer arrays)."""
    tensors = dict(model.state_items())
    for name, arr in (extra_tensors or {}).items():
        tensors[f"opt.{name}"] = arr
    save_checkpoint(path, model.arch, tensors, training_state)


def load_model(path: str):
    """Rebuild a model from a checkpoint. Returns (model, Checkpoint)."""
    ckpt = load_checkpoint(path)
    model = nn.build_model(ckpt.arch, seed=0)  # every array is overwritten below
    state = {n: a for n, a in ckpt.tensors.items() if not n.startswith("opt.")}
    model.load_state(state)
    return model, ckpt
