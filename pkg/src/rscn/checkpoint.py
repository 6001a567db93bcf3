"""Binary checkpoint and reference-prototype cache formats.

Checkpoint (little-endian)::

    "RSCK" | version u16 | d u32 | h u32 | P u32 | K u32 | C u32 | n_tensors u32
    per tensor: name_len u16 | name utf-8 | ndim u8 | dims u32 * ndim | float64 data
    sha256 of everything above (32 raw bytes)

Prototype cache::

    "RSPC" | version u16 | d u32 | count u32 | ref checkpoint sha256 (32 raw bytes)
    per image: id u32 | n_classes u16 | class ids u16 * n | float64 [(n + 1) * d]
               (class vectors in listed order, then the background vector)
    sha256 of everything above (32 raw bytes)
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import LinearLayer, Tensor
from .detector import DetectorParams
from .losses import Discriminator

CKPT_MAGIC = b"RSCK"
CACHE_MAGIC = b"RSPC"
VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHIIIIII")
_CACHE_HEADER = struct.Struct("<4sHII32s")


class IntegrityError(ValueError):
    """Content hash or format mismatch in a checkpoint or cache file."""


def _digest_ok(blob: bytes, what: str) -> bytes:
    if len(blob) < 32:
        raise IntegrityError(f"{what}: truncated file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{what}: content hash mismatch")
    return body


# --------------------------------------------------------------------------- checkpoints


def encode_checkpoint(params: DetectorParams, disc: Discriminator | None = None) -> bytes:
    tensors = params.named_parameters() + (disc.named_parameters() if disc else [])
    parts = [_CKPT_HEADER.pack(CKPT_MAGIC, VERSION, params.feat_dim, params.hidden,
                               params.patch, params.n_classes, params.channels, len(tensors))]
    for name, t in tensors:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def checkpoint_hash(blob: bytes) -> str:
    return blob[-32:].hex()


@dataclass
class Checkpoint:
    params: DetectorParams
    disc: Discriminator | None
    hash: str


def decode_checkpoint(blob: bytes) -> Checkpoint:
    body = _digest_ok(blob, "checkpoint")
    if len(body) < _CKPT_HEADER.size:
        raise IntegrityError("checkpoint: truncated header")
    magic, version, d, h, p, k, c, n = _CKPT_HEADER.unpack_from(body, 0)
    if magic != CKPT_MAGIC or version != VERSION:
        raise IntegrityError("checkpoint: bad magic/version")
    pos = _CKPT_HEADER.size
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        arrays[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
        pos += 8 * count
    if pos != len(body):
        raise IntegrityError("checkpoint: trailing bytes")

    def layer(prefix: str) -> LinearLayer:
        try:
            w, b = arrays[f"{prefix}.weight"], arrays[f"{prefix}.bias"]
        except KeyError:
            raise IntegrityError(f"checkpoint: missing tensor {prefix}") from None
        return LinearLayer(Tensor(w, True, f"{prefix}.weight"), Tensor(b, True, f"{prefix}.bias"))

    params = DetectorParams([layer(f"extractor.{i}") for i in range(3)], layer("head"),
                            n_classes=k, patch=p, channels=c, hidden=h, feat_dim=d)
    expected = [p * p * c, h, h, d]
    got = [params.extractor[0].in_features] + [l.out_features for l in params.extractor]
    if got != expected or params.head.in_features != d or params.head.out_features != k + 1:
        raise IntegrityError(f"checkpoint: tensor shapes {got} disagree with header {expected}")
    disc = None
    if "disc.0.weight" in arrays:
        disc = Discriminator([layer(f"disc.{i}") for i in range(3)])
    return Checkpoint(params, disc, checkpoint_hash(blob))


def save_checkpoint(path: str | Path, params: DetectorParams,
                    disc: Discriminator | None = None) -> str:
    blob = encode_checkpoint(params, disc)
    Path(path).write_bytes(blob)
    return checkpoint_hash(blob)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


# --------------------------------------------------------------------------- prototype cache


@dataclass
class CachedPrototypes:
    classes: list[int]
    vectors: np.ndarray  # [len(classes), d]
    background: np.ndarray  # [d]

    def subset(self, classes: list[int]) -> np.ndarray:
        """Rows for ``classes`` (ascending) followed by the background vector."""
        idx = [self.classes.index(c) for c in classes]
        return np.vstack([self.vectors[idx].reshape(-1, self.background.size),
                          self.background[None, :]])


@dataclass
class PrototypeCache:
    feat_dim: int
    ref_hash: str
    entries: dict[int, CachedPrototypes] = field(default_factory=dict)

    def __getitem__(self, image_id: int) -> CachedPrototypes:
        try:
            return self.entries[image_id]
        except KeyError:
            raise KeyError(f"prototype cache has no entry for image {image_id}") from None

    def __contains__(self, image_id: int) -> bool:
        return image_id in self.entries

    def to_bytes(self) -> bytes:
        parts = [_CACHE_HEADER.pack(CACHE_MAGIC, VERSION, self.feat_dim, len(self.entries),
                                    bytes.fromhex(self.ref_hash))]
        for image_id in sorted(self.entries):
            e = self.entries[image_id]
            parts.append(struct.pack("<IH", image_id, len(e.classes)))
            parts.append(struct.pack(f"<{len(e.classes)}H", *e.classes))
            block = np.vstack([e.vectors.reshape(-1, self.feat_dim), e.background[None, :]])
            parts.append(np.ascontiguousarray(block, dtype="<f8").tobytes())
        body = b"".join(parts)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PrototypeCache":
        body = _digest_ok(blob, "prototype cache")
        magic, version, d, count, ref = _CACHE_HEADER.unpack_from(body, 0)
        if magic != CACHE_MAGIC or version != VERSION:
            raise IntegrityError("prototype cache: bad magic/version")
        pos = _CACHE_HEADER.size
        cache = cls(feat_dim=d, ref_hash=ref.hex())
        for _ in range(count):
            image_id, nc = struct.unpack_from("<IH", body, pos)
            pos += 6
            classes = list(struct.unpack_from(f"<{nc}H", body, pos))
            pos += 2 * nc
            block = np.frombuffer(body, dtype="<f8", count=(nc + 1) * d, offset=pos)
            block = block.reshape(nc + 1, d).copy()
            pos += 8 * (nc + 1) * d
            cache.entries[image_id] = CachedPrototypes(classes, block[:nc], block[nc])
        if pos != len(body):
            raise IntegrityError("prototype cache: trailing bytes")
        return cache

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "PrototypeCache":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"prototype cache not found: {path}")
        return cls.from_bytes(path.read_bytes())
