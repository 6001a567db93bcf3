"""Procedural instance-free detection benchmark.

Source scenes contain solid-colour rectangles over smoothed noise. Target
scenes are rendered the same way and then pushed through a per-channel affine
shift plus Gaussian noise. The target training split is background only.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.ndimage import gaussian_filter

from .seeding import child_rng

SPLITS = ("source_train", "target_train", "target_val")
SPLIT_DOMAIN = {"source_train": "source", "target_train": "target", "target_val": "target"}
MAGIC = b"IFDS"
VERSION = 1
# magic, version, H, W, C, gt count, reserved: 4 + 5 * 2 + 2 = 16 bytes
HEADER = struct.Struct("<4sHHHHHH")
GT_RECORD = struct.Struct("<HHHHH")


class SpecError(ValueError):
    pass


class DatasetIntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    channels: int = 3
    n_classes: int = 3
    objects_min: int = 1
    objects_max: int = 3
    size_min: int = 8
    size_max: int = 14
    color_jitter: float = 0.05
    object_noise: float = 0.0
    source_bg_mean: tuple[float, ...] = (0.45, 0.45, 0.45)
    target_bg_mean: tuple[float, ...] = (0.45, 0.45, 0.45)
    bg_std: float = 0.12
    gain_range: tuple[float, float] = (0.4, 1.0)
    bg_smooth: float = 1.5
    shift_scale: tuple[float, ...] = (0.5, 0.5, 0.5)
    shift_offset: tuple[float, ...] = (0.3, 0.3, 0.3)
    shift_noise: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "gain_range", tuple(float(v) for v in self.gain_range))
        for name in ("source_bg_mean", "target_bg_mean", "shift_scale", "shift_offset"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise SpecError(f"grid must be at least 8x8, got {self.height}x{self.width}")
        if self.n_classes < 1:
            raise SpecError("n_classes must be >= 1")
        if self.channels < 1:
            raise SpecError("channels must be >= 1")
        if not 1 <= self.objects_min <= self.objects_max:
            raise SpecError(f"bad object count range [{self.objects_min}, {self.objects_max}]")
        if not 2 <= self.size_min <= self.size_max:
            raise SpecError(f"bad object size range [{self.size_min}, {self.size_max}]")
        if self.size_max > min(self.height, self.width):
            raise SpecError(
                f"objects of size {self.size_max} cannot fit a {self.height}x{self.width} grid")
        for name in ("source_bg_mean", "target_bg_mean", "shift_scale", "shift_offset"):
            if len(getattr(self, name)) != self.channels:
                raise SpecError(f"{name} needs {self.channels} entries")
        if len(self.gain_range) != 2 or not 0 < self.gain_range[0] <= self.gain_range[1]:
            raise SpecError(f"bad gain range {self.gain_range}")
        if min(self.shift_noise, self.bg_std, self.color_jitter, self.object_noise) < 0:
            raise SpecError("noise levels must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def palette(self) -> np.ndarray:
        """Per-class base colours shared by both domains."""
        if self.channels == 3:
            cols = [colorsys.hsv_to_rgb(c / self.n_classes, 0.8, 0.9) for c in range(self.n_classes)]
            return np.array(cols)
        return np.random.default_rng(0).uniform(0.05, 0.95, size=(self.n_classes, self.channels))


@dataclass(eq=False)
class Scene:
    id: int
    domain: str
    pixels: np.ndarray  # float32 [H, W, C] in [0, 1]
    boxes: np.ndarray  # int64 [n, 4] as x1, y1, x2, y2
    labels: np.ndarray  # int64 [n]

    @property
    def n_objects(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.id == other.id and self.domain == other.domain
                and self.pixels.shape == other.pixels.shape
                and np.array_equal(self.pixels, other.pixels)
                and np.array_equal(self.boxes, other.boxes)
                and np.array_equal(self.labels, other.labels))


@dataclass
class DatasetManifest:
    spec: SceneSpec
    seed: int
    splits: dict[str, list[int]]
    class_counts: dict[str, list[int]]
    files: dict[int, dict] = field(default_factory=dict)

    @property
    def spec_hash(self) -> str:
        return self.spec.spec_hash()

    @property
    def sizes(self) -> dict[str, int]:
        return {name: len(ids) for name, ids in self.splits.items()}

    def to_json(self) -> str:
        doc = {
            "format": "ifds-manifest",
            "version": VERSION,
            "spec": self.spec.to_dict(),
            "spec_hash": self.spec_hash,
            "seed": self.seed,
            "sizes": self.sizes,
            "splits": self.splits,
            "class_counts": self.class_counts,
            "files": {str(k): v for k, v in sorted(self.files.items())},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        spec = SceneSpec.from_dict(doc["spec"])
        if spec.spec_hash() != doc["spec_hash"]:
            raise DatasetIntegrityError("manifest spec hash does not match its spec block")
        return cls(spec=spec, seed=int(doc["seed"]),
                   splits={k: [int(i) for i in v] for k, v in doc["splits"].items()},
                   class_counts={k: list(v) for k, v in doc["class_counts"].items()},
                   files={int(k): v for k, v in doc["files"].items()})


@dataclass
class Dataset:
    manifest: DatasetManifest
    scenes: dict[int, Scene]

    @property
    def spec(self) -> SceneSpec:
        return self.manifest.spec

    def split(self, name: str) -> list[Scene]:
        if name not in self.manifest.splits:
            raise KeyError(f"dataset has no split {name!r}")
        return [self.scenes[i] for i in self.manifest.splits[name]]

    def __iter__(self) -> Iterator[Scene]:
        for name in SPLITS:
            yield from self.split(name)


# --------------------------------------------------------------------------- rendering


def _place_objects(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    boxes: list[list[int]] = []
    for _ in range(n):
        for _attempt in range(50):
            w = int(rng.integers(spec.size_min, spec.size_max + 1))
            h = int(rng.integers(spec.size_min, spec.size_max + 1))
            x1 = int(rng.integers(0, spec.width - w + 1))
            y1 = int(rng.integers(0, spec.height - h + 1))
            cand = [x1, y1, x1 + w, y1 + h]
            if all(cand[2] <= b[0] or b[2] <= cand[0] or cand[3] <= b[1] or b[3] <= cand[1]
                   for b in boxes):
                boxes.append(cand)
                break
    labels = rng.integers(0, spec.n_classes, size=len(boxes))
    return np.array(boxes, dtype=np.int64).reshape(-1, 4), labels.astype(np.int64)


def _background(spec: SceneSpec, mean: tuple[float, ...], rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal((spec.height, spec.width, spec.channels))
    smooth = gaussian_filter(noise, sigma=(spec.bg_smooth, spec.bg_smooth, 0), mode="wrap")
    smooth /= max(float(smooth.std()), 1e-12)
    return np.asarray(mean) + spec.bg_std * smooth


def apply_shift(spec: SceneSpec, pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(pixels.shape) * spec.shift_noise
    return np.asarray(spec.shift_scale) * pixels + np.asarray(spec.shift_offset) + noise


def render_scene(spec: SceneSpec, seed: int, scene_id: int, split: str,
                 apply_domain_shift: bool = True) -> Scene:
    """Render one scene from its own (seed, scene_id) stream.

    With ``apply_domain_shift=False`` a target scene is returned as its
    pre-shift, source-style rendering.
    """
    domain = SPLIT_DOMAIN[split]
    content = child_rng(seed, "data", scene_id, 0)
    if split == "target_train":
        boxes = np.zeros((0, 4), dtype=np.int64)
        labels = np.zeros(0, dtype=np.int64)
    else:
        boxes, labels = _place_objects(spec, content)
    bg_mean = spec.source_bg_mean if domain == "source" else spec.target_bg_mean
    img = _background(spec, bg_mean, content)
    palette = spec.palette()
    for (x1, y1, x2, y2), c in zip(boxes, labels):
        colour = palette[c] + content.uniform(-spec.color_jitter, spec.color_jitter, spec.channels)
        grain = content.standard_normal((y2 - y1, x2 - x1, spec.channels)) * spec.object_noise
        img[y1:y2, x1:x2, :] = colour + grain
    # per-scene illumination: contrast gain about the background mean
    gain = content.uniform(*spec.gain_range)
    img = np.asarray(bg_mean) + gain * (img - np.asarray(bg_mean))
    if domain == "target" and apply_domain_shift:
        img = apply_shift(spec, img, child_rng(seed, "data", scene_id, 1))
    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Scene(id=scene_id, domain=domain, pixels=pixels, boxes=boxes, labels=labels)


def generate_dataset(spec: SceneSpec, sizes: tuple[int, int, int], seed: int,
                     out_dir: str | Path | None = None) -> Dataset:
    """Generate source_train / target_train / target_val splits; optionally write them."""
    if len(sizes) != 3 or any(int(n) < 1 for n in sizes):
        raise SpecError(f"split sizes must be three counts >= 1, got {sizes}")
    spec.validate()
    splits: dict[str, list[int]] = {}
    scenes: dict[int, Scene] = {}
    next_id = 0
    for name, n in zip(SPLITS, sizes):
        ids = list(range(next_id, next_id + int(n)))
        next_id += int(n)
        splits[name] = ids
        for i in ids:
            scenes[i] = render_scene(spec, seed, i, name)
    counts = {name: np.bincount(np.concatenate([scenes[i].labels for i in ids]),
                                minlength=spec.n_classes).astype(int).tolist()
              for name, ids in splits.items()}
    manifest = DatasetManifest(spec=spec, seed=int(seed), splits=splits, class_counts=counts)
    if counts["target_train"] and sum(counts["target_train"]) != 0:
        raise AssertionError("target_train must be instance-free")
    if out_dir is not None:
        write_dataset(Dataset(manifest, scenes), out_dir)
    return Dataset(manifest, scenes)


# --------------------------------------------------------------------------- proposals


def generate_proposals(scene: Scene, n_bg: int, jitter: float, seed: int,
                       size_range: tuple[int, int] = (8, 14)) -> np.ndarray:
    """Oracle proposals: 3 jittered copies of each GT box, then ``n_bg`` random boxes.

    Returns a float64 array [3 * n_gt + n_bg, 4].
    """
    rng = child_rng(seed, "proposals", scene.id)
    H, W = scene.pixels.shape[:2]
    limits = np.array([W, H, W, H], dtype=np.float64)
    out: list[np.ndarray] = []
    for box in scene.boxes.astype(np.float64):
        for _ in range(3):
            b = box + rng.uniform(-jitter, jitter, size=4) if jitter > 0 else box.copy()
            b = np.clip(b, 0.0, limits)
            # keep at least one pixel of extent after clamping
            if b[2] - b[0] < 1.0:
                b[0], b[2] = box[0], box[2]
            if b[3] - b[1] < 1.0:
                b[1], b[3] = box[1], box[3]
            out.append(b)
    lo, hi = size_range
    hi = min(hi, W, H)
    lo = min(lo, hi)
    for _ in range(n_bg):
        w = rng.uniform(lo, hi)
        h = rng.uniform(lo, hi)
        x1 = rng.uniform(0, W - w)
        y1 = rng.uniform(0, H - h)
        out.append(np.array([x1, y1, x1 + w, y1 + h]))
    return np.array(out, dtype=np.float64).reshape(-1, 4)


# --------------------------------------------------------------------------- serialization


def scene_filename(scene_id: int) -> str:
    return f"{scene_id:06d}.ifds"


def encode_scene(scene: Scene) -> bytes:
    H, W, C = scene.pixels.shape
    parts = [HEADER.pack(MAGIC, VERSION, H, W, C, scene.n_objects, 0),
             scene.pixels.astype("<f4").tobytes(order="C")]
    for (x1, y1, x2, y2), c in zip(scene.boxes, scene.labels):
        parts.append(GT_RECORD.pack(int(c), int(x1), int(y1), int(x2), int(y2)))
    return b"".join(parts)


def decode_scene(blob: bytes, scene_id: int, domain: str) -> Scene:
    if len(blob) < HEADER.size:
        raise DatasetIntegrityError(f"scene {scene_id}: truncated header")
    magic, version, H, W, C, n_gt, _ = HEADER.unpack_from(blob, 0)
    if magic != MAGIC or version != VERSION:
        raise DatasetIntegrityError(f"scene {scene_id}: bad magic/version")
    n_pix = H * W * C
    expected = HEADER.size + 4 * n_pix + GT_RECORD.size * n_gt
    if len(blob) != expected:
        raise DatasetIntegrityError(
            f"scene {scene_id}: expected {expected} bytes, found {len(blob)}")
    pixels = np.frombuffer(blob, dtype="<f4", count=n_pix, offset=HEADER.size)
    pixels = pixels.reshape(H, W, C).astype(np.float32)
    recs = [GT_RECORD.unpack_from(blob, HEADER.size + 4 * n_pix + GT_RECORD.size * k)
            for k in range(n_gt)]
    labels = np.array([r[0] for r in recs], dtype=np.int64)
    boxes = np.array([r[1:] for r in recs], dtype=np.int64).reshape(-1, 4)
    return Scene(id=scene_id, domain=domain, pixels=pixels, boxes=boxes, labels=labels)


def write_dataset(dataset: Dataset, out_dir: str | Path) -> DatasetManifest:
    root = Path(out_dir)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    manifest = dataset.manifest
    offset = 0
    for split in SPLITS:
        for sid in manifest.splits[split]:
            blob = encode_scene(dataset.scenes[sid])
            name = scene_filename(sid)
            (root / "scenes" / name).write_bytes(blob)
            manifest.files[sid] = {
                "file": f"scenes/{name}",
                "split": split,
                "offset": offset,
                "bytes": len(blob),
                "sha256": hashlib.sha256(blob).hexdigest(),
            }
            offset += len(blob)
    (root / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = DatasetManifest.from_json(mpath.read_text(encoding="utf-8"))
    scenes: dict[int, Scene] = {}
    for split, ids in manifest.splits.items():
        for sid in ids:
            entry = manifest.files.get(sid)
            if entry is None:
                raise DatasetIntegrityError(f"scene {sid}: no file entry in manifest")
            fpath = root / entry["file"]
            if not fpath.exists():
                raise DatasetIntegrityError(f"scene {sid}: missing file {entry['file']}")
            blob = fpath.read_bytes()
            if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
                raise DatasetIntegrityError(f"scene {sid}: checksum mismatch")
            scene = decode_scene(blob, sid, SPLIT_DOMAIN[split])
            if split == "target_train" and scene.n_objects:
                raise DatasetIntegrityError(
                    f"scene {sid}: target_train scene carries foreground annotations")
            scenes[sid] = scene
    return Dataset(manifest, scenes)
