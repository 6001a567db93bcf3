"""AP@50 evaluation and the feature-space analysis metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boxes import iou, iou_matrix
from .detector import Detection, DetectorParams, detect, extract_proposal_features
from .prototypes import assign_proposal_labels
from .seeding import child_seed
from .synthbench import Scene, generate_proposals

IOU_MATCH = 0.5

__all__ = [
    "EvalReport", "iou", "ap50", "map50", "average_precision", "match_detections",
    "cross_domain_intra_class_similarity", "inter_class_discriminability", "evaluate",
]


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-points interpolated area under the precision envelope."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def match_detections(dets_per_image: Mapping[int, Sequence[Detection]],
                     gts_per_image: Mapping[int, tuple[np.ndarray, np.ndarray]],
                     cls: int) -> tuple[np.ndarray, int]:
    """Rank class-``cls`` detections and flag each as TP (1) or FP (0).

    Ranking is by descending score, ties broken by image id then insertion
    order. Each detection claims the highest-IoU GT of the class that is still
    unclaimed and overlaps it by at least 0.5; otherwise it is a FP.
    """
    ranked = []
    for image_id in sorted(dets_per_image):
        for k, det in enumerate(dets_per_image[image_id]):
            if det.label == cls:
                ranked.append((-det.score, image_id, k, det))
    ranked.sort(key=lambda r: r[:3])
    gt_boxes = {}
    n_gt = 0
    for image_id, (boxes, labels) in gts_per_image.items():
        sel = np.asarray(boxes).reshape(-1, 4)[np.asarray(labels) == cls]
        gt_boxes[image_id] = sel
        n_gt += len(sel)
    claimed = {image_id: np.zeros(len(b), dtype=bool) for image_id, b in gt_boxes.items()}
    flags = np.zeros(len(ranked), dtype=int)
    for r, (_, image_id, _, det) in enumerate(ranked):
        boxes = gt_boxes.get(image_id)
        if boxes is None or len(boxes) == 0:
            continue
        overlaps = iou_matrix(np.asarray(det.box)[None, :], boxes)[0]
        overlaps[claimed[image_id]] = -1.0
        j = int(np.argmax(overlaps))
        if overlaps[j] >= IOU_MATCH:
            claimed[image_id][j] = True
            flags[r] = 1
    return flags, n_gt


def ap50(dets_per_image: Mapping[int, Sequence[Detection]],
         gts_per_image: Mapping[int, tuple[np.ndarray, np.ndarray]], cls: int) -> float | None:
    """VOC-style AP at IoU 0.5 for one class; ``None`` when the class has no GT."""
    flags, n_gt = match_detections(dets_per_image, gts_per_image, cls)
    if n_gt == 0:
        return None
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(1 - flags)
    return average_precision(tp / n_gt, tp / (tp + fp))


def map50(per_class_ap: Mapping[int, float | None]) -> float:
    defined = [v for v in per_class_ap.values() if v is not None]
    if not defined:
        raise ValueError("mAP undefined: no class has ground truth")
    return float(np.mean(defined))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def cross_domain_intra_class_similarity(source: Mapping[int, np.ndarray],
                                        target: Mapping[int, np.ndarray]) -> dict[int, float]:
    """Per class, mean cosine over all (source, target) feature pairs of that class.

    Classes missing on either side are left out of the result.
    """
    out = {}
    for c in sorted(set(source) & set(target)):
        s = np.asarray(source[c], dtype=np.float64).reshape(-1, np.shape(source[c])[-1])
        t = np.asarray(target[c], dtype=np.float64).reshape(-1, np.shape(target[c])[-1])
        if len(s) == 0 or len(t) == 0:
            continue
        out[c] = float(np.mean(_unit_rows(s) @ _unit_rows(t).T))
    return out


def inter_class_discriminability(prototypes: Sequence[np.ndarray]) -> float:
    """1 - mean cosine similarity over ordered pairs of distinct class prototypes."""
    protos = np.asarray(prototypes, dtype=np.float64)
    n = len(protos)
    if n < 2:
        raise ValueError(f"inter-class discriminability needs >= 2 prototypes, got {n}")
    cos = _unit_rows(protos) @ _unit_rows(protos).T
    off = cos.sum() - np.trace(cos)
    return float(1.0 - off / (n * (n - 1)))


@dataclass
class EvalReport:
    split: str
    checkpoint_hash: str
    per_class_ap: dict[int, float | None]
    map50: float
    n_detections: int
    n_gt: dict[int, int]
    intra_class_sim: dict[int, float] = field(default_factory=dict)
    intra_class_sim_mean: float | None = None
    inter_class_disc: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        d["n_gt"] = {str(k): v for k, v in self.n_gt.items()}
        d["intra_class_sim"] = {str(k): v for k, v in self.intra_class_sim.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        for key in ("per_class_ap", "n_gt", "intra_class_sim"):
            d[key] = {int(k): v for k, v in d.get(key, {}).items()}
        return cls(**d)

    def log_block(self) -> dict:
        return {
            "split": self.split,
            "map50": self.map50,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "intra_class_sim": self.intra_class_sim_mean,
            "inter_class_disc": self.inter_class_disc,
        }


@dataclass(frozen=True)
class ProposalSettings:
    n_bg: int = 8
    jitter: float = 1.5
    size_range: tuple[int, int] = (8, 14)


def scene_proposals(scene: Scene, settings: ProposalSettings, seed: int, stream: str,
                    *keys: int) -> np.ndarray:
    return generate_proposals(scene, settings.n_bg, settings.jitter,
                              child_seed(seed, stream, *keys), size_range=settings.size_range)


def foreground_features(params: DetectorParams, scenes: Sequence[Scene],
                        settings: ProposalSettings, seed: int) -> dict[int, np.ndarray]:
    """Features of proposals correctly labelled with a class (IoU >= 0.5), grouped by class."""
    groups: dict[int, list[np.ndarray]] = {}
    for scene in scenes:
        if scene.n_objects == 0:
            continue
        boxes = scene_proposals(scene, settings, seed, "eval")
        labels = assign_proposal_labels(boxes, scene.boxes, scene.labels)
        fg = np.flatnonzero(labels >= 0)
        if fg.size == 0:
            continue
        feats = extract_proposal_features(params, scene, boxes[fg]).data
        for row, c in zip(feats, labels[fg]):
            groups.setdefault(int(c), []).append(row)
    return {c: np.array(rows) for c, rows in groups.items()}


def evaluate(params: DetectorParams, scenes: Sequence[Scene], split: str, *,
             seed: int = 0, settings: ProposalSettings = ProposalSettings(),
             score_thresh: float = 0.05, iou_thresh: float = 0.5,
             source_scenes: Sequence[Scene] | None = None,
             checkpoint_hash: str = "") -> EvalReport:
    """Detect on ``scenes`` and score AP@50 per class.

    With ``source_scenes`` given, also reports intra-class similarity between
    source and evaluated foreground features and the inter-class
    discriminability of source class prototypes.
    """
    dets: dict[int, list[Detection]] = {}
    gts: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for scene in scenes:
        boxes = scene_proposals(scene, settings, seed, "eval")
        dets[scene.id] = detect(params, scene, boxes, score_thresh, iou_thresh)
        gts[scene.id] = (scene.boxes, scene.labels)
    per_class = {c: ap50(dets, gts, c) for c in range(params.n_classes)}
    n_gt = {c: int(sum(int(np.sum(l == c)) for _, l in gts.values()))
            for c in range(params.n_classes)}
    report = EvalReport(split=split, checkpoint_hash=checkpoint_hash, per_class_ap=per_class,
                        map50=map50(per_class), n_detections=sum(len(d) for d in dets.values()),
                        n_gt=n_gt)
    if source_scenes is not None:
        src = foreground_features(params, source_scenes, settings, seed)
        tgt = foreground_features(params, scenes, settings, seed)
        sims = cross_domain_intra_class_similarity(src, tgt)
        report.intra_class_sim = sims
        report.intra_class_sim_mean = float(np.mean(list(sims.values()))) if sims else None
        protos = [src[c].mean(axis=0) for c in sorted(src)]
        if len(protos) >= 2:
            report.inter_class_disc = inter_class_discriminability(protos)
    return report
