"""Box geometry, greedy detection matching, average precision, and the
novel-class mean AP summary, plus the line-based detection/ground-truth
interchange files.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FusedetError, ParseError, PreconditionError


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise PreconditionError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int
    image_id: str

    def __post_init__(self) -> None:
        if not np.isfinite(self.score):
            raise PreconditionError(f"non-finite score {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_id: int
    image_id: str


def iou(a: Box, b: Box) -> float:
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def match(dets: list[Detection], gts: list[GroundTruth], thr: float) -> list[bool]:
    """TP/FP flag per detection, in input order.

    Detections are processed by descending score (ties keep input order);
    each claims the unmatched ground truth in its image with the highest
    IoU at or above the threshold.
    """
    if not 0 < thr < 1:
        raise PreconditionError(f"threshold {thr} outside (0, 1)")
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    taken = [False] * len(gts)
    flags = [False] * len(dets)
    for i in order:
        det = dets[i]
        best, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if taken[j] or gt.image_id != det.image_id or gt.class_id != det.class_id:
                continue
            v = iou(det.box, gt.box)
            if v >= thr and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            flags[i] = True
    return flags


def average_precision(
    dets: list[Detection], gts: list[GroundTruth], class_id: int, thr: float = 0.5
) -> float:
    """Area under the monotone precision envelope over all recall points."""
    cdets = [d for d in dets if d.class_id == class_id]
    cgts = [g for g in gts if g.class_id == class_id]
    if not cgts:
        if not cdets:
            warnings.warn(f"class {class_id} has no ground truth and no detections", stacklevel=2)
        return 0.0
    if not cdets:
        return 0.0
    flags = match(cdets, cgts, thr)
    order = sorted(range(len(cdets)), key=lambda i: -cdets[i].score)
    tp = np.cumsum([1.0 if flags[i] else 0.0 for i in order])
    fp = np.cumsum([0.0 if flags[i] else 1.0 for i in order])
    recall = tp / len(cgts)
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def nap50(dets: list[Detection], gts: list[GroundTruth], novel_class_ids) -> float:
    """Unweighted mean AP at IoU 0.5 over the novel classes."""
    ids = list(novel_class_ids)
    if not ids:
        raise PreconditionError("novel class set is empty")
    return float(np.mean([average_precision(dets, gts, c, 0.5) for c in ids]))


def write_detections(path, dets: list[Detection]) -> None:
    with open(path, "w") as fh:
        fh.write("# image_id class_id score x1 y1 x2 y2\n")
        for d in dets:
            fh.write(
                f"{d.image_id} {d.class_id} {d.score!r} "
                f"{d.box.x1!r} {d.box.y1!r} {d.box.x2!r} {d.box.y2!r}\n"
            )


def write_ground_truths(path, gts: list[GroundTruth]) -> None:
    with open(path, "w") as fh:
        fh.write("# image_id class_id x1 y1 x2 y2\n")
        for g in gts:
            fh.write(f"{g.image_id} {g.class_id} {g.box.x1!r} {g.box.y1!r} {g.box.x2!r} {g.box.y2!r}\n")


def _record_lines(path) -> list[tuple[int, list[str]]]:
    out = []
    for n, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if text:
            out.append((n, text.split()))
    return out


def read_detections(path) -> list[Detection]:
    dets = []
    for n, tok in _record_lines(path):
        if len(tok) != 7:
            raise ParseError(f"expected 7 fields, got {len(tok)}", line=n)
        try:
            dets.append(
                Detection(
                    box=Box(float(tok[3]), float(tok[4]), float(tok[5]), float(tok[6])),
                    score=float(tok[2]),
                    class_id=int(tok[1]),
                    image_id=tok[0],
                )
            )
        except ParseError:
            raise
        except (ValueError, FusedetError) as exc:
            raise ParseError(str(exc), line=n) from exc
    return dets


def read_ground_truths(path) -> list[GroundTruth]:
    gts = []
    for n, tok in _record_lines(path):
        if len(tok) != 6:
            raise ParseError(f"expected 6 fields, got {len(tok)}", line=n)
        try:
            gts.append(
                GroundTruth(
                    box=Box(float(tok[2]), float(tok[3]), float(tok[4]), float(tok[5])),
                    class_id=int(tok[1]),
                    image_id=tok[0],
                )
            )
        except ParseError:
            raise
        except (ValueError, FusedetError) as exc:
            raise ParseError(str(exc), line=n) from exc
    return gts
