"""Dataset manifests, dual-frame splitting, 256x256 standardization, snippet extraction.

All images move through the pipeline as float RGB arrays in [0, 1]; files on
disk are 8-bit PNG. A "dual" frame holds the B-mode panel and the CFD panel of
one acquisition side by side; the manifest records where each clip's frames
and masks live, which split the exam belongs to, and the per-clip CFD
coverage.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

import cv2
import numpy as np
from PIL import Image

from .errors import GeometryError, ParseError

SNIPPET_LEN = 10
STANDARD_SIZE = 256

Box = tuple[int, int, int, int]  # (x, y, w, h)


# ---------------------------------------------------------------------------
# Image file IO
# ---------------------------------------------------------------------------

def read_image(path: str | Path) -> np.ndarray:
    """Load an 8-bit PNG/JPEG as float RGB in [0, 1], shape (H, W, 3)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write a float RGB image in [0, 1] as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(image, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_mask(path: str | Path) -> np.ndarray:
    """Load a binary mask PNG as uint8 {0, 1}, shape (H, W)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write a binary mask as 1-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0)).save(path, bits=1)


def chroma_of_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Chroma saturation of the signed per-channel difference a - b.

    Defined as max_c(d) - min_c(d) over the channel axis; zero for achromatic
    differences (all channels shifted equally), large wherever a color overlay
    separates the two images. Inputs are float RGB (H, W, 3).
    """
    d = np.asarray(a, dtype=np.float32) - np.asarray(b, dtype=np.float32)
    return d.max(axis=-1) - d.min(axis=-1)


# ---------------------------------------------------------------------------
# Panel geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PanelLayout:
    """Pixel boxes of the B-mode and CFD panels inside a dual frame."""

    bmode_box: Box
    cfd_box: Box

    @staticmethod
    def side_by_side(frame_height: int, frame_width: int) -> "PanelLayout":
        """Left half B-mode, right half CFD."""
        half = frame_width // 2
        return PanelLayout(bmode_box=(0, 0, half, frame_height),
                           cfd_box=(half, 0, half, frame_height))

    def validate(self, frame_shape: tuple[int, ...]) -> None:
        h, w = frame_shape[:2]
        for name, (x, y, bw, bh) in (("bmode_box", self.bmode_box), ("cfd_box", self.cfd_box)):
            if bw <= 0 or bh <= 0:
                raise GeometryError(f"{name} has degenerate size {bw}x{bh}")
            if x < 0 or y < 0 or x + bw > w or y + bh > h:
                raise GeometryError(f"{name} {(x, y, bw, bh)} exceeds frame bounds {w}x{h}")
        bx, by, bw, bh = self.bmode_box
        cx, cy, cw, ch = self.cfd_box
        if bx < cx + cw and cx < bx + bw and by < cy + ch and cy < by + bh:
            raise GeometryError("bmode_box and cfd_box overlap")


def split_dual(frame: np.ndarray, layout: PanelLayout) -> tuple[np.ndarray, np.ndarray]:
    """Crop the B-mode and CFD panels out of a dual frame."""
    layout.validate(frame.shape)
    bx, by, bw, bh = layout.bmode_box
    cx, cy, cw, ch = layout.cfd_box
    return frame[by:by + bh, bx:bx + bw].copy(), frame[cy:cy + ch, cx:cx + cw].copy()


def _pad_to_square(panel: np.ndarray) -> np.ndarray:
    h, w = panel.shape[:2]
    if h == w:
        return panel
    side = max(h, w)
    pad_h, pad_w = side - h, side - w
    pads = [(pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)]
    pads += [(0, 0)] * (panel.ndim - 2)
    return np.pad(panel, pads, mode="constant", constant_values=0.0)


def standardize_panel(panel: np.ndarray, size: int = STANDARD_SIZE) -> np.ndarray:
    """Zero-pad the shorter dimension symmetrically to square, then resize.

    Bilinear interpolation; output intensities stay in [0, 1]. Idempotent on
    inputs already at the target size.
    """
    if panel.size == 0 or panel.shape[0] == 0 or panel.shape[1] == 0:
        raise GeometryError("cannot standardize an empty panel")
    panel = np.asarray(panel, dtype=np.float32)
    if panel.shape[0] == size and panel.shape[1] == size:
        return panel.copy()
    square = _pad_to_square(panel)
    out = cv2.resize(square, (size, size), interpolation=cv2.INTER_LINEAR)
    return np.clip(out, 0.0, 1.0)


def standardize_mask(mask: np.ndarray, size: int = STANDARD_SIZE) -> np.ndarray:
    """Standardize a binary mask with the same geometry as its panel; re-binarize at 0.5."""
    out = standardize_panel(np.asarray(mask, dtype=np.float32), size=size)
    return (out > 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# Snippets
# ---------------------------------------------------------------------------

@dataclass
class VideoSnippet:
    """A 10-frame block of standardized frames, the pipeline's unit of work."""

    frames: np.ndarray  # (10, H, W, 3) float32 in [0, 1]
    exam_id: str = ""
    clip_id: str = ""
    snippet_index: int = 0
    domain_tag: str = "other"  # {"adult", "fetal", "other"}
    view_label: Optional[str] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] != SNIPPET_LEN or self.frames.shape[3] != 3:
            raise GeometryError(f"snippet frames must be (10, H, W, 3), got {self.frames.shape}")
        lo, hi = float(self.frames.min()), float(self.frames.max())
        if lo < -1e-6 or hi > 1.0 + 1e-6:
            raise GeometryError(f"snippet intensities outside [0, 1]: [{lo}, {hi}]")


@dataclass
class DualAcquisition:
    """Paired CFD and B-mode snippets from one acquisition, plus panel layout."""

    cfd: VideoSnippet
    bmode: VideoSnippet
    layout: Optional[PanelLayout] = None
    gt_masks: Optional[np.ndarray] = None  # (10, H, W) uint8, phantom ground truth


def extract_snippets(clip: np.ndarray | Sequence[np.ndarray], exam_id: str = "",
                     clip_id: str = "", domain_tag: str = "other",
                     view_label: Optional[str] = None) -> list[VideoSnippet]:
    """Chop a clip into non-overlapping 10-frame snippets; the remainder is dropped."""
    frames = np.asarray(clip, dtype=np.float32)
    count = frames.shape[0] // SNIPPET_LEN
    out = []
    for i in range(count):
        block = frames[i * SNIPPET_LEN:(i + 1) * SNIPPET_LEN]
        out.append(VideoSnippet(frames=block, exam_id=exam_id, clip_id=clip_id,
                                snippet_index=i, domain_tag=domain_tag, view_label=view_label))
    return out


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

_REQUIRED_RECORD_KEYS = ("exam_id", "clip_id", "frames", "split")


@dataclass
class ManifestRecord:
    exam_id: str
    clip_id: str
    frames: list[str]               # dual-frame paths, relative to the manifest
    split: str                      # {"train", "val", "test"}
    masks: Optional[list[str]] = None
    coverage: Optional[float] = None
    quartile: Optional[str] = None  # {"Q1".."Q4"}
    view_label: Optional[str] = None
    fiducial_mask: Optional[str] = None
    layout: Optional[PanelLayout] = None

    def to_json(self) -> dict:
        d = {"exam_id": self.exam_id, "clip_id": self.clip_id, "frames": self.frames,
             "split": self.split}
        if self.masks is not None:
            d["masks"] = self.masks
        if self.coverage is not None:
            d["coverage"] = self.coverage
        if self.quartile is not None:
            d["quartile"] = self.quartile
        if self.view_label is not None:
            d["view_label"] = self.view_label
        if self.fiducial_mask is not None:
            d["fiducial_mask"] = self.fiducial_mask
        if self.layout is not None:
            d["layout"] = {"bmode_box": list(self.layout.bmode_box),
                           "cfd_box": list(self.layout.cfd_box)}
        return d

    @staticmethod
    def from_json(d: dict, line_number: int) -> "ManifestRecord":
        for key in _REQUIRED_RECORD_KEYS:
            if key not in d:
                raise ParseError(line_number, f"record missing required field '{key}'")
        layout = None
        if "layout" in d:
            layout = PanelLayout(bmode_box=tuple(d["layout"]["bmode_box"]),
                                 cfd_box=tuple(d["layout"]["cfd_box"]))
        return ManifestRecord(
            exam_id=d["exam_id"], clip_id=d["clip_id"], frames=list(d["frames"]),
            split=d["split"], masks=d.get("masks"), coverage=d.get("coverage"),
            quartile=d.get("quartile"), view_label=d.get("view_label"),
            fiducial_mask=d.get("fiducial_mask"), layout=layout)


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    quartile_thresholds: Optional[tuple[float, float, float]] = None
    root: Optional[Path] = field(default=None, compare=False)

    def resolve(self, rel: str) -> Path:
        base = self.root if self.root is not None else Path(".")
        return Path(base) / rel

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def exam_splits_disjoint(self) -> bool:
        by_split: dict[str, set[str]] = {}
        for r in self.records:
            by_split.setdefault(r.split, set()).add(r.exam_id)
        names = list(by_split)
        for i in range(len(names)):
            for j in range(i + 1, len(names)):
                if by_split[names[i]] & by_split[names[j]]:
                    return False
        return True

    def validate_files(self) -> list[str]:
        """Return the referenced paths that do not exist on disk."""
        missing = []
        for r in self.records:
            for rel in r.frames + (r.masks or []):
                if not self.resolve(rel).exists():
                    missing.append(rel)
            if r.fiducial_mask and not self.resolve(r.fiducial_mask).exists():
                missing.append(r.fiducial_mask)
        return missing


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest as one newline-delimited JSON record per clip.

    A leading meta line carries dataset-level quartile thresholds once they
    have been computed.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if manifest.quartile_thresholds is not None:
        lines.append(json.dumps({"meta": True,
                                 "quartile_thresholds": list(manifest.quartile_thresholds)}))
    for rec in manifest.records:
        lines.append(json.dumps(rec.to_json()))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a manifest written by save_manifest; malformed lines raise ParseError."""
    path = Path(path)
    manifest = DatasetManifest(root=path.parent)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(d, dict):
                raise ParseError(lineno, "record is not a JSON object")
            if d.get("meta"):
                thresholds = d.get("quartile_thresholds")
                if thresholds is not None:
                    manifest.quartile_thresholds = tuple(float(t) for t in thresholds)
                continue
            manifest.records.append(ManifestRecord.from_json(d, lineno))
    return manifest


def load_dual_snippets(record: ManifestRecord, root: Path,
                       size: int = STANDARD_SIZE) -> list[DualAcquisition]:
    """Load a manifest record's dual frames and return standardized paired snippets."""
    layout = record.layout
    bmode_frames, cfd_frames, gt_masks = [], [], []
    for i, rel in enumerate(record.frames):
        frame = read_image(Path(root) / rel)
        if layout is None:
            layout = PanelLayout.side_by_side(*frame.shape[:2])
        bmode, cfd = split_dual(frame, layout)
        bmode_frames.append(standardize_panel(bmode, size=size))
        cfd_frames.append(standardize_panel(cfd, size=size))
        if record.masks:
            gt_masks.append(standardize_mask(read_mask(Path(root) / record.masks[i]), size=size))

    n = len(bmode_frames) // SNIPPET_LEN
    out = []
    for i in range(n):
        sl = slice(i * SNIPPET_LEN, (i + 1) * SNIPPET_LEN)
        bm = VideoSnippet(np.stack(bmode_frames[sl]), exam_id=record.exam_id,
                          clip_id=record.clip_id, snippet_index=i, view_label=record.view_label)
        cf = VideoSnippet(np.stack(cfd_frames[sl]), exam_id=record.exam_id,
                          clip_id=record.clip_id, snippet_index=i, view_label=record.view_label)
        gm = np.stack(gt_masks[sl]) if gt_masks else None
        out.append(DualAcquisition(cfd=cf, bmode=bm, layout=layout, gt_masks=gm))
    return out
