"""CFD-region mask estimation.

Training labels come straight from dual acquisitions (CFD panel minus B-mode
panel, restricted to the detected Doppler sector, thresholded on chroma
saturation); a small frame-level U-Net is then trained on those labels so
masks can be predicted for CFD-only inputs. Coverage fractions stratify the
dataset into quartiles Q1..Q4 with thresholds frozen on the training split.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import cv2
import numpy as np
import torch
from torch import nn

from .dataio import DualAcquisition, VideoSnippet, chroma_of_difference
from .errors import ConfigError, EmptySectorError, GeometryError

CHROMA_THRESHOLD = 0.1
_BACKGROUND_LEVEL = 0.03


# ---------------------------------------------------------------------------
# Mask containers and quartiles
# ---------------------------------------------------------------------------

@dataclass
class CfdMask:
    """Per-frame binary masks of the Doppler color region for one snippet."""

    masks: np.ndarray  # (10, H, W) uint8 in {0, 1}
    coverage: float = 0.0
    quartile: Optional[str] = None

    def __post_init__(self):
        self.masks = (np.asarray(self.masks) > 0).astype(np.uint8)
        self.coverage = float(self.masks.mean())


def coverage_of(masks: np.ndarray) -> float:
    """Mean over frames of (foreground pixels / total pixels)."""
    return float((np.asarray(masks) > 0).mean())


@dataclass(frozen=True)
class QuartileTable:
    """Coverage thresholds t1 <= t2 <= t3, computed on the training split only."""

    t1: float
    t2: float
    t3: float

    @staticmethod
    def from_coverages(coverages: Sequence[float]) -> "QuartileTable":
        if len(coverages) == 0:
            raise ConfigError("cannot compute quartiles from an empty list")
        t1, t2, t3 = np.percentile(np.asarray(coverages, dtype=np.float64), [25, 50, 75])
        return QuartileTable(float(t1), float(t2), float(t3))

    def assign(self, coverage: float) -> str:
        if coverage <= self.t1:
            return "Q1"
        if coverage <= self.t2:
            return "Q2"
        if coverage <= self.t3:
            return "Q3"
        return "Q4"


def coverage_and_quartile(masks: Sequence[CfdMask], table: Optional[QuartileTable] = None
                          ) -> tuple[QuartileTable, list[str]]:
    """Assign quartiles; computes (and returns) the table when absent.

    When no table is given the masks must come from the training split, since
    the thresholds are frozen there and reused for val/test.
    """
    if len(masks) == 0:
        raise ConfigError("no masks given")
    if table is None:
        table = QuartileTable.from_coverages([m.coverage for m in masks])
    assignments = []
    for m in masks:
        m.quartile = table.assign(m.coverage)
        assignments.append(m.quartile)
    return table, assignments


# ---------------------------------------------------------------------------
# Label synthesis from dual acquisitions
# ---------------------------------------------------------------------------

def detect_sector(cfd_panel: np.ndarray) -> np.ndarray:
    """Convex hull of the largest connected non-background region.

    Returns a uint8 (H, W) mask. Annotation glyphs and color bars form small
    separate components and are excluded; an all-black panel raises
    EmptySectorError.
    """
    panel = np.asarray(cfd_panel, dtype=np.float32)
    if panel.size == 0:
        raise EmptySectorError("empty panel")
    intensity = panel.max(axis=-1) if panel.ndim == 3 else panel
    fg = (intensity > _BACKGROUND_LEVEL).astype(np.uint8)
    if fg.sum() == 0:
        raise EmptySectorError("no non-background pixels found")
    count, labels, stats, _ = cv2.connectedComponentsWithStats(fg, connectivity=8)
    largest = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    component = (labels == largest).astype(np.uint8)
    points = cv2.findNonZero(component)
    hull = cv2.convexHull(points)
    out = np.zeros_like(component)
    cv2.fillConvexPoly(out, hull, 1)
    return out


def make_mask_label(dual: DualAcquisition) -> np.ndarray:
    """Per-frame binary CFD labels from a dual acquisition.

    residual = CFD - B-mode; pixels whose chroma saturation of the residual
    exceeds CHROMA_THRESHOLD, restricted to the detected Doppler sector so
    that annotations, fiducials, and the color bar are excluded.
    """
    cfd, bmode = dual.cfd.frames, dual.bmode.frames
    if cfd.shape != bmode.shape:
        raise GeometryError("CFD and B-mode snippets must share shape")
    labels = np.zeros(cfd.shape[:3], dtype=np.uint8)
    for t in range(cfd.shape[0]):
        sector = detect_sector(cfd[t])
        chroma = chroma_of_difference(cfd[t], bmode[t])
        raw = chroma > CHROMA_THRESHOLD
        energy = float(chroma.sum())
        if energy > 0:
            outside = float((chroma * (1 - sector)).sum())
            if outside / energy > 0.5:
                warnings.warn(f"frame {t}: most residual energy lies outside the "
                              "detected sector; panels may be misaligned")
        labels[t] = raw & (sector > 0)
    return labels


# ---------------------------------------------------------------------------
# Helper segmentation U-Net
# ---------------------------------------------------------------------------

@dataclass
class MaskerConfig:
    base_filters: int = 16
    levels: int = 4
    epochs: int = 8
    batch_size: int = 4
    learning_rate: float = 1e-3
    val_fraction: float = 0.2
    seed: int = 0


class _DoubleConv(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class MaskerUNet(nn.Module):
    """Frame-level encoder-decoder with skip connections; logits output."""

    def __init__(self, base_filters: int = 16, levels: int = 4):
        super().__init__()
        chans = [base_filters * 2 ** i for i in range(levels)]
        self.levels = levels
        self.enc = nn.ModuleList()
        cin = 3
        for c in chans:
            self.enc.append(_DoubleConv(cin, c))
            cin = c
        self.pool = nn.MaxPool2d(2)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(levels - 1, 0, -1):
            self.up.append(nn.ConvTranspose2d(chans[i], chans[i - 1], 2, stride=2))
            self.dec.append(_DoubleConv(2 * chans[i - 1], chans[i - 1]))
        self.head = nn.Conv2d(chans[0], 1, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x)
            if i < self.levels - 1:
                skips.append(x)
                x = self.pool(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        return self.head(x)


@dataclass
class LabeledFrame:
    """One (CFD frame, binary label) training pair with its exam id."""

    cfd: np.ndarray     # (H, W, 3) float in [0, 1]
    label: np.ndarray   # (H, W) binary
    exam_id: str = ""


class MaskerModel:
    """Trained masker plus its config; handles tensor conversion."""

    def __init__(self, net: MaskerUNet, config: MaskerConfig,
                 best_val_dice: float = 0.0, history: Optional[list] = None):
        self.net = net
        self.config = config
        self.best_val_dice = best_val_dice
        self.history = history or []

    def predict_frames(self, frames: np.ndarray) -> np.ndarray:
        """Sigmoid probabilities for (N, H, W, 3) frames -> (N, H, W)."""
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise GeometryError(f"expected (N, H, W, 3) frames, got {frames.shape}")
        self.net.eval()
        with torch.no_grad():
            x = torch.from_numpy(frames).permute(0, 3, 1, 2)
            probs = torch.sigmoid(self.net(x))[:, 0]
        return probs.numpy()


def _soft_dice_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    probs = torch.sigmoid(logits)
    inter = (probs * target).sum()
    return 1.0 - (2 * inter + 1.0) / (probs.sum() + target.sum() + 1.0)


def _split_by_exam(pairs: Sequence[LabeledFrame], val_fraction: float,
                   rng: np.random.Generator) -> tuple[list[int], list[int]]:
    exams = sorted(set(p.exam_id for p in pairs))
    order = list(exams)
    rng.shuffle(order)
    n_val = max(1, int(round(val_fraction * len(order)))) if len(order) > 1 else 0
    val_exams = set(order[:n_val])
    train_idx = [i for i, p in enumerate(pairs) if p.exam_id not in val_exams]
    val_idx = [i for i, p in enumerate(pairs) if p.exam_id in val_exams]
    if not train_idx:
        train_idx, val_idx = val_idx, []
    return train_idx, val_idx


def train_masker(pairs: Sequence[LabeledFrame], config: MaskerConfig) -> MaskerModel:
    """Train the helper segmentation net with BCE + soft-Dice loss.

    The val split is held out by exam; the returned model carries the weights
    of the epoch with the best validation Dice (training Dice when no val
    exam is available).
    """
    if len(pairs) < 2:
        raise ConfigError("need at least 2 labeled pairs")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng([config.seed, 0xA5CE])
    train_idx, val_idx = _split_by_exam(pairs, config.val_fraction, rng)

    net = MaskerUNet(config.base_filters, config.levels)
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    bce = nn.BCEWithLogitsLoss()

    def to_tensors(indices):
        xs = np.stack([pairs[i].cfd for i in indices]).astype(np.float32)
        ys = np.stack([(pairs[i].label > 0).astype(np.float32) for i in indices])
        return (torch.from_numpy(xs).permute(0, 3, 1, 2),
                torch.from_numpy(ys).unsqueeze(1))

    best_state = {k: v.clone() for k, v in net.state_dict().items()}
    best_dice = -1.0
    history = []
    for epoch in range(config.epochs):
        net.train()
        order = np.array(train_idx)
        rng.shuffle(order)
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            x, y = to_tensors(batch)
            opt.zero_grad()
            logits = net(x)
            loss = bce(logits, y) + _soft_dice_loss(logits, y)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(batch)
        epoch_loss /= max(len(order), 1)

        eval_idx = val_idx if val_idx else train_idx
        net.eval()
        with torch.no_grad():
            x, y = to_tensors(eval_idx)
            probs = torch.sigmoid(net(x))
            pred = (probs > 0.5).float()
            inter = (pred * y).sum()
            denom = pred.sum() + y.sum()
            val_dice = float(2 * inter / denom) if float(denom) > 0 else 1.0
        history.append({"epoch": epoch, "train_loss": epoch_loss, "val_dice": val_dice})
        if val_dice > best_dice:
            best_dice = val_dice
            best_state = {k: v.clone() for k, v in net.state_dict().items()}

    net.load_state_dict(best_state)
    return MaskerModel(net, config, best_val_dice=best_dice, history=history)


# ---------------------------------------------------------------------------
# Inference and cleanup
# ---------------------------------------------------------------------------

_CLEANUP_KERNEL = np.ones((3, 3), dtype=np.uint8)
_CLEANUP_ITERATIONS = 2


def cleanup_mask(mask: np.ndarray) -> np.ndarray:
    """Morphological open (erode then dilate, 3x3, 2 iterations each).

    Thin box outlines left by panel borders must not survive; blobs wider
    than the structuring element are preserved up to corner rounding.
    """
    m = (np.asarray(mask) > 0).astype(np.uint8)
    m = cv2.erode(m, _CLEANUP_KERNEL, iterations=_CLEANUP_ITERATIONS)
    m = cv2.dilate(m, _CLEANUP_KERNEL, iterations=_CLEANUP_ITERATIONS)
    return m


def predict_mask(model: MaskerModel, cfd_snippet: VideoSnippet) -> CfdMask:
    """Per-frame sigmoid maps thresholded at 0.5, then cleaned up; binary output."""
    probs = model.predict_frames(cfd_snippet.frames)
    masks = np.stack([cleanup_mask(p > 0.5) for p in probs])
    return CfdMask(masks=masks)
