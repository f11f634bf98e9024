"""Quantitative evaluation: SSIM, FID, Wasserstein-1, Dice, F1, MWU, fool rate.

All functions are pure and operate on numpy arrays / plain containers, so
per-video metric computation can be parallelized freely by callers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Optional, Sequence

import cv2
import numpy as np
from scipy import linalg

from .errors import ConfigError, GeometryError

# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

_LUMA = np.array([0.299, 0.587, 0.114])  # BT.601


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(coords ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    pad = kernel.shape[0] // 2
    out = cv2.filter2D(img, -1, kernel, borderType=cv2.BORDER_CONSTANT)
    return out[pad:-pad, pad:-pad]


def to_luminance(frame: np.ndarray) -> np.ndarray:
    """RGB (H, W, 3) -> luminance (H, W); grayscale passes through."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    return frame @ _LUMA


def ssim_frame(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM between two frames' luminance, valid windows only."""
    if a.shape != b.shape:
        raise GeometryError(f"SSIM shape mismatch: {a.shape} vs {b.shape}")
    x = to_luminance(a)
    y = to_luminance(b)
    if min(x.shape) < SSIM_WINDOW:
        raise GeometryError(f"frame smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    mu_x = _filter_valid(x, kernel)
    mu_y = _filter_valid(y, kernel)
    s_xx = _filter_valid(x * x, kernel) - mu_x * mu_x
    s_yy = _filter_valid(y * y, kernel) - mu_y * mu_y
    s_xy = _filter_valid(x * y, kernel) - mu_x * mu_y

    num = (2 * mu_x * mu_y + c1) * (2 * s_xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (s_xx + s_yy + c2)
    return float(np.mean(num / den))


def ssim_video(a: np.ndarray, b: np.ndarray) -> float:
    """Per-frame SSIM averaged over the video's frames. Inputs (T, H, W[, 3]) in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise GeometryError(f"SSIM shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean([ssim_frame(a[t], b[t]) for t in range(a.shape[0])]))


# ---------------------------------------------------------------------------
# FID
# ---------------------------------------------------------------------------

class RandomConvEmbedder:
    """Frozen random patch-convolution feature extractor.

    Desk-scale stand-in for a pretrained deep embedder: frames are cut into
    patches, each patch is mapped through a fixed random linear filter bank
    with ReLU, and features are mean- and max-pooled over patches. Absolute
    FID values from this embedder are not comparable across embedders, so
    reports carry its name.
    """

    name = "random-conv-192"

    def __init__(self, dim: int = 192, patch: int = 8, seed: int = 1234):
        if dim % 2 != 0:
            raise ConfigError("embedder dim must be even (mean+max pooled halves)")
        rng = np.random.default_rng([seed, dim, patch])
        self.patch = patch
        self.dim = dim
        self.weights = rng.standard_normal((patch * patch * 3, dim // 2)) / math.sqrt(patch * patch * 3)
        self.bias = rng.uniform(-0.2, 0.2, size=dim // 2)

    def embed_frame(self, frame: np.ndarray) -> np.ndarray:
        frame = np.asarray(frame, dtype=np.float64)
        if frame.ndim == 2:
            frame = np.repeat(frame[..., None], 3, axis=-1)
        p = self.patch
        h, w = frame.shape[:2]
        hp, wp = h - h % p, w - w % p
        patches = frame[:hp, :wp].reshape(hp // p, p, wp // p, p, 3)
        patches = patches.transpose(0, 2, 1, 3, 4).reshape(-1, p * p * 3)
        acts = np.maximum(patches @ self.weights + self.bias, 0.0)
        return np.concatenate([acts.mean(axis=0), acts.max(axis=0)])

    def embed_frames(self, frames: Iterable[np.ndarray]) -> np.ndarray:
        return np.stack([self.embed_frame(f) for f in frames])


def fid(features_a: np.ndarray, features_b: np.ndarray, eps: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + tr(Ca + Cb - 2 sqrt(Ca Cb)), with eps*I added to both
    covariances for numerical stability and any imaginary residue of the
    matrix square root discarded. Clamped at 0.
    """
    fa = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    fb = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if fa.shape[0] < 2 or fb.shape[0] < 2:
        raise ConfigError("FID needs at least 2 feature vectors per set")
    if fa.shape[1] != fb.shape[1]:
        raise GeometryError("feature dimensionality mismatch")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    ca = np.cov(fa, rowvar=False) + eps * np.eye(fa.shape[1])
    cb = np.cov(fb, rowvar=False) + eps * np.eye(fb.shape[1])
    covmean = linalg.sqrtm(ca @ cb)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(covmean))
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# Wasserstein-1
# ---------------------------------------------------------------------------

def wasserstein1(samples_a: Sequence[float], samples_b: Sequence[float]) -> float:
    """1-D earth-mover distance via the quantile-function integral."""
    a = np.sort(np.asarray(samples_a, dtype=np.float64))
    b = np.sort(np.asarray(samples_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ConfigError("wasserstein1 needs non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    qs = np.union1d(np.arange(a.size + 1) / a.size, np.arange(b.size + 1) / b.size)
    mids = (qs[:-1] + qs[1:]) / 2
    ia = np.minimum((mids * a.size).astype(int), a.size - 1)
    ib = np.minimum((mids * b.size).astype(int), b.size - 1)
    return float(np.sum((qs[1:] - qs[:-1]) * np.abs(a[ia] - b[ib])))


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    a = np.asarray(mask_a) > 0
    b = np.asarray(mask_b) > 0
    if a.shape != b.shape:
        raise GeometryError(f"dice shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


# ---------------------------------------------------------------------------
# Classification report with per-video majority vote
# ---------------------------------------------------------------------------

@dataclass
class ClassificationReport:
    classes: list
    per_class_f1: dict
    overall_f1: float
    confusion: np.ndarray  # row-normalized, rows = truth
    video_predictions: list


def _majority_vote(preds: Sequence, confidences: Optional[Sequence[float]]):
    counts: dict = {}
    for p in preds:
        counts[p] = counts.get(p, 0) + 1
    top = max(counts.values())
    tied = sorted([c for c, n in counts.items() if n == top], key=str)
    if len(tied) == 1:
        return tied[0]
    if confidences is not None:
        means = {}
        for c in tied:
            vals = [conf for p, conf in zip(preds, confidences) if p == c]
            means[c] = float(np.mean(vals))
        return max(tied, key=lambda c: (means[c], ))
    return tied[0]  # lowest class in sort order


def classification_report(frame_preds: Sequence[Sequence], labels: Sequence,
                          confidences: Optional[Sequence[Sequence[float]]] = None
                          ) -> ClassificationReport:
    """Video-level report from per-frame predictions.

    The video prediction is the most frequent frame prediction (ties broken
    by highest mean confidence when given, else lowest class in sort order).
    Overall F1 is the support-weighted mean of per-class F1; the confusion
    matrix is row-normalized over true classes.
    """
    if len(frame_preds) == 0:
        raise ConfigError("no predictions given")
    if len(frame_preds) != len(labels):
        raise ConfigError("frame_preds and labels must align")
    video_preds = []
    for i, preds in enumerate(frame_preds):
        if len(preds) == 0:
            raise ConfigError(f"video {i} has no frame predictions")
        conf = confidences[i] if confidences is not None else None
        video_preds.append(_majority_vote(preds, conf))

    classes = sorted(set(labels) | set(video_preds), key=str)
    index = {c: k for k, c in enumerate(classes)}
    confusion = np.zeros((len(classes), len(classes)), dtype=np.float64)
    for truth, pred in zip(labels, video_preds):
        confusion[index[truth], index[pred]] += 1

    per_class_f1 = {}
    for c in classes:
        k = index[c]
        tp = confusion[k, k]
        fp = confusion[:, k].sum() - tp
        fn = confusion[k, :].sum() - tp
        denom = 2 * tp + fp + fn
        per_class_f1[c] = float(2 * tp / denom) if denom > 0 else 0.0

    supports = confusion.sum(axis=1)
    total = supports.sum()
    overall = float(sum(per_class_f1[c] * supports[index[c]] for c in classes) / total)

    row_sums = confusion.sum(axis=1, keepdims=True)
    normalized = np.divide(confusion, row_sums, out=np.zeros_like(confusion),
                           where=row_sums > 0)
    return ClassificationReport(classes=classes, per_class_f1=per_class_f1,
                                overall_f1=overall, confusion=normalized,
                                video_predictions=video_preds)


# ---------------------------------------------------------------------------
# Mann-Whitney U
# ---------------------------------------------------------------------------

EXACT_MWU_LIMIT = 12


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def mwu(sample_a: Sequence[float], sample_b: Sequence[float]) -> tuple[float, float]:
    """Two-sided Mann-Whitney U test.

    Returns (U, p) where U is the statistic for sample_a. Exact permutation
    enumeration when n_a + n_b <= 12, tie-corrected continuity-corrected
    normal approximation otherwise.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ConfigError("mwu needs non-empty samples")
    n1, n2 = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u1 = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    mean_u = n1 * n2 / 2.0

    if n1 + n2 <= EXACT_MWU_LIMIT:
        observed_dev = abs(u1 - mean_u)
        count = 0
        total = 0
        for idx in combinations(range(n1 + n2), n1):
            u = float(ranks[list(idx)].sum() - n1 * (n1 + 1) / 2)
            if abs(u - mean_u) >= observed_dev - 1e-12:
                count += 1
            total += 1
        return u1, count / total

    # Tie-corrected normal approximation with continuity correction.
    n = n1 + n2
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts ** 3 - tie_counts))
    tie_factor = 1.0 - tie_term / (n ** 3 - n)
    sigma = math.sqrt(tie_factor * n1 * n2 * (n + 1) / 12.0)
    if sigma == 0.0:
        return u1, 1.0
    z = max(abs(u1 - mean_u) - 0.5, 0.0) / sigma
    p = math.erfc(z / math.sqrt(2))
    return u1, min(p, 1.0)


# ---------------------------------------------------------------------------
# Fool rate vs SSIM
# ---------------------------------------------------------------------------

@dataclass
class FoolRateAnalysis:
    fool_rates: dict
    slope: Optional[float]
    intercept: Optional[float]
    r_squared: Optional[float]


def fool_rate_analysis(responses: Mapping[str, Sequence[bool]],
                       ssim_per_video: Mapping[str, float]) -> FoolRateAnalysis:
    """Fool rate per synthetic video plus OLS of fool rate on SSIM.

    responses maps video id to rater verdicts (True = judged real). Videos
    without an SSIM entry contribute a fool rate but not to the regression.
    A constant SSIM column leaves slope/R^2 undefined (None).
    """
    if not responses:
        raise ConfigError("no responses")
    rates = {}
    for vid, verdicts in responses.items():
        if len(verdicts) == 0:
            raise ConfigError(f"video {vid} has no rater verdicts")
        rates[vid] = float(np.mean([1.0 if v else 0.0 for v in verdicts]))

    common = [v for v in rates if v in ssim_per_video]
    if len(common) < 2:
        return FoolRateAnalysis(rates, None, None, None)
    x = np.array([ssim_per_video[v] for v in common], dtype=np.float64)
    y = np.array([rates[v] for v in common], dtype=np.float64)
    if np.ptp(x) == 0.0:
        return FoolRateAnalysis(rates, None, None, None)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot < 1e-300:
        r2: Optional[float] = 1.0 if ss_res < 1e-300 else None
    else:
        r2 = 1.0 - ss_res / ss_tot
    return FoolRateAnalysis(rates, float(slope), float(intercept), r2)


# ---------------------------------------------------------------------------
# Report aggregation
# ---------------------------------------------------------------------------

@dataclass
class StratumStats:
    mean: float
    std: float
    lo: float
    hi: float
    count: int

    @staticmethod
    def of(values: Sequence[float]) -> "StratumStats":
        arr = np.asarray(values, dtype=np.float64)
        return StratumStats(mean=float(arr.mean()), std=float(arr.std()),
                            lo=float(arr.min()), hi=float(arr.max()), count=int(arr.size))

    def to_json(self) -> dict:
        return {"mean": self.mean, "std": self.std, "range": [self.lo, self.hi],
                "count": self.count}


@dataclass
class MetricsReport:
    ssim_synthetic: dict        # video key -> SSIM(synthetic, real)
    ssim_cfd: dict              # video key -> SSIM(cfd, real)
    strata: dict                # "Q1".."Q4", "OVERALL" -> {synthetic, cfd, wasserstein}
    fid_value: Optional[float] = None
    embedder: Optional[str] = None
    dice_scores: Optional[dict] = None
    f1_block: Optional[dict] = None
    provenance: dict = field(default_factory=dict)
    unpaired: list = field(default_factory=list)

    def to_json(self) -> dict:
        strata = {}
        for key, row in self.strata.items():
            strata[key] = {"synthetic": row["synthetic"].to_json(),
                           "cfd": row["cfd"].to_json(),
                           "wasserstein": row["wasserstein"]}
        return {"ssim_synthetic": self.ssim_synthetic, "ssim_cfd": self.ssim_cfd,
                "strata": strata, "fid": self.fid_value, "embedder": self.embedder,
                "dice": self.dice_scores, "f1": self.f1_block,
                "provenance": self.provenance, "unpaired": self.unpaired}


def stratified_report(ssim_synthetic: Mapping[str, float], ssim_cfd: Mapping[str, float],
                      quartile_of: Mapping[str, str]) -> dict:
    """Per-quartile and overall SSIM aggregates plus Wasserstein shifts."""
    strata = {}
    keys = sorted(set(q for q in quartile_of.values()))
    for stratum in keys + ["OVERALL"]:
        if stratum == "OVERALL":
            vids = [v for v in ssim_synthetic if v in ssim_cfd]
        else:
            vids = [v for v in ssim_synthetic
                    if v in ssim_cfd and quartile_of.get(v) == stratum]
        if not vids:
            continue
        synth = [ssim_synthetic[v] for v in vids]
        cfd = [ssim_cfd[v] for v in vids]
        strata[stratum] = {"synthetic": StratumStats.of(synth),
                           "cfd": StratumStats.of(cfd),
                           "wasserstein": wasserstein1(synth, cfd)}
    return strata
