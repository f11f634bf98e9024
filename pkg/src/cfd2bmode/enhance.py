"""Classical image processing between the coarse and refinement stages.

Gated convolutions suppress high-frequency content, so the coarse output is
re-textured before refinement: speckle-like additive noise, contrast stretch
about the frame mean, and repeated detail sharpening. At inference time an
extra edge/contrast enhancement is composited inside a blurred version of
the CFD mask before those offline steps. Finally, static fiducials are
copied back from the real B-mode video, since the generator cannot be
trusted with burned-in text.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np

from .errors import ConfigError, GeometryError

# 3x3 sharpening kernels with the classic "detail" / "edge enhance"
# coefficients (center-heavy, normalized by their coefficient sum).
DETAIL_KERNEL = np.array([[0, -1, 0], [-1, 10, -1], [0, -1, 0]], dtype=np.float64) / 6.0
EDGE_ENHANCE_KERNEL = np.array([[-1, -1, -1], [-1, 10, -1], [-1, -1, -1]], dtype=np.float64) / 2.0


@dataclass
class EnhanceConfig:
    speckle_sigma: float = 0.025
    contrast_offline: float = 1.2
    detail_iterations: int = 2
    contrast_inference: float = 1.5
    blur_kernel: int = 25
    blur_sigma: float = 50.0
    mode: str = "offline"  # {"offline", "inference"}
    multiplicative_speckle: bool = False

    def validate(self) -> None:
        if self.blur_kernel % 2 == 0 or self.blur_kernel < 1:
            raise ConfigError("blur_kernel must be odd and positive")
        if self.speckle_sigma < 0 or self.blur_sigma < 0:
            raise ConfigError("sigmas must be >= 0")
        if self.contrast_offline <= 0 or self.contrast_inference <= 0:
            raise ConfigError("contrast factors must be > 0")
        if self.mode not in ("offline", "inference"):
            raise ConfigError(f"unknown enhance mode {self.mode!r}")
        if self.detail_iterations < 0:
            raise ConfigError("detail_iterations must be >= 0")


def blur_mask(masks: np.ndarray, config: EnhanceConfig) -> np.ndarray:
    """Per-frame Gaussian blur of a binary mask; output in [0, 1]."""
    config.validate()
    m = np.asarray(masks, dtype=np.float32)
    single = m.ndim == 2
    if single:
        m = m[None]
    out = np.empty_like(m)
    for t in range(m.shape[0]):
        out[t] = cv2.GaussianBlur(m[t], (config.blur_kernel, config.blur_kernel),
                                  config.blur_sigma, borderType=cv2.BORDER_REPLICATE)
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def _per_frame_filter(video: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.empty_like(video)
    for t in range(video.shape[0]):
        out[t] = cv2.filter2D(video[t], -1, kernel, borderType=cv2.BORDER_REPLICATE)
    return out


def _contrast(video: np.ndarray, factor: float) -> np.ndarray:
    """Scale deviations from each frame's mean intensity."""
    means = video.reshape(video.shape[0], -1).mean(axis=1).reshape(-1, 1, 1, 1)
    return means + factor * (video - means)


def enhance_coarse(coarse: np.ndarray, soft_mask: Optional[np.ndarray],
                   config: EnhanceConfig,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Post-process a coarse output video (T, H, W, 3) in [0, 1].

    Offline mode: additive zero-mean noise, contrast stretch about the frame
    mean, detail sharpening applied detail_iterations times, clip.
    Inference mode: first composite edge-enhanced/contrast-boosted pixels
    inside the soft mask (enhanced*m + original*(1-m)), then the offline
    steps. A neutral config (sigma 0, factors 1.0, 0 iterations) is the
    identity.
    """
    config.validate()
    video = np.asarray(coarse, dtype=np.float32)
    if video.ndim != 4 or video.shape[-1] != 3:
        raise GeometryError(f"expected (T, H, W, 3) video, got {video.shape}")

    if config.mode == "inference":
        if soft_mask is None:
            raise GeometryError("inference mode needs a soft mask")
        m = np.asarray(soft_mask, dtype=np.float32)
        if m.ndim == 2:
            m = np.broadcast_to(m, video.shape[:3])
        if m.shape != video.shape[:3]:
            raise GeometryError(f"soft mask shape {m.shape} does not match video "
                                f"{video.shape[:3]}")
        enhanced = _per_frame_filter(video, EDGE_ENHANCE_KERNEL)
        enhanced = _contrast(enhanced, config.contrast_inference)
        mm = m[..., None]
        video = enhanced * mm + video * (1.0 - mm)

    if config.speckle_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        noise = rng.normal(0.0, config.speckle_sigma, size=video.shape).astype(np.float32)
        if config.multiplicative_speckle:
            video = video * (1.0 + noise)
        else:
            video = video + noise
    if config.contrast_offline != 1.0:
        video = _contrast(video, config.contrast_offline)
    for _ in range(config.detail_iterations):
        video = _per_frame_filter(video, DETAIL_KERNEL)
    return np.clip(video, 0.0, 1.0)


def replace_fiducials(synthetic: np.ndarray, real_bmode: np.ndarray,
                      fiducial_mask: np.ndarray) -> np.ndarray:
    """Composite real pixels over synthetic ones wherever the mask is set.

    The mask may be a single (H, W) image (broadcast over frames, fiducials
    are static) or per-frame (T, H, W). Idempotent.
    """
    synth = np.asarray(synthetic, dtype=np.float32)
    real = np.asarray(real_bmode, dtype=np.float32)
    if synth.shape != real.shape:
        raise GeometryError(f"synthetic {synth.shape} and real {real.shape} differ")
    m = (np.asarray(fiducial_mask) > 0).astype(np.float32)
    if m.ndim == 2:
        if m.shape != synth.shape[1:3]:
            raise GeometryError(f"fiducial mask {m.shape} does not match frames "
                                f"{synth.shape[1:3]}")
        m = np.broadcast_to(m, synth.shape[:3])
    elif m.shape != synth.shape[:3]:
        raise GeometryError(f"fiducial mask {m.shape} does not match video {synth.shape[:3]}")
    mm = m[..., None]
    return real * mm + synth * (1.0 - mm)


def detect_static_fiducials(real_bmode: np.ndarray, sector: np.ndarray,
                            intensity_floor: float = 0.5,
                            motion_ceiling: float = 1e-3) -> np.ndarray:
    """Classical fiducial detection fallback: bright pixels that never move.

    Pixels outside the scan sector whose luminance stays high and constant
    across all frames are treated as burned-in annotations.
    """
    video = np.asarray(real_bmode, dtype=np.float32)
    luma = video.mean(axis=-1)
    static = luma.std(axis=0) <= motion_ceiling
    bright = luma.min(axis=0) >= intensity_floor
    outside = np.asarray(sector) == 0
    return (static & bright & outside).astype(np.uint8)
