"""Deterministic synthetic paired B-mode/CFD ultrasound video generator.

Each clip renders a fan-shaped scan sector containing speckled tissue with
pulsating dark chambers; the CFD panel additionally carries a red-blue flow
overlay inside a Doppler ROI. The dual frame is the two panels side by side
(left B-mode, right CFD), and the ground-truth CFD mask marks exactly the
pixels whose color differs between the panels.

Everything is a pure function of (config, seed): identical configs produce
bit-identical files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataio
from .dataio import DatasetManifest, ManifestRecord, PanelLayout, chroma_of_difference
from .errors import ConfigError

# Saturation above which a blended pixel counts as CFD-colored; edge pixels
# below it must sit within one pixel of the mask boundary.
CHROMA_THRESHOLD = 0.1

# Per-clip coverage multipliers, cycled so any prefix keeps the dataset mean
# close to the configured target while spanning all four coverage quartiles.
_COVERAGE_SPREAD = (1.15, 0.55, 1.5, 0.8)

_ADULT_VIEWS = ("A2C", "A5C", "A3C", "4CH", "AortaIVC", "AortaSVC",
                "PLAX", "RVI", "RVO", "SAX", "SAXB", "SUB4C")

_ORANGE_TINT = np.array([1.0, 0.62, 0.25], dtype=np.float32)

# Red-blue Doppler ramp anchors: flow toward the probe maps red to yellow,
# away maps blue to cyan.
_POS_LOW = np.array([0.85, 0.08, 0.08], dtype=np.float32)
_POS_HIGH = np.array([1.0, 0.85, 0.15], dtype=np.float32)
_NEG_LOW = np.array([0.08, 0.12, 0.85], dtype=np.float32)
_NEG_HIGH = np.array([0.15, 0.9, 0.95], dtype=np.float32)


@dataclass
class PhantomConfig:
    seed: int = 0
    num_clips: int = 8
    frames_per_clip: int = 10
    canvas: tuple[int, int] = (256, 512)  # (height, width) of the dual frame
    chromamap: str = "gray"               # {"gray", "orange"}
    cfd_coverage_target: float = 0.10
    fiducials_on: bool = True
    motion_amplitude: float = 0.06        # fraction of chamber size
    speckle_sigma: float = 0.3            # multiplicative log-amplitude; 0 = smooth
    clips_per_exam: int = 2
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def validate(self) -> None:
        if self.frames_per_clip < 10 or self.frames_per_clip % 10 != 0:
            raise ConfigError("frames_per_clip must be a positive multiple of 10")
        if not 0.0 <= self.cfd_coverage_target <= 1.0:
            raise ConfigError("cfd_coverage_target must lie in [0, 1]")
        if self.chromamap not in ("gray", "orange"):
            raise ConfigError(f"unknown chromamap {self.chromamap!r}")
        if self.canvas[0] < 32 or self.canvas[1] < 64 or self.canvas[1] % 2 != 0:
            raise ConfigError("canvas must be at least 32x64 with even width")
        if self.num_clips < 1 or self.clips_per_exam < 1:
            raise ConfigError("num_clips and clips_per_exam must be positive")
        if self.speckle_sigma < 0:
            raise ConfigError("speckle_sigma must be >= 0")

    @property
    def panel_shape(self) -> tuple[int, int]:
        return self.canvas[0], self.canvas[1] // 2


@dataclass
class PhantomScene:
    """Per-clip geometry and texture parameters, fixed at clip creation."""

    apex: tuple[float, float]             # (x, y) in panel pixels
    span_deg: float
    radius: float
    chambers: list[dict] = field(default_factory=list)
    doppler_roi: np.ndarray = None        # (4, 2) quadrilateral corners
    flow: Optional[dict] = None           # ellipse of the colored region; None if coverage 0
    tissue_bumps: list[dict] = field(default_factory=list)
    speckle_sigma: float = 0.3
    noise_seed: int = 0
    view_label: str = "4CH"
    fiducial_blocks: list[tuple[int, int, int, int]] = field(default_factory=list)
    colorbar_box: Optional[tuple[int, int, int, int]] = None


def _point_in_sector(x: float, y: float, apex: tuple[float, float],
                     span_deg: float, radius: float, margin: float = 0.0) -> bool:
    dx, dy = x - apex[0], y - apex[1]
    r = math.hypot(dx, dy)
    if r > radius - margin or dy <= 0:
        return False
    angle = math.degrees(math.atan2(dx, dy))
    return abs(angle) <= span_deg / 2 - margin


def make_scene(config: PhantomConfig, clip_index: int) -> PhantomScene:
    """Build the deterministic per-clip scene from the config seed."""
    config.validate()
    rng = np.random.default_rng([config.seed, clip_index, 0x5EC7])
    h, w = config.panel_shape
    apex = (w / 2 + rng.uniform(-0.02, 0.02) * w, 2.0)
    span = 84.0 + rng.uniform(-4, 4)
    radius = 0.95 * h

    # Smooth tissue texture: a handful of broad gaussian bumps over a base level.
    bumps = []
    for _ in range(5):
        bumps.append({
            "center": (rng.uniform(0.2, 0.8) * w, rng.uniform(0.2, 0.9) * h),
            "sigma": rng.uniform(0.12, 0.3) * h,
            "amp": rng.uniform(-0.12, 0.18),
        })

    # Two or three dark blood-pool chambers along the beam axis, kept well
    # inside the sector so deforming them never crosses its edge.
    chambers = []
    for k in range(int(rng.integers(2, 4))):
        depth = rng.uniform(0.35, 0.75) * radius
        lateral = rng.uniform(-0.22, 0.22) * depth
        cx, cy = apex[0] + lateral, apex[1] + depth
        if not _point_in_sector(cx, cy, apex, span, radius, margin=0.1 * radius):
            cx, cy = apex[0], apex[1] + 0.5 * radius
        chambers.append({
            "center": (cx, cy),
            "axes": (rng.uniform(0.08, 0.16) * h, rng.uniform(0.06, 0.12) * h),
            "angle": rng.uniform(0, math.pi),
            "phase": rng.uniform(0, 2 * math.pi),
            "depth": rng.uniform(0.5, 0.8),
        })

    # Flow region: an ellipse sized analytically from the per-clip coverage
    # target, centered mid-sector. Pulsation is area-neutral to first order.
    spread = _COVERAGE_SPREAD[clip_index % len(_COVERAGE_SPREAD)]
    coverage = config.cfd_coverage_target * spread * rng.uniform(0.97, 1.03)
    flow = None
    roi = np.array([[2, 2], [3, 2], [3, 3], [2, 3]], dtype=np.float32)
    if coverage > 0:
        aspect = 1.4
        a = math.sqrt(coverage * h * w * aspect / math.pi)
        a = min(a, 0.42 * radius)  # keep the ROI inside the sector
        b = a / aspect
        center = (apex[0] + rng.uniform(-0.05, 0.05) * w, apex[1] + 0.62 * radius)
        flow = {
            "center": center,
            "axes": (a, b),
            "angle": rng.uniform(-0.3, 0.3),
            "phase": rng.uniform(0, 2 * math.pi),
            "stripe_freq": rng.uniform(1.0, 2.0),
        }
        mx, my = 1.12 * a, 1.12 * b
        roi = np.array([
            [center[0] - mx, center[1] - my],
            [center[0] + mx, center[1] - my],
            [center[0] + mx, center[1] + my],
            [center[0] - mx, center[1] + my],
        ], dtype=np.float32)

    # Static annotation glyphs plus a color-bar strip, all kept clear of the
    # sector (with margin) so they never merge with its connected component.
    blocks = []
    colorbar = None
    if config.fiducials_on:
        def clear_of_sector(x, y, bw, bh, margin=3.0):
            corners = [(x - margin, y - margin), (x + bw + margin, y - margin),
                       (x - margin, y + bh + margin), (x + bw + margin, y + bh + margin)]
            return not any(_point_in_sector(cx, cy, apex, span, radius + margin)
                           for (cx, cy) in corners)

        gw, gh = max(6, w // 24), max(3, h // 40)
        candidates = [
            (2, 2, gw, gh),
            (2, 2 + 2 * gh, gw, gh),
            (w - gw - 2, 2, gw, gh),
            (2, h - gh - 2, gw, gh),
        ]
        blocks = [b for b in candidates if clear_of_sector(*b)]
        cb_w = max(3, w // 40)
        cb = (w - cb_w - 1, 2 + 2 * gh, cb_w, h // 4)
        if clear_of_sector(*cb):
            colorbar = cb

    return PhantomScene(
        apex=apex, span_deg=span, radius=radius, chambers=chambers,
        doppler_roi=roi, flow=flow, tissue_bumps=bumps,
        speckle_sigma=config.speckle_sigma, noise_seed=int(rng.integers(0, 2**31 - 1)),
        view_label=_ADULT_VIEWS[clip_index % len(_ADULT_VIEWS)],
        fiducial_blocks=blocks, colorbar_box=colorbar,
    )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _sector_mask(shape: tuple[int, int], apex: tuple[float, float],
                 span_deg: float, radius: float) -> np.ndarray:
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs - apex[0]
    dy = ys - apex[1]
    r = np.hypot(dx, dy)
    angle = np.degrees(np.arctan2(dx, np.maximum(dy, 1e-9)))
    return (r <= radius) & (dy > 0) & (np.abs(angle) <= span_deg / 2)


def _ellipse_q(shape: tuple[int, int], center: tuple[float, float],
               axes: tuple[float, float], angle: float) -> np.ndarray:
    """Normalized quadratic form of an ellipse: q <= 1 inside."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs - center[0]
    dy = ys - center[1]
    ca, sa = math.cos(angle), math.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return (u / max(axes[0], 1e-6)) ** 2 + (v / max(axes[1], 1e-6)) ** 2


def _quad_mask(shape: tuple[int, int], quad: np.ndarray) -> np.ndarray:
    """Filled convex quadrilateral via half-plane intersection (any winding)."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    n = len(quad)
    area2 = sum(quad[i][0] * quad[(i + 1) % n][1] - quad[(i + 1) % n][0] * quad[i][1]
                for i in range(n))
    sign = 1.0 if area2 >= 0 else -1.0
    inside = np.ones(shape, dtype=bool)
    for i in range(n):
        x0, y0 = quad[i]
        x1, y1 = quad[(i + 1) % n]
        inside &= sign * ((x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)) >= 0
    return inside


def render_bmode_panel(scene: PhantomScene, frame_index: int,
                       config: PhantomConfig) -> np.ndarray:
    """Speckled grayscale tissue inside the sector; float (H, Wp) in [0, 1]."""
    h, w = config.panel_shape
    tissue = np.full((h, w), 0.42, dtype=np.float32)
    ys, xs = np.mgrid[0:h, 0:w]
    for bump in scene.tissue_bumps:
        cx, cy = bump["center"]
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        tissue += bump["amp"] * np.exp(-d2 / (2 * bump["sigma"] ** 2)).astype(np.float32)

    # One deformation cycle per 10-frame snippet.
    t = 2 * math.pi * (frame_index % 10) / 10.0
    for ch in scene.chambers:
        scale = 1.0 + config.motion_amplitude * math.sin(t + ch["phase"])
        axes = (ch["axes"][0] * scale, ch["axes"][1] * scale)
        q = _ellipse_q((h, w), ch["center"], axes, ch["angle"])
        pool = np.clip((1.0 - q) * 4.0, 0.0, 1.0)  # soft-edged pool
        tissue *= 1.0 - ch["depth"] * pool

    rng = np.random.default_rng([scene.noise_seed, frame_index])
    log_noise = rng.standard_normal((h, w)).astype(np.float32)
    speckle = np.exp(scene.speckle_sigma * log_noise - scene.speckle_sigma ** 2 / 2)
    panel = np.clip(tissue * speckle, 0.0, 1.0)
    panel *= _sector_mask((h, w), scene.apex, scene.span_deg, scene.radius)
    return panel


def _apply_chromamap(intensity: np.ndarray, chromamap: str) -> np.ndarray:
    if chromamap == "orange":
        return np.clip(intensity[..., None] * _ORANGE_TINT, 0.0, 1.0)
    return np.repeat(intensity[..., None], 3, axis=-1)


def _flow_fields(scene: PhantomScene, frame_index: int,
                 config: PhantomConfig) -> tuple[np.ndarray, np.ndarray]:
    """Alpha in [0, 1] and signed velocity in [-1, 1] of the color overlay."""
    h, w = config.panel_shape
    if scene.flow is None:
        zero = np.zeros((h, w), dtype=np.float32)
        return zero, zero
    t = 2 * math.pi * (frame_index % 10) / 10.0
    fl = scene.flow
    scale = 1.0 + 0.5 * config.motion_amplitude * math.sin(t + fl["phase"])
    a, b = fl["axes"][0] * scale, fl["axes"][1] * scale
    q = _ellipse_q((h, w), fl["center"], (a, b), fl["angle"])
    # Edge ramp about one pixel wide regardless of blob size.
    width = 2.2 / max(a, 2.0)
    alpha = np.clip((1.0 - q) / width, 0.0, 1.0).astype(np.float32) * 0.85
    alpha *= _quad_mask((h, w), scene.doppler_roi)
    alpha *= _sector_mask((h, w), scene.apex, scene.span_deg, scene.radius)

    ys, xs = np.mgrid[0:h, 0:w]
    u = (xs - fl["center"][0]) / max(a, 1e-6)
    vel = np.sin(math.pi * fl["stripe_freq"] * u + t).astype(np.float32)
    return alpha, np.clip(vel, -1.0, 1.0)


def _palette(vel: np.ndarray) -> np.ndarray:
    """Map signed velocity to the red-blue Doppler ramp; always saturated."""
    mag = np.abs(vel)[..., None]
    pos = _POS_LOW + (_POS_HIGH - _POS_LOW) * mag
    neg = _NEG_LOW + (_NEG_HIGH - _NEG_LOW) * mag
    return np.where(vel[..., None] >= 0, pos, neg).astype(np.float32)


def _paint_fiducials(panel: np.ndarray, scene: PhantomScene) -> np.ndarray:
    out = panel.copy()
    for (x, y, bw, bh) in scene.fiducial_blocks:
        out[y:y + bh, x:x + bw] = 0.85
    if scene.colorbar_box is not None:
        x, y, bw, bh = scene.colorbar_box
        ramp = np.linspace(1.0, -1.0, bh, dtype=np.float32)
        out[y:y + bh, x:x + bw] = _palette(np.tile(ramp[:, None], (1, bw)))
    return out


def fiducial_mask(scene: PhantomScene, config: PhantomConfig) -> np.ndarray:
    """Static binary mask of the annotation glyphs and color bar, per panel."""
    h, w = config.panel_shape
    mask = np.zeros((h, w), dtype=np.uint8)
    for (x, y, bw, bh) in scene.fiducial_blocks:
        mask[y:y + bh, x:x + bw] = 1
    if scene.colorbar_box is not None:
        x, y, bw, bh = scene.colorbar_box
        mask[y:y + bh, x:x + bw] = 1
    return mask


def render_dual_frame(scene: PhantomScene, frame_index: int,
                      config: PhantomConfig) -> tuple[np.ndarray, np.ndarray]:
    """Render one dual frame and its ground-truth CFD mask.

    Returns (dual_frame, gt_mask): the dual frame is float RGB (H, W, 3) with
    the B-mode panel on the left and the CFD panel on the right; gt_mask is
    uint8 (H, W/2) marking pixels whose chroma difference between the panels
    exceeds CHROMA_THRESHOLD.
    """
    if not 0 <= frame_index < config.frames_per_clip:
        raise IndexError(f"frame_index {frame_index} outside [0, {config.frames_per_clip})")
    intensity = render_bmode_panel(scene, frame_index, config)
    bmode = _apply_chromamap(intensity, config.chromamap)

    alpha, vel = _flow_fields(scene, frame_index, config)
    color = _palette(vel)
    cfd = bmode + alpha[..., None] * (color - bmode)

    gt = (chroma_of_difference(cfd, bmode) > CHROMA_THRESHOLD).astype(np.uint8)

    if config.fiducials_on:
        bmode = _paint_fiducials(bmode, scene)
        cfd = _paint_fiducials(cfd, scene)

    dual = np.concatenate([bmode, cfd], axis=1)
    return np.clip(dual, 0.0, 1.0), gt


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def _assign_splits(exam_ids: list[str], fractions: tuple[float, float, float],
                   seed: int) -> dict[str, str]:
    rng = np.random.default_rng([seed, 0x5971])
    order = list(exam_ids)
    rng.shuffle(order)
    n = len(order)
    n_val = int(math.floor(fractions[1] * n))
    n_test = int(math.floor(fractions[2] * n))
    n_train = n - n_val - n_test
    if n_train < 1:
        n_train, n_val, n_test = n, 0, 0
    assignment = {}
    for i, exam in enumerate(order):
        if i < n_train:
            assignment[exam] = "train"
        elif i < n_train + n_val:
            assignment[exam] = "val"
        else:
            assignment[exam] = "test"
    return assignment


def generate_dataset(config: PhantomConfig, output_root: str | Path) -> DatasetManifest:
    """Render all clips under output_root and write manifest.ndjson.

    Per clip: one PNG per dual frame, one 1-bit PNG per ground-truth mask, a
    static fiducial mask when fiducials are on, and a manifest record with
    exam id, split, and mean CFD coverage.
    """
    config.validate()
    root = Path(output_root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output root {root} is not writable: {exc}") from exc

    exam_of_clip = [f"exam{i // config.clips_per_exam:03d}" for i in range(config.num_clips)]
    splits = _assign_splits(sorted(set(exam_of_clip)), config.split_fractions, config.seed)

    layout = PanelLayout.side_by_side(*config.canvas)
    manifest = DatasetManifest(root=root)
    h, w = config.panel_shape
    for clip_index in range(config.num_clips):
        scene = make_scene(config, clip_index)
        clip_id = f"clip{clip_index:04d}"
        frame_paths, mask_paths, coverages = [], [], []
        for f in range(config.frames_per_clip):
            dual, gt = render_dual_frame(scene, f, config)
            frame_rel = f"frames/{clip_id}/f{f:03d}.png"
            mask_rel = f"masks/{clip_id}/f{f:03d}.png"
            dataio.write_image(root / frame_rel, dual)
            dataio.write_mask(root / mask_rel, gt)
            frame_paths.append(frame_rel)
            mask_paths.append(mask_rel)
            coverages.append(float(gt.sum()) / (h * w))
        fid_rel = None
        if config.fiducials_on:
            fid_rel = f"masks/{clip_id}/fiducials.png"
            dataio.write_mask(root / fid_rel, fiducial_mask(scene, config))
        manifest.records.append(ManifestRecord(
            exam_id=exam_of_clip[clip_index], clip_id=clip_id, frames=frame_paths,
            split=splits[exam_of_clip[clip_index]], masks=mask_paths,
            coverage=float(np.mean(coverages)), view_label=scene.view_label,
            fiducial_mask=fid_rel, layout=layout))

    dataio.save_manifest(manifest, root / "manifest.ndjson")
    return manifest
