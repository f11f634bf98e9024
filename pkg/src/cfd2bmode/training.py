"""Losses, paired augmentation, quartile-weighted sampling, and training loops.

The coarse network is pretrained with plain L1; the refinement GAN then
trains with the four-term loss (L1, mask-weighted L1, discriminator-feature
perceptual, hinge adversarial) against a spectrally-normalized video
discriminator. Sampling draws records with replacement, weighted by coverage
quartile, and one "epoch" is dataset-size draws.

Full-precision runs are bit-reproducible for a fixed seed; mixed precision
trades that away for speed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import cv2
import numpy as np
import torch

from . import dataio, enhance, metrics, nets
from .dataio import DatasetManifest, VideoSnippet
from .enhance import EnhanceConfig
from .errors import ConfigError, DivergenceError
from .masker import CfdMask, MaskerModel, predict_mask


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    l1: float = 5.0
    l1mask: float = 20.0
    perceptual: float = 0.1
    adversarial: float = 1.0

    def validate(self) -> None:
        if min(self.l1, self.l1mask, self.perceptual, self.adversarial) < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass
class AugmentConfig:
    rotate_prob: float = 0.35
    rotate_degrees: float = 10.0
    hflip_prob: float = 0.35
    vflip_prob: float = 0.35
    shift_prob: float = 0.35
    shift_fraction: float = 0.10
    scale_prob: float = 0.35
    scale_fraction: float = 0.08
    blur_prob: float = 0.35
    noise_prob: float = 0.35
    noise_sigma: float = 0.03

    @staticmethod
    def disabled() -> "AugmentConfig":
        return AugmentConfig(rotate_prob=0, hflip_prob=0, vflip_prob=0, shift_prob=0,
                             scale_prob=0, blur_prob=0, noise_prob=0)


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr_coarse: float = 0.0005
    lr_refine: float = 0.0001
    lr_discriminator: float = 0.0002
    betas: tuple[float, float] = (0.9, 0.999)
    mixed_precision: bool = False
    coarse_epochs: int = 20
    refine_max_epochs: int = 50
    val_ssim_stop: float = 0.93
    quartile_weights: tuple[float, float, float, float] = (1.0, 2.0, 3.0, 4.0)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    freeze_discriminator: bool = False
    val_interval: int = 1  # validate (and check the stop rule) every N epochs
    seed: int = 0

    def validate(self) -> None:
        if min(self.lr_coarse, self.lr_refine, self.lr_discriminator) <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for p in (self.augment.rotate_prob, self.augment.hflip_prob, self.augment.vflip_prob,
                  self.augment.shift_prob, self.augment.scale_prob, self.augment.blur_prob,
                  self.augment.noise_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError("augmentation probabilities must lie in [0, 1]")
        self.loss_weights.validate()


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def total_loss(fake: torch.Tensor, real: torch.Tensor, mask: torch.Tensor,
               d_real_feats: Sequence[torch.Tensor], d_fake_feats: Sequence[torch.Tensor],
               d_fake_score: torch.Tensor, weights: LossWeights
               ) -> tuple[torch.Tensor, dict[str, float]]:
    """Four-term generator loss; returns (scalar tensor, per-term values).

    L1 is the global mean absolute error; L1mask averages only over
    mask-positive pixels (0 when the mask is empty, so empty-CFD snippets
    contribute only global terms); the perceptual term averages absolute
    feature differences over all discriminator layers; the adversarial term
    is the hinge generator loss -mean(score).
    """
    weights.validate()
    if fake.shape != real.shape:
        raise ConfigError(f"fake {tuple(fake.shape)} vs real {tuple(real.shape)} shape mismatch")
    diff = (fake - real).abs()
    l1 = diff.mean()

    m = mask
    if m.ndim == 4:  # (N, T, H, W) -> broadcast over channels
        m = m.unsqueeze(1)
    m = m.to(fake.dtype)
    mask_total = m.sum()
    if float(mask_total) > 0:
        l1mask = (diff * m).sum() / (mask_total * fake.shape[1])
    else:
        l1mask = fake.sum() * 0.0

    if len(d_real_feats) != len(d_fake_feats):
        raise ConfigError("discriminator feature lists must align")
    if d_real_feats:
        perceptual = torch.stack([(fr - ff).abs().mean()
                                  for fr, ff in zip(d_real_feats, d_fake_feats)]).mean()
    else:
        perceptual = fake.sum() * 0.0
    adversarial = -d_fake_score.mean()

    total = (weights.l1 * l1 + weights.l1mask * l1mask
             + weights.perceptual * perceptual + weights.adversarial * adversarial)
    components = {"l1": float(l1.detach()), "l1mask": float(l1mask.detach()),
                  "perceptual": float(perceptual.detach()),
                  "adversarial": float(adversarial.detach())}
    return total, components


def hinge_discriminator_loss(real_score: torch.Tensor, fake_score: torch.Tensor) -> torch.Tensor:
    return (torch.relu(1.0 - real_score).mean() + torch.relu(1.0 + fake_score).mean())


# ---------------------------------------------------------------------------
# Paired augmentation
# ---------------------------------------------------------------------------

def _affine_matrix(h: int, w: int, angle: float, scale: float, dx: float, dy: float,
                   hflip: bool, vflip: bool) -> np.ndarray:
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    m = np.eye(3)
    if hflip or vflip:
        f = np.eye(3)
        f[0, 0] = -1.0 if hflip else 1.0
        f[1, 1] = -1.0 if vflip else 1.0
        f[0, 2] = (w - 1.0) if hflip else 0.0
        f[1, 2] = (h - 1.0) if vflip else 0.0
        m = f @ m
    r = np.eye(3)
    r[:2] = cv2.getRotationMatrix2D(center, angle, scale)
    m = r @ m
    t = np.eye(3)
    t[0, 2], t[1, 2] = dx, dy
    return (t @ m)[:2]


def augment_pair(cfd: np.ndarray, bmode: np.ndarray, mask: np.ndarray,
                 rng: np.random.Generator,
                 config: Optional[AugmentConfig] = None
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Paired augmentation of a (cfd, bmode, mask) snippet triple.

    Geometric transforms are drawn once and applied identically to all
    three; blur and additive noise touch the CFD input only. The mask is
    re-binarized at 0.5 after interpolation and all outputs are clipped to
    [0, 1].
    """
    cfg = config or AugmentConfig()
    cfd = np.asarray(cfd, dtype=np.float32).copy()
    bmode = np.asarray(bmode, dtype=np.float32).copy()
    mask = np.asarray(mask, dtype=np.float32).copy()
    t_, h, w = cfd.shape[:3]

    angle = rng.uniform(-cfg.rotate_degrees, cfg.rotate_degrees) \
        if rng.random() < cfg.rotate_prob else 0.0
    hflip = rng.random() < cfg.hflip_prob
    vflip = rng.random() < cfg.vflip_prob
    dx = rng.uniform(-cfg.shift_fraction, cfg.shift_fraction) * w \
        if rng.random() < cfg.shift_prob else 0.0
    dy = rng.uniform(-cfg.shift_fraction, cfg.shift_fraction) * h \
        if rng.random() < cfg.shift_prob else 0.0
    scale = 1.0 + rng.uniform(-cfg.scale_fraction, cfg.scale_fraction) \
        if rng.random() < cfg.scale_prob else 1.0

    if angle != 0.0 or hflip or vflip or dx != 0.0 or dy != 0.0 or scale != 1.0:
        m = _affine_matrix(h, w, angle, scale, dx, dy, hflip, vflip)

        def warp(video, is_mask=False):
            out = np.empty_like(video)
            for i in range(video.shape[0]):
                out[i] = cv2.warpAffine(video[i], m, (w, h), flags=cv2.INTER_LINEAR,
                                        borderMode=cv2.BORDER_CONSTANT, borderValue=0.0)
            return (out > 0.5).astype(np.float32) if is_mask else out

        cfd = warp(cfd)
        bmode = warp(bmode)
        mask = warp(mask, is_mask=True)
    else:
        mask = (mask > 0.5).astype(np.float32)

    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(0.4, 1.2)
        for i in range(t_):
            cfd[i] = cv2.GaussianBlur(cfd[i], (5, 5), sigma)
    if rng.random() < cfg.noise_prob:
        cfd = cfd + rng.normal(0.0, cfg.noise_sigma, size=cfd.shape).astype(np.float32)

    return (np.clip(cfd, 0.0, 1.0), np.clip(bmode, 0.0, 1.0), mask)


# ---------------------------------------------------------------------------
# Quartile-weighted sampling
# ---------------------------------------------------------------------------

_QUARTILE_INDEX = {"Q1": 0, "Q2": 1, "Q3": 2, "Q4": 3}


def weighted_sample_stream(quartiles: Sequence[str],
                           weights: tuple[float, float, float, float] = (1, 2, 3, 4),
                           rng: Optional[np.random.Generator] = None) -> Iterator[int]:
    """Infinite stream of record indices, sampled with replacement with
    probability proportional to the record's quartile weight."""
    if len(quartiles) == 0:
        raise ConfigError("cannot sample from an empty manifest")
    rng = rng if rng is not None else np.random.default_rng(0)
    try:
        w = np.array([weights[_QUARTILE_INDEX[q]] for q in quartiles], dtype=np.float64)
    except KeyError as exc:
        raise ConfigError(f"record without a valid quartile: {exc}") from exc
    p = w / w.sum()
    n = len(quartiles)
    while True:
        for idx in rng.choice(n, size=1024, replace=True, p=p):
            yield int(idx)


# ---------------------------------------------------------------------------
# Training data containers
# ---------------------------------------------------------------------------

@dataclass
class TrainingSample:
    cfd: np.ndarray     # (10, H, W, 3) float32
    bmode: np.ndarray   # (10, H, W, 3) float32
    mask: np.ndarray    # (10, H, W) uint8
    quartile: Optional[str] = None
    key: tuple = ()


@dataclass
class TrainingData:
    train: list[TrainingSample] = field(default_factory=list)
    val: list[TrainingSample] = field(default_factory=list)


def samples_from_manifest(manifest: DatasetManifest, size: int = dataio.STANDARD_SIZE,
                          splits: Sequence[str] = ("train",),
                          masker_model: Optional[MaskerModel] = None
                          ) -> list[TrainingSample]:
    """Load paired snippets with masks from ground truth or a trained masker."""
    samples = []
    for record in manifest.records:
        if record.split not in splits:
            continue
        if record.masks is None and masker_model is None:
            raise ConfigError(f"record {record.clip_id} has no masks and no masker was given")
        for dual in dataio.load_dual_snippets(record, manifest.root, size=size):
            if dual.gt_masks is not None:
                mask = dual.gt_masks
            else:
                mask = predict_mask(masker_model, dual.cfd).masks
            samples.append(TrainingSample(
                cfd=dual.cfd.frames, bmode=dual.bmode.frames, mask=mask,
                quartile=record.quartile,
                key=(record.exam_id, record.clip_id, dual.cfd.snippet_index)))
    return samples


def _batches(samples: list[TrainingSample], stream: Iterator[int], steps: int,
             batch_size: int, augment_cfg: AugmentConfig, seed: int, epoch: int):
    for step in range(steps):
        idx = [next(stream) for _ in range(batch_size)]
        cfds, bmodes, masks = [], [], []
        for j, i in enumerate(idx):
            s = samples[i]
            rng = np.random.default_rng([seed, 0xA6, epoch, step, j])
            c, b, m = augment_pair(s.cfd, s.bmode, s.mask, rng, augment_cfg)
            cfds.append(c)
            bmodes.append(b)
            masks.append(m)
        cfd_t = torch.from_numpy(np.stack(cfds)).permute(0, 4, 1, 2, 3)
        bmode_t = torch.from_numpy(np.stack(bmodes)).permute(0, 4, 1, 2, 3)
        mask_t = torch.from_numpy(np.stack(masks))
        yield step, cfd_t, bmode_t, mask_t


def _sample_stream(samples: list[TrainingSample], config: TrainConfig,
                   rng: np.random.Generator) -> Iterator[int]:
    quartiles = [s.quartile for s in samples]
    if all(q in _QUARTILE_INDEX for q in quartiles):
        return weighted_sample_stream(quartiles, config.quartile_weights, rng)
    n = len(samples)
    if n == 0:
        raise ConfigError("no training samples")

    def uniform():
        while True:
            yield int(rng.integers(0, n))
    return uniform()


# ---------------------------------------------------------------------------
# Coarse pretraining
# ---------------------------------------------------------------------------

def _write_history(history: list[dict], path: Optional[Path]) -> None:
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(h) + "\n" for h in history), encoding="utf-8")


def _coarse_val_l1(net: nets.CoarseNet, samples: list[TrainingSample]) -> float:
    net.eval()
    losses = []
    with torch.no_grad():
        for s in samples:
            out = net(nets.video_to_tensor(s.cfd), nets.video_to_tensor(s.mask.astype(np.float32)))
            losses.append(float((out - nets.video_to_tensor(s.bmode)).abs().mean()))
    return float(np.mean(losses)) if losses else math.nan


def pretrain_coarse(data: TrainingData, config: TrainConfig,
                    spec: Optional[nets.NetworkSpec] = None,
                    checkpoint_path: Optional[Path] = None,
                    history_path: Optional[Path] = None
                    ) -> tuple[nets.CoarseNet, list[dict]]:
    """Train the coarse network with L1 loss only; keeps the best-val weights."""
    config.validate()
    if not data.train:
        raise ConfigError("no training samples")
    for s in data.train + data.val:
        if s.mask is None:
            raise ConfigError("pretraining needs masks for all records")
    torch.manual_seed(config.seed)
    spec = spec or nets.default_spec("coarse")
    net = nets.CoarseNet(spec)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr_coarse, betas=config.betas)
    rng = np.random.default_rng([config.seed, 0xC0A])
    stream = _sample_stream(data.train, config, rng)
    steps = max(1, math.ceil(len(data.train) / config.batch_size))

    best_state = {k: v.clone() for k, v in net.state_dict().items()}
    best_val = math.inf
    history: list[dict] = []
    for epoch in range(config.coarse_epochs):
        net.train()
        epoch_l1 = 0.0
        for step, cfd_t, bmode_t, mask_t in _batches(
                data.train, stream, steps, config.batch_size,
                config.augment, config.seed, epoch):
            opt.zero_grad()
            with torch.autocast("cpu", dtype=torch.bfloat16, enabled=config.mixed_precision):
                out = net(cfd_t, mask_t)
                loss = (out - bmode_t).abs().mean()
            loss.backward()
            opt.step()
            epoch_l1 += float(loss.detach())
        epoch_l1 /= steps
        val_l1 = _coarse_val_l1(net, data.val) if data.val else epoch_l1
        history.append({"epoch": epoch, "train_l1": epoch_l1, "val_l1": val_l1})
        if val_l1 < best_val:
            best_val = val_l1
            best_state = {k: v.clone() for k, v in net.state_dict().items()}

    net.load_state_dict(best_state)
    if checkpoint_path is not None:
        nets.save_checkpoint(checkpoint_path, net, spec, step=len(history))
    _write_history(history, history_path)
    return net, history


# ---------------------------------------------------------------------------
# Refinement GAN training
# ---------------------------------------------------------------------------

def _refine_input(coarse_net: nets.CoarseNet, cfd_t: torch.Tensor, mask_t: torch.Tensor,
                  enhance_cfg: EnhanceConfig, rng: np.random.Generator) -> torch.Tensor:
    """Frozen coarse forward + classical enhancement; no gradient flows back."""
    coarse_net.eval()
    with torch.no_grad():
        coarse_out = coarse_net(cfd_t, mask_t)
    enhanced = []
    for i in range(coarse_out.shape[0]):
        video = nets.tensor_to_video(coarse_out[i:i + 1])
        soft = enhance.blur_mask(mask_t[i].numpy(), enhance_cfg) \
            if enhance_cfg.mode == "inference" else None
        enhanced.append(enhance.enhance_coarse(video, soft, enhance_cfg, rng=rng))
    return torch.from_numpy(np.stack(enhanced)).permute(0, 4, 1, 2, 3)


def _pipeline_val_ssim(coarse_net: nets.CoarseNet, refine_net: nets.RefineNet,
                       samples: list[TrainingSample], enhance_cfg: EnhanceConfig,
                       seed: int) -> float:
    refine_net.eval()
    values = []
    for i, s in enumerate(samples):
        rng = np.random.default_rng([seed, 0xE7A1, i])
        cfd_t = nets.video_to_tensor(s.cfd)
        mask_t = nets.video_to_tensor(s.mask.astype(np.float32))
        cond = _refine_input(coarse_net, cfd_t, mask_t, enhance_cfg, rng)
        with torch.no_grad():
            out = refine_net(cond)
        values.append(metrics.ssim_video(nets.tensor_to_video(out), s.bmode))
    return float(np.mean(values)) if values else math.nan


def train_refinement(data: TrainingData, coarse_net: nets.CoarseNet, config: TrainConfig,
                     refine_spec: Optional[nets.NetworkSpec] = None,
                     disc_spec: Optional[nets.NetworkSpec] = None,
                     enhance_cfg: Optional[EnhanceConfig] = None,
                     refine_path: Optional[Path] = None,
                     disc_path: Optional[Path] = None,
                     history_path: Optional[Path] = None
                     ) -> tuple[nets.RefineNet, nets.Discriminator, list[dict]]:
    """Adversarial refinement training with alternating 1:1 D/G updates.

    The discriminator minimizes the hinge loss on real vs generated videos;
    the generator minimizes the four-term total loss. Training stops when the
    validation SSIM reaches config.val_ssim_stop or at refine_max_epochs; a
    non-finite generator loss aborts with DivergenceError.
    """
    config.validate()
    if not data.train:
        raise ConfigError("no training samples")
    torch.manual_seed(config.seed)
    refine_spec = refine_spec or nets.default_spec("refine")
    disc_spec = disc_spec or nets.default_spec("discriminator")
    enhance_cfg = enhance_cfg or EnhanceConfig(mode="offline")
    refine_net = nets.RefineNet(refine_spec)
    disc_net = nets.Discriminator(disc_spec)
    opt_g = torch.optim.Adam(refine_net.parameters(), lr=config.lr_refine, betas=config.betas)
    opt_d = torch.optim.Adam(disc_net.parameters(), lr=config.lr_discriminator,
                             betas=config.betas)
    rng = np.random.default_rng([config.seed, 0x4EF1])
    stream = _sample_stream(data.train, config, rng)
    steps = max(1, math.ceil(len(data.train) / config.batch_size))

    best_ssim = -math.inf
    best_state = {k: v.clone() for k, v in refine_net.state_dict().items()}
    history: list[dict] = []
    for epoch in range(config.refine_max_epochs):
        refine_net.train()
        disc_net.train()
        sums = {"d_loss": 0.0, "total": 0.0, "l1": 0.0, "l1mask": 0.0,
                "perceptual": 0.0, "adversarial": 0.0}
        for step, cfd_t, bmode_t, mask_t in _batches(
                data.train, stream, steps, config.batch_size,
                config.augment, config.seed, epoch):
            enh_rng = np.random.default_rng([config.seed, 0xE4A, epoch, step])
            cond = _refine_input(coarse_net, cfd_t, mask_t, enhance_cfg, enh_rng)
            autocast = torch.autocast("cpu", dtype=torch.bfloat16,
                                      enabled=config.mixed_precision)

            with autocast:
                fake = refine_net(cond)

            if config.freeze_discriminator:
                with torch.no_grad(), autocast:
                    real_score, _ = disc_net(bmode_t)
                    fake_score_d, _ = disc_net(fake.detach())
                d_loss = hinge_discriminator_loss(real_score, fake_score_d)
            else:
                with autocast:
                    real_score, _ = disc_net(bmode_t)
                    fake_score_d, _ = disc_net(fake.detach())
                    d_loss = hinge_discriminator_loss(real_score, fake_score_d)
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()

            with autocast:
                with torch.no_grad():
                    _, real_feats = disc_net(bmode_t)
                fake_score, fake_feats = disc_net(fake)
                g_loss, components = total_loss(fake, bmode_t, mask_t, real_feats,
                                                fake_feats, fake_score, config.loss_weights)
            if not torch.isfinite(g_loss):
                raise DivergenceError(f"generator loss became non-finite at epoch {epoch}")
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            sums["d_loss"] += float(d_loss.detach())
            sums["total"] += float(g_loss.detach())
            for k in ("l1", "l1mask", "perceptual", "adversarial"):
                sums[k] += components[k]

        row = {k: v / steps for k, v in sums.items()}
        row["epoch"] = epoch
        if epoch % config.val_interval == 0 or epoch == config.refine_max_epochs - 1:
            val_samples = data.val if data.val else data.train
            row["val_ssim"] = _pipeline_val_ssim(coarse_net, refine_net, val_samples,
                                                 enhance_cfg, config.seed)
            history.append(row)
            if row["val_ssim"] > best_ssim:
                best_ssim = row["val_ssim"]
                best_state = {k: v.clone() for k, v in refine_net.state_dict().items()}
            if row["val_ssim"] >= config.val_ssim_stop:
                break
        else:
            row["val_ssim"] = None
            history.append(row)

    refine_net.load_state_dict(best_state)
    if refine_path is not None:
        nets.save_checkpoint(refine_path, refine_net, refine_spec, step=len(history))
    if disc_path is not None:
        nets.save_checkpoint(disc_path, disc_net, disc_spec, step=len(history))
    _write_history(history, history_path)
    return refine_net, disc_net, history
