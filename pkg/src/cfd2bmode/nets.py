"""The three networks of the translation pipeline.

- CoarseNet: gated-convolution video inpainting encoder-decoder. Input is the
  CFD video concatenated with its mask; output a full video in [0, 1].
- RefineNet: plain-convolution encoder-decoder (two convs + instance norm +
  ReLU per block) that turns the enhanced coarse output into the final video.
- Discriminator: spectrally-normalized 3D convolutions with spatial stride
  (1,2,2); returns the patch score map and every intermediate activation for
  the perceptual loss.

Filter counts double per block up to a cap (coarse 32-256, refine 16-256,
discriminator 8-64). The paper-reported parameter totals pin no block depth,
so the default depth is chosen by searching 3-6 encoder blocks for the count
nearest each target.

Video tensors cross the module boundary as numpy (T, H, W, C) arrays in
[0, 1]; torch works in (N, C, T, H, W).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn.utils import spectral_norm

from .errors import CheckpointError, ShapeError

SNIPPET_LEN = 10

PARAM_TARGETS = {"coarse": 7_738_146, "refine": 10_905_761}


@dataclass(frozen=True)
class NetworkSpec:
    role: str                 # {"coarse", "refine", "discriminator"}
    base_filters: int
    max_filters: int
    blocks: int
    in_channels: int = 3

    def __post_init__(self):
        if self.role not in ("coarse", "refine", "discriminator"):
            raise ShapeError(f"unknown network role {self.role!r}")
        if self.base_filters < 1 or self.max_filters < self.base_filters:
            raise ShapeError("filter schedule must satisfy 1 <= base <= max")
        if self.blocks < 1:
            raise ShapeError("need at least one block")

    def channels(self) -> list[int]:
        return [min(self.base_filters * 2 ** i, self.max_filters) for i in range(self.blocks)]

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class GatedConv3d(nn.Module):
    """Two parallel convolutions with identical geometry:
    output = ELU(conv_f(x)) * sigmoid(conv_g(x)).
    """

    def __init__(self, cin: int, cout: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.feature = nn.Conv3d(cin, cout, kernel, padding=pad)
        self.gate = nn.Conv3d(cin, cout, kernel, padding=pad)
        self.act = nn.ELU(inplace=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.feature.in_channels:
            raise ShapeError(f"gated conv expects {self.feature.in_channels} channels, "
                             f"got {x.shape[1]}")
        return self.act(self.feature(x)) * torch.sigmoid(self.gate(x))


def _check_video_input(x: torch.Tensor, channels: int, pools: int) -> None:
    if x.ndim != 5 or x.shape[1] != channels:
        raise ShapeError(f"expected (N, {channels}, T, H, W) input, got {tuple(x.shape)}")
    if x.shape[2] != SNIPPET_LEN:
        raise ShapeError(f"expected {SNIPPET_LEN}-frame input, got {x.shape[2]}")
    div = 2 ** pools
    if x.shape[3] % div or x.shape[4] % div:
        raise ShapeError(f"spatial dims must be divisible by {div}, got {tuple(x.shape[3:])}")


# ---------------------------------------------------------------------------
# Coarse network
# ---------------------------------------------------------------------------

class CoarseNet(nn.Module):
    """Gated-conv encoder/bottleneck/decoder; sigmoid-bounded video output.

    Max-pool (2,2,2) after the first block and (1,2,2) after the others, so
    temporal pooling happens exactly once; the mirrored upsampling restores
    10 frames with factor (2,2,2) at the last step.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        if spec.role != "coarse":
            raise ShapeError("CoarseNet needs a 'coarse' spec")
        self.spec = spec
        chans = spec.channels()
        self.enc = nn.ModuleList()
        cin = spec.in_channels + 1  # CFD + mask channel
        for c in chans:
            self.enc.append(GatedConv3d(cin, c))
            cin = c
        self.pools = nn.ModuleList(
            [nn.MaxPool3d((2, 2, 2) if i == 0 else (1, 2, 2)) for i in range(spec.blocks)])
        self.bottleneck = GatedConv3d(chans[-1], chans[-1])
        self.dec = nn.ModuleList()
        for i in range(spec.blocks - 1, 0, -1):
            self.dec.append(GatedConv3d(chans[i], chans[i - 1]))
        self.ups = nn.ModuleList(
            [nn.Upsample(scale_factor=(2, 2, 2) if i == spec.blocks - 1 else (1, 2, 2),
                         mode="nearest")
             for i in range(spec.blocks)])
        self.head = nn.Conv3d(chans[0], spec.in_channels, 3, padding=1)

    def forward(self, cfd: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if mask.ndim == 4:
            mask = mask.unsqueeze(1)
        if mask.shape[0] != cfd.shape[0] or mask.shape[2:] != cfd.shape[2:]:
            raise ShapeError(f"mask shape {tuple(mask.shape)} does not match video "
                             f"{tuple(cfd.shape)}")
        x = torch.cat([cfd, mask.to(cfd.dtype)], dim=1)
        _check_video_input(x, self.spec.in_channels + 1, self.spec.blocks)
        for conv, pool in zip(self.enc, self.pools):
            x = pool(conv(x))
        x = self.bottleneck(x)
        for i, up in enumerate(self.ups):
            x = up(x)
            if i < len(self.dec):
                x = self.dec[i](x)
        return torch.sigmoid(self.head(x))


# ---------------------------------------------------------------------------
# Refinement network
# ---------------------------------------------------------------------------

class _RefineBlock(nn.Module):
    """Two conv layers, each followed by instance normalization and ReLU."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv3d(cin, cout, 3, padding=1), nn.InstanceNorm3d(cout), nn.ReLU(inplace=False),
            nn.Conv3d(cout, cout, 3, padding=1), nn.InstanceNorm3d(cout), nn.ReLU(inplace=False),
        )

    def forward(self, x):
        return self.block(x)


class RefineNet(nn.Module):
    """Plain-conv encoder-decoder; transpose-conv upsampling with stride
    (1,2,2) except (2,2,2) at the last step; sigmoid-bounded output."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        if spec.role != "refine":
            raise ShapeError("RefineNet needs a 'refine' spec")
        self.spec = spec
        chans = spec.channels()
        self.enc = nn.ModuleList()
        cin = spec.in_channels
        for c in chans:
            self.enc.append(_RefineBlock(cin, c))
            cin = c
        self.pools = nn.ModuleList(
            [nn.MaxPool3d((2, 2, 2) if i == 0 else (1, 2, 2))
             for i in range(spec.blocks - 1)])
        self.dec = nn.ModuleList()
        for i in range(spec.blocks - 1, 0, -1):
            last = (i == 1)
            stride = (2, 2, 2) if last else (1, 2, 2)
            out_pad = (1, 1, 1) if last else (0, 1, 1)
            self.dec.append(nn.Sequential(
                nn.ConvTranspose3d(chans[i], chans[i - 1], 3, stride=stride,
                                   padding=1, output_padding=out_pad),
                nn.InstanceNorm3d(chans[i - 1]), nn.ReLU(inplace=False)))
        self.head = nn.Conv3d(chans[0], spec.in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_video_input(x, self.spec.in_channels, self.spec.blocks - 1)
        for i, block in enumerate(self.enc):
            x = block(x)
            if i < len(self.pools):
                x = self.pools[i](x)
        for step in self.dec:
            x = step(x)
        return torch.sigmoid(self.head(x))


# ---------------------------------------------------------------------------
# Discriminator
# ---------------------------------------------------------------------------

class Discriminator(nn.Module):
    """Spectrally-normalized 3D convs, kernel (3,5,5), stride (1,2,2),
    LeakyReLU; returns (score map, list of intermediate activations)."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        if spec.role != "discriminator":
            raise ShapeError("Discriminator needs a 'discriminator' spec")
        self.spec = spec
        chans = spec.channels()
        layers = []
        cin = spec.in_channels
        for c in chans:
            layers.append(spectral_norm(
                nn.Conv3d(cin, c, (3, 5, 5), stride=(1, 2, 2), padding=(1, 2, 2))))
            cin = c
        self.convs = nn.ModuleList(layers)
        self.act = nn.LeakyReLU(0.2, inplace=False)
        self.score = spectral_norm(nn.Conv3d(cin, 1, (3, 5, 5), padding=(1, 2, 2)))

    def forward(self, video: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        _check_video_input(video, self.spec.in_channels, self.spec.blocks)
        feats = []
        x = video
        for conv in self.convs:
            x = self.act(conv(x))
            feats.append(x)
        return self.score(x), feats


# ---------------------------------------------------------------------------
# Parameter counting and depth calibration
# ---------------------------------------------------------------------------

def param_count(network: nn.Module) -> int:
    """Exact count of trainable scalars; structure-only, weight values ignored."""
    return sum(p.numel() for p in network.parameters() if p.requires_grad)


def build_network(spec: NetworkSpec) -> nn.Module:
    if spec.role == "coarse":
        return CoarseNet(spec)
    if spec.role == "refine":
        return RefineNet(spec)
    return Discriminator(spec)


@lru_cache(maxsize=None)
def calibrate_depth(role: str, base_filters: int, max_filters: int,
                    lo: int = 3, hi: int = 6) -> tuple[int, dict[int, int]]:
    """Search block depths for the parameter count nearest the paper target.

    Returns (best depth, {depth: parameter count}).
    """
    target = PARAM_TARGETS[role]
    counts = {}
    for blocks in range(lo, hi + 1):
        spec = NetworkSpec(role=role, base_filters=base_filters,
                           max_filters=max_filters, blocks=blocks)
        counts[blocks] = param_count(build_network(spec))
    best = min(counts, key=lambda d: abs(counts[d] - target))
    return best, counts


def default_spec(role: str) -> NetworkSpec:
    """Paper filter schedules with calibrated block depth."""
    if role == "coarse":
        depth, _ = calibrate_depth("coarse", 32, 256)
        return NetworkSpec(role="coarse", base_filters=32, max_filters=256, blocks=depth)
    if role == "refine":
        depth, _ = calibrate_depth("refine", 16, 256)
        return NetworkSpec(role="refine", base_filters=16, max_filters=256, blocks=depth)
    return NetworkSpec(role="discriminator", base_filters=8, max_filters=64, blocks=4)


def small_spec(role: str, blocks: int = 3) -> NetworkSpec:
    """Desk-scale spec for smoke training and tests."""
    if role == "coarse":
        return NetworkSpec(role="coarse", base_filters=8, max_filters=32, blocks=blocks)
    if role == "refine":
        return NetworkSpec(role="refine", base_filters=8, max_filters=32, blocks=blocks)
    return NetworkSpec(role="discriminator", base_filters=4, max_filters=16, blocks=3)


# ---------------------------------------------------------------------------
# numpy <-> torch video conversion
# ---------------------------------------------------------------------------

def video_to_tensor(video: np.ndarray) -> torch.Tensor:
    """(T, H, W, C) [0,1] numpy -> (1, C, T, H, W) float32 tensor."""
    arr = np.asarray(video, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[..., None]
    return torch.from_numpy(arr).permute(3, 0, 1, 2).unsqueeze(0)


def tensor_to_video(t: torch.Tensor) -> np.ndarray:
    """(1, C, T, H, W) tensor -> (T, H, W, C) float32 numpy."""
    return t.detach().squeeze(0).permute(1, 2, 3, 0).numpy().astype(np.float32)


def coarse_forward(net: CoarseNet, cfd_video: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Numpy-facing inference wrapper for the coarse network."""
    net.eval()
    with torch.no_grad():
        out = net(video_to_tensor(cfd_video),
                  video_to_tensor(masks.astype(np.float32)))
    return tensor_to_video(out)


def refine_forward(net: RefineNet, conditioned: np.ndarray) -> np.ndarray:
    """Numpy-facing inference wrapper for the refinement network."""
    net.eval()
    with torch.no_grad():
        out = net(video_to_tensor(conditioned))
    return tensor_to_video(out)


def discriminator_forward(net: Discriminator, video: np.ndarray
                          ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Numpy-facing inference wrapper for the discriminator."""
    net.eval()
    with torch.no_grad():
        score, feats = net(video_to_tensor(video))
    return score.numpy(), [f.numpy() for f in feats]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_META_KEY = "__meta__"


def save_checkpoint(path: str | Path, module: nn.Module, spec: NetworkSpec | dict,
                    step: int = 0) -> None:
    """Self-describing archive: spec, step counter, and named weight arrays.

    Float tensors are stored as little-endian float32; integer buffers keep
    their integer type. The write is atomic (temp file then rename).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spec_dict = spec.to_json() if isinstance(spec, NetworkSpec) else dict(spec)
    arrays = {}
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        if np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype("<f4")
        arrays[f"w::{name}"] = arr
    meta = json.dumps({"spec": spec_dict, "step": int(step)})
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **{_META_KEY: np.array(meta)}, **arrays)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict, int, dict[str, torch.Tensor]]:
    """Read (spec dict, step, state_dict) from a checkpoint archive."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if _META_KEY not in data:
            raise CheckpointError(f"{path} is not a checkpoint archive")
        meta = json.loads(str(data[_META_KEY]))
        state = {}
        for key in data.files:
            if key.startswith("w::"):
                state[key[3:]] = torch.from_numpy(np.ascontiguousarray(data[key]))
    return meta["spec"], meta["step"], state


def load_network(path: str | Path) -> tuple[nn.Module, int]:
    """Rebuild a network from its checkpoint; returns (module, step)."""
    spec_dict, step, state = load_checkpoint(path)
    spec = NetworkSpec(**spec_dict)
    net = build_network(spec)
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} incompatible with spec {spec}: {exc}") from exc
    return net, step
