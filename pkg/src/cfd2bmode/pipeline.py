"""End-to-end orchestration: translate CFD snippets to synthetic B-mode and
evaluate synthetic outputs against the real panels.

The inference path per snippet is: predict mask -> coarse inpainting ->
inference-time enhancement inside the blurred mask -> refinement -> fiducial
compositing from the real B-mode. Each record failure is skipped and logged
rather than aborting the batch.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataio, enhance, masker, metrics, nets
from .dataio import DatasetManifest, ManifestRecord
from .enhance import EnhanceConfig
from .errors import CheckpointError, ConfigError
from .masker import MaskerModel, MaskerUNet, MaskerConfig

log = logging.getLogger("cfd2bmode")


@dataclass
class PipelineConfig:
    data_root: Optional[Path] = None
    checkpoint_dir: Optional[Path] = None
    report_dir: Optional[Path] = None
    seed: int = 0
    panel_size: int = dataio.STANDARD_SIZE
    enhance: EnhanceConfig = field(default_factory=lambda: EnhanceConfig(mode="inference"))
    fid_dim: int = 192
    fid_max_frames: int = 400

    @staticmethod
    def from_json(path: str | Path) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        cfg = PipelineConfig()
        for key in ("seed", "panel_size", "fid_dim", "fid_max_frames"):
            if key in raw:
                setattr(cfg, key, raw[key])
        for key in ("data_root", "checkpoint_dir", "report_dir"):
            if raw.get(key):
                setattr(cfg, key, Path(raw[key]))
        if "enhance" in raw:
            cfg.enhance = EnhanceConfig(**raw["enhance"])
        return cfg


# ---------------------------------------------------------------------------
# Masker checkpoints (frame-level net, separate from the video nets)
# ---------------------------------------------------------------------------

def save_masker(path: str | Path, model: MaskerModel) -> None:
    spec = {"role": "masker", "base_filters": model.config.base_filters,
            "levels": model.config.levels}
    nets.save_checkpoint(path, model.net, spec, step=len(model.history))


def load_masker(path: str | Path) -> MaskerModel:
    spec, _, state = nets.load_checkpoint(path)
    if spec.get("role") != "masker":
        raise CheckpointError(f"{path} is not a masker checkpoint")
    net = MaskerUNet(spec["base_filters"], spec["levels"])
    net.load_state_dict(state)
    config = MaskerConfig(base_filters=spec["base_filters"], levels=spec["levels"])
    return MaskerModel(net, config)


# ---------------------------------------------------------------------------
# Translation
# ---------------------------------------------------------------------------

def translate_snippet(dual: dataio.DualAcquisition, masker_model: MaskerModel,
                      coarse_net: nets.CoarseNet, refine_net: nets.RefineNet,
                      config: PipelineConfig, rng: np.random.Generator,
                      fiducial: Optional[np.ndarray] = None) -> dict[str, np.ndarray]:
    """Run one CFD snippet through the full inference path.

    Returns the intermediate artifacts too: {mask, coarse, enhanced, synthetic}.
    """
    mask = masker.predict_mask(masker_model, dual.cfd)
    coarse_out = nets.coarse_forward(coarse_net, dual.cfd.frames,
                                     mask.masks.astype(np.float32))
    soft = enhance.blur_mask(mask.masks, config.enhance)
    enhanced = enhance.enhance_coarse(coarse_out, soft, config.enhance, rng=rng)
    refined = nets.refine_forward(refine_net, enhanced)
    synthetic = refined
    if fiducial is not None:
        synthetic = enhance.replace_fiducials(refined, dual.bmode.frames, fiducial)
    return {"mask": mask.masks, "coarse": coarse_out, "enhanced": enhanced,
            "refined": refined, "synthetic": synthetic}


def run_translate(manifest: DatasetManifest, masker_ckpt: Path, coarse_ckpt: Path,
                  refine_ckpt: Path, config: PipelineConfig, output_root: Path,
                  keep_intermediate: bool = False,
                  splits: Optional[tuple[str, ...]] = None) -> tuple[DatasetManifest, list[str]]:
    """Translate every (selected) manifest record; returns (output manifest, skipped).

    Outputs are written under output_root as per-frame PNGs plus a manifest;
    re-running with the same seed overwrites them with identical bytes.
    """
    masker_model = load_masker(masker_ckpt)
    coarse_net, _ = nets.load_network(coarse_ckpt)
    refine_net, _ = nets.load_network(refine_ckpt)
    if not isinstance(coarse_net, nets.CoarseNet) or not isinstance(refine_net, nets.RefineNet):
        raise CheckpointError("coarse/refine checkpoints have mismatched roles")

    output_root = Path(output_root)
    output_root.mkdir(parents=True, exist_ok=True)
    out_manifest = DatasetManifest(root=output_root)
    skipped: list[str] = []
    for rec_index, record in enumerate(manifest.records):
        if splits is not None and record.split not in splits:
            continue
        try:
            duals = dataio.load_dual_snippets(record, manifest.root, size=config.panel_size)
            fiducial = None
            if record.fiducial_mask:
                fiducial = dataio.standardize_mask(
                    dataio.read_mask(manifest.resolve(record.fiducial_mask)),
                    size=config.panel_size)
            frame_paths: list[str] = []
            mask_paths: list[str] = []
            for dual in duals:
                rng = np.random.default_rng(
                    [config.seed, 0x7A54, rec_index, dual.cfd.snippet_index])
                arts = translate_snippet(dual, masker_model, coarse_net, refine_net,
                                         config, rng, fiducial=fiducial)
                base = output_root / "synthetic" / record.clip_id / f"s{dual.cfd.snippet_index}"
                for t in range(arts["synthetic"].shape[0]):
                    rel = f"synthetic/{record.clip_id}/s{dual.cfd.snippet_index}/f{t:03d}.png"
                    dataio.write_image(output_root / rel, arts["synthetic"][t])
                    frame_paths.append(rel)
                    mrel = f"synthetic/{record.clip_id}/s{dual.cfd.snippet_index}/mask_f{t:03d}.png"
                    dataio.write_mask(output_root / mrel, arts["mask"][t])
                    mask_paths.append(mrel)
                if keep_intermediate:
                    base.mkdir(parents=True, exist_ok=True)
                    # Float arrays so the enhanced->refine composition can be
                    # replayed bit-for-bit; PNGs alongside for inspection.
                    np.save(base / "coarse.npy", arts["coarse"])
                    np.save(base / "enhanced.npy", arts["enhanced"])
                    np.save(base / "refined.npy", arts["refined"])
                    np.save(base / "synthetic.npy", arts["synthetic"])
                    for t in range(arts["coarse"].shape[0]):
                        dataio.write_image(base / f"coarse_f{t:03d}.png", arts["coarse"][t])
                        dataio.write_image(base / f"enhanced_f{t:03d}.png", arts["enhanced"][t])
            out_manifest.records.append(ManifestRecord(
                exam_id=record.exam_id, clip_id=record.clip_id, frames=frame_paths,
                split=record.split, masks=mask_paths, coverage=record.coverage,
                quartile=record.quartile, view_label=record.view_label))
        except Exception as exc:  # per-record skip-and-log policy
            log.warning("skipping record %s: %s", record.clip_id, exc)
            skipped.append(f"{record.clip_id}: {exc}")
    dataio.save_manifest(out_manifest, output_root / "manifest.ndjson")
    return out_manifest, skipped


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _file_hash(path: Optional[Path]) -> Optional[str]:
    if path is None or not Path(path).exists():
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _load_synthetic_frames(record: ManifestRecord, root: Path, size: int) -> np.ndarray:
    frames = [dataio.standardize_panel(dataio.read_image(Path(root) / rel), size=size)
              for rel in record.frames]
    return np.stack(frames)


def run_evaluate(real_manifest: DatasetManifest, synthetic_manifest: DatasetManifest,
                 config: PipelineConfig,
                 splits: Optional[tuple[str, ...]] = None) -> metrics.MetricsReport:
    """Per-snippet SSIM distributions, quartile strata, Wasserstein shifts, FID.

    Records pair by (exam_id, clip_id, snippet_index); unpairable records are
    listed in the report and excluded from aggregates.
    """
    synth_by_clip = {(r.exam_id, r.clip_id): r for r in synthetic_manifest.records}
    ssim_synth: dict[str, float] = {}
    ssim_cfd: dict[str, float] = {}
    quartile_of: dict[str, str] = {}
    coverage_of: dict[str, float] = {}
    unpaired: list[str] = []
    real_frames_bank: list[np.ndarray] = []
    synth_frames_bank: list[np.ndarray] = []

    for record in real_manifest.records:
        if splits is not None and record.split not in splits:
            continue
        srec = synth_by_clip.get((record.exam_id, record.clip_id))
        if srec is None:
            unpaired.append(record.clip_id)
            continue
        duals = dataio.load_dual_snippets(record, real_manifest.root, size=config.panel_size)
        synth_frames = _load_synthetic_frames(srec, synthetic_manifest.root, config.panel_size)
        if synth_frames.shape[0] < len(duals) * dataio.SNIPPET_LEN:
            unpaired.append(record.clip_id)
            continue
        for dual in duals:
            i = dual.cfd.snippet_index
            key = f"{record.exam_id}/{record.clip_id}/s{i}"
            synth = synth_frames[i * dataio.SNIPPET_LEN:(i + 1) * dataio.SNIPPET_LEN]
            ssim_synth[key] = metrics.ssim_video(synth, dual.bmode.frames)
            ssim_cfd[key] = metrics.ssim_video(dual.cfd.frames, dual.bmode.frames)
            if record.quartile:
                quartile_of[key] = record.quartile
            if record.coverage is not None:
                coverage_of[key] = record.coverage
            real_frames_bank.extend(dual.bmode.frames)
            synth_frames_bank.extend(synth)

    if not ssim_synth:
        raise ConfigError("no pairable records to evaluate")

    # Stratify by recorded quartiles, falling back to quartiles of the
    # evaluated coverages when the manifest carries none.
    if not quartile_of and coverage_of:
        table = masker.QuartileTable.from_coverages(list(coverage_of.values()))
        quartile_of = {k: table.assign(c) for k, c in coverage_of.items()}
    strata = metrics.stratified_report(ssim_synth, ssim_cfd, quartile_of)

    embedder = metrics.RandomConvEmbedder(dim=config.fid_dim)
    stride = max(1, len(real_frames_bank) // config.fid_max_frames)
    fid_value = metrics.fid(embedder.embed_frames(real_frames_bank[::stride]),
                            embedder.embed_frames(synth_frames_bank[::stride]))

    return metrics.MetricsReport(
        ssim_synthetic=ssim_synth, ssim_cfd=ssim_cfd, strata=strata,
        fid_value=fid_value, embedder=embedder.name,
        provenance={"real_manifest": _file_hash(real_manifest.root / "manifest.ndjson"
                                                if real_manifest.root else None),
                    "synthetic_manifest": _file_hash(synthetic_manifest.root / "manifest.ndjson"
                                                     if synthetic_manifest.root else None)},
        unpaired=unpaired)


def write_report(report: metrics.MetricsReport, out_dir: Path) -> tuple[Path, Path]:
    """Emit the structured report plus a flat per-video table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report.to_json(), indent=2), encoding="utf-8")
    csv_path = out_dir / "per_video.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video", "ssim_synthetic", "ssim_cfd"])
        for key in sorted(report.ssim_synthetic):
            writer.writerow([key, f"{report.ssim_synthetic[key]:.6f}",
                             f"{report.ssim_cfd.get(key, float('nan')):.6f}"])
    return json_path, csv_path
