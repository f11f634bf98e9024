"""Command-line entry points.

Exit codes: 0 success, 2 configuration errors, 3 partial failures (some
records skipped).
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import dataio, masker, nets, phantom, pipeline, study, training
from .enhance import EnhanceConfig
from .errors import ConfigError, ParseError
from .masker import LabeledFrame, MaskerConfig
from .pipeline import PipelineConfig

EXIT_CONFIG = 2
EXIT_PARTIAL = 3


def _fail_config(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_CONFIG)


def _load_pipeline_config(config_path: str | None, seed: int | None) -> PipelineConfig:
    cfg = PipelineConfig.from_json(config_path) if config_path else PipelineConfig()
    if seed is not None:
        cfg.seed = seed
    return cfg


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Pipeline config JSON.")
@click.option("--seed", type=int, default=None, help="Override the global seed.")
@click.option("--jobs", type=int, default=1, help="Worker count for parallel stages.")
@click.pass_context
def main(ctx, config_path, seed, jobs):
    """CFD-to-B-mode translation pipeline."""
    ctx.ensure_object(dict)
    try:
        ctx.obj["config"] = _load_pipeline_config(config_path, seed)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        _fail_config(str(exc))
    ctx.obj["jobs"] = jobs


@main.command("gen-phantom")
@click.option("--out", required=True, type=click.Path())
@click.option("--clips", type=int, default=8)
@click.option("--frames", type=int, default=10)
@click.option("--canvas", default="256x512", help="HxW of the dual frame.")
@click.option("--coverage", type=float, default=0.10)
@click.option("--chromamap", type=click.Choice(["gray", "orange"]), default="gray")
@click.option("--fiducials/--no-fiducials", default=True)
@click.pass_context
def gen_phantom(ctx, out, clips, frames, canvas, coverage, chromamap, fiducials):
    """Generate a synthetic paired dataset with ground-truth CFD masks."""
    try:
        h, w = (int(v) for v in canvas.lower().split("x"))
        cfg = phantom.PhantomConfig(seed=ctx.obj["config"].seed, num_clips=clips,
                                    frames_per_clip=frames, canvas=(h, w),
                                    chromamap=chromamap, cfd_coverage_target=coverage,
                                    fiducials_on=fiducials)
        manifest = phantom.generate_dataset(cfg, Path(out))
    except (ConfigError, ValueError) as exc:
        _fail_config(str(exc))
    click.echo(f"wrote {len(manifest.records)} clips under {out}")


@main.command("preprocess")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--layout", default=None,
              help="Panel boxes 'x,y,w,h;x,y,w,h' (bmode;cfd); default side-by-side halves.")
@click.option("--size", type=int, default=dataio.STANDARD_SIZE)
@click.pass_context
def preprocess(ctx, manifest_path, out, layout, size):
    """Split dual frames and write standardized per-panel snippets."""
    try:
        manifest = dataio.load_manifest(manifest_path)
        box_layout = None
        if layout:
            parts = [tuple(int(v) for v in chunk.split(",")) for chunk in layout.split(";")]
            box_layout = dataio.PanelLayout(bmode_box=parts[0], cfd_box=parts[1])
    except (ParseError, ValueError) as exc:
        _fail_config(str(exc))
    out = Path(out)
    count = 0
    for record in manifest.records:
        rec = record if box_layout is None else \
            dataio.ManifestRecord(**{**record.__dict__, "layout": box_layout})
        for dual in dataio.load_dual_snippets(rec, manifest.root, size=size):
            base = out / record.clip_id / f"s{dual.cfd.snippet_index}"
            for t in range(dataio.SNIPPET_LEN):
                dataio.write_image(base / f"bmode_f{t:03d}.png", dual.bmode.frames[t])
                dataio.write_image(base / f"cfd_f{t:03d}.png", dual.cfd.frames[t])
            count += 1
    click.echo(f"standardized {count} snippets under {out}")


@main.command("train-masker")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", type=int, default=8)
@click.option("--base-filters", type=int, default=16)
@click.option("--levels", type=int, default=4)
@click.option("--size", type=int, default=dataio.STANDARD_SIZE)
@click.pass_context
def train_masker_cmd(ctx, manifest_path, out, epochs, base_filters, levels, size):
    """Synthesize mask labels from dual acquisitions and train the masker."""
    try:
        manifest = dataio.load_manifest(manifest_path)
        pairs = []
        for record in manifest.split("train"):
            for dual in dataio.load_dual_snippets(record, manifest.root, size=size):
                labels = masker.make_mask_label(dual)
                for t in range(dataio.SNIPPET_LEN):
                    pairs.append(LabeledFrame(cfd=dual.cfd.frames[t], label=labels[t],
                                              exam_id=record.exam_id))
        config = MaskerConfig(base_filters=base_filters, levels=levels, epochs=epochs,
                              seed=ctx.obj["config"].seed)
        model = masker.train_masker(pairs, config)
    except ConfigError as exc:
        _fail_config(str(exc))
    pipeline.save_masker(Path(out), model)
    click.echo(f"masker best val dice {model.best_val_dice:.4f} -> {out}")


@main.command("make-masks")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--masker", "masker_path", required=True, type=click.Path(exists=True))
@click.option("--size", type=int, default=dataio.STANDARD_SIZE)
@click.pass_context
def make_masks(ctx, manifest_path, masker_path, size):
    """Predict masks, compute coverage quartiles on train, tag the manifest."""
    try:
        manifest = dataio.load_manifest(manifest_path)
        model = pipeline.load_masker(masker_path)
        coverage_by_clip = {}
        for record in manifest.records:
            masks = []
            for dual in dataio.load_dual_snippets(record, manifest.root, size=size):
                masks.append(masker.predict_mask(model, dual.cfd))
            coverage_by_clip[record.clip_id] = float(np.mean([m.coverage for m in masks]))
        train_cov = [coverage_by_clip[r.clip_id] for r in manifest.split("train")]
        table = masker.QuartileTable.from_coverages(train_cov)
        for record in manifest.records:
            record.coverage = coverage_by_clip[record.clip_id]
            record.quartile = table.assign(record.coverage)
        manifest.quartile_thresholds = (table.t1, table.t2, table.t3)
        dataio.save_manifest(manifest, manifest_path)
    except ConfigError as exc:
        _fail_config(str(exc))
    click.echo(f"quartile thresholds {manifest.quartile_thresholds}")


def _load_training_data(manifest_path: str, size: int) -> training.TrainingData:
    manifest = dataio.load_manifest(manifest_path)
    return training.TrainingData(
        train=training.samples_from_manifest(manifest, size=size, splits=("train",)),
        val=training.samples_from_manifest(manifest, size=size, splits=("val",)))


@main.command("train-coarse")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", type=int, default=20)
@click.option("--batch-size", type=int, default=16)
@click.option("--size", type=int, default=dataio.STANDARD_SIZE)
@click.option("--small/--full", default=False, help="Desk-scale network size.")
@click.pass_context
def train_coarse(ctx, manifest_path, out, epochs, batch_size, size, small):
    """Pretrain the coarse inpainting network with L1 loss."""
    try:
        data = _load_training_data(manifest_path, size)
        config = training.TrainConfig(coarse_epochs=epochs, batch_size=batch_size,
                                      seed=ctx.obj["config"].seed)
        spec = nets.small_spec("coarse") if small else None
        _, history = training.pretrain_coarse(data, config, spec=spec,
                                              checkpoint_path=Path(out),
                                              history_path=Path(out).with_suffix(".history"))
    except ConfigError as exc:
        _fail_config(str(exc))
    click.echo(f"final train L1 {history[-1]['train_l1']:.5f} -> {out}")


@main.command("train-refine")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--coarse", "coarse_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--disc-out", default=None, type=click.Path())
@click.option("--epochs", type=int, default=50)
@click.option("--batch-size", type=int, default=16)
@click.option("--size", type=int, default=dataio.STANDARD_SIZE)
@click.option("--small/--full", default=False)
@click.pass_context
def train_refine(ctx, manifest_path, coarse_path, out, disc_out, epochs, batch_size,
                 size, small):
    """Train the refinement GAN on top of a coarse checkpoint."""
    try:
        data = _load_training_data(manifest_path, size)
        coarse_net, _ = nets.load_network(coarse_path)
        config = training.TrainConfig(refine_max_epochs=epochs, batch_size=batch_size,
                                      seed=ctx.obj["config"].seed)
        refine_spec = nets.small_spec("refine") if small else None
        disc_spec = nets.small_spec("discriminator") if small else None
        _, _, history = training.train_refinement(
            data, coarse_net, config, refine_spec=refine_spec, disc_spec=disc_spec,
            refine_path=Path(out),
            disc_path=Path(disc_out) if disc_out else None,
            history_path=Path(out).with_suffix(".history"))
    except ConfigError as exc:
        _fail_config(str(exc))
    click.echo(f"stopped at epoch {history[-1]['epoch']} "
               f"val SSIM {history[-1]['val_ssim']:.4f} -> {out}")


@main.command("translate")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--masker", "masker_path", required=True, type=click.Path(exists=True))
@click.option("--coarse", "coarse_path", required=True, type=click.Path(exists=True))
@click.option("--refine", "refine_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--enhance-mode", type=click.Choice(["offline", "inference"]),
              default="inference")
@click.option("--keep-intermediate", is_flag=True, default=False)
@click.option("--size", type=int, default=None)
@click.pass_context
def translate(ctx, manifest_path, masker_path, coarse_path, refine_path, out,
              enhance_mode, keep_intermediate, size):
    """Translate CFD snippets to synthetic B-mode videos."""
    config: PipelineConfig = ctx.obj["config"]
    config.enhance.mode = enhance_mode
    if size:
        config.panel_size = size
    for path in (masker_path, coarse_path, refine_path):
        if not Path(path).exists():
            _fail_config(f"missing checkpoint {path}")
    try:
        manifest = dataio.load_manifest(manifest_path)
        _, skipped = pipeline.run_translate(manifest, Path(masker_path), Path(coarse_path),
                                            Path(refine_path), config, Path(out),
                                            keep_intermediate=keep_intermediate)
    except (ConfigError, ParseError) as exc:
        _fail_config(str(exc))
    click.echo(f"translated {len(manifest.records) - len(skipped)} records, "
               f"skipped {len(skipped)}")
    if skipped:
        sys.exit(EXIT_PARTIAL)


@main.command("evaluate")
@click.option("--real", "real_path", required=True, type=click.Path(exists=True))
@click.option("--synthetic", "synth_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--size", type=int, default=None)
@click.pass_context
def evaluate(ctx, real_path, synth_path, out, size):
    """Compute the metrics report for a translate run."""
    config: PipelineConfig = ctx.obj["config"]
    if size:
        config.panel_size = size
    try:
        report = pipeline.run_evaluate(dataio.load_manifest(real_path),
                                       dataio.load_manifest(synth_path), config)
    except (ConfigError, ParseError) as exc:
        _fail_config(str(exc))
    json_path, csv_path = pipeline.write_report(report, Path(out))
    overall = report.strata.get("OVERALL")
    if overall:
        click.echo(f"mean SSIM synthetic {overall['synthetic'].mean:.4f} "
                   f"vs cfd {overall['cfd'].mean:.4f}; FID {report.fid_value:.2f}")
    click.echo(f"report -> {json_path}, table -> {csv_path}")
    if report.unpaired:
        click.echo(f"unpaired records: {len(report.unpaired)}", err=True)
        sys.exit(EXIT_PARTIAL)


@main.group()
def study_group():
    """Reader-study service commands."""


main.add_command(study_group, name="study")


@study_group.command("serve")
@click.option("--bank-dir", required=True, type=click.Path())
@click.option("--data-dir", required=True, type=click.Path())
@click.option("--real", "real_path", default=None, type=click.Path(exists=True),
              help="Build the bank from this real manifest if bank.json is missing.")
@click.option("--synthetic", "synth_path", default=None, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8765)
@click.option("--size", type=int, default=dataio.STANDARD_SIZE)
@click.pass_context
def study_serve(ctx, bank_dir, data_dir, real_path, synth_path, host, port, size):
    """Serve the blinded study API (builds the item bank first if needed)."""
    bank_dir = Path(bank_dir)
    if not (bank_dir / "bank.json").exists():
        if not (real_path and synth_path):
            _fail_config("no bank.json; pass --real and --synthetic to build one")
        try:
            study.build_item_bank(dataio.load_manifest(real_path),
                                  dataio.load_manifest(synth_path),
                                  bank_dir, seed=ctx.obj["config"].seed, panel_size=size)
        except ConfigError as exc:
            _fail_config(str(exc))
    import uvicorn
    uvicorn.run(study.create_app(bank_dir, Path(data_dir)), host=host, port=port,
                log_level="warning")


@study_group.command("report")
@click.option("--bank-dir", required=True, type=click.Path(exists=True))
@click.option("--data-dir", required=True, type=click.Path(exists=True))
@click.option("--test-type", required=True,
              type=click.Choice(list(study.TEST_TYPES)))
def study_report(bank_dir, data_dir, test_type):
    """Print the aggregated report for one test type."""
    try:
        bank = study.ItemBank.load(Path(bank_dir))
        report = study.build_report(test_type, study.StudyStore(Path(data_dir)), bank)
    except ConfigError as exc:
        _fail_config(str(exc))
    click.echo(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
