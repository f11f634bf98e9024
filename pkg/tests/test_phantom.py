import math

import cv2
import numpy as np
import pytest

from cfd2bmode import dataio, phantom
from cfd2bmode.errors import ConfigError
from cfd2bmode.phantom import PhantomConfig, generate_dataset, make_scene, render_dual_frame


def _config(**kw):
    base = dict(seed=11, num_clips=4, frames_per_clip=10, canvas=(128, 256))
    base.update(kw)
    return PhantomConfig(**base)


class TestRenderDualFrame:
    def test_zero_coverage_panels_identical(self):
        config = _config(cfd_coverage_target=0.0)
        scene = make_scene(config, 0)
        dual, gt = render_dual_frame(scene, 0, config)
        assert gt.sum() == 0
        bmode, cfd = np.split(dual, 2, axis=1)
        assert np.array_equal(bmode, cfd)

    def test_determinism_bit_identical(self):
        config = _config()
        scene = make_scene(config, 1)
        d1, g1 = render_dual_frame(scene, 3, config)
        d2, g2 = render_dual_frame(scene, 3, config)
        assert np.array_equal(d1, d2)
        assert np.array_equal(g1, g2)

    def test_mask_area_matches_analytic_ellipse(self):
        config = _config()
        scene = make_scene(config, 0)
        assert scene.flow is not None
        _, gt = render_dual_frame(scene, 0, config)
        a, b = scene.flow["axes"]
        # Pulsation scale at frame 0.
        s = 1.0 + 0.5 * config.motion_amplitude * math.sin(scene.flow["phase"])
        analytic = math.pi * (a * s) * (b * s)
        assert gt.sum() == pytest.approx(analytic, rel=0.10)

    def test_frame_index_out_of_range(self):
        config = _config()
        scene = make_scene(config, 0)
        with pytest.raises(IndexError):
            render_dual_frame(scene, 10, config)
        with pytest.raises(IndexError):
            render_dual_frame(scene, -1, config)

    def test_diff_support_within_one_pixel_of_mask(self):
        config = _config(fiducials_on=False)
        for clip in range(4):
            scene = make_scene(config, clip)
            for t in (0, 5):
                dual, gt = render_dual_frame(scene, t, config)
                bmode, cfd = np.split(dual, 2, axis=1)
                diff = np.abs(cfd - bmode).max(axis=-1) > 1e-6
                dilated = cv2.dilate(gt, np.ones((3, 3), np.uint8))
                assert not np.any(diff & (dilated == 0))

    def test_outside_sector_black_without_fiducials(self):
        config = _config(fiducials_on=False)
        scene = make_scene(config, 2)
        dual, _ = render_dual_frame(scene, 0, config)
        h, w = config.panel_shape
        sector = phantom._sector_mask((h, w), scene.apex, scene.span_deg, scene.radius)
        bmode, cfd = np.split(dual, 2, axis=1)
        assert float(np.abs(bmode[~sector]).max()) == 0.0
        assert float(np.abs(cfd[~sector]).max()) == 0.0

    def test_chamber_centers_inside_sector_every_seed(self):
        for seed in range(6):
            config = _config(seed=seed)
            for clip in range(config.num_clips):
                scene = make_scene(config, clip)
                for ch in scene.chambers:
                    assert phantom._point_in_sector(*ch["center"], scene.apex,
                                                    scene.span_deg, scene.radius)

    def test_doppler_roi_inside_sector(self):
        for seed in range(6):
            config = _config(seed=seed)
            scene = make_scene(config, 0)
            for (x, y) in scene.doppler_roi:
                assert phantom._point_in_sector(x, y, scene.apex, scene.span_deg,
                                                scene.radius + 1.0)

    def test_orange_chromamap_tints_panels(self):
        config = _config(chromamap="orange", fiducials_on=False)
        scene = make_scene(config, 0)
        dual, _ = render_dual_frame(scene, 0, config)
        bmode, _ = np.split(dual, 2, axis=1)
        lit = bmode[bmode[..., 0] > 0.2]
        assert np.all(lit[:, 0] > lit[:, 1])  # R > G
        assert np.all(lit[:, 1] > lit[:, 2])  # G > B


class TestGenerateDataset:
    def test_counts(self, tmp_path):
        config = _config(num_clips=4, frames_per_clip=20)
        manifest = generate_dataset(config, tmp_path / "d")
        assert len(manifest.records) == 4
        assert sum(len(r.frames) for r in manifest.records) == 80
        assert sum(len(r.masks) for r in manifest.records) == 80
        assert manifest.validate_files() == []

    def test_same_seed_identical_output(self, tmp_path):
        config = _config(num_clips=2)
        m1 = generate_dataset(config, tmp_path / "a")
        m2 = generate_dataset(config, tmp_path / "b")
        assert [r.to_json() for r in m1.records] == [r.to_json() for r in m2.records]
        for rec in m1.records:
            for rel in rec.frames + rec.masks:
                assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_exam_split_disjointness_ten_exams(self, tmp_path):
        config = _config(num_clips=10, clips_per_exam=1,
                         split_fractions=(0.8, 0.1, 0.1))
        manifest = generate_dataset(config, tmp_path / "d")
        assert manifest.exam_splits_disjoint()
        splits = {r.split for r in manifest.records}
        assert splits == {"train", "val", "test"}
        by_split = {}
        for r in manifest.records:
            by_split.setdefault(r.split, set()).add(r.exam_id)
        assert len(by_split["train"]) == 8
        assert len(by_split["val"]) == 1
        assert len(by_split["test"]) == 1

    def test_split_disjointness_many_seeds(self, tmp_path):
        for seed in (1, 2, 3):
            config = _config(seed=seed, num_clips=6, clips_per_exam=2)
            manifest = generate_dataset(config, tmp_path / f"s{seed}")
            assert manifest.exam_splits_disjoint()

    def test_mean_coverage_near_target(self, phantom_dataset):
        config, manifest = phantom_dataset
        mean_cov = np.mean([r.coverage for r in manifest.records])
        assert abs(mean_cov - config.cfd_coverage_target) <= 0.05

    def test_coverage_spans_spread(self, phantom_dataset):
        _, manifest = phantom_dataset
        covs = sorted(r.coverage for r in manifest.records)
        assert covs[-1] > 2 * covs[0]  # quartile spread present

    def test_unwritable_root(self):
        config = _config(num_clips=1)
        with pytest.raises(OSError):
            generate_dataset(config, "/proc/definitely/not/writable")

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            PhantomConfig(frames_per_clip=7).validate()
        with pytest.raises(ConfigError):
            PhantomConfig(cfd_coverage_target=1.5).validate()
        with pytest.raises(ConfigError):
            PhantomConfig(chromamap="sepia").validate()

    def test_fiducial_mask_written_and_static(self, phantom_dataset):
        _, manifest = phantom_dataset
        rec = manifest.records[0]
        assert rec.fiducial_mask is not None
        fid = dataio.read_mask(manifest.resolve(rec.fiducial_mask))
        assert fid.sum() > 0
        # Fiducial pixels are identical across frames and panels.
        f0 = dataio.read_image(manifest.resolve(rec.frames[0]))
        f5 = dataio.read_image(manifest.resolve(rec.frames[5]))
        half = f0.shape[1] // 2
        sel = fid > 0
        assert np.array_equal(f0[:, :half][sel], f5[:, :half][sel])
        assert np.array_equal(f0[:, half:][sel], f5[:, half:][sel])
