import numpy as np
import pytest

from cfd2bmode import dataio, phantom


@pytest.fixture(scope="session")
def phantom_dataset(tmp_path_factory):
    """Small paired dataset on disk: 8 clips, 128x128 panels, 10 exams worth of splits."""
    root = tmp_path_factory.mktemp("phantom")
    config = phantom.PhantomConfig(seed=7, num_clips=8, frames_per_clip=10,
                                   canvas=(128, 256), clips_per_exam=1,
                                   split_fractions=(0.75, 0.125, 0.125))
    manifest = phantom.generate_dataset(config, root)
    return config, manifest


@pytest.fixture(scope="session")
def phantom_duals(phantom_dataset):
    """Standardized (at native 128) dual snippets with ground-truth masks."""
    _, manifest = phantom_dataset
    duals = {}
    for record in manifest.records:
        duals[record.clip_id] = dataio.load_dual_snippets(record, manifest.root, size=128)
    return manifest, duals


def make_snippet(seed=0, size=64, fill=None):
    """In-memory 10-frame snippet for unit tests."""
    rng = np.random.default_rng(seed)
    if fill is not None:
        frames = np.full((10, size, size, 3), fill, dtype=np.float32)
    else:
        frames = rng.random((10, size, size, 3)).astype(np.float32)
    return dataio.VideoSnippet(frames=frames, exam_id="e0", clip_id="c0")
