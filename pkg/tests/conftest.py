import pytest

from vstain.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small synthetic dataset shared by trainer/CLI tests: 2 studies x 6 images, 128px."""
    out = tmp_path_factory.mktemp("tiny_ds")
    manifest = generate(SynthConfig(seed=123, n_studies=2, images_per_study=6, image_size=128), out)
    return manifest
