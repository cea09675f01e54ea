"""Shared fixtures: tiny synthetic datasets sized for fast unit tests."""

import numpy as np
import pytest

from noduleseg import pseudolabel, segmenter, synth, trainer
from noduleseg.dataio import AspectRatioAnnotation, load_dataset
from noduleseg.geometry import generate_prompts, write_prompts


def random_annotation(rng, size=128, image_id="img"):
    """Random crossing annotation with all endpoints inside [0, size)."""
    cx = rng.uniform(size * 0.2, size * 0.8)
    cy = rng.uniform(size * 0.2, size * 0.8)
    theta = rng.uniform(0.0, np.pi)
    phi = theta + np.pi / 2 + rng.uniform(-0.5, 0.5)
    pts = []
    for ang, sign in ((theta, 1), (theta, -1), (phi, 1), (phi, -1)):
        r = rng.uniform(2.0, size * 0.18)
        x = np.clip(cx + sign * r * np.cos(ang), 0.0, size - 1.0)
        y = np.clip(cy + sign * r * np.sin(ang), 0.0, size - 1.0)
        pts.append((float(x), float(y)))
    return AspectRatioAnnotation(image_id, *pts)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """16 phantoms at 64x64 with gt masks, prompts, and oracle bundles."""
    root = tmp_path_factory.mktemp("smallds") / "data"
    cfg = synth.SynthConfig(count=16, image_size=64, r_min=6, r_max=14, seed=3)
    synth.generate_dataset(cfg, root)
    index = load_dataset(root)

    prompts = {}
    for e in index.entries:
        prompts[e.image_id] = generate_prompts(e.annotation)
    write_prompts(root / "prompts" / "prompts.csv", prompts)

    seg = segmenter.make_segmenter(
        "oracle", gt_lookup=segmenter.gt_lookup_from_dataset(index))
    bundles_dir = root / "bundles"
    rows = []
    for e in index.entries:
        from noduleseg.dataio import load_image
        img = load_image(e.image_path, e.image_id)
        b = pseudolabel.build_bundle(img, prompts[e.image_id], seg)
        pseudolabel.save_bundle(b, bundles_dir)
        rows.append(b)
    pseudolabel.write_manifest(bundles_dir / "bundles_manifest.csv", rows)
    return root


@pytest.fixture(scope="session")
def small_train_data(small_dataset):
    return trainer.load_training_arrays(
        small_dataset, small_dataset / "bundles", 64, "train")


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
