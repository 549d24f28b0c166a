import csv

import numpy as np
import pytest

from ohformer.errors import ConfigurationError
from ohformer.evaluation.synth import GENERATION_NAME, SynthSpec, image_name, synth_generate
from ohformer.training.data import MANIFEST, decode_ppm, read_manifest


def _generation_rows(root):
    with open(root / GENERATION_NAME, newline="") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def test_counts_and_names(synth_dir):
    entries = read_manifest(synth_dir)
    assert len(entries) == 160
    assert entries[0].file == "0000_00_0000.ppm"
    assert entries[-1].file == "0007_01_0009.ppm"
    assert {e.pid for e in entries} == set(range(8))
    assert {e.cam for e in entries} == {0, 1}
    assert len(list(synth_dir.glob("*.ppm"))) == 160


def test_image_name():
    assert image_name(12, 3, 7) == "0012_03_0007.ppm"


def test_images_have_the_configured_size(small_synth_dir):
    image = decode_ppm((small_synth_dir / "0001_01_0002.ppm").read_bytes())
    assert image.shape == (60, 30, 3)
    assert image.dtype == np.uint8


def test_signatures_are_fixed_per_identity(synth_dir):
    signatures = {}
    for row in _generation_rows(synth_dir):
        key = (row["head"], row["torso"], row["legs"], row["torso_width"])
        assert signatures.setdefault(row["pid"], key) == key
    assert len(set(signatures.values())) == 8


def test_no_occlusion_by_default(synth_dir):
    assert {row["occluded"] for row in _generation_rows(synth_dir)} == {"0"}


def test_full_occlusion_paints_the_occluder(tmp_path):
    generated = synth_generate(SynthSpec(ids=2, cams=1, per_id=2, occlude=1.0, seed=4), tmp_path)
    assert all(g.occluded for g in generated)
    assert {row["occluded"] for row in _generation_rows(tmp_path)} == {"1"}
    image = decode_ppm((tmp_path / generated[0].entry.file).read_bytes())
    assert (image[-1] == 128).all(axis=-1).any()


def test_same_seed_is_byte_identical(tmp_path):
    spec = SynthSpec(ids=3, cams=2, per_id=2, seed=11)
    synth_generate(spec, tmp_path / "a")
    synth_generate(spec, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert MANIFEST in names and GENERATION_NAME in names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seeds_differ(tmp_path):
    synth_generate(SynthSpec(ids=2, cams=1, per_id=1, seed=1), tmp_path / "a")
    synth_generate(SynthSpec(ids=2, cams=1, per_id=1, seed=2), tmp_path / "b")
    name = image_name(0, 0, 0)
    assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("spec", [
    SynthSpec(ids=0),
    SynthSpec(per_id=0),
    SynthSpec(size=(8, 30)),
    SynthSpec(occlude=1.5),
])
def test_invalid_spec(tmp_path, spec):
    with pytest.raises(ConfigurationError):
        synth_generate(spec, tmp_path)
