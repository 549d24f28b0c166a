import hypothesis
import numpy as np
import pytest

from ohformer.evaluation.synth import SynthSpec, synth_generate
from ohformer.nn.stack import stack_spec
from ohformer.tensor import Rng, set_num_threads

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile("fast")


@pytest.fixture(autouse=True)
def single_thread():
    set_num_threads(1)
    yield
    set_num_threads(1)


@pytest.fixture
def rng():
    return Rng(7)


@pytest.fixture
def tiny_spec():
    """Two layers, the second of order 3, on the 60x30 desk grid."""
    return stack_spec(layers=2, orders=((1, 3),), width=16, heads=2, parts=2, classes=4, mlp_ratio=2)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """8 identities x 2 cameras x 10 images, 60x30."""
    root = tmp_path_factory.mktemp("synth")
    synth_generate(SynthSpec(ids=8, cams=2, per_id=10, size=(60, 30), seed=1), root)
    return root


@pytest.fixture(scope="session")
def small_synth_dir(tmp_path_factory):
    """4 identities x 2 cameras x 4 images, 60x30."""
    root = tmp_path_factory.mktemp("small_synth")
    synth_generate(SynthSpec(ids=4, cams=2, per_id=4, size=(60, 30), seed=3), root)
    return root
