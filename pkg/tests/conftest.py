import math
import os

import hypothesis
import pytest

from bgfss.geometry import ProjectionConfig
from bgfss.synth import CorpusConfig, write_corpus
from bgfss.taxonomy import IGNORE, Taxonomy

hypothesis.settings.register_profile("default", max_examples=60, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")
SYNTH_INI = os.path.abspath(os.path.join(CONFIGS, "synthetic.ini"))


@pytest.fixture(scope="session")
def street_tax():
    return Taxonomy(
        background=0,
        base=(1, 2, 3),
        novel=(4, 5),
        raw_to_class={0: IGNORE, 40: 1, 50: 2, 80: 3, 10: 4, 30: 5, 0xFFFF: 0},
        names={0: "background", 1: "road", 2: "building", 3: "pole", 4: "car", 5: "person"},
    )


@pytest.fixture(scope="session")
def street_proj():
    return ProjectionConfig(256, 16, math.radians(3.0), math.radians(15.0))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    write_corpus(root, CorpusConfig(seed=3, n_base=6, n_pool=6, n_eval=3))
    return str(root)
