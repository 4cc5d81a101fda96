import os

import hypothesis
import numpy as np
import pytest

from src.bundle_io import write_bundle
from src.scene_core import CameraModel
from src.synthetic import disagreement_scene, oracle_scene

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def identity_cam():
    return CameraModel(1.0, 1.0, 0.5, 0.5)


@pytest.fixture(scope="session")
def oracle():
    return oracle_scene()


@pytest.fixture(scope="session")
def disagreement():
    return disagreement_scene()


@pytest.fixture(scope="session")
def oracle_dir(tmp_path_factory, oracle):
    return write_bundle(oracle, str(tmp_path_factory.mktemp("bundles") / "oracle"))


@pytest.fixture(scope="session")
def disagreement_dir(tmp_path_factory, disagreement):
    return write_bundle(disagreement, str(tmp_path_factory.mktemp("bundles") / "disagreement"))


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch, tmp_path):
    """Keep SIU3R_* variables and .env files of the host out of every test."""
    for name in list(os.environ):
        if name.startswith("SIU3R_"):
            monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)
