import pytest

from bundlegen import make_bundle


@pytest.fixture()
def two_bundles(tmp_path):
    male = make_bundle(tmp_path / "male", gender="male", seed=1)
    female = make_bundle(tmp_path / "female", gender="female", seed=2)
    return male, female
