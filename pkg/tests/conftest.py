import pytest

from cnncap import techmodel


@pytest.fixture(scope="session")
def tech55():
    return techmodel.load_techfile(techmodel.bundled_tech_path("tech55"))


@pytest.fixture(scope="session")
def tech15():
    return techmodel.load_techfile(techmodel.bundled_tech_path("tech15"))
