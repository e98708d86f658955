import pytest

from cptamp.world import build_task


@pytest.fixture(scope="session")
def desk():
    return build_task("desk")


@pytest.fixture(scope="session")
def desk_p():
    return build_task("deskP")


@pytest.fixture(scope="session")
def regrasp():
    return build_task("regrasp")


@pytest.fixture(scope="session")
def pack():
    return build_task("pack")


@pytest.fixture(scope="session")
def golden_dir():
    from pathlib import Path
    return Path(__file__).parent / "golden"
