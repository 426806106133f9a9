import pytest

from splashmhd.splash_experiment import build_base, fig3_wedge


@pytest.fixture(scope="session")
def wedge():
    return fig3_wedge()


@pytest.fixture(scope="session")
def wedge_base(wedge):
    return build_base(wedge)
