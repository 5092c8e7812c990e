import math

import pytest

from kasner_scatter import kasner as kc

ANISO_P = (0.5, 0.25, 0.25)
ANISO_PHI = math.sqrt(0.3125)


@pytest.fixture
def iso3():
    return kc.isotropic(3)


@pytest.fixture
def aniso():
    return kc.make_background(ANISO_P, ANISO_PHI)
