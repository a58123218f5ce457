import numpy as np
import pytest

from cavityarray.prescription import bundled_prescription


@pytest.fixture(scope="session")
def paper():
    return bundled_prescription("paper")


@pytest.fixture(scope="session")
def paper_nomla():
    return bundled_prescription("paper_nomla")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TWO_MIRROR = """
[cavity]
wavelength_trap_nm = 785
magnification = 1

[element m1]
kind = flat-mirror
position_mm = 0
aperture_mm = 5

[element m2]
kind = curved-mirror
position_mm = 50
aperture_mm = 5
roc_mm = 100
"""
