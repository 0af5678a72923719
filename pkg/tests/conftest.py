import numpy as np
import pytest

from centralshift.model_systems import PhasePoint, make_cat_suspension

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@pytest.fixture(scope="session")
def cat():
    return make_cat_suspension(GOLDEN)


@pytest.fixture(scope="session")
def p_default():
    """The canonical perturbation point: section-aligned, non-periodic."""
    return PhasePoint(np.array([0.1, 0.2, 0.3]), 0.0)
