import numpy as np
import pytest

import ctwgan.autodiff as ad


@pytest.fixture
def f64():
    """Run a test at 64-bit precision (gradient checks need it)."""
    prev = ad.get_default_dtype()
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(prev)
