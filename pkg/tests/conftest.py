import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stochmech.fields import PhysicalParams

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def _compiled_available():
    try:
        from stochmech import _kernels  # noqa: F401
    except ImportError:
        return False
    return True


BACKENDS = ["python"] + (["compiled"] if _compiled_available() else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def natural():
    return PhysicalParams()


def rel_err(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))) / np.max(np.abs(b)))
