import os
import uuid

import pytest

from pubsub_lifetimes import Domain


@pytest.fixture
def domain():
    return Domain()


@pytest.fixture
def shm_prefix():
    prefix = f"pslt{os.getpid()}x{uuid.uuid4().hex[:6]}"
    yield prefix
    for name in os.listdir("/dev/shm"):
        if name.startswith(prefix):
            os.unlink(os.path.join("/dev/shm", name))
