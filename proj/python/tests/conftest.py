import os
import shutil

import pytest


@pytest.fixture(scope="session")
def cli():
    path = os.environ.get("CCRS_CLI") or shutil.which("ccrs")
    if not path:
        pytest.skip("ccrs executable not available")
    return path
