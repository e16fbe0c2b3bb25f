import os
import pathlib

import pytest

DATA = pathlib.Path(os.environ.get("RFCPROBE_TEST_DATA", pathlib.Path(__file__).parent.parent / "data"))


@pytest.fixture
def corpus():
    return DATA / "mini_corpus"


@pytest.fixture
def cli():
    path = os.environ.get("RFCPROBE_CLI")
    if not path:
        pytest.skip("RFCPROBE_CLI not set")
    return path
