import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import export  # noqa: E402


@pytest.fixture(scope="session")
def alexnet_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("alexnet_export")
    assert export.main(["--model", "alexnet", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="session")
def resnet18_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("resnet18_export")
    assert export.main(["--model", "resnet18", "--out", str(out)]) == 0
    return out
