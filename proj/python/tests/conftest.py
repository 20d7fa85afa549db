import os
import shutil
import subprocess
from pathlib import Path

import pytest


@pytest.fixture(scope="session")
def cli():
    path = os.environ.get("FACETALK_CLI") or shutil.which("facetalk")
    if not path:
        pytest.skip("facetalk executable not available")
    return path


@pytest.fixture(scope="session")
def trained(cli, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    configs = {
        "listen.cfg": "phase=listening\nlr=3e-3\nbatch=8\niters=20\nseed=1\nhidden=8\n"
        "layers=1\nn=10\ndataset_dir=ds\ncheckpoint=listen.ckpt\n",
        "speak.cfg": "phase=speaking\nlr=3e-3\nbatch=4\niters=20\nseed=1\nhidden=8\n"
        "layers=1\nn=12\ndataset_dir=ds\ncheckpoint=speak.ckpt\n",
        "synth.cfg": "phase=synth\nlr=2e-4\nbatch=4\niters=5\nseed=1\nhidden=16\n"
        "dataset_dir=ds\ncheckpoint=synth.ckpt\n",
    }
    for name, text in configs.items():
        (root / name).write_text(text)
    run = lambda *args: subprocess.run([cli, *args], cwd=root, check=True, capture_output=True)
    run("gen-data", "--out", "ds", "--samples", "10", "--frames", "40", "--seed", "2")
    for name in configs:
        run("train", "--config", name)
    return Path(root)
