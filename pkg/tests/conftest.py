"""Session fixtures shared by the CLI and acceptance suites.

The bundled g-and-k experiment is executed through the CLI once per session
(one EBM training run) and its nle twin once more (one MAF training run);
every test that needs a desk-scale trained model reuses these directories.
"""

import pathlib
from importlib import resources

import pytest

from nsmbayes.cli import main as cli_main


@pytest.fixture(scope="session")
def bundled_config():
    path = resources.files("nsmbayes").joinpath("configs/gandk_small.cfg")
    return pathlib.Path(str(path))


@pytest.fixture(scope="session")
def conj_run(bundled_config, tmp_path_factory):
    """Full pipeline on the bundled config (method nsm-conj, EBM surrogate)."""
    out = tmp_path_factory.mktemp("conj_run")
    code = cli_main(["run", "--config", str(bundled_config),
                     "--out", str(out), "--workers", "2"])
    assert code == 0
    return out


@pytest.fixture(scope="session")
def nle_config(bundled_config, tmp_path_factory):
    """The bundled config with only the method (and surrogate family) flipped."""
    text = (bundled_config.read_text()
            .replace("method = nsm-conj", "method = nle")
            .replace("family = ebm", "family = maf"))
    path = tmp_path_factory.mktemp("nle_cfg") / "gandk_small_nle.cfg"
    path.write_text(text)
    return path


@pytest.fixture(scope="session")
def nle_run(nle_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("nle_run")
    code = cli_main(["run", "--config", str(nle_config),
                     "--out", str(out), "--workers", "2"])
    assert code == 0
    return out
