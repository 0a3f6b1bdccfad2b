import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lfdeconv.lfmodel import PsfStack
from lfdeconv.optics import OpticsParams
from lfdeconv.phantom import PhantomSpec, SyntheticPsfSpec

# Desk-scale bead scenario shared by the deconvolution, pipeline and
# acceptance tests. The optics are chosen so the DCT cutoff region matches
# the resolution of the synthetic PSF below.
BEAD_OPTICS = OpticsParams(wavelength_um=0.52, na=0.8, mla_pitch_um=150.0, magnification=40.0, nnum=3)
BEAD_PSF = SyntheticPsfSpec(nz=7, nnum=3, kh=21, kw=21, sigma0=1.0, sigma_slope=0.5, shear=3.0)


def bead_phantom(seed):
    return PhantomSpec(nz=7, height=63, width=63, bead_count=10, bead_radius_px=1,
                       seed=seed, photon_scale=200.0)


def random_psf(rng, nz=3, nnum=3, kh=3, kw=3):
    return PsfStack(rng.random((nz, nnum, nnum, kh, kw)) + 0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


_acceptance_lines = []


@pytest.fixture
def acceptance():
    def record(label, passed, detail=""):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        _acceptance_lines.append(f"[{status}] {label}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
