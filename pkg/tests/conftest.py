import sys
from pathlib import Path

import numpy as np
import pytest


ROOT = Path(__file__).resolve().parents[1]

if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from microfe.material import MaterialTable, PhaseMaterial  # noqa: E402
from microfe.phase_grid import PhaseGrid  # noqa: E402


@pytest.fixture
def two_phase_material():
    return MaterialTable({0: PhaseMaterial(250000.0, 0.3), 1: PhaseMaterial(775000.0, 0.3)})


@pytest.fixture
def uniform_material():
    # Same constants on both phases: a homogeneous medium on a two-phase raster.
    return MaterialTable({0: PhaseMaterial(2.0, 0.25), 1: PhaseMaterial(2.0, 0.25)})


@pytest.fixture
def two_block_grid():
    # 4x4 raster, left half phase 0, right half phase 1.
    labels = np.zeros((4, 4), dtype=int)
    labels[:, 2:] = 1
    return PhaseGrid(labels)


@pytest.fixture
def offset_inclusion_grid():
    # Inclusion hugging the left edge so left and right boundaries coarsen differently.
    labels = np.zeros((16, 16), dtype=int)
    labels[4:10, 1:4] = 1
    return PhaseGrid(labels)
