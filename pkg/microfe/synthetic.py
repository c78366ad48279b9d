from __future__ import annotations

import logging
from typing import Any, Callable, Dict, Mapping

import numpy as np

from .phase_grid import PhaseGrid, PhaseGridError

LOGGER = logging.getLogger(__name__)


def _pixel_centers(size: int) -> tuple[np.ndarray, np.ndarray]:
    # Normalised pixel-center coordinates: u runs along columns, v along raster lines.
    centers = (np.arange(size) + 0.5) / size
    u, v = np.meshgrid(centers, centers)
    return u, v


def cross(
    size: int = 128,
    span: float = 0.4375,
    width: float = 0.125,
    matrix_phase: int = 0,
    inclusion_phase: int = 1,
    physical_size: float = 1.0,
) -> PhaseGrid:
    """Centered plus-shaped inclusion; ``span`` and ``width`` are fractions of the domain side."""
    if not (0 < width <= span <= 1):
        raise PhaseGridError(f"Cross needs 0 < width <= span <= 1, got width={width}, span={span}")
    u, v = _pixel_centers(size)
    du, dv = np.abs(u - 0.5), np.abs(v - 0.5)
    horizontal = (du < span / 2) & (dv < width / 2)
    vertical = (du < width / 2) & (dv < span / 2)
    labels = np.where(horizontal | vertical, inclusion_phase, matrix_phase)
    return PhaseGrid(labels=labels, physical_size=physical_size)


def laminate(
    size: int = 64,
    fraction: float = 0.5,
    orientation: str = "vertical",
    layers: int = 1,
    phases: tuple[int, int] = (0, 1),
    physical_size: float = 1.0,
) -> PhaseGrid:
    """
    Layered two-phase raster. ``fraction`` is the volume fraction of ``phases[1]``; vertical layers
    alternate along x, horizontal layers along the raster lines.
    """
    if layers < 1 or size % layers:
        raise PhaseGridError(f"Laminate size {size} must be a multiple of layers={layers}")
    period = size // layers
    second = int(round(fraction * period))
    profile = np.where(np.arange(size) % period >= period - second, phases[1], phases[0])
    if orientation == "vertical":
        labels = np.tile(profile, (size, 1))
    elif orientation == "horizontal":
        labels = np.tile(profile[:, None], (1, size))
    else:
        raise PhaseGridError(f"Unknown laminate orientation: {orientation}")
    return PhaseGrid(labels=labels, physical_size=physical_size)


def circle(
    size: int = 128,
    radius: float = 0.25,
    matrix_phase: int = 0,
    inclusion_phase: int = 1,
    physical_size: float = 1.0,
) -> PhaseGrid:
    u, v = _pixel_centers(size)
    inside = (u - 0.5) ** 2 + (v - 0.5) ** 2 < radius**2
    return PhaseGrid(labels=np.where(inside, inclusion_phase, matrix_phase), physical_size=physical_size)


def tessellation(size: int = 96, tiles: int = 6, physical_size: float = 1.0) -> PhaseGrid:
    # Three phases on a staggered tile pattern; every phase borders both others.
    if tiles < 1 or size % tiles:
        raise PhaseGridError(f"Tessellation size {size} must be a multiple of tiles={tiles}")
    tile = size // tiles
    rows, cols = np.indices((size, size)) // tile
    return PhaseGrid(labels=(rows + 2 * cols) % 3, physical_size=physical_size)


GENERATORS: Dict[str, Callable[..., PhaseGrid]] = {
    "cross": cross,
    "laminate": laminate,
    "circle": circle,
    "tessellation": tessellation,
}


def generate(kind: str, params: Mapping[str, Any] | None = None) -> PhaseGrid:
    try:
        generator = GENERATORS[kind]
    except KeyError as exc:
        raise PhaseGridError(f"Unknown synthetic microstructure: {kind}") from exc
    grid = generator(**dict(params or {}))
    LOGGER.debug("Generated synthetic '%s' grid %sx%s", kind, grid.height, grid.width)
    return grid
