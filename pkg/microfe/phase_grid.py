from __future__ import annotations

import io
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image, UnidentifiedImageError

LOGGER = logging.getLogger(__name__)

ColorKey = Union[int, Tuple[int, int, int]]
Source = Union[str, Path, bytes, BinaryIO]

_HEX_COLOR = re.compile(r"^#?([0-9a-fA-F]{6})$")


class PhaseGridError(ValueError):
    """Raised when a raster cannot be turned into a valid phase grid."""


@dataclass(frozen=True)
class PhaseGrid:
    """
    Integer phase label per pixel of a square raster.

    Row ``i`` of ``labels`` is the i-th raster line as stored in the source file (top line first);
    column ``j`` runs left to right. The raster covers the square ``[0, physical_size]^2``.
    """

    labels: np.ndarray
    physical_size: float = 1.0
    width: int = field(init=False)
    height: int = field(init=False)

    def __post_init__(self) -> None:
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if labels.ndim != 2 or labels.size == 0:
            raise PhaseGridError("Phase labels must form a non-empty 2D raster")
        height, width = labels.shape
        if width != height:
            raise PhaseGridError(f"Raster must be square, got {height}x{width}")
        if np.any(labels < 0):
            raise PhaseGridError("Phase ids must be non-negative integers")
        if not self.physical_size > 0:
            raise PhaseGridError(f"physical_size must be positive, got {self.physical_size}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "width", int(width))
        object.__setattr__(self, "height", int(height))

    @property
    def pixel_size(self) -> float:
        return self.physical_size / self.width

    @property
    def phases(self) -> List[int]:
        return [int(p) for p in np.unique(self.labels)]

    def volume_fractions(self) -> Dict[int, float]:
        ids, counts = np.unique(self.labels, return_counts=True)
        total = float(self.labels.size)
        return {int(p): float(c) / total for p, c in zip(ids, counts)}

    def flat_labels(self) -> List[int]:
        # Row-major view used by serializers and tests.
        return [int(v) for v in self.labels.ravel()]


def phase_of_pixel(grid: PhaseGrid, i: int, j: int) -> int:
    if not (0 <= i < grid.height and 0 <= j < grid.width):
        raise IndexError(f"Pixel ({i}, {j}) outside {grid.height}x{grid.width} raster")
    return int(grid.labels[i, j])


def parse_color(token: Union[str, int, Iterable[int]]) -> ColorKey:
    """Normalise a palette key: gray value (int or numeric string) or RGB (hex string or triple)."""
    if isinstance(token, (int, np.integer)):
        return int(token)
    if isinstance(token, str):
        text = token.strip()
        if re.fullmatch(r"\d+", text):
            return int(text)
        match = _HEX_COLOR.match(text)
        if match:
            value = match.group(1)
            return (int(value[0:2], 16), int(value[2:4], 16), int(value[4:6], 16))
        raise PhaseGridError(f"Unrecognised palette color: {token!r}")
    rgb = tuple(int(v) for v in token)
    if len(rgb) != 3:
        raise PhaseGridError(f"RGB palette colors need three channels, got {token!r}")
    return rgb  # type: ignore[return-value]


def normalise_palette(palette: Optional[Mapping]) -> Optional[Dict[ColorKey, int]]:
    if palette is None:
        return None
    normalised: Dict[ColorKey, int] = {}
    for key, phase in palette.items():
        phase_id = int(phase)
        if phase_id < 0:
            raise PhaseGridError(f"Palette maps {key!r} to negative phase {phase_id}")
        normalised[parse_color(key)] = phase_id
    return normalised


def load_palette(path: Union[str, Path]) -> Dict[ColorKey, int]:
    # Plain-text palette: one "gray_or_hexcolor phase_id" pair per line.
    palette_path = Path(path)
    if not palette_path.exists():
        raise PhaseGridError(f"Palette file not found: {palette_path}")
    palette: Dict[ColorKey, int] = {}
    for line_no, line in enumerate(palette_path.read_text(encoding="utf-8").splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 2:
            raise PhaseGridError(f"{palette_path}:{line_no}: expected 'color phase_id', got {line!r}")
        try:
            phase_id = int(tokens[1])
        except ValueError as exc:
            raise PhaseGridError(f"{palette_path}:{line_no}: phase id must be an integer") from exc
        palette[parse_color(tokens[0])] = phase_id
    if not palette:
        raise PhaseGridError(f"Palette file is empty: {palette_path}")
    LOGGER.debug("Loaded palette with %s colors from %s", len(palette), palette_path)
    return palette


def _read_bytes(source: Source) -> bytes:
    if isinstance(source, bytes):
        return source
    if isinstance(source, (str, Path)):
        path = Path(source)
        if not path.exists():
            raise PhaseGridError(f"Raster file not found: {path}")
        return path.read_bytes()
    return source.read()


def _decode_csv(data: bytes) -> np.ndarray:
    try:
        frame = pd.read_csv(io.BytesIO(data), header=None, dtype=np.int64, skipinitialspace=True)
    except (ValueError, pd.errors.ParserError) as exc:
        raise PhaseGridError(f"CSV raster must contain comma-separated integers: {exc}") from exc
    return frame.to_numpy()


def _decode_image(data: bytes, palette: Dict[ColorKey, int]) -> Tuple[np.ndarray, bool]:
    # Raw raster values and whether they are packed 0xRRGGBB colors.
    try:
        image = Image.open(io.BytesIO(data))
        image.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise PhaseGridError(f"Unsupported or corrupt image raster: {exc}") from exc

    rgb_keys = any(isinstance(key, tuple) for key in palette)
    if rgb_keys or image.mode not in ("1", "L", "I", "I;16"):
        # Indexed images resolve through their own palette.
        pixels = np.asarray(image.convert("RGB"), dtype=np.int64)
        gray = (pixels[..., 0] == pixels[..., 1]) & (pixels[..., 1] == pixels[..., 2])
        if not rgb_keys and gray.all():
            return pixels[..., 0], False
        return pixels[..., 0] * 65536 + pixels[..., 1] * 256 + pixels[..., 2], True
    return np.asarray(image, dtype=np.int64), False


def _apply_palette(raw: np.ndarray, palette: Dict[ColorKey, int], packed_rgb: bool) -> np.ndarray:
    # Translate raw raster values through the palette, failing on the first unknown color.
    lookup: Dict[int, int] = {}
    for key, phase in palette.items():
        if isinstance(key, tuple):
            lookup[key[0] * 65536 + key[1] * 256 + key[2]] = phase
        elif packed_rgb:
            lookup[key * 65536 + key * 256 + key] = phase
        else:
            lookup[key] = phase
    values, inverse = np.unique(raw, return_inverse=True)
    unknown = [int(v) for v in values if int(v) not in lookup]
    if unknown:
        shown = [f"#{v:06x}" if packed_rgb else str(v) for v in unknown[:5]]
        raise PhaseGridError(f"Raster colors missing from palette: {', '.join(shown)}")
    mapped = np.array([lookup[int(v)] for v in values], dtype=np.int64)
    return mapped[inverse].reshape(raw.shape)


def load_phase_grid(
    source: Source,
    palette: Optional[Mapping] = None,
    physical_size: float = 1.0,
) -> PhaseGrid:
    """
    Read a PGM/PNG image or a CSV label table into a PhaseGrid.

    Images require an explicit palette. CSV tables hold phase ids directly; a palette, when given,
    maps the stored integers to phase ids.
    """
    data = _read_bytes(source)
    if not data.strip():
        raise PhaseGridError("Raster source is empty")
    normalised = normalise_palette(palette)

    is_image = data[:2] in (b"P2", b"P5") or data[:8] == b"\x89PNG\r\n\x1a\n"
    if is_image:
        if not normalised:
            raise PhaseGridError("Image rasters need a palette mapping colors to phases")
        raw, packed = _decode_image(data, normalised)
        labels = _apply_palette(raw, normalised, packed_rgb=packed)
    else:
        raw = _decode_csv(data)
        if normalised:
            if any(isinstance(k, tuple) for k in normalised):
                raise PhaseGridError("CSV rasters only accept integer palette keys")
            labels = _apply_palette(raw, normalised, packed_rgb=False)
        else:
            labels = raw

    if labels.size == 0:
        raise PhaseGridError("Raster source is empty")
    if labels.shape[0] != labels.shape[1]:
        raise PhaseGridError(f"Raster must be square, got {labels.shape[0]}x{labels.shape[1]}")
    grid = PhaseGrid(labels=labels, physical_size=physical_size)
    LOGGER.info("Loaded %sx%s phase grid with phases %s", grid.height, grid.width, grid.phases)
    return grid


def write_phase_grid_csv(grid: PhaseGrid, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(grid.labels).to_csv(target, header=False, index=False)
    return target


def refine_grid(grid: PhaseGrid, factor: int) -> PhaseGrid:
    # Each pixel becomes a factor x factor block of the same phase.
    if factor < 1:
        raise PhaseGridError(f"Refinement factor must be >= 1, got {factor}")
    labels = np.repeat(np.repeat(grid.labels, factor, axis=0), factor, axis=1)
    return PhaseGrid(labels=labels, physical_size=grid.physical_size)
