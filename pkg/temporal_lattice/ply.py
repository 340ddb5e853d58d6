"""
ASCII PLY export of segmented clouds and AFlow direction arrows.
"""

from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
from loguru import logger

from .errors import DataFormatError

PathLike = Union[str, Path]

# Fixed palette; label ids beyond it wrap around. Id 0 (unlabeled) is black.
PALETTE = np.array(
    [
        [0, 0, 0], [100, 150, 245], [100, 230, 245], [30, 60, 150], [80, 30, 180],
        [0, 0, 255], [255, 30, 30], [255, 40, 200], [150, 30, 90], [255, 0, 255],
        [255, 150, 255], [75, 0, 75], [175, 0, 75], [255, 200, 0], [255, 120, 50],
        [0, 175, 0], [135, 60, 0], [150, 240, 80], [255, 240, 150], [255, 0, 0],
        [245, 150, 100], [200, 40, 255], [255, 30, 30], [90, 30, 150], [255, 0, 0],
        [180, 30, 80],
    ],
    dtype=np.uint8,
)  # fmt: skip


def label_colors(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return PALETTE[labels % PALETTE.shape[0]]


def _header(vertex_count: int, colored: bool, edge_count: Optional[int] = None) -> str:
    lines = ["ply", "format ascii 1.0", f"element vertex {vertex_count}"]
    lines += [f"property float {axis}" for axis in "xyz"]
    if colored:
        lines += [f"property uchar {channel}" for channel in ("red", "green", "blue")]
    if edge_count is not None:
        lines += [f"element edge {edge_count}", "property int vertex1", "property int vertex2"]
    lines.append("end_header")
    return "\n".join(lines) + "\n"


def write_point_ply(path: PathLike, positions: np.ndarray, labels: Optional[np.ndarray] = None) -> Path:
    """Write points, colored by label when labels are given."""
    positions = np.asarray(positions, dtype=np.float64)
    path = Path(path)
    body = [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in positions[:, :3]]
    if labels is not None:
        colors = label_colors(labels)
        body = [f"{row} {r} {g} {b}" for row, (r, g, b) in zip(body, colors)]
    path.write_text(_header(positions.shape[0], labels is not None) + "".join(f"{row}\n" for row in body))
    logger.debug(f"Wrote {positions.shape[0]} points to {path}")
    return path


def write_flow_ply(path: PathLike, origins: np.ndarray, directions: np.ndarray, min_length: float = 1e-9) -> Path:
    """
    Write one line segment per nonzero direction, from the origin to origin + direction.

    Segment starts are white and ends red so viewers show which way they point.
    """
    origins = np.asarray(origins, dtype=np.float64)
    directions = np.asarray(directions, dtype=np.float64)
    keep = np.linalg.norm(directions, axis=1) > min_length
    starts, ends = origins[keep], origins[keep] + directions[keep]
    count = starts.shape[0]
    rows = []
    for x, y, z in starts:
        rows.append(f"{x:.6f} {y:.6f} {z:.6f} 255 255 255")
    for x, y, z in ends:
        rows.append(f"{x:.6f} {y:.6f} {z:.6f} 255 0 0")
    rows.extend(f"{i} {i + count}" for i in range(count))
    path = Path(path)
    path.write_text(_header(2 * count, True, edge_count=count) + "".join(f"{row}\n" for row in rows))
    logger.debug(f"Wrote {count} flow segments to {path}")
    return path


def read_ply_counts(path: PathLike) -> Dict[str, int]:
    """
    Element counts declared in an ASCII PLY header, checked against the body.

    Raises:
        DataFormatError: If the header is malformed or the body has a different number of rows.
    """
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply" or "end_header" not in lines:
        raise DataFormatError("Not an ASCII PLY file", path=str(path))
    end = lines.index("end_header")
    counts = {}
    for line in lines[1:end]:
        parts = line.split()
        if parts[0] == "element":
            counts[parts[1]] = int(parts[2])
    body = [line for line in lines[end + 1:] if line.strip()]
    if len(body) != sum(counts.values()):
        raise DataFormatError(
            f"Header declares {sum(counts.values())} rows, body has {len(body)}", path=str(path)
        )
    return counts
