"""ASCII PLY files carrying labeled point clouds.

Vertices have float properties x, y, z and a uchar ``label`` (0 non-road,
1 road). Only this layout is produced; the reader accepts any ASCII PLY
whose vertex element starts with x, y, z and contains a label property.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import LabeledPointCloud


def save_ply(cloud: LabeledPointCloud, path) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar label",
        "end_header",
    ]
    body = [
        f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {int(l)}"
        for p, l in zip(cloud.points, cloud.labels)
    ]
    Path(path).write_text("\n".join(lines + body) + "\n")


def load_ply(path) -> LabeledPointCloud:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"point cloud file not found: {path}")
    text = path.read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file (missing 'ply' magic line)")
    n_vertex = None
    props: list[str] = []
    header_end = None
    for i, line in enumerate(text[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise ValueError(f"{path}: only ASCII PLY is supported, got format '{tok[1]}'")
        elif tok[0] == "element":
            if tok[1] == "vertex":
                n_vertex = int(tok[2])
            elif n_vertex is not None:
                raise ValueError(f"{path}: unsupported extra element '{tok[1]}' after vertices")
        elif tok[0] == "property" and n_vertex is not None:
            props.append(tok[2])
        elif tok[0] == "end_header":
            header_end = i
            break
    if n_vertex is None or header_end is None:
        raise ValueError(f"{path}: malformed PLY header (no vertex element / end_header)")
    if props[:3] != ["x", "y", "z"] or "label" not in props:
        raise ValueError(f"{path}: vertex properties must start with x, y, z and include label, got {props}")
    label_col = props.index("label")
    rows = [line.split() for line in text[header_end + 1:] if line.strip()]
    if len(rows) != n_vertex:
        raise ValueError(f"{path}: header declares {n_vertex} vertices, found {len(rows)}")
    if n_vertex == 0:
        return LabeledPointCloud(np.zeros((0, 3)), np.zeros(0, dtype=np.uint8))
    try:
        data = np.array(rows, dtype=np.float64)
    except ValueError as e:
        raise ValueError(f"{path}: non-numeric vertex data: {e}") from e
    if data.shape[1] != len(props):
        raise ValueError(f"{path}: vertex rows have {data.shape[1]} columns, expected {len(props)}")
    return LabeledPointCloud(data[:, :3], data[:, label_col].astype(np.uint8))
