"""Binary encodings: CFV1 feature matrices and the per-sample graph cache.

CFV1 layout (all little-endian)::

    b"CFV1" | uint32 rows | uint32 dim | rows*dim float32, row-major

A graph cache file is a CFV1 block holding the node matrix X followed by::

    b"EDG1" | uint32 k | uint32 edge_count | edge_count * (uint32 src, uint32 dst)
"""
import logging
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .errors import FeatureFileError
from .models import FeatureMatrix, LandmarkGraph

logger = logging.getLogger(__name__)

CFV1_MAGIC = b"CFV1"
EDGE_MAGIC = b"EDG1"

_MATRIX_HEADER = struct.Struct("<4sII")
_EDGE_HEADER = struct.Struct("<4sII")

PathLike = Union[str, Path]


def encode_matrix(matrix: FeatureMatrix) -> bytes:
    """Encode a feature matrix as a CFV1 block."""
    header = _MATRIX_HEADER.pack(CFV1_MAGIC, matrix.rows, matrix.dim)
    return header + np.ascontiguousarray(matrix.values, dtype="<f4").tobytes()


def decode_matrix(blob: bytes, offset: int = 0) -> Tuple[FeatureMatrix, int]:
    """Decode one CFV1 block starting at `offset`.

    Returns the matrix and the offset just past its payload.
    """
    if len(blob) - offset < _MATRIX_HEADER.size:
        raise FeatureFileError("truncated header")
    magic, rows, dim = _MATRIX_HEADER.unpack_from(blob, offset)
    if magic != CFV1_MAGIC:
        raise FeatureFileError(f"bad magic {magic!r}, expected {CFV1_MAGIC!r}")

    start = offset + _MATRIX_HEADER.size
    expected = rows * dim * 4
    if len(blob) - start < expected:
        raise FeatureFileError(
            f"truncated payload: header declares {rows}x{dim} values, "
            f"found {(len(blob) - start) // 4}"
        )
    values = np.frombuffer(blob, dtype="<f4", count=rows * dim, offset=start)
    if not np.all(np.isfinite(values)):
        raise FeatureFileError("non-finite value in payload")
    return FeatureMatrix(rows=rows, dim=dim, values=values.copy()), start + expected


def write_feature_file(path: PathLike, matrix: FeatureMatrix) -> None:
    Path(path).write_bytes(encode_matrix(matrix))
    logger.debug(f"Wrote {matrix.rows}x{matrix.dim} feature matrix to {path}")


def load_feature_file(path: PathLike) -> FeatureMatrix:
    blob = Path(path).read_bytes()
    matrix, end = decode_matrix(blob)
    if end != len(blob):
        logger.warning(f"{path}: {len(blob) - end} trailing bytes ignored")
    return matrix


def encode_graph(graph: LandmarkGraph) -> bytes:
    node_block = encode_matrix(FeatureMatrix.from_array(graph.X))
    edges = np.ascontiguousarray(graph.edges, dtype="<u4").reshape(-1, 2)
    header = _EDGE_HEADER.pack(EDGE_MAGIC, graph.k, edges.shape[0])
    return node_block + header + edges.tobytes()


def decode_graph(blob: bytes) -> LandmarkGraph:
    nodes, offset = decode_matrix(blob)
    if len(blob) - offset < _EDGE_HEADER.size:
        raise FeatureFileError("truncated edge header")
    magic, k, count = _EDGE_HEADER.unpack_from(blob, offset)
    if magic != EDGE_MAGIC:
        raise FeatureFileError(f"bad edge magic {magic!r}")
    offset += _EDGE_HEADER.size
    if len(blob) - offset < count * 8:
        raise FeatureFileError(f"truncated edge list: expected {count} pairs")
    edges = np.frombuffer(blob, dtype="<u4", count=count * 2, offset=offset)
    return LandmarkGraph(
        X=nodes.values.astype(np.float64),
        edges=edges.reshape(count, 2).astype(np.int64),
        k=k,
    )


def write_graph(path: PathLike, graph: LandmarkGraph) -> None:
    Path(path).write_bytes(encode_graph(graph))


def load_graph(path: PathLike) -> LandmarkGraph:
    return decode_graph(Path(path).read_bytes())
