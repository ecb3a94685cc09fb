"""
Binary lambda checkpoints.

Layout: magic ``b"CVI1"``, four little-endian int32 (m, k, transform code,
skew flag), then |lambda| little-endian float64 values in layout order.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from app.services.errors import CheckpointError, ParameterError
from app.services.family_gaussian import ParamLayout
from app.services.transforms import TransformKind

logger = logging.getLogger(__name__)

MAGIC = b"CVI1"
HEADER = struct.Struct("<4s4i")
KIND_CODES = {TransformKind.IDENTITY: 0, TransformKind.YEO_JOHNSON: 1, TransformKind.INVERSE_GH: 2}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}


@dataclass
class Checkpoint:
    layout: ParamLayout
    lam: np.ndarray


def encode_checkpoint(layout: ParamLayout, lam: np.ndarray) -> bytes:
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (layout.size,):
        raise ParameterError(f"lambda has shape {lam.shape}, layout needs ({layout.size},)")
    header = HEADER.pack(MAGIC, layout.m, layout.k, KIND_CODES[layout.kind], int(layout.skew))
    return header + lam.astype("<f8").tobytes()


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < HEADER.size:
        raise CheckpointError("checkpoint shorter than its header")
    magic, m, k, code, skew = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if code not in CODE_KINDS:
        raise CheckpointError(f"unknown transform code {code}")
    layout = ParamLayout(m, k, CODE_KINDS[code], bool(skew))
    body = blob[HEADER.size:]
    if len(body) != 8 * layout.size:
        raise CheckpointError(f"expected {layout.size} float64 values, found {len(body) / 8:g}")
    return Checkpoint(layout, np.frombuffer(body, dtype="<f8").astype(float))


def write_checkpoint(path: str | Path, layout: ParamLayout, lam: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(layout, lam))
    logger.debug(f"Wrote checkpoint {path}")
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def lambda_checksum(lam: np.ndarray) -> str:
    """SHA-256 of the little-endian float64 bytes of lambda."""
    return hashlib.sha256(np.asarray(lam, dtype="<f8").tobytes()).hexdigest()
