"""Images to probe-ready feature vectors.

Pipeline per image: forward to a cut-point, adaptive max-pool the (C,H,W)
activation down to (C,s,s) so the flattened vector fits the value budget,
then flatten. Vectors from one-dimensional cut-points (fully connected
layers) are used as-is. A binary on-disk cache (.cpfc) avoids recomputing
forward passes across probe trainings.
"""

from __future__ import annotations

import math
import struct
import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CutprobeError, DataError, FormatError, GraphError, ShapeMismatchError
from .graph import ModelGraph, forward
from .weights import WeightStore

DEFAULT_BUDGET = 8000

CACHE_MAGIC = b"CPFC"
CACHE_VERSION = 1


@dataclass
class FeatureRecord:
    """One image's feature vector at one cut-point."""

    image_id: str
    subject_id: str
    label: int
    cut_point: str
    vector: np.ndarray


def compute_pool_geometry(feature_shape, budget: int = DEFAULT_BUDGET) -> int:
    """Output spatial size s for pooling (C,H,W) down to at most ``budget`` values.

    s is the largest value with C*s*s <= budget, clamped to [1, min(H, W)].
    When C alone exceeds the budget no spatial size can satisfy it; s=1 is
    returned with a warning.
    """
    c, h, w = feature_shape
    if min(c, h, w) < 1:
        raise ShapeMismatchError(f"invalid feature shape {tuple(feature_shape)}")
    if budget < 1:
        raise ShapeMismatchError(f"budget must be >= 1, got {budget}")
    if c > budget:
        warnings.warn(
            f"channel count {c} alone exceeds the feature budget {budget}; "
            f"pooling to 1x1 still leaves {c} values",
            stacklevel=2,
        )
        return 1
    s = max(1, math.isqrt(budget // c))
    return min(s, h, w)


def adaptive_maxpool(x: np.ndarray, s: int) -> np.ndarray:
    """Max-pool (C,H,W) to (C,s,s) over a near-uniform bin grid.

    Bin (i,j) covers rows [floor(i*H/s), ceil((i+1)*H/s)) and the analogous
    columns, so bins tile the input completely and may overlap by one row or
    column when H or W is not divisible by s.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ShapeMismatchError(f"adaptive_maxpool expects (C,H,W), got shape {x.shape}")
    c, h, w = x.shape
    if not 1 <= s <= min(h, w):
        raise ShapeMismatchError(
            f"pool size {s} out of range [1, {min(h, w)}] for input shape {x.shape}"
        )
    out = np.empty((c, s, s), dtype=np.float32)
    row_edges = [(i * h // s, -((i + 1) * h // -s)) for i in range(s)]
    col_edges = [(j * w // s, -((j + 1) * w // -s)) for j in range(s)]
    for i, (r0, r1) in enumerate(row_edges):
        for j, (c0, c1) in enumerate(col_edges):
            out[:, i, j] = x[:, r0:r1, c0:c1].max(axis=(1, 2))
    return out


def feature_length(graph: ModelGraph, cut_point: str, budget: int = DEFAULT_BUDGET) -> int:
    """Extracted vector length at a cut-point, from propagated shapes alone."""
    shape = cut_point_shape(graph, cut_point)
    if len(shape) == 1:
        return shape[0]
    c, _, _ = shape
    s = compute_pool_geometry(shape, budget)
    return c * s * s


def cut_point_shape(graph: ModelGraph, cut_point: str):
    if cut_point not in graph.cut_points:
        raise GraphError(
            f"unknown cut-point '{cut_point}' for graph '{graph.name}'; "
            f"valid labels: {sorted(graph.cut_points)}"
        )
    return graph.shapes[graph.cut_points[cut_point]]


def _pool_and_flatten(activation: np.ndarray, budget: int) -> np.ndarray:
    if activation.ndim == 1:
        return activation
    if activation.ndim == 3:
        s = compute_pool_geometry(activation.shape, budget)
        return adaptive_maxpool(activation, s).reshape(-1)
    raise ShapeMismatchError(
        f"cut-point activation must be rank 1 or 3, got shape {activation.shape}"
    )


def extract_features_multi(
    graph: ModelGraph,
    store: WeightStore,
    cut_points: list[str],
    samples,
    budget: int = DEFAULT_BUDGET,
) -> dict[str, list[FeatureRecord]]:
    """Extract features at several cut-points with one forward pass per image.

    ``samples`` is an iterable of objects with ``image_id``, ``subject_id``,
    ``label``, and ``pixels`` attributes (see ``cutprobe.data.ImageSample``).
    Results preserve sample order per cut-point.
    """
    node_ids = {}
    for label in cut_points:
        cut_point_shape(graph, label)  # validates the label early
        node_ids[label] = graph.cut_points[label]
    out: dict[str, list[FeatureRecord]] = {label: [] for label in cut_points}
    for sample in samples:
        try:
            acts = forward(graph, store, sample.pixels, outputs=set(node_ids.values()))
        except CutprobeError as exc:
            raise type(exc)(f"image '{sample.image_id}': {exc}") from exc
        for label in cut_points:
            vec = _pool_and_flatten(acts[node_ids[label]], budget)
            if not np.isfinite(vec).all():
                raise DataError(
                    f"image '{sample.image_id}': non-finite feature values "
                    f"at cut-point '{label}'"
                )
            out[label].append(
                FeatureRecord(
                    image_id=sample.image_id,
                    subject_id=sample.subject_id,
                    label=int(sample.label),
                    cut_point=label,
                    vector=vec,
                )
            )
    return out


def extract_features(
    graph: ModelGraph,
    store: WeightStore,
    cut_point: str,
    samples,
    budget: int = DEFAULT_BUDGET,
) -> list[FeatureRecord]:
    """Single cut-point convenience wrapper around extract_features_multi."""
    return extract_features_multi(graph, store, [cut_point], samples, budget)[cut_point]


def _pack_str(s: str) -> bytes:
    encoded = s.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise FormatError(f"string too long for cache field ({len(encoded)} bytes)")
    return struct.pack("<H", len(encoded)) + encoded


def serialize_cache(model_name: str, cut_point: str, records: list[FeatureRecord]) -> bytes:
    """Encode a feature set. Uniform vector lengths use the fixed-length
    layout; mixed lengths fall back to per-record length prefixes
    (header length field 0)."""
    lengths = {r.vector.shape[0] for r in records}
    fixed = lengths.pop() if len(lengths) == 1 else 0
    parts = [
        CACHE_MAGIC,
        struct.pack("<I", CACHE_VERSION),
        _pack_str(model_name),
        _pack_str(cut_point),
        struct.pack("<II", fixed, len(records)),
    ]
    for r in records:
        vec = np.ascontiguousarray(r.vector, dtype="<f4")
        if vec.ndim != 1:
            raise FormatError(f"record '{r.image_id}': vector must be rank 1")
        if not np.isfinite(vec).all():
            raise FormatError(f"record '{r.image_id}': non-finite feature values")
        if not 0 <= r.label <= 0xFFFF:
            raise FormatError(f"record '{r.image_id}': label {r.label} out of u16 range")
        parts.append(_pack_str(r.image_id))
        parts.append(_pack_str(r.subject_id))
        parts.append(struct.pack("<H", r.label))
        if fixed == 0:
            parts.append(struct.pack("<I", vec.shape[0]))
        parts.append(vec.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def cache_write(path, model_name: str, cut_point: str, records: list[FeatureRecord]) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_cache(model_name, cut_point, records))


@dataclass
class FeatureCacheFile:
    model_name: str
    cut_point: str
    vector_length: int  # 0 marks the variable-length layout
    records: list[FeatureRecord]


def parse_cache(data: bytes) -> FeatureCacheFile:
    if len(data) < 4 or data[:4] != CACHE_MAGIC:
        raise FormatError(
            f"bad feature cache magic {data[:4]!r}, expected {CACHE_MAGIC!r}"
        )
    if len(data) < 12:
        raise FormatError("feature cache truncated before header")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    actual_crc = zlib.crc32(data[:-4])
    if stored_crc != actual_crc:
        raise FormatError(
            f"feature cache checksum mismatch: stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x}"
        )
    from .weights import _Reader

    rd = _Reader(data[:-4], "feature cache")
    rd.take(4)
    (version,) = rd.unpack("<I")
    if version != CACHE_VERSION:
        raise FormatError(f"unsupported feature cache version {version}")

    def take_str() -> str:
        (n,) = rd.unpack("<H")
        return rd.take(n).decode("utf-8")

    model_name = take_str()
    cut_point = take_str()
    fixed, count = rd.unpack("<II")
    records = []
    for _ in range(count):
        image_id = take_str()
        subject_id = take_str()
        (label,) = rd.unpack("<H")
        n = fixed if fixed else rd.unpack("<I")[0]
        raw = rd.take(4 * n)
        vec = np.frombuffer(raw, dtype="<f4", count=n)
        if not np.isfinite(vec).all():
            raise FormatError(f"record '{image_id}': non-finite feature values in cache")
        records.append(FeatureRecord(image_id, subject_id, label, cut_point, vec))
    if rd.pos != len(rd.data):
        raise FormatError(
            f"feature cache has {len(rd.data) - rd.pos} trailing bytes "
            f"after the declared {count} records"
        )
    return FeatureCacheFile(model_name, cut_point, fixed, records)


def cache_read(path) -> FeatureCacheFile:
    with open(path, "rb") as fh:
        return parse_cache(fh.read())
