"""
Geo-tagged place database: exact global search, two-stage querying, Recall@N and the SVPR file format.

The index is immutable once built; concurrent readers are safe.
"""
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
from sklearn.metrics.pairwise import haversine_distances
from sklearn.neighbors import BallTree
from tqdm import tqdm

from vprtk.matching import rerank_candidates
from vprtk.utils import get_logger

logger = get_logger(__name__)

EARTH_RADIUS_M = 6_371_000.0
INDEX_MAGIC = b"SVPR"
INDEX_VERSION = 1
PATCH_SECTION_MAGIC = b"PTCH"
_HEADER = struct.Struct("<4sIIIIIQ")
_PATCH_HEADER = struct.Struct("<4sIII")


class IndexFormatError(ValueError):
    """Base class of binary format errors."""


class BadMagicError(IndexFormatError):
    pass


class VersionMismatchError(IndexFormatError):
    pass


class TruncatedFileError(IndexFormatError):
    pass


class ByteReader:
    """Sequential reader over an in-memory file that reports truncation."""

    def __init__(self, buffer: bytes, what: str):
        self.buffer = buffer
        self.offset = 0
        self.what = what

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.buffer):
            raise TruncatedFileError(
                f"{self.what} is truncated at byte {self.offset} (needed {size} more bytes)."
            )
        chunk = self.buffer[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt) -> tuple:
        fmt = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return fmt.unpack(self.take(fmt.size))

    @property
    def remaining(self) -> int:
        return len(self.buffer) - self.offset


@dataclass(frozen=True)
class GeoTag:
    lat: float
    lon: float
    heading: Optional[float] = None

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"Invalid coordinates ({self.lat}, {self.lon}).")


@dataclass(frozen=True)
class MatchThresholds:
    """
    ## Attributes:
    * `distance_m` (`float`): Maximum ground-truth distance. Defaults to `25.0`.
    * `heading_deg` (`float`, optional): Maximum heading difference, `None` to ignore headings.
    """

    distance_m: float = 25.0
    heading_deg: Optional[float] = None

    def __post_init__(self):
        if self.distance_m <= 0:
            raise ValueError(f"distance_m must be positive, got {self.distance_m}.")


@dataclass
class PlaceRecord:
    """
    ## Attributes:
    * `id` (`int`): Record id.
    * `global_feature` (`np.ndarray`): `(C,)` global descriptor.
    * `local_grid` (`np.ndarray`): `(h', w', C_l)` local grid.
    * `lat`, `lon` (`float`): Geotag in degrees.
    * `heading` (`float`, optional): Heading in `[0, 360)` degrees.
    * `patches` (`np.ndarray`, optional): `(h, w, D)` normalized backbone patch tokens.
    """

    id: int
    global_feature: np.ndarray
    local_grid: np.ndarray
    lat: float
    lon: float
    heading: Optional[float] = None
    patches: Optional[np.ndarray] = None

    @property
    def geotag(self) -> GeoTag:
        return GeoTag(self.lat, self.lon, self.heading)


def _record_dtype(global_dim: int, local_shape: tuple) -> np.dtype:
    # packed little-endian layout of one stored record
    return np.dtype(
        [
            ("id", "<u8"),
            ("lat", "<f8"),
            ("lon", "<f8"),
            ("heading", "<f4"),
            ("global", "<f4", (global_dim,)),
            ("local", "<f4", tuple(local_shape)),
        ]
    )


class PlaceIndex:
    """
    Column-oriented, read-only store of place records. Features are held as 32-bit values.

    ## Args:
    * `ids` (`np.ndarray`): `(n,)` record ids.
    * `global_features` (`np.ndarray`): `(n, C)` global descriptors.
    * `local_grids` (`np.ndarray`): `(n, h', w', C_l)` local grids.
    * `lat`, `lon` (`np.ndarray`): `(n,)` geotags in degrees.
    * `heading` (`np.ndarray`, optional): `(n,)` headings, NaN where absent.
    * `patches` (`np.ndarray`, optional): `(n, h, w, D)` backbone patch tokens.
    """

    def __init__(
        self,
        ids: np.ndarray,
        global_features: np.ndarray,
        local_grids: np.ndarray,
        lat: np.ndarray,
        lon: np.ndarray,
        heading: np.ndarray = None,
        patches: np.ndarray = None,
    ):
        n = len(ids)
        self.ids = np.asarray(ids, dtype=np.uint64).astype(np.int64)
        self.global_features = np.asarray(global_features, dtype=np.float32)
        if self.global_features.ndim != 2 or len(self.global_features) != n:
            raise ValueError(f"Expected ({n}, C) global features, got {self.global_features.shape}.")
        self.local_grids = np.asarray(local_grids, dtype=np.float32)
        if self.local_grids.ndim != 4 or len(self.local_grids) != n:
            raise ValueError(f"Expected ({n}, h, w, C) local grids, got {self.local_grids.shape}.")
        self.lat = np.asarray(lat, dtype=np.float64)
        self.lon = np.asarray(lon, dtype=np.float64)
        self.heading = (
            np.full(n, np.nan, dtype=np.float32)
            if heading is None
            else np.asarray(heading, dtype=np.float32)
        )
        self.patches = None if patches is None else np.asarray(patches, dtype=np.float32)
        if len(np.unique(self.ids)) != n:
            raise ValueError("Record ids must be unique.")
        if np.any(np.abs(self.lat) > 90) or np.any(np.abs(self.lon) > 180):
            raise ValueError("Record coordinates out of range.")
        self._positions = {int(i): p for p, i in enumerate(self.ids)}

    @classmethod
    def from_records(
        cls, records: Sequence[PlaceRecord], global_dim: int = None, local_shape: tuple = None
    ) -> "PlaceIndex":
        """Builds an index; `global_dim` and `local_shape` are needed only when `records` is empty."""
        if not records:
            if global_dim is None or local_shape is None:
                raise ValueError("An empty index needs explicit global_dim and local_shape.")
            return cls(
                ids=np.zeros(0, dtype=np.int64),
                global_features=np.zeros((0, global_dim), dtype=np.float32),
                local_grids=np.zeros((0, *local_shape), dtype=np.float32),
                lat=np.zeros(0),
                lon=np.zeros(0),
            )
        has_patches = all(r.patches is not None for r in records)
        return cls(
            ids=np.array([r.id for r in records]),
            global_features=np.stack([r.global_feature for r in records]),
            local_grids=np.stack([r.local_grid for r in records]),
            lat=np.array([r.lat for r in records]),
            lon=np.array([r.lon for r in records]),
            heading=np.array(
                [np.nan if r.heading is None else r.heading for r in records]
            ),
            patches=np.stack([r.patches for r in records]) if has_patches else None,
        )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def global_dim(self) -> int:
        return self.global_features.shape[1]

    @property
    def local_shape(self) -> tuple:
        return tuple(self.local_grids.shape[1:])

    def position(self, record_id: int) -> int:
        return self._positions[int(record_id)]

    def record(self, position: int) -> PlaceRecord:
        heading = float(self.heading[position])
        return PlaceRecord(
            id=int(self.ids[position]),
            global_feature=self.global_features[position],
            local_grid=self.local_grids[position],
            lat=float(self.lat[position]),
            lon=float(self.lon[position]),
            heading=None if math.isnan(heading) else heading,
            patches=None if self.patches is None else self.patches[position],
        )

    def geotags(self) -> Dict[int, GeoTag]:
        return {int(self.ids[p]): self.record(p).geotag for p in range(len(self))}


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in metres on a sphere of radius 6,371,000 m."""
    a = np.radians([[lat1, lon1]])
    b = np.radians([[lat2, lon2]])
    return float(haversine_distances(a, b)[0, 0] * EARTH_RADIUS_M)


def pairwise_haversine_m(latlon_a: np.ndarray, latlon_b: np.ndarray) -> np.ndarray:
    """`(n, 2)` and `(m, 2)` degree coordinates to an `(n, m)` distance matrix in metres."""
    return haversine_distances(np.radians(latlon_a), np.radians(latlon_b)) * EARTH_RADIUS_M


def heading_delta(h1: float, h2: float) -> float:
    """Smallest angle between two headings, in `[0, 180]` degrees."""
    d = abs(h1 - h2) % 360.0
    return min(d, 360.0 - d)


def geo_neighbors(
    query_latlon: np.ndarray, database_latlon: np.ndarray, radius_m: float
) -> List[np.ndarray]:
    """
    Database positions within `radius_m` of every query, sorted ascending.
    """
    if len(database_latlon) == 0:
        return [np.zeros(0, dtype=np.int64) for _ in range(len(query_latlon))]
    tree = BallTree(np.radians(database_latlon), metric="haversine")
    neighbors = tree.query_radius(
        np.radians(np.atleast_2d(query_latlon)), r=radius_m / EARTH_RADIUS_M
    )
    return [np.sort(n).astype(np.int64) for n in neighbors]


@dataclass
class SearchResult:
    """
    ## Attributes:
    * `positions` (`np.ndarray`): Index positions, nearest first.
    * `ids` (`np.ndarray`): Record ids at those positions.
    * `distances` (`np.ndarray`): Euclidean global-feature distances.
    * `truncated` (`bool`): Whether fewer than `k` records were available.
    """

    positions: np.ndarray
    ids: np.ndarray
    distances: np.ndarray
    truncated: bool = False


def global_search(index: PlaceIndex, query_global: np.ndarray, k: int) -> SearchResult:
    """
    Exact `k` nearest records by Euclidean distance between global features. Ties go to the lowest id.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}.")
    if len(index) == 0:
        raise ValueError("Cannot search an empty index.")
    query = np.asarray(query_global, dtype=np.float64).reshape(-1)
    if query.shape[0] != index.global_dim:
        raise ValueError(
            f"Query global dimension {query.shape[0]} does not match the index ({index.global_dim})."
        )
    distances = np.linalg.norm(index.global_features.astype(np.float64) - query, axis=1)
    order = np.lexsort((index.ids, distances))
    truncated = k > len(index)
    if truncated:
        logger.warning(f"k={k} exceeds the index size {len(index)}; returning every record.")
    order = order[:k]
    return SearchResult(
        positions=order, ids=index.ids[order], distances=distances[order], truncated=truncated
    )


@dataclass
class QueryFeatures:
    """
    ## Attributes:
    * `global_feature` (`np.ndarray`): `(C,)` global descriptor.
    * `local_grid` (`np.ndarray`): `(h', w', C_l)` local grid.
    * `patches` (`np.ndarray`, optional): `(h, w, D)` normalized backbone patch tokens.
    """

    global_feature: np.ndarray
    local_grid: np.ndarray
    patches: Optional[np.ndarray] = None


@dataclass
class QueryResult:
    """
    ## Attributes:
    * `candidate_ids` (`np.ndarray`): Top-k ids in global order.
    * `global_distances` (`np.ndarray`): Their global-feature distances.
    * `scores` (`np.ndarray`): Match counts in global order, `None` without re-ranking.
    * `final_ids` (`np.ndarray`): Candidate ids in final order.
    * `truncated` (`bool`): Whether the index held fewer than `k` records.
    """

    candidate_ids: np.ndarray
    global_distances: np.ndarray
    scores: Optional[np.ndarray]
    final_ids: np.ndarray
    truncated: bool = False


def two_stage_query(
    index: PlaceIndex,
    query: QueryFeatures,
    k: int = 100,
    rerank_mode: str = "dense_local",
    workers: int = 1,
) -> QueryResult:
    """
    Global search for `k` candidates, then re-ranking by mutual-match count.

    ## Args:
    * `index` (`PlaceIndex`): The database.
    * `query` (`QueryFeatures`): The query's features.
    * `k` (`int`, optional): Candidates kept from global search. Defaults to `100`.
    * `rerank_mode` (`str`, optional): `dense_local` matches the local grids, `backbone_patches` matches
      backbone patch tokens, `none` keeps the global order. Defaults to `"dense_local"`.
    * `workers` (`int`, optional): Threads scoring candidates. Defaults to `1`.
    """
    found = global_search(index, query.global_feature, k)
    if rerank_mode == "none" or len(found.positions) <= 1:
        return QueryResult(
            candidate_ids=found.ids,
            global_distances=found.distances,
            scores=None,
            final_ids=found.ids,
            truncated=found.truncated,
        )
    if rerank_mode == "dense_local":
        query_grid, database = query.local_grid, index.local_grids
    elif rerank_mode == "backbone_patches":
        if query.patches is None or index.patches is None:
            raise ValueError("backbone_patches re-ranking needs patch tokens in the query and index.")
        query_grid, database = query.patches, index.patches
    else:
        raise ValueError(
            f"Invalid rerank mode '{rerank_mode}'. Valid modes are 'dense_local', 'backbone_patches' and 'none'."
        )
    query_tensor = torch.from_numpy(np.asarray(query_grid, dtype=np.float32))
    candidates = [torch.tensor(database[p]) for p in found.positions]
    reranked = rerank_candidates(query_tensor, candidates, found.distances, workers=workers)
    return QueryResult(
        candidate_ids=found.ids,
        global_distances=found.distances,
        scores=reranked.scores,
        final_ids=found.ids[reranked.order],
        truncated=found.truncated,
    )


def batch_query(
    index: PlaceIndex,
    queries: Sequence[QueryFeatures],
    k: int = 100,
    rerank_mode: str = "dense_local",
    workers: int = 1,
    progress: bool = False,
) -> List[QueryResult]:
    """Runs `two_stage_query` for every query; queries fan out over `workers` threads."""

    def run(query: QueryFeatures) -> QueryResult:
        return two_stage_query(index, query, k=k, rerank_mode=rerank_mode)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(
                tqdm(pool.map(run, queries), total=len(queries), disable=not progress)
            )
    return [run(q) for q in tqdm(queries, desc="Querying", disable=not progress)]


def recall_at_n(
    rankings: Sequence[Sequence[int]],
    query_tags: Sequence[GeoTag],
    database_tags: Mapping[int, GeoTag],
    thresholds: MatchThresholds = MatchThresholds(),
    n_values: Sequence[int] = (1, 5, 10),
) -> Dict[int, float]:
    """
    Percentage of queries with a correct record among their top `N` results.

    A record is correct within `thresholds.distance_m`, and within `thresholds.heading_deg` when that is
    set and both query and record carry a heading.

    ## Args:
    * `rankings` (`Sequence`): Final ranked record ids, one sequence per query.
    * `query_tags` (`Sequence[GeoTag]`): Ground-truth geotag of every query.
    * `database_tags` (`Mapping[int, GeoTag]`): Geotag of every record id.
    * `thresholds` (`MatchThresholds`, optional): Ground-truth thresholds.
    * `n_values` (`Sequence[int]`, optional): The `N` values. Defaults to `(1, 5, 10)`.

    ## Returns:
    * `dict`: `N` to recall percentage.
    """
    if len(rankings) != len(query_tags):
        raise ValueError(f"{len(rankings)} rankings but {len(query_tags)} query geotags.")
    if not rankings:
        raise ValueError("Recall needs at least one query.")
    max_n = max(n_values)
    first_hits = np.full(len(rankings), np.iinfo(np.int64).max, dtype=np.int64)
    for q, (ranked, tag) in enumerate(zip(rankings, query_tags)):
        ranked = list(ranked)[:max_n]
        if not ranked:
            raise ValueError(f"Query {q} has no results.")
        candidate_tags = [database_tags[int(i)] for i in ranked]
        distances = pairwise_haversine_m(
            [[tag.lat, tag.lon]], [[t.lat, t.lon] for t in candidate_tags]
        )[0]
        correct = distances <= thresholds.distance_m
        if thresholds.heading_deg is not None and tag.heading is not None:
            correct &= np.array(
                [
                    t.heading is None
                    or heading_delta(tag.heading, t.heading) <= thresholds.heading_deg
                    for t in candidate_tags
                ]
            )
        hits = np.flatnonzero(correct)
        if hits.size:
            first_hits[q] = hits[0]
    return {int(n): float(100.0 * np.mean(first_hits < n)) for n in n_values}


def save_index(index: PlaceIndex, path: os.PathLike):
    """
    Writes the SVPR format: header `magic, u32 version, u32 global_dim, u32 local_h, u32 local_w,
    u32 local_dim, u64 count`, then per record `u64 id, f64 lat, f64 lon, f32 heading (NaN = absent)`
    followed by the global and local values as little-endian f32. Patch tokens, when present, follow in
    a `PTCH` section.
    """
    h, w, c = index.local_shape
    records = np.zeros(len(index), dtype=_record_dtype(index.global_dim, index.local_shape))
    records["id"] = index.ids.astype(np.uint64)
    records["lat"] = index.lat
    records["lon"] = index.lon
    records["heading"] = index.heading
    records["global"] = index.global_features
    records["local"] = index.local_grids
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.global_dim, h, w, c, len(index)))
        f.write(records.tobytes())
        if index.patches is not None:
            f.write(_PATCH_HEADER.pack(PATCH_SECTION_MAGIC, *index.patches.shape[1:]))
            f.write(index.patches.astype("<f4").tobytes())
    logger.info(f"Index with {len(index)} records saved to '{path}'.")


def load_index(path: os.PathLike) -> PlaceIndex:
    """
    Reads an SVPR file.

    ## Raises:
    * `BadMagicError`, `VersionMismatchError`, `TruncatedFileError`: On a malformed file.
    """
    with open(path, "rb") as f:
        reader = ByteReader(f.read(), f"Index '{path}'")
    magic = reader.take(4)
    if magic != INDEX_MAGIC:
        raise BadMagicError(f"'{path}' is not an SVPR index (magic {magic!r}).")
    (version,) = reader.unpack("<I")
    if version != INDEX_VERSION:
        raise VersionMismatchError(
            f"Index version {version} is not supported (expected {INDEX_VERSION})."
        )
    global_dim, h, w, c, count = reader.unpack("<IIIIQ")
    dtype = _record_dtype(global_dim, (h, w, c))
    records = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype)

    patches = None
    if reader.remaining:
        section, ph, pw, pc = reader.unpack(_PATCH_HEADER)
        if section != PATCH_SECTION_MAGIC:
            raise IndexFormatError(f"Unknown trailing section {section!r} in '{path}'.")
        values = reader.take(count * ph * pw * pc * 4)
        patches = np.frombuffer(values, dtype="<f4").reshape(count, ph, pw, pc)
        if reader.remaining:
            raise IndexFormatError(f"{reader.remaining} unexpected trailing bytes in '{path}'.")

    index = PlaceIndex(
        ids=records["id"],
        global_features=records["global"],
        local_grids=records["local"],
        lat=records["lat"],
        lon=records["lon"],
        heading=records["heading"],
        patches=patches,
    )
    logger.info(f"Index with {len(index)} records loaded from '{path}'.")
    return index
