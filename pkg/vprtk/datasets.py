"""
Dataset manifests, PPM image I/O, the synthetic place-world and feature extraction.
"""
# imports
import json
import math
import os
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image
from tqdm import tqdm

# torch
import torch
from torch.utils.data import DataLoader, Dataset

# vprtk
from vprtk.config import SynthWorldConfiguration
from vprtk.index import EARTH_RADIUS_M, GeoTag, PlaceIndex, QueryFeatures
from vprtk.utils import get_logger

logger = get_logger(__name__)

SPLITS = ("database", "query", "train", "val")
MANIFEST_NAME = "manifest.jsonl"
_REQUIRED_FIELDS = ("id", "image_path", "lat", "lon", "split")


class ManifestError(ValueError):
    """
    A malformed manifest line.

    ## Attributes:
    * `line_number` (`int`): 1-based line number.
    * `field` (`str`, optional): The offending field.
    """

    def __init__(self, message: str, line_number: int, field: str = None):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number
        self.field = field


@dataclass
class ManifestEntry:
    """
    ## Attributes:
    * `id` (`int`): Unique image id.
    * `image_path` (`str`): Image path, relative to the manifest's directory unless absolute.
    * `lat`, `lon` (`float`): Geotag in degrees.
    * `split` (`str`): One of `database`, `query`, `train`, `val`.
    * `heading_deg` (`float`, optional): Camera heading in degrees.
    * `place_id` (`int`, optional): The place the image shows.
    * `aliased` (`bool`): Whether the place belongs to an aliasing pair.
    """

    id: int
    image_path: str
    lat: float
    lon: float
    split: str
    heading_deg: Optional[float] = None
    place_id: Optional[int] = None
    aliased: bool = False

    @property
    def geotag(self) -> GeoTag:
        return GeoTag(self.lat, self.lon, self.heading_deg)


def _parse_entry(record: dict, line_number: int) -> ManifestEntry:
    if not isinstance(record, dict):
        raise ManifestError("expected a JSON object", line_number)
    for name in _REQUIRED_FIELDS:
        if name not in record:
            raise ManifestError(f"missing field '{name}'", line_number, name)

    def number(name: str, low: float, high: float, closed: bool = True) -> float:
        value = record[name]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ManifestError(f"field '{name}' must be a number", line_number, name)
        if not (low <= value <= high if closed else low <= value < high):
            interval = f"[{low}, {high}" + ("]" if closed else ")")
            raise ManifestError(f"field '{name}'={value} outside {interval}", line_number, name)
        return float(value)

    if isinstance(record["id"], bool) or not isinstance(record["id"], int):
        raise ManifestError("field 'id' must be an integer", line_number, "id")
    if record["split"] not in SPLITS:
        raise ManifestError(
            f"field 'split'={record['split']!r} is not one of {SPLITS}", line_number, "split"
        )
    heading = record.get("heading_deg")
    return ManifestEntry(
        id=record["id"],
        image_path=str(record["image_path"]),
        lat=number("lat", -90.0, 90.0),
        lon=number("lon", -180.0, 180.0),
        split=record["split"],
        heading_deg=None if heading is None else number("heading_deg", 0.0, 360.0, closed=False),
        place_id=record.get("place_id"),
        aliased=bool(record.get("aliased", False)),
    )


def load_manifest(path: os.PathLike) -> List[ManifestEntry]:
    """
    Parses a JSON-Lines manifest. Blank lines are skipped and unknown fields ignored.

    ## Raises:
    * `ManifestError`: On a malformed line or a duplicate id.
    """
    entries, seen = [], set()
    with open(path, "r") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"invalid JSON ({e.msg})", line_number) from e
            entry = _parse_entry(record, line_number)
            if entry.id in seen:
                raise ManifestError(f"duplicate id {entry.id}", line_number, "id")
            seen.add(entry.id)
            entries.append(entry)
    logger.debug(f"Loaded {len(entries)} manifest entries from '{path}'.")
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path: os.PathLike):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        for entry in entries:
            f.write(json.dumps(asdict(entry)) + "\n")


def resolve_image_path(manifest_path: os.PathLike, entry: ManifestEntry) -> str:
    if os.path.isabs(entry.image_path):
        return entry.image_path
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), entry.image_path)


def read_image(path: os.PathLike) -> np.ndarray:
    """Reads an RGB image as an `(H, W, 3)` float array in `[0, 1]`."""
    with Image.open(path) as image:
        return np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0


def write_image(path: os.PathLike, image: np.ndarray):
    """Writes an `(H, W, 3)` array in `[0, 1]` as a binary PPM."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path, format="PPM")


class ManifestImageDataset(Dataset):
    """
    Images of manifest entries as channel-last tensors.

    ## Args:
    * `entries` (`Sequence[ManifestEntry]`): Entries to load, in order.
    * `manifest_path` (`os.PathLike`): Manifest location, for relative image paths.
    * `dtype` (`torch.dtype`, optional): Tensor precision. Defaults to `torch.float64`.
    """

    def __init__(
        self,
        entries: Sequence[ManifestEntry],
        manifest_path: os.PathLike,
        dtype: torch.dtype = torch.float64,
    ):
        self.entries = list(entries)
        self.manifest_path = manifest_path
        self.dtype = dtype

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> torch.Tensor:
        image = read_image(resolve_image_path(self.manifest_path, self.entries[i]))
        return torch.from_numpy(image).to(self.dtype)


def load_images(
    entries: Sequence[ManifestEntry],
    manifest_path: os.PathLike,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """Loads every image of `entries` into one `(n, H, W, 3)` tensor."""
    dataset = ManifestImageDataset(entries, manifest_path, dtype=dtype)
    if not len(dataset):
        raise ValueError("No images to load.")
    return torch.stack([dataset[i] for i in range(len(dataset))])


def entries_by_split(entries: Sequence[ManifestEntry]) -> Dict[str, List[ManifestEntry]]:
    split_entries = {split: [] for split in SPLITS}
    for entry in entries:
        split_entries[entry.split].append(entry)
    return split_entries


# synthetic place-world


@dataclass
class PlaceLayout:
    """
    ## Attributes:
    * `background` (`np.ndarray`): `(3,)` background colour.
    * `colors` (`np.ndarray`): `(g * g, 3)` landmark colours, one per grid cell.
    * `insets` (`np.ndarray`): `(g * g, 4)` top, left, bottom and right insets of each landmark in pixels.
    """

    background: np.ndarray
    colors: np.ndarray
    insets: np.ndarray

    def permuted(self, permutation: np.ndarray) -> "PlaceLayout":
        """Same landmarks in other cells; the per-channel means are unchanged."""
        return PlaceLayout(self.background, self.colors[permutation], self.insets[permutation])


def random_layout(rng: np.random.Generator, image_size: int, grid: int) -> PlaceLayout:
    cell = image_size // grid
    return PlaceLayout(
        background=rng.uniform(0.0, 1.0, size=3),
        colors=rng.uniform(0.0, 1.0, size=(grid * grid, 3)),
        insets=rng.integers(0, cell // 4 + 1, size=(grid * grid, 4)),
    )


def render_place(layout: PlaceLayout, image_size: int, grid: int) -> np.ndarray:
    """Draws every landmark rectangle in its cell over the background."""
    cell = image_size // grid
    image = np.broadcast_to(layout.background, (image_size, image_size, 3)).copy()
    for idx, (color, (top, left, bottom, right)) in enumerate(zip(layout.colors, layout.insets)):
        row, col = divmod(idx, grid)
        image[
            row * cell + top : (row + 1) * cell - bottom,
            col * cell + left : (col + 1) * cell - right,
        ] = color
    return image


def shift_image(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translates by `(dy, dx)` pixels, repeating the edge pixels."""
    pad = max(abs(dy), abs(dx))
    if pad == 0:
        return image.copy()
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    h, w = image.shape[:2]
    return padded[pad - dy : pad - dy + h, pad - dx : pad - dx + w]


def apply_variant(
    image: np.ndarray, rng: np.random.Generator, world_cfg: SynthWorldConfiguration
) -> np.ndarray:
    """A new viewing condition: translation, global brightness shift and pixel noise."""
    dy, dx = rng.integers(-world_cfg.max_shift_px, world_cfg.max_shift_px + 1, size=2)
    out = shift_image(image, int(dy), int(dx))
    out = out + rng.uniform(-world_cfg.brightness, world_cfg.brightness)
    out = out + rng.normal(0.0, world_cfg.noise, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def normalize_heading(heading: float) -> float:
    """Rounds to microdegrees and wraps into `[0, 360)`; rounding can land exactly on 360."""
    return round(heading, 6) % 360.0


def offset_latlon(lat: float, lon: float, north_m: float, east_m: float) -> tuple:
    metres_per_degree = EARTH_RADIUS_M * math.pi / 180.0
    return (
        lat + north_m / metres_per_degree,
        lon + east_m / (metres_per_degree * math.cos(math.radians(lat))),
    )


def place_geotag(place: int, world_cfg: SynthWorldConfiguration) -> tuple:
    """Places sit on a square grid `place_spacing_m` apart, row-major from the origin."""
    side = math.ceil(math.sqrt(world_cfg.num_places))
    row, col = divmod(place, side)
    return offset_latlon(
        world_cfg.origin_lat,
        world_cfg.origin_lon,
        row * world_cfg.place_spacing_m,
        col * world_cfg.place_spacing_m,
    )


def aliasing_partners(world_cfg: SynthWorldConfiguration) -> Dict[int, int]:
    """Maps each place of an aliasing pair to its partner."""
    rng = np.random.default_rng([world_cfg.seed, 2])
    chosen = rng.permutation(world_cfg.num_places)[: 2 * world_cfg.aliasing_pairs]
    partners = {}
    for a, b in zip(chosen[0::2], chosen[1::2]):
        partners[int(a)], partners[int(b)] = int(b), int(a)
    return partners


def _derangement(rng: np.random.Generator, n: int) -> np.ndarray:
    while True:
        permutation = rng.permutation(n)
        if n < 2 or np.all(permutation != np.arange(n)):
            return permutation


def place_layouts(world_cfg: SynthWorldConfiguration) -> List[PlaceLayout]:
    """
    One layout per place. The second place of an aliasing pair reuses its partner's landmarks in
    permuted cells.
    """
    partners = aliasing_partners(world_cfg)
    layouts: List[Optional[PlaceLayout]] = [None] * world_cfg.num_places
    for place in range(world_cfg.num_places):
        rng = np.random.default_rng([world_cfg.seed, 0, place])
        partner = partners.get(place)
        if partner is not None and partner < place:
            cells = world_cfg.landmark_grid**2
            layouts[place] = layouts[partner].permuted(_derangement(rng, cells))
        else:
            layouts[place] = random_layout(rng, world_cfg.image_size, world_cfg.landmark_grid)
    return layouts


def variant_split(variant: int, world_cfg: SynthWorldConfiguration) -> str:
    bounds = np.cumsum(
        [world_cfg.database_variants, world_cfg.query_variants, world_cfg.train_variants]
    )
    for split, bound in zip(SPLITS, bounds):
        if variant < bound:
            return split
    return "val"


def generate_synth_world(
    world_cfg: SynthWorldConfiguration, output_dir: os.PathLike, progress: bool = False
) -> List[ManifestEntry]:
    """
    Renders every variant of every place under `output_dir/images/` and writes `output_dir/manifest.jsonl`.

    Variant 0 of each place is undistorted and belongs to the database. All variants of a place share
    its geotag; headings jitter around a per-place heading.

    ## Args:
    * `world_cfg` (`SynthWorldConfiguration`): The world configuration.
    * `output_dir` (`os.PathLike`): Destination directory.
    * `progress` (`bool`, optional): Whether to show a progress bar. Defaults to `False`.

    ## Returns:
    * `list`: The manifest entries, in id order.
    """
    if world_cfg.place_spacing_m <= 50.0:
        raise ValueError("place_spacing_m must exceed twice the 25 m ground-truth threshold.")
    if world_cfg.aliasing_pairs > world_cfg.num_places // 2:
        raise ValueError("aliasing_pairs must not exceed num_places / 2.")
    if world_cfg.image_size % world_cfg.landmark_grid != 0:
        raise ValueError("image_size must be divisible by landmark_grid.")

    logger.info(f"Generating synthetic world with {world_cfg.num_places} places...")
    layouts = place_layouts(world_cfg)
    partners = aliasing_partners(world_cfg)
    entries = []
    for place in tqdm(range(world_cfg.num_places), desc="Rendering", disable=not progress):
        clean = render_place(layouts[place], world_cfg.image_size, world_cfg.landmark_grid)
        lat, lon = place_geotag(place, world_cfg)
        place_heading = float(np.random.default_rng([world_cfg.seed, 3, place]).uniform(0.0, 360.0))
        for variant in range(world_cfg.variants_per_place):
            rng = np.random.default_rng([world_cfg.seed, 1, place, variant])
            if variant == 0:
                image, heading = clean, place_heading
            else:
                image = apply_variant(clean, rng, world_cfg)
                jitter = rng.uniform(-world_cfg.heading_jitter_deg, world_cfg.heading_jitter_deg)
                heading = (place_heading + jitter) % 360.0
            image_path = os.path.join("images", f"place{place:04d}_v{variant:02d}.ppm")
            write_image(os.path.join(output_dir, image_path), image)
            entries.append(
                ManifestEntry(
                    id=place * world_cfg.variants_per_place + variant,
                    image_path=image_path,
                    lat=lat,
                    lon=lon,
                    split=variant_split(variant, world_cfg),
                    heading_deg=normalize_heading(heading),
                    place_id=place,
                    aliased=place in partners,
                )
            )
    write_manifest(entries, os.path.join(output_dir, MANIFEST_NAME))
    logger.info(f"{len(entries)} images written to '{output_dir}'.")
    return entries


# features


@dataclass
class FeatureSet:
    """
    Extracted features of a list of images, row-aligned.

    ## Attributes:
    * `ids` (`np.ndarray`): `(n,)` image ids.
    * `global_features` (`np.ndarray`): `(n, C)` global descriptors.
    * `local_grids` (`np.ndarray`): `(n, h', w', C_l)` local grids.
    * `patches` (`np.ndarray`): `(n, h, w, D)` normalized backbone patch tokens.
    * `lat`, `lon`, `heading` (`np.ndarray`): Geotags; `heading` is NaN where absent.
    * `split` (`np.ndarray`): Split name per row.
    * `place_id` (`np.ndarray`): Place per row, `-1` when unknown.
    * `aliased` (`np.ndarray`): Aliasing-pair membership per row.
    """

    ids: np.ndarray
    global_features: np.ndarray
    local_grids: np.ndarray
    patches: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    heading: np.ndarray
    split: np.ndarray
    place_id: np.ndarray
    aliased: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, mask: np.ndarray) -> "FeatureSet":
        return FeatureSet(**{f.name: getattr(self, f.name)[mask] for f in fields(self)})

    def by_split(self, split: str) -> "FeatureSet":
        return self.subset(self.split == split)

    def geotags(self) -> List[GeoTag]:
        return [
            GeoTag(float(lat), float(lon), None if np.isnan(h) else float(h))
            for lat, lon, h in zip(self.lat, self.lon, self.heading)
        ]

    def queries(self) -> List[QueryFeatures]:
        return [
            QueryFeatures(self.global_features[i], self.local_grids[i], self.patches[i])
            for i in range(len(self))
        ]

    def to_index(self, with_patches: bool = True) -> PlaceIndex:
        return PlaceIndex(
            ids=self.ids,
            global_features=self.global_features,
            local_grids=self.local_grids,
            lat=self.lat,
            lon=self.lon,
            heading=self.heading,
            patches=self.patches if with_patches else None,
        )


def compute_features(
    model: torch.nn.Module,
    batches,
    progress: bool = False,
) -> Dict[str, np.ndarray]:
    """
    Runs the model without gradients over an iterable of `(B, H, W, 3)` image batches.

    ## Returns:
    * `dict`: `global`, `local` and `patches` arrays as 32-bit floats.
    """
    outputs = {"global": [], "local": [], "patches": []}
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for images in tqdm(batches, desc="Extracting", disable=not progress):
            out = model(images)
            outputs["global"].append(out.global_features.float().cpu().numpy())
            outputs["local"].append(out.local_features.float().cpu().numpy())
            outputs["patches"].append(out.patch_features.float().cpu().numpy())
    model.train(was_training)
    return {k: np.concatenate(v) for k, v in outputs.items()}


def compute_global_features(model: torch.nn.Module, batches) -> np.ndarray:
    """Global descriptors only, as 32-bit floats, without running the local head."""
    outputs = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for images in batches:
            outputs.append(model.global_features(images).float().cpu().numpy())
    model.train(was_training)
    return np.concatenate(outputs)


def iterate_batches(images: torch.Tensor, batch_size: int):
    for start in range(0, len(images), batch_size):
        yield images[start : start + batch_size]


def extract_features(
    model: torch.nn.Module,
    entries: Sequence[ManifestEntry],
    manifest_path: os.PathLike,
    batch_size: int = 32,
    workers: int = 0,
    dtype: torch.dtype = torch.float64,
    progress: bool = False,
) -> FeatureSet:
    """
    Extracts global, local and patch features of every manifest entry. Image decoding fans out over
    `workers` loader processes; row order follows `entries`.
    """
    logger.info(f"Extracting features of {len(entries)} images...")
    if not entries:
        raise ValueError("No manifest entries to extract.")
    loader = DataLoader(
        ManifestImageDataset(entries, manifest_path, dtype=dtype),
        batch_size=batch_size,
        shuffle=False,
        num_workers=workers,
    )
    features = compute_features(model, loader, progress=progress)
    return FeatureSet(
        ids=np.array([e.id for e in entries], dtype=np.int64),
        global_features=features["global"],
        local_grids=features["local"],
        patches=features["patches"],
        lat=np.array([e.lat for e in entries], dtype=np.float64),
        lon=np.array([e.lon for e in entries], dtype=np.float64),
        heading=np.array(
            [np.nan if e.heading_deg is None else e.heading_deg for e in entries],
            dtype=np.float32,
        ),
        split=np.array([e.split for e in entries]),
        place_id=np.array(
            [-1 if e.place_id is None else e.place_id for e in entries], dtype=np.int64
        ),
        aliased=np.array([e.aliased for e in entries], dtype=bool),
    )


_FEATURE_KEYS = {
    "ids": "ids",
    "global_features": "global",
    "local_grids": "local",
    "patches": "patches",
    "lat": "lat",
    "lon": "lon",
    "heading": "heading",
    "split": "split",
    "place_id": "place_id",
    "aliased": "aliased",
}


def save_features(features: FeatureSet, path: os.PathLike):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **{key: getattr(features, name) for name, key in _FEATURE_KEYS.items()})
    logger.info(f"Features of {len(features)} images saved to '{path}'.")


def load_features(path: os.PathLike) -> FeatureSet:
    with np.load(path, allow_pickle=False) as data:
        missing = [key for key in _FEATURE_KEYS.values() if key not in data]
        if missing:
            raise ValueError(f"Features file '{path}' lacks arrays {missing}.")
        return FeatureSet(**{name: data[key] for name, key in _FEATURE_KEYS.items()})
