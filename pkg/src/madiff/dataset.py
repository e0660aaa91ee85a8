"""
Procedural two-domain sprite corpus.

Each sprite is a face-like drawing made of ellipses: a face outline, two eyes,
two eyebrows and lips, over a flat background. Non-makeup sprites use muted
palettes; makeup sprites use saturated lip, eyeshadow and brow colors. Every
sprite ships with exact component masks, landmarks on the drawn ellipses and
the text tags naming its palette.

Corpus layout under the output directory::

    manifest.json
    images/sprite_0000.ppm
    masks/sprite_0000_<component>.pgm
    landmarks/sprite_0000.json
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .codecs import PathLike, encode_pgm, encode_ppm, load_image, load_mask
from .config import COMPONENTS
from .denoiser import ConditionKind, TrainingSet
from .errors import FormatError, ManifestError, ValidationError
from .geometry import COMPONENT_LABELS, LandmarkSet
from .logging_config import get_logger
from .numerics import DTYPE, RngState, derive_substream, sample_uniform, seeded_rng
from .trackers import ProgressTracker

logger = get_logger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
SUPPORTED_SIZES = (16, 32, 64)
MIN_RADIUS = 0.75
FACE_POINTS = 12

RGB = Tuple[int, int, int]

SKIN_TONES: Dict[str, RGB] = {
    "pale_skin": (235, 200, 180),
    "tan_skin": (200, 150, 110),
    "dark_skin": (130, 90, 65),
}
PLAIN_LIPS: Dict[str, RGB] = {"plain_lips": (178, 118, 108)}
MAKEUP_LIPS: Dict[str, RGB] = {
    "red_lips": (200, 20, 30),
    "pink_lips": (235, 80, 150),
    "plum_lips": (120, 20, 80),
}
PLAIN_EYES: Dict[str, RGB] = {"bare_eyes": (70, 50, 40)}
MAKEUP_EYES: Dict[str, RGB] = {
    "blue_eyeshadow": (60, 90, 210),
    "gold_eyeshadow": (210, 170, 40),
    "purple_eyeshadow": (140, 60, 170),
}
PLAIN_BROWS: Dict[str, RGB] = {"natural_brows": (110, 80, 60)}
MAKEUP_BROWS: Dict[str, RGB] = {"dark_brows": (30, 20, 15)}

VOCABULARY: Tuple[str, ...] = tuple(
    sorted(
        {
            *SKIN_TONES,
            *PLAIN_LIPS,
            *MAKEUP_LIPS,
            *PLAIN_EYES,
            *MAKEUP_EYES,
            *PLAIN_BROWS,
            *MAKEUP_BROWS,
        }
    )
)


def vocabulary() -> Tuple[str, ...]:
    """Tag vocabulary emitted by the sprite generator."""
    return VOCABULARY


# ---------------------------------------------------------------------------
# Sprite description and rendering
# ---------------------------------------------------------------------------


Ellipse = Tuple[float, float, float, float]  # cx, cy, rx, ry


@dataclass(frozen=True)
class SpriteSpec:
    """Geometry and palette of one sprite."""

    size: int
    domain: ConditionKind
    face: Ellipse
    eyes: Tuple[Ellipse, Ellipse]
    brows: Tuple[Ellipse, Ellipse]
    lips: Ellipse
    background: RGB
    skin: str
    lip_color: str
    eye_color: str
    brow_color: str

    def __post_init__(self):
        if self.size not in SUPPORTED_SIZES:
            raise ValidationError(f"sprite size must be one of {SUPPORTED_SIZES}, got {self.size}")
        plain = self.domain is ConditionKind.NON_MAKEUP
        lips, eyes, brows = (
            (PLAIN_LIPS, PLAIN_EYES, PLAIN_BROWS) if plain else (MAKEUP_LIPS, MAKEUP_EYES, MAKEUP_BROWS)
        )
        if self.lip_color not in lips or self.eye_color not in eyes or self.brow_color not in brows:
            raise ValidationError(f"palette does not belong to the {self.domain.value} domain")
        if self.skin not in SKIN_TONES:
            raise ValidationError(f"unknown skin tone '{self.skin}'")
        for cx, cy, rx, ry in (self.face, *self.eyes, *self.brows, self.lips):
            if cx - rx < 0 or cy - ry < 0 or cx + rx > self.size - 1 or cy + ry > self.size - 1:
                raise ValidationError("sprite ellipse leaves the image")

    @property
    def tags(self) -> Tuple[str, ...]:
        return (self.skin, self.lip_color, self.eye_color, self.brow_color)

    @property
    def colors(self) -> Dict[str, RGB]:
        return {
            "face": SKIN_TONES[self.skin],
            "lips": {**PLAIN_LIPS, **MAKEUP_LIPS}[self.lip_color],
            "eyes": {**PLAIN_EYES, **MAKEUP_EYES}[self.eye_color],
            "eyebrows": {**PLAIN_BROWS, **MAKEUP_BROWS}[self.brow_color],
        }


def _pick(names: Sequence[str], u: float) -> str:
    return names[min(int(u * len(names)), len(names) - 1)]


def _span(u: float, low: float, high: float) -> float:
    return low + (high - low) * u


def random_sprite_spec(rng: RngState, size: int, domain: ConditionKind) -> SpriteSpec:
    """Randomized geometry and palette; all lengths scale with ``size``."""
    u, _ = sample_uniform(rng, (20,))
    s = float(size)

    cx = s / 2 + _span(u[0], -0.04, 0.04) * s
    cy = s / 2 + _span(u[1], -0.03, 0.03) * s
    face = (cx, cy, _span(u[2], 0.30, 0.36) * s, _span(u[3], 0.34, 0.40) * s)

    eye_y = cy - _span(u[4], 0.10, 0.13) * s
    eye_dx = _span(u[5], 0.12, 0.15) * s
    eye_rx = max(_span(u[6], 0.06, 0.08) * s, MIN_RADIUS)
    eye_ry = max(_span(u[7], 0.035, 0.05) * s, MIN_RADIUS)
    eyes = ((cx - eye_dx, eye_y, eye_rx, eye_ry), (cx + eye_dx, eye_y, eye_rx, eye_ry))

    brow_y = eye_y - _span(u[8], 0.08, 0.10) * s
    brow_rx = max(_span(u[9], 0.08, 0.10) * s, MIN_RADIUS)
    brow_ry = max(_span(u[10], 0.02, 0.03) * s, MIN_RADIUS)
    brows = ((cx - eye_dx, brow_y, brow_rx, brow_ry), (cx + eye_dx, brow_y, brow_rx, brow_ry))

    lips = (
        cx,
        cy + _span(u[11], 0.18, 0.22) * s,
        max(_span(u[12], 0.10, 0.14) * s, MIN_RADIUS),
        max(_span(u[13], 0.04, 0.06) * s, MIN_RADIUS),
    )

    grey = int(20 + 60 * u[14])
    plain = domain is ConditionKind.NON_MAKEUP
    return SpriteSpec(
        size=size,
        domain=domain,
        face=face,
        eyes=eyes,
        brows=brows,
        lips=lips,
        background=(grey, grey, min(grey + 8, 255)),
        skin=_pick(sorted(SKIN_TONES), u[15]),
        lip_color=_pick(sorted(PLAIN_LIPS if plain else MAKEUP_LIPS), u[16]),
        eye_color=_pick(sorted(PLAIN_EYES if plain else MAKEUP_EYES), u[17]),
        brow_color=_pick(sorted(PLAIN_BROWS if plain else MAKEUP_BROWS), u[18]),
    )


def _ellipse_raster(ellipse: Ellipse, size: int) -> np.ndarray:
    cx, cy, rx, ry = ellipse
    rows, cols = np.mgrid[0:size, 0:size]
    return ((cols - cx) / rx) ** 2 + ((rows - cy) / ry) ** 2 <= 1.0


def render_labels(spec: SpriteSpec) -> np.ndarray:
    """Label raster: 0 background, then the values of COMPONENT_LABELS."""
    labels = np.zeros((spec.size, spec.size), dtype=np.uint8)
    labels[_ellipse_raster(spec.face, spec.size)] = COMPONENT_LABELS["face"]
    for name, ellipses in (
        ("eyes", spec.eyes),
        ("eyebrows", spec.brows),
        ("lips", (spec.lips,)),
    ):
        for ellipse in ellipses:
            labels[_ellipse_raster(ellipse, spec.size)] = COMPONENT_LABELS[name]
    return labels


def render_sprite(spec: SpriteSpec) -> Tuple[np.ndarray, np.ndarray]:
    """8-bit pixels (H x W x 3) and the label raster."""
    labels = render_labels(spec)
    pixels = np.empty((spec.size, spec.size, 3), dtype=np.uint8)
    pixels[:] = spec.background
    for name, color in spec.colors.items():
        pixels[labels == COMPONENT_LABELS[name]] = color
    return pixels, labels


def _ellipse_points(ellipse: Ellipse, count: int) -> List[List[float]]:
    cx, cy, rx, ry = ellipse
    angles = np.arange(count) * (2 * np.pi / count)
    return [[cx + rx * np.cos(a), cy + ry * np.sin(a)] for a in angles]


def sprite_landmarks(spec: SpriteSpec) -> LandmarkSet:
    """Landmarks sitting on the drawn ellipses, grouped per component side."""
    groups = [
        ("face", spec.face, FACE_POINTS),
        ("eyes.left", spec.eyes[0], 4),
        ("eyes.right", spec.eyes[1], 4),
        ("eyebrows.left", spec.brows[0], 4),
        ("eyebrows.right", spec.brows[1], 4),
        ("lips", spec.lips, 4),
    ]
    points: List[List[float]] = []
    components: Dict[str, Tuple[int, ...]] = {}
    for name, ellipse, count in groups:
        start = len(points)
        points.extend(_ellipse_points(ellipse, count))
        components[name] = tuple(range(start, len(points)))
    return LandmarkSet(np.asarray(points, dtype=DTYPE), components)


# ---------------------------------------------------------------------------
# Landmarks JSON
# ---------------------------------------------------------------------------


def save_landmarks(landmarks: LandmarkSet, path: PathLike) -> Path:
    output = Path(path)
    output.parent.mkdir(parents=True, exist_ok=True)
    with open(output, "w", encoding="utf-8") as f:
        json.dump(landmarks.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return output


def load_landmarks(path: PathLike) -> LandmarkSet:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid landmarks JSON: {e.msg}", offset=e.pos, path=path)
    except OSError as e:
        raise FormatError(f"cannot read landmarks: {e}", path=path)
    if not isinstance(data, dict) or "points" not in data:
        raise FormatError("landmarks JSON needs a 'points' list", path=path)
    return LandmarkSet.from_dict(data)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpriteRecord:
    """One corpus entry; paths are relative to the manifest directory."""

    id: str
    image: str
    masks: Mapping[str, str]
    landmarks: str
    domain: str
    tags: Tuple[str, ...] = ()

    @property
    def kind(self) -> ConditionKind:
        return ConditionKind(self.domain)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["masks"] = dict(sorted(self.masks.items()))
        data["tags"] = list(self.tags)
        return data


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    records: Tuple[SpriteRecord, ...]
    vocabulary: Tuple[str, ...] = VOCABULARY
    seed: int = 0
    size: int = 32
    domain_ratio: float = 0.5
    version: int = MANIFEST_VERSION
    generator: Dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def path(self, relative: str) -> Path:
        return self.root / relative

    def by_domain(self, kind: ConditionKind) -> List[SpriteRecord]:
        return [r for r in self.records if r.kind is kind]

    def record(self, sprite_id: str) -> SpriteRecord:
        for r in self.records:
            if r.id == sprite_id:
                return r
        raise ManifestError(f"no sprite '{sprite_id}' in manifest")

    def to_dict(self) -> Dict:
        return {
            "version": self.version,
            "generator": {"seed": self.seed, "size": self.size, "domain_ratio": self.domain_ratio},
            "vocabulary": list(self.vocabulary),
            "records": [r.to_dict() for r in self.records],
        }


def save_manifest(manifest: DatasetManifest, path: Optional[PathLike] = None) -> Path:
    output = Path(path) if path is not None else manifest.root / MANIFEST_NAME
    output.parent.mkdir(parents=True, exist_ok=True)
    with open(output, "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return output


_RECORD_KEYS = ("id", "image", "masks", "landmarks", "domain")


def _parse_record(index: int, raw, problems: List[str]) -> Optional[SpriteRecord]:
    if not isinstance(raw, dict):
        problems.append(f"record {index} is not an object")
        return None
    missing = [k for k in _RECORD_KEYS if k not in raw]
    if missing:
        problems.append(f"record {index} lacks {', '.join(missing)}")
        return None
    if raw["domain"] not in (ConditionKind.NON_MAKEUP.value, ConditionKind.MAKEUP.value):
        problems.append(f"record {raw['id']}: unknown domain '{raw['domain']}'")
        return None
    if not isinstance(raw["masks"], dict):
        problems.append(f"record {raw['id']}: masks must be an object")
        return None
    return SpriteRecord(
        id=str(raw["id"]),
        image=str(raw["image"]),
        masks={str(k): str(v) for k, v in raw["masks"].items()},
        landmarks=str(raw["landmarks"]),
        domain=raw["domain"],
        tags=tuple(str(t) for t in raw.get("tags", [])),
    )


def load_manifest(path: PathLike) -> DatasetManifest:
    """
    Read and validate a manifest.

    Every problem found (missing files, unknown tags, empty domain) is
    collected and raised together in one ManifestError.
    """
    manifest_path = Path(path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid manifest JSON: {e.msg}", offset=e.pos, path=manifest_path)
    except OSError as e:
        raise ManifestError(f"cannot read manifest {manifest_path}: {e}")

    if not isinstance(data, dict) or not isinstance(data.get("records"), list):
        raise ManifestError(f"{manifest_path} has no 'records' list")
    if data.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {data.get('version')!r}")

    root = manifest_path.parent
    vocab = tuple(data.get("vocabulary", VOCABULARY))
    problems: List[str] = []
    records = []
    for index, raw in enumerate(data["records"]):
        record = _parse_record(index, raw, problems)
        if record is None:
            continue
        files = [("image", record.image), ("landmarks", record.landmarks)]
        files += [(f"{name} mask", rel) for name, rel in sorted(record.masks.items())]
        for what, rel in files:
            if not (root / rel).is_file():
                problems.append(f"{record.id}: missing {what} file {rel}")
        for tag in record.tags:
            if tag not in vocab:
                problems.append(f"{record.id}: tag '{tag}' not in vocabulary")
        records.append(record)

    for kind in (ConditionKind.NON_MAKEUP, ConditionKind.MAKEUP):
        if not any(r.kind is kind for r in records):
            problems.append(f"no records in the {kind.value} domain")
    if problems:
        raise ManifestError(f"invalid manifest {manifest_path}", problems)

    generator = data.get("generator", {})
    manifest = DatasetManifest(
        root=root,
        records=tuple(records),
        vocabulary=vocab,
        seed=int(generator.get("seed", 0)),
        size=int(generator.get("size", 0)),
        domain_ratio=float(generator.get("domain_ratio", 0.5)),
        version=data["version"],
        generator=dict(generator),
    )
    logger.debug(f"Loaded manifest {manifest_path}: {len(records)} records")
    return manifest


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _domains(n: int, seed: int, ratio: float) -> List[ConditionKind]:
    n_makeup = min(max(int(round(n * ratio)), 1), n - 1)
    order, _ = sample_uniform(seeded_rng(seed, stream=1), (n,))
    makeup = set(np.argsort(order, kind="stable")[:n_makeup].tolist())
    return [ConditionKind.MAKEUP if i in makeup else ConditionKind.NON_MAKEUP for i in range(n)]


def _write_sprite(spec: SpriteSpec, sprite_id: str, out_dir: Path) -> SpriteRecord:
    pixels, labels = render_sprite(spec)
    image_rel = f"images/{sprite_id}.ppm"
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / image_rel).write_bytes(encode_ppm(pixels))

    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    masks = {}
    for name in COMPONENTS:
        rel = f"masks/{sprite_id}_{name}.pgm"
        mask = (labels == COMPONENT_LABELS[name]).astype(np.uint8) * 255
        (out_dir / rel).write_bytes(encode_pgm(mask))
        masks[name] = rel

    landmarks_rel = f"landmarks/{sprite_id}.json"
    save_landmarks(sprite_landmarks(spec), out_dir / landmarks_rel)
    return SpriteRecord(
        id=sprite_id,
        image=image_rel,
        masks=masks,
        landmarks=landmarks_rel,
        domain=spec.domain.value,
        tags=spec.tags,
    )


def generate_sprites(
    n: int,
    seed: int,
    size: int = 32,
    domain_ratio: float = 0.5,
    out_dir: Union[str, Path] = "data",
    quiet: bool = True,
) -> DatasetManifest:
    """Write ``n`` sprites and their manifest; the corpus depends only on the arguments."""
    if n < 2:
        raise ValidationError(f"need at least 2 sprites (one per domain), got {n}")
    if size not in SUPPORTED_SIZES:
        raise ValidationError(f"sprite size must be one of {SUPPORTED_SIZES}, got {size}")
    if not 0.0 < domain_ratio < 1.0:
        raise ValidationError(f"domain ratio must lie in (0, 1), got {domain_ratio}")

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    logger.info(f"Generating {n} sprites ({size}x{size}, seed={seed}) into {root}")

    base = seeded_rng(seed)
    tracker = ProgressTracker(total=n, label="Sprites", quiet=quiet)
    records = []
    for i, domain in enumerate(_domains(n, seed, domain_ratio)):
        spec = random_sprite_spec(derive_substream(base, i), size, domain)
        records.append(_write_sprite(spec, f"sprite_{i:04d}", root))
        tracker.update()

    manifest = DatasetManifest(
        root=root,
        records=tuple(records),
        seed=seed,
        size=size,
        domain_ratio=domain_ratio,
    )
    save_manifest(manifest)
    logger.info(
        f"Wrote {n} sprites: {len(manifest.by_domain(ConditionKind.MAKEUP))} makeup, "
        f"{len(manifest.by_domain(ConditionKind.NON_MAKEUP))} non-makeup"
    )
    return manifest


# ---------------------------------------------------------------------------
# Loading for training and tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpriteSample:
    image: np.ndarray
    masks: Dict[str, np.ndarray]
    landmarks: LandmarkSet
    record: SpriteRecord


def load_sample(manifest: DatasetManifest, record: SpriteRecord) -> SpriteSample:
    return SpriteSample(
        image=load_image(manifest.path(record.image)),
        masks={name: load_mask(manifest.path(rel)) for name, rel in record.masks.items()},
        landmarks=load_landmarks(manifest.path(record.landmarks)),
        record=record,
    )


def to_training_set(manifest: DatasetManifest) -> TrainingSet:
    """Images in model range with domain labels and tag indices."""
    images = np.stack([load_image(manifest.path(r.image)) for r in manifest.records])
    index = {tag: i for i, tag in enumerate(manifest.vocabulary)}
    data = TrainingSet(
        images=images,
        domains=tuple(r.kind for r in manifest.records),
        tags=tuple(tuple(index[t] for t in r.tags) for r in manifest.records),
        vocabulary=tuple(manifest.vocabulary),
    )
    data.validate()
    return data
