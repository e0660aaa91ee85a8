"""
Landmark geometry: Delaunay meshes, piecewise-affine warping, reference
blending, component-aware mask schedules and binary-mask algebra.

Coordinates are (x, y) with x along columns and y along rows; the pixel at
row r and column c sits at the point (c, r). Masks are H x W arrays in {0, 1}.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import Delaunay, QhullError

from .codecs import check_binary, load_mask, save_mask  # noqa: F401
from .errors import ConstraintError, GeometryError, RangeError, ShapeError
from .logging_config import get_logger
from .numerics import DTYPE, Tensor

logger = get_logger(__name__)

# Label values of the sprite label raster
COMPONENT_LABELS = {"face": 1, "eyebrows": 2, "eyes": 3, "lips": 4}

_BARYCENTRIC_EPS = 1e-9
_AREA_EPS = 1e-9
BLEND_TOLERANCE = 1e-6


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered sub-pixel points with named component index groups."""

    points: np.ndarray  # (n, 2) as (x, y)
    components: Mapping[str, Tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=DTYPE)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ShapeError(f"landmarks must be an (n, 2) array, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("landmarks contain non-finite coordinates")
        object.__setattr__(self, "points", pts)
        for name, indices in self.components.items():
            if any(not 0 <= i < len(pts) for i in indices):
                raise GeometryError(f"component '{name}' references a missing landmark")

    def __len__(self) -> int:
        return self.points.shape[0]

    def check_bounds(self, height: int, width: int) -> None:
        x, y = self.points[:, 0], self.points[:, 1]
        outside = np.flatnonzero((x < 0) | (x > width - 1) | (y < 0) | (y > height - 1))
        if outside.size:
            i = int(outside[0])
            raise GeometryError(
                f"landmark {i} at ({x[i]:.2f}, {y[i]:.2f}) lies outside the "
                f"{width}x{height} image"
            )

    def component_points(self, name: str) -> np.ndarray:
        if name not in self.components:
            raise GeometryError(f"landmarks have no component '{name}'")
        return self.points[list(self.components[name])]

    def shifted(self, dx: float, dy: float) -> "LandmarkSet":
        return LandmarkSet(self.points + np.array([dx, dy]), dict(self.components))

    def to_dict(self) -> Dict:
        return {
            "points": [[float(x), float(y)] for x, y in self.points],
            "components": {k: list(v) for k, v in self.components.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "LandmarkSet":
        return cls(
            np.asarray(data["points"], dtype=DTYPE),
            {k: tuple(int(i) for i in v) for k, v in data.get("components", {}).items()},
        )


@dataclass(frozen=True)
class TriangleMesh:
    """Vertex index triples in canonical order (sorted rows, rows sorted)."""

    triangles: np.ndarray  # (m, 3) int

    def __len__(self) -> int:
        return self.triangles.shape[0]


@dataclass(frozen=True)
class WarpMap:
    """
    Reference-to-source correspondence in the source (destination) frame.

    ``owner[r, c]`` is the triangle claiming the pixel or -1 outside the hull;
    ``ref_x``/``ref_y`` give the reference point sampled for each valid pixel.
    """

    mesh: TriangleMesh
    affines: np.ndarray  # (m, 2, 3) source (x, y, 1) -> reference (x, y)
    owner: np.ndarray
    ref_x: np.ndarray
    ref_y: np.ndarray

    @property
    def validity(self) -> Tensor:
        return (self.owner >= 0).astype(DTYPE)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.owner.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class ComponentSpec:
    """
    One facial component: its source-frame mask, blend weight and the step
    ``t_c`` above which the component is pinned to the preservation chain.
    """

    name: str
    mask: np.ndarray
    alpha: float = 0.8
    t_c: int = 0

    def __post_init__(self):
        check_binary(self.mask, f"component mask '{self.name}'")
        if not 0.0 <= self.alpha <= 1.0:
            raise RangeError(f"alpha for '{self.name}' must lie in [0, 1], got {self.alpha}")
        if self.t_c < 0:
            raise RangeError(f"t_c for '{self.name}' must be >= 0, got {self.t_c}")


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------


def _as_points(points) -> np.ndarray:
    if isinstance(points, LandmarkSet):
        return points.points
    pts = np.asarray(points, dtype=DTYPE)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(f"points must be an (n, 2) array, got {pts.shape}")
    return pts


def _signed_areas(pts: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a, b, c = pts[triangles[:, 0]], pts[triangles[:, 1]], pts[triangles[:, 2]]
    return 0.5 * (
        (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    )


def delaunay(points) -> TriangleMesh:
    """
    Delaunay triangulation with deterministic output.

    Points are handed to qhull in lexicographic (x, y) order, zero-area
    simplices are dropped and the result is canonicalised, so equal inputs
    always give equal meshes.
    """
    pts = _as_points(points)
    n = pts.shape[0]
    if n < 3:
        raise GeometryError(f"triangulation needs at least 3 points, got {n}")

    order = np.lexsort((np.arange(n), pts[:, 1], pts[:, 0]))
    sorted_pts = pts[order]
    same = np.all(sorted_pts[1:] == sorted_pts[:-1], axis=1)
    if np.any(same):
        k = int(np.flatnonzero(same)[0])
        i, j = sorted(int(v) for v in (order[k], order[k + 1]))
        raise GeometryError(f"duplicate landmarks {i} and {j} at {tuple(pts[i])}")

    centered = pts - pts.mean(axis=0)
    scale = float(np.abs(centered).max())
    if np.linalg.matrix_rank(centered, tol=1e-9 * max(scale, 1.0)) < 2:
        raise GeometryError("landmarks are collinear; no triangle can be formed")

    try:
        simplices = Delaunay(sorted_pts).simplices
    except QhullError as e:
        raise GeometryError(f"triangulation failed: {e}")

    triangles = np.sort(order[simplices], axis=1)
    triangles = triangles[np.abs(_signed_areas(pts, triangles)) > _AREA_EPS]
    triangles = triangles[np.lexsort(triangles.T[::-1])]
    return TriangleMesh(triangles.astype(np.int64))


def circumcircle_violations(points, mesh: TriangleMesh, tol: float = 1e-9) -> List[Tuple[int, int]]:
    """Brute-force (triangle, point) pairs where a point lies strictly inside a circumcircle."""
    pts = _as_points(points)
    violations = []
    for t_index, tri in enumerate(mesh.triangles):
        a, b, c = pts[tri]
        if _signed_areas(pts, tri[None])[0] < 0:
            b, c = c, b
        for p_index, p in enumerate(pts):
            if p_index in tri:
                continue
            rows = np.array(
                [
                    [a[0] - p[0], a[1] - p[1], (a[0] - p[0]) ** 2 + (a[1] - p[1]) ** 2],
                    [b[0] - p[0], b[1] - p[1], (b[0] - p[0]) ** 2 + (b[1] - p[1]) ** 2],
                    [c[0] - p[0], c[1] - p[1], (c[0] - p[0]) ** 2 + (c[1] - p[1]) ** 2],
                ]
            )
            if np.linalg.det(rows) > tol:
                violations.append((t_index, p_index))
    return violations


# ---------------------------------------------------------------------------
# Point location and warping
# ---------------------------------------------------------------------------


def _locate(pts: np.ndarray, mesh: TriangleMesh, shape: Tuple[int, int]) -> np.ndarray:
    """Owner triangle per pixel; the first triangle in mesh order wins shared edges."""
    height, width = shape
    owner = np.full((height, width), -1, dtype=np.int64)
    for index, tri in enumerate(mesh.triangles):
        p = pts[tri]
        x0 = max(int(np.floor(p[:, 0].min())), 0)
        x1 = min(int(np.ceil(p[:, 0].max())), width - 1)
        y0 = max(int(np.floor(p[:, 1].min())), 0)
        y1 = min(int(np.ceil(p[:, 1].max())), height - 1)
        if x1 < x0 or y1 < y0:
            continue
        ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        v0 = p[1] - p[0]
        v1 = p[2] - p[0]
        det = v0[0] * v1[1] - v1[0] * v0[1]
        qx = xs - p[0, 0]
        qy = ys - p[0, 1]
        l1 = (qx * v1[1] - v1[0] * qy) / det
        l2 = (v0[0] * qy - qx * v0[1]) / det
        l0 = 1.0 - l1 - l2
        inside = (
            (l0 >= -_BARYCENTRIC_EPS)
            & (l1 >= -_BARYCENTRIC_EPS)
            & (l2 >= -_BARYCENTRIC_EPS)
            & (owner[y0 : y1 + 1, x0 : x1 + 1] < 0)
        )
        owner[ys[inside], xs[inside]] = index
    return owner


def _affine(src_tri: np.ndarray, dst_tri: np.ndarray) -> np.ndarray:
    """2 x 3 matrix mapping the source triangle's vertices onto the destination's."""
    system = np.column_stack([src_tri, np.ones(3)])
    return np.linalg.solve(system, dst_tri).T


def build_warp(
    src_lm: LandmarkSet,
    ref_lm: LandmarkSet,
    shape: Tuple[int, int],
    mesh: Optional[TriangleMesh] = None,
) -> WarpMap:
    """Per-triangle affine maps from the source frame into the reference image."""
    if len(src_lm) != len(ref_lm):
        raise GeometryError(
            f"landmark mismatch: source has {len(src_lm)} points, reference {len(ref_lm)}"
        )
    height, width = shape
    src_lm.check_bounds(height, width)
    mesh = mesh or delaunay(src_lm)
    src, ref = src_lm.points, ref_lm.points

    ref_areas = _signed_areas(ref, mesh.triangles)
    src_areas = _signed_areas(src, mesh.triangles)
    for index, (a_src, a_ref) in enumerate(zip(src_areas, ref_areas)):
        if abs(a_src) <= _AREA_EPS or abs(a_ref) <= _AREA_EPS:
            frame = "source" if abs(a_src) <= _AREA_EPS else "reference"
            raise GeometryError(
                f"degenerate triangle {index} {tuple(int(v) for v in mesh.triangles[index])} "
                f"has zero area in the {frame} landmarks"
            )

    affines = np.stack([_affine(src[tri], ref[tri]) for tri in mesh.triangles])
    owner = _locate(src, mesh, (height, width))

    rows, cols = np.nonzero(owner >= 0)
    maps = affines[owner[rows, cols]]
    ref_x = np.full((height, width), np.nan)
    ref_y = np.full((height, width), np.nan)
    ref_x[rows, cols] = maps[:, 0, 0] * cols + maps[:, 0, 1] * rows + maps[:, 0, 2]
    ref_y[rows, cols] = maps[:, 1, 0] * cols + maps[:, 1, 1] * rows + maps[:, 1, 2]
    logger.debug(f"Warp map: {len(mesh)} triangles, {rows.size} pixels inside the hull")
    return WarpMap(mesh, affines, owner, ref_x, ref_y)


def _sample(warp_map: WarpMap, image: np.ndarray, order: int) -> np.ndarray:
    valid = warp_map.owner >= 0
    coords = np.stack([warp_map.ref_y[valid], warp_map.ref_x[valid]])
    out = np.zeros(warp_map.shape + image.shape[2:], dtype=DTYPE)
    if image.ndim == 2:
        out[valid] = ndimage.map_coordinates(image, coords, order=order, mode="nearest")
        return out
    for channel in range(image.shape[2]):
        out[..., channel][valid] = ndimage.map_coordinates(
            image[..., channel], coords, order=order, mode="nearest"
        )
    return out


def warp_image(warp_map: WarpMap, image: Tensor) -> Tensor:
    """Bilinear inverse mapping; zero outside the source hull."""
    return _sample(warp_map, np.asarray(image, dtype=DTYPE), order=1)


def warp_mask(warp_map: WarpMap, mask: Tensor) -> Tensor:
    """Nearest-neighbour inverse mapping so the result stays binary."""
    return _sample(warp_map, check_binary(mask), order=0)


def warp(
    ref_image: Tensor, src_lm: LandmarkSet, ref_lm: LandmarkSet, shape: Optional[Tuple[int, int]] = None
) -> Tuple[Tensor, Tensor]:
    """Warp the reference into the source frame; returns (image, validity)."""
    image = np.asarray(ref_image, dtype=DTYPE)
    warp_map = build_warp(src_lm, ref_lm, shape or image.shape[:2])
    return warp_image(warp_map, image), warp_map.validity


def hull_mask(landmarks: LandmarkSet, shape: Tuple[int, int]) -> Tensor:
    """Pixels covered by the landmark mesh."""
    return (_locate(landmarks.points, delaunay(landmarks), shape) >= 0).astype(DTYPE)


def polygon_mask(points: np.ndarray, shape: Tuple[int, int]) -> Tensor:
    """Convex-hull raster of a point group (the landmark fallback for component masks)."""
    pts = _as_points(points)
    return (_locate(pts, delaunay(pts), shape) >= 0).astype(DTYPE)


# ---------------------------------------------------------------------------
# Blending
# ---------------------------------------------------------------------------


def _expand(weights: Tensor, like: np.ndarray, what: str) -> np.ndarray:
    w = np.asarray(weights, dtype=DTYPE)
    if w.ndim == 0:
        return np.full(like.shape, float(w))
    if w.shape == like.shape:
        return w
    if like.ndim == 3 and w.shape == like.shape[:2]:
        return np.repeat(w[:, :, None], like.shape[2], axis=2)
    if like.ndim == 3 and w.shape == like.shape[:2] + (1,):
        return np.repeat(w, like.shape[2], axis=2)
    raise ShapeError(f"{what}: shape {w.shape} does not fit image {like.shape}")


def _check_unit(weights: np.ndarray, what: str) -> None:
    if np.any(weights < 0.0) or np.any(weights > 1.0):
        bad = np.unravel_index(np.argmax(np.abs(weights - 0.5)), weights.shape)
        raise RangeError(f"{what} must lie in [0, 1]; found {weights[bad]:.6g} at {tuple(int(i) for i in bad)}")


def blend(x0: Tensor, warped: Tensor, alpha: Tensor) -> Tensor:
    """(J - alpha) * x0 + alpha * warped."""
    source = np.asarray(x0, dtype=DTYPE)
    target = np.asarray(warped, dtype=DTYPE)
    if source.shape != target.shape:
        raise ShapeError(f"blend: shape mismatch {source.shape} vs {target.shape}")
    a = _expand(alpha, source, "blend alpha")
    _check_unit(a, "blend alpha")
    return (1.0 - a) * source + a * target


@dataclass(frozen=True)
class BlendItem:
    """One reference for multi-reference blending, already warped to the source frame."""

    warped_content: np.ndarray  # warp(M * y)
    warped_mask: np.ndarray  # warp(M), H x W
    alpha: np.ndarray  # H x W or scalar


def multi_blend(x0: Tensor, items: Sequence[BlendItem], scope: str = "overlap") -> Tensor:
    """
    Blend several warped references into ``x0``:

        (J - sum_l a_l) * x0 + sum_l a_l * warp(M_l * y_l),   a_l = alpha_l * warp(M_l)

    This is the per-reference sum with x0 counted once: it matches the sum for a
    single reference and for disjoint masks, and on overlaps x0 keeps the weight
    left over by the references. The weights must sum to one where they meet.
    ``scope`` picks the pixels
    checked: ``overlap`` (two or more warped masks), ``union`` (any warped mask)
    or ``global`` (every pixel, raw alphas).
    """
    source = np.asarray(x0, dtype=DTYPE)
    if not items:
        raise ConstraintError("multi_blend needs at least one reference")
    height, width = source.shape[:2]

    weights = []
    masks = []
    raw = []
    for index, item in enumerate(items):
        mask = check_binary(item.warped_mask, f"warped mask {index}")
        if mask.shape != (height, width):
            raise ShapeError(f"warped mask {index}: shape {mask.shape} != {(height, width)}")
        alpha = np.asarray(item.alpha, dtype=DTYPE)
        alpha = np.full((height, width), float(alpha)) if alpha.ndim == 0 else alpha
        if alpha.shape != (height, width):
            raise ShapeError(f"alpha {index}: shape {alpha.shape} != {(height, width)}")
        _check_unit(alpha, f"alpha {index}")
        masks.append(mask)
        raw.append(alpha)
        weights.append(alpha * mask)

    coverage = weights[0]
    for w in weights[1:]:
        coverage = coverage + w
    _check_weight_sum(coverage, masks, raw, scope)

    cov = _expand(coverage, source, "coverage")
    result = (1.0 - cov) * source
    for item, w in zip(items, weights):
        content = np.asarray(item.warped_content, dtype=DTYPE)
        if content.shape != source.shape:
            raise ShapeError(f"warped reference shape {content.shape} != {source.shape}")
        result = result + _expand(w, source, "weight") * content
    return result


def _check_weight_sum(coverage, masks, raw, scope: str) -> None:
    if scope == "global":
        total = raw[0]
        for alpha in raw[1:]:
            total = total + alpha
        region = np.ones_like(total, dtype=bool)
    else:
        total = coverage
        count = masks[0]
        for mask in masks[1:]:
            count = count + mask
        if scope == "overlap":
            region = count >= 2
        elif scope == "union":
            region = count >= 1
        else:
            raise ConstraintError(f"unknown constraint scope '{scope}'")

    deviation = np.where(region, np.abs(total - 1.0), 0.0)
    if np.any(deviation > BLEND_TOLERANCE):
        r, c = np.unravel_index(np.argmax(deviation), deviation.shape)
        raise ConstraintError(
            f"blend weights must sum to 1 ({scope} scope); worst pixel "
            f"(row {r}, col {c}) sums to {total[r, c]:.6f}"
        )


def assemble_alpha(components: Sequence[ComponentSpec], validity: Optional[Tensor] = None) -> Tensor:
    """sum_c alpha_c * M_c, times the warp validity when given."""
    if not components:
        raise ConstraintError("no components to assemble")
    _check_disjoint(components)
    alpha = components[0].alpha * components[0].mask
    for spec in components[1:]:
        alpha = alpha + spec.alpha * spec.mask
    if validity is not None:
        alpha = alpha * check_binary(validity, "validity mask")
    return alpha


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------


def _check_disjoint(components: Sequence[ComponentSpec]) -> None:
    shape = components[0].mask.shape
    count = np.zeros(shape)
    for spec in components:
        if spec.mask.shape != shape:
            raise ShapeError(f"component mask '{spec.name}' has shape {spec.mask.shape} != {shape}")
        count = count + spec.mask
    if np.any(count > 1):
        names = [s.name for s in components]
        overlapping = [
            f"{a}/{b}"
            for i, a in enumerate(names)
            for b, spec_b in zip(names[i + 1 :], components[i + 1 :])
            if np.any((components[i].mask > 0) & (spec_b.mask > 0))
        ]
        raise ConstraintError(f"component masks overlap: {', '.join(overlapping)}")


def cam_mask(t: int, components: Sequence[ComponentSpec], background_mask: Tensor) -> Tensor:
    """background + sum_c 1{t > t_c} M_c, clamped to {0, 1}."""
    background = check_binary(background_mask, "background mask")
    if components:
        _check_disjoint(components)
    mask = background.copy()
    for spec in components:
        if spec.mask.shape != background.shape:
            raise ShapeError(f"component mask '{spec.name}' does not match the background mask")
        if t > spec.t_c:
            mask = mask + spec.mask
    return np.minimum(mask, 1.0)


def union(a: Tensor, b: Tensor) -> Tensor:
    left, right = check_binary(a), check_binary(b)
    if left.shape != right.shape:
        raise ShapeError(f"union: shape mismatch {left.shape} vs {right.shape}")
    return np.maximum(left, right)


def intersection(a: Tensor, b: Tensor) -> Tensor:
    left, right = check_binary(a), check_binary(b)
    if left.shape != right.shape:
        raise ShapeError(f"intersection: shape mismatch {left.shape} vs {right.shape}")
    return left * right


def complement(m: Tensor) -> Tensor:
    return 1.0 - check_binary(m)


def component_extract(labels: np.ndarray, component: str) -> Tensor:
    """Binary mask of one component from a sprite label raster."""
    if component not in COMPONENT_LABELS:
        raise GeometryError(
            f"unknown component '{component}' (known: {', '.join(COMPONENT_LABELS)})"
        )
    return (np.asarray(labels) == COMPONENT_LABELS[component]).astype(DTYPE)


def component_masks_from_landmarks(
    landmarks: LandmarkSet, shape: Tuple[int, int], names: Sequence[str]
) -> Dict[str, Tensor]:
    """
    Component masks rasterised from landmark groups when no mask files exist.

    Small components are carved out of larger ones so the result stays disjoint;
    ``face`` is the face hull minus every other component.
    """
    masks: Dict[str, Tensor] = {}
    taken = np.zeros(shape)
    for name in names:
        if name == "face":
            continue
        mask = np.zeros(shape)
        for group in landmark_groups(landmarks, name):
            mask = np.maximum(mask, polygon_mask(landmarks.component_points(group), shape))
        mask = mask * (1.0 - taken)
        masks[name] = mask
        taken = np.maximum(taken, mask)
    if "face" in names:
        outline = landmarks.component_points("face") if "face" in landmarks.components else landmarks.points
        masks["face"] = polygon_mask(outline, shape) * (1.0 - taken)
    return {name: masks[name] for name in names}


def landmark_groups(landmarks: LandmarkSet, component: str) -> List[str]:
    """Group names for a component: ``eyes`` matches ``eyes``, ``eyes.left``, ``eyes.right``."""
    groups = [
        key for key in landmarks.components if key == component or key.startswith(component + ".")
    ]
    if not groups:
        raise GeometryError(f"landmarks have no group for component '{component}'")
    return sorted(groups)
