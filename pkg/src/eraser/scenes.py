"""Procedural scene forge.

Generates ground-truth removal triplets (source, mask, removed) and
unlabeled test pairs from a small vocabulary of backgrounds and shapes.
Rasterization is aliasing-free (pixel-center membership tests), so the
removed image equals the source *exactly* outside the mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, GenerationError
from .images import check_image, check_mask

BACKGROUND_KINDS = ("flat", "gradient", "noise", "checker")
OBJECT_KINDS = ("circle", "rectangle", "triangle", "ring")

_PLACEMENT_RETRIES = 40
_PAIR_RETRIES = 60


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one procedurally generated scene.

    All randomness (colors, positions, exact sizes, per-object kinds) derives
    from ``seed``; equal specs render bitwise-identical scenes. The last
    placed object is topmost and is the removal target.
    """

    seed: int
    image_size: int = 64
    background_kind: str = "flat"
    object_count: int = 1
    object_kinds: tuple[str, ...] = OBJECT_KINDS
    object_class_labels: tuple[str, ...] | None = None
    size_range: tuple[float, float] = (0.14, 0.30)
    object_sizes: tuple[float, ...] | None = None

    def validate(self) -> None:
        if self.object_count < 1:
            raise ConfigurationError("object_count must be >= 1")
        if self.image_size < 16:
            raise ConfigurationError("image_size must be >= 16")
        if self.background_kind not in BACKGROUND_KINDS:
            raise ConfigurationError(f"unknown background kind {self.background_kind!r}")
        unknown = set(self.object_kinds) - set(OBJECT_KINDS)
        if not self.object_kinds or unknown:
            raise ConfigurationError(
                f"object_kinds must be a nonempty subset of {OBJECT_KINDS}, got {self.object_kinds}"
            )
        if self.object_class_labels is not None and len(self.object_class_labels) != self.object_count:
            raise ConfigurationError("object_class_labels must have one label per placed object")
        if self.object_sizes is not None and len(self.object_sizes) != self.object_count:
            raise ConfigurationError("object_sizes must have one size per placed object")
        if not (0.0 < self.size_range[0] <= self.size_range[1] < 0.5):
            raise ConfigurationError("size_range fractions must satisfy 0 < lo <= hi < 0.5")


@dataclass
class Triplet:
    """One supervised removal sample: source, removal mask, true background."""

    source: np.ndarray
    mask: np.ndarray
    removed: np.ndarray
    class_label: str = ""

    def validate(self) -> "Triplet":
        self.source = check_image(self.source, "source")
        self.removed = check_image(self.removed, "removed")
        self.mask = check_mask(self.mask, "mask")
        if self.source.shape != self.removed.shape or self.source.shape[:2] != self.mask.shape:
            raise ValueError("triplet image shapes disagree")
        frac = float(self.mask.mean())
        if not (0.0 < frac < 1.0):
            raise ValueError(f"mask area fraction must lie in (0, 1), got {frac}")
        off = self.mask == 0.0
        if not np.array_equal(self.source[off], self.removed[off]):
            raise ValueError("removed must equal source exactly outside the mask")
        return self

    @property
    def mask_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass
class TestPair:
    """Test-time analogue of a triplet: no ground truth is shown to models.

    ``background`` keeps the true background around for oracle evaluation of
    synthetic scenes; imported real pairs leave it as None.
    """

    source: np.ndarray
    mask: np.ndarray
    class_label: str
    background: np.ndarray | None = None

    @property
    def mask_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass(frozen=True)
class ClassRecipe:
    """Maps a class label to a shape kind and a size band (canvas fractions)."""

    label: str
    kind: str
    size_range: tuple[float, float] = (0.14, 0.30)


def default_class_recipes() -> tuple[ClassRecipe, ...]:
    return tuple(ClassRecipe(label=k, kind=k) for k in OBJECT_KINDS)


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _render_background(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if kind == "flat":
        color = rng.uniform(0.08, 0.92, size=3)
        bg = np.broadcast_to(color, (size, size, 3)).copy()
    elif kind == "gradient":
        c0 = rng.uniform(0.05, 0.95, size=3)
        c1 = rng.uniform(0.05, 0.95, size=3)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        proj = np.cos(theta) * xx + np.sin(theta) * yy
        t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9)
        bg = c0[None, None, :] + t[:, :, None] * (c1 - c0)[None, None, :]
    elif kind == "noise":
        # Low-frequency texture: a coarse random grid upsampled with a cubic
        # spline. Smooth enough that the masked region stays predictable from
        # its surroundings, which keeps the removal task learnable.
        base = rng.uniform(0.20, 0.80, size=3)
        grid = rng.uniform(-1.0, 1.0, size=(5, 5, 3)) * 0.12
        coords = np.stack([yy * (4.0 / (size - 1)), xx * (4.0 / (size - 1))])
        chans = [
            ndimage.map_coordinates(grid[:, :, c], coords, order=3, mode="nearest")
            for c in range(3)
        ]
        bg = base[None, None, :] + np.stack(chans, axis=-1)
    else:  # checker
        c0 = rng.uniform(0.05, 0.95, size=3)
        c1 = rng.uniform(0.05, 0.95, size=3)
        # cells sized so pattern continuation across a masked object stays
        # learnable for a small model
        cell = max(size // 4, 4)
        px, py = rng.integers(0, cell, size=2)
        parity = (((xx + px) // cell) + ((yy + py) // cell)) % 2
        bg = np.where(parity[:, :, None] == 0, c0[None, None, :], c1[None, None, :])
    return np.clip(bg, 0.0, 1.0).astype(np.float32)


def _footprint(
    kind: str, size: int, cy: float, cx: float, extent: float, rng: np.random.Generator
) -> np.ndarray:
    """Boolean footprint of one shape; membership tested at pixel centers."""
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= extent**2
    if kind == "ring":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        inner = extent * rng.uniform(0.45, 0.60)
        return (d2 <= extent**2) & (d2 >= inner**2)
    if kind == "rectangle":
        aspect = rng.uniform(0.6, 1.6)
        hw, hh = extent * np.sqrt(aspect), extent / np.sqrt(aspect)
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    # triangle: three vertices on the extent circle, spread enough to avoid slivers
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=3))
    while np.min(np.diff(np.concatenate([angles, angles[:1] + 2 * np.pi]))) < 0.7:
        angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=3))
    vx = cx + extent * np.cos(angles)
    vy = cy + extent * np.sin(angles)
    m = np.ones((size, size), dtype=bool)
    for i in range(3):
        x0, y0 = vx[i], vy[i]
        x1, y1 = vx[(i + 1) % 3], vy[(i + 1) % 3]
        m &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    return m


def _pick_color(bg: np.ndarray, footprint: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw an object color that visibly contrasts with the covered region."""
    region_mean = bg[footprint].mean(axis=0)
    for _ in range(_PLACEMENT_RETRIES):
        color = rng.uniform(0.0, 1.0, size=3)
        if np.linalg.norm(color - region_mean) >= 0.45:
            return color
    return np.where(region_mean > 0.5, 0.0, 1.0)


def _render_scene(spec: SceneSpec, kinds: Sequence[str], labels: Sequence[str]) -> Triplet:
    rng = _rng(spec.seed)
    size = spec.image_size
    bg = _render_background(spec.background_kind, size, rng)

    occupied = np.zeros((size, size), dtype=bool)
    footprints: list[np.ndarray] = []
    colors: list[np.ndarray] = []
    for i, kind in enumerate(kinds):
        placed = False
        for attempt in range(_PLACEMENT_RETRIES):
            if spec.object_sizes is not None:
                extent = float(spec.object_sizes[i])
            else:
                # shrink on retries so crowded canvases still resolve
                shrink = 1.0 - 0.6 * attempt / _PLACEMENT_RETRIES
                extent = rng.uniform(*spec.size_range) * size * shrink
            margin = extent + 1.5
            if 2 * margin >= size:
                continue
            cy = rng.uniform(margin, size - margin)
            cx = rng.uniform(margin, size - margin)
            fp = _footprint(kind, size, cy, cx, extent, rng)
            if fp.sum() < 9 or (fp & occupied).any():
                continue
            footprints.append(fp)
            colors.append(_pick_color(bg, fp, rng))
            occupied |= fp
            placed = True
            break
        if not placed:
            raise GenerationError(f"could not place object {i} ({kind}) for seed {spec.seed}")

    source = bg.copy()
    for fp, color in zip(footprints, colors):
        source[fp] = color.astype(np.float32)
    removed = bg.copy()
    for fp, color in zip(footprints[:-1], colors[:-1]):
        removed[fp] = color.astype(np.float32)
    mask = footprints[-1].astype(np.float32)
    return Triplet(source=source, mask=mask, removed=removed, class_label=labels[-1]).validate()


def forge_triplet(spec: SceneSpec) -> Triplet:
    """Render one scene and return its removal triplet.

    The removal target is the topmost object; its exact footprint is the
    mask, and ``removed`` is the same scene rendered without it.
    """
    spec.validate()
    kind_rng = _rng(spec.seed ^ 0x5DEECE66D)
    kinds = [str(kind_rng.choice(spec.object_kinds)) for _ in range(spec.object_count)]
    labels = list(spec.object_class_labels) if spec.object_class_labels else list(kinds)
    return _render_scene(spec, kinds, labels)


def forge_random_triplet(
    seed: int,
    image_size: int = 64,
    recipes: Sequence[ClassRecipe] | None = None,
    background_kinds: Sequence[str] = BACKGROUND_KINDS,
    object_count_range: tuple[int, int] = (1, 3),
    class_label: str | None = None,
) -> Triplet:
    """Forge a triplet with background, object count and classes drawn from ``seed``.

    ``class_label`` pins the removal target's class; distractor objects are
    drawn freely from the recipe set.
    """
    recipes = list(recipes) if recipes is not None else list(default_class_recipes())
    by_label = {r.label: r for r in recipes}
    rng = _rng(seed ^ 0x9E3779B9)
    background = str(rng.choice(list(background_kinds)))
    count = int(rng.integers(object_count_range[0], object_count_range[1] + 1))
    labels_pool = sorted(by_label)
    target_label = class_label if class_label is not None else str(rng.choice(labels_pool))
    if target_label not in by_label:
        raise ConfigurationError(f"unknown class label {target_label!r}")
    labels = [str(rng.choice(labels_pool)) for _ in range(count - 1)] + [target_label]
    kinds = [by_label[l].kind for l in labels]
    spec = SceneSpec(
        seed=seed,
        image_size=image_size,
        background_kind=background,
        object_count=count,
        object_class_labels=tuple(labels),
        size_range=by_label[target_label].size_range,
    )
    spec.validate()
    return _render_scene(spec, kinds, labels)


def sample_test_set(
    n: int,
    class_cap: int = 500,
    mask_min: float = 0.03,
    mask_max: float = 0.70,
    excluded_classes: Iterable[str] = (),
    seed: int = 0,
    image_size: int = 64,
    recipes: Sequence[ClassRecipe] | None = None,
    background_kinds: Sequence[str] = BACKGROUND_KINDS,
    keep_background: bool = True,
) -> list[TestPair]:
    """Sample ``n`` test pairs under class-cap, exclusion and mask-area rules.

    Every emitted pair has its mask area fraction inside [mask_min, mask_max],
    no class occurs more than ``class_cap`` times, and excluded classes never
    occur. Raises ConfigurationError when the cap makes ``n`` unreachable.
    """
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    if not (0.0 < mask_min < mask_max < 1.0):
        raise ConfigurationError("need 0 < mask_min < mask_max < 1")
    if class_cap < 1:
        raise ConfigurationError("class_cap must be >= 1")
    recipes = list(recipes) if recipes is not None else list(default_class_recipes())
    excluded = set(excluded_classes)
    available = [r for r in recipes if r.label not in excluded]
    if not available:
        raise ConfigurationError("all classes excluded")
    if class_cap * len(available) < n:
        raise ConfigurationError(
            f"infeasible: class_cap {class_cap} x {len(available)} classes < n={n}"
        )

    rng = _rng(seed)
    counts: dict[str, int] = {r.label: 0 for r in available}
    pairs: list[TestPair] = []
    while len(pairs) < n:
        open_classes = [r for r in available if counts[r.label] < class_cap]
        recipe = open_classes[int(rng.integers(len(open_classes)))]
        pair = None
        for _ in range(_PAIR_RETRIES):
            try:
                trip = forge_random_triplet(
                    seed=int(rng.integers(0, 2**31 - 1)),
                    image_size=image_size,
                    recipes=recipes,
                    background_kinds=background_kinds,
                    class_label=recipe.label,
                )
            except GenerationError:
                continue
            if mask_min <= trip.mask_fraction <= mask_max:
                bgd = trip.removed if keep_background else None
                pair = TestPair(source=trip.source, mask=trip.mask, class_label=trip.class_label, background=bgd)
                break
        if pair is None:
            raise GenerationError(
                f"no scene with mask fraction in [{mask_min}, {mask_max}] for class {recipe.label!r} (seed {seed})"
            )
        counts[recipe.label] += 1
        pairs.append(pair)
    return pairs


def forge_triplet_set(
    n: int,
    seed: int = 0,
    image_size: int = 64,
    mask_min: float = 0.03,
    mask_max: float = 0.70,
    recipes: Sequence[ClassRecipe] | None = None,
    background_kinds: Sequence[str] = BACKGROUND_KINDS,
) -> list[Triplet]:
    """Forge ``n`` triplets whose mask fractions fall inside the bounds."""
    rng = _rng(seed)
    out: list[Triplet] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > _PAIR_RETRIES * max(n, 1):
            raise GenerationError(f"could not forge {n} triplets within bounds (seed {seed})")
        try:
            t = forge_random_triplet(
                int(rng.integers(2**31)),
                image_size=image_size,
                recipes=recipes,
                background_kinds=background_kinds,
            )
        except GenerationError:
            continue
        if mask_min <= t.mask_fraction <= mask_max:
            out.append(t)
    return out


def dilate_mask(m: np.ndarray, kernel: int) -> np.ndarray:
    """Morphological dilation with a square structuring element of side ``kernel``."""
    if kernel % 2 != 1 or kernel < 1:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    m = check_mask(m)
    if kernel == 1:
        return m.copy()
    out = ndimage.binary_dilation(m.astype(bool), structure=np.ones((kernel, kernel), dtype=bool))
    return out.astype(np.float32)


def default_dilation_kernel(image_size: int) -> int:
    """Scale the reference 50/512 dilation ratio to the working resolution, kept odd."""
    k = max(int(round(image_size * 50 / 512)), 1)
    return k if k % 2 == 1 else k + 1
