"""Procedural shapes dataset with independent, discrete ground-truth factors.

Images are rendered on demand from a factor tuple, so the dataset object holds
no pixel state. Every factor combination maps to a distinct image.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import ConfigurationError, DomainError

SHAPES = ("ellipse", "triangle", "heart")
DEFAULT_NAMES = ("shape", "scale", "orientation", "pos_x", "pos_y")
DEFAULT_CARDINALITIES = (3, 6, 8, 16, 16)
VALID_IMAGE_SIZES = (32, 64)

# Geometry in unit-canvas coordinates; pixel quantities derive from image_size.
_BASE_RADIUS = 0.2
_SCALE_RANGE = (0.5, 1.0)
_POS_RANGE = (0.25, 0.75)
_MAX_ORIENTATION_DEG = 160.0


@dataclass(frozen=True)
class FactorSpace:
    names: Tuple[str, ...] = DEFAULT_NAMES
    cardinalities: Tuple[int, ...] = DEFAULT_CARDINALITIES

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))
        if len(self.names) != len(self.cardinalities):
            raise ConfigurationError("names and cardinalities differ in length")
        if len(self.cardinalities) < 2:
            raise ConfigurationError("a factor space needs at least 2 factors")
        if any(c < 2 for c in self.cardinalities):
            raise ConfigurationError(f"cardinalities must be >= 2, got {self.cardinalities}")

    @property
    def num_factors(self) -> int:
        return len(self.cardinalities)

    @property
    def num_configurations(self) -> int:
        return int(np.prod(self.cardinalities, dtype=np.int64))


@dataclass(frozen=True)
class DatasetSpec:
    image_size: int = 32
    factor_space: FactorSpace = field(default_factory=FactorSpace)
    render_seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        fs = FactorSpace(
            names=tuple(d.pop("factor_names", DEFAULT_NAMES)),
            cardinalities=tuple(d.pop("cardinalities", DEFAULT_CARDINALITIES)),
        )
        return cls(image_size=int(d.pop("image_size", 32)), factor_space=fs,
                   render_seed=int(d.pop("render_seed", 0)))

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "factor_names": list(self.factor_space.names),
            "cardinalities": list(self.factor_space.cardinalities),
            "render_seed": self.render_seed,
        }


def _heart_radius(theta):
    # Round blob with a notch at the top and a mild point at the bottom.
    t = np.angle(np.exp(1j * (theta - np.pi / 2)))
    b = np.angle(np.exp(1j * (theta + np.pi / 2)))
    return 0.85 - 0.4 * np.exp(-t ** 2 / 0.08) + 0.15 * np.exp(-b ** 2 / 0.15)


def _ellipse_radius(theta, a=1.0, b=0.55):
    return a * b / np.sqrt((b * np.cos(theta)) ** 2 + (a * np.sin(theta)) ** 2)


# Isoceles triangle, deliberately not equilateral so it has no rotational symmetry.
_TRIANGLE = np.array([[1.0, 0.0], [-0.6, 0.6], [-0.6, -0.6]])


def _triangle_sdf(x, y):
    """Signed distance (exact inside, edge-plane approximation outside)."""
    d = None
    n = len(_TRIANGLE)
    for i in range(n):
        p0, p1 = _TRIANGLE[i], _TRIANGLE[(i + 1) % n]
        edge = p1 - p0
        normal = np.array([edge[1], -edge[0]]) / np.hypot(*edge)
        # Orient outward: the centroid must be on the negative side.
        centroid = _TRIANGLE.mean(axis=0)
        if np.dot(centroid - p0, normal) > 0:
            normal = -normal
        dist = (x - p0[0]) * normal[0] + (y - p0[1]) * normal[1]
        d = dist if d is None else np.maximum(d, dist)
    return d


class GroundTruthDataset:
    """Immutable handle that renders observations from factor tuples."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        fs = spec.factor_space
        self.factor_space = fs
        size = spec.image_size
        centers = (np.arange(size) + 0.5) / size
        self._grid_y, self._grid_x = np.meshgrid(centers, centers, indexing="ij")
        card = dict(zip(fs.names, fs.cardinalities))
        # Factor value -> physical parameter tables. Unknown names fall back to
        # the position of the factor in the default layout.
        self._scales = np.linspace(*_SCALE_RANGE, card.get("scale", 6))
        n_orient = card.get("orientation", 8)
        self._angles = np.deg2rad(np.arange(n_orient) * _MAX_ORIENTATION_DEG / n_orient)
        self._pos_x = np.linspace(*_POS_RANGE, card.get("pos_x", 16))
        self._pos_y = np.linspace(*_POS_RANGE, card.get("pos_y", 16))
        # render_seed fixes a sub-pixel offset of the canvas origin.
        self._offset = np.random.default_rng(spec.render_seed).uniform(-0.25, 0.25, size=2) / size

    @property
    def num_factors(self) -> int:
        return self.factor_space.num_factors

    @property
    def cardinalities(self) -> Tuple[int, ...]:
        return self.factor_space.cardinalities

    @property
    def image_shape(self) -> Tuple[int, int]:
        return (self.spec.image_size, self.spec.image_size)

    def __len__(self):
        return self.factor_space.num_configurations

    def check_factors(self, factors) -> np.ndarray:
        f = np.asarray(factors)
        if f.ndim == 1:
            f = f[None, :]
        if f.ndim != 2 or f.shape[1] != self.num_factors:
            raise DomainError(f"expected factor rows of length {self.num_factors}, got shape {f.shape}")
        if not np.issubdtype(f.dtype, np.integer):
            if not np.all(np.equal(np.mod(f, 1), 0)):
                raise DomainError("factor values must be integers")
            f = f.astype(np.int64)
        card = np.asarray(self.cardinalities)
        if np.any(f < 0) or np.any(f >= card):
            raise DomainError("factor value out of range")
        return f.astype(np.int64)

    def _params(self, f):
        fs = self.factor_space
        idx = {name: i for i, name in enumerate(fs.names)}

        def col(name, default_pos):
            return f[:, idx.get(name, default_pos)]

        shape = col("shape", 0) % len(SHAPES)
        scale = self._scales[col("scale", 1)]
        angle = self._angles[col("orientation", 2)]
        cx = self._pos_x[col("pos_x", 3)] + self._offset[0]
        cy = self._pos_y[col("pos_y", 4)] + self._offset[1]
        return shape, scale, angle, cx, cy

    def render_batch(self, factors) -> np.ndarray:
        """Render an (n, K) factor array into an (n, H, W) float32 array in [0, 1]."""
        f = self.check_factors(factors)
        shape, scale, angle, cx, cy = self._params(f)
        size = self.spec.image_size
        radius = (_BASE_RADIUS * scale)[:, None, None]
        dx = self._grid_x[None] - cx[:, None, None]
        dy = self._grid_y[None] - cy[:, None, None]
        c, s = np.cos(angle)[:, None, None], np.sin(angle)[:, None, None]
        # Coordinates in the shape's own frame, in units of its radius.
        u = (c * dx + s * dy) / radius
        v = (-s * dx + c * dy) / radius
        rho = np.hypot(u, v)
        theta = np.arctan2(v, u)
        sdf = np.empty_like(u)
        for k, name in enumerate(SHAPES):
            m = shape == k
            if not m.any():
                continue
            if name == "ellipse":
                sdf[m] = rho[m] - _ellipse_radius(theta[m])
            elif name == "triangle":
                sdf[m] = _triangle_sdf(u[m], v[m])
            else:
                sdf[m] = rho[m] - _heart_radius(theta[m])
        # One-pixel anti-aliasing ramp across the boundary.
        sdf_pixels = sdf * radius * size
        img = np.clip(0.5 - sdf_pixels, 0.0, 1.0)
        return img.astype(np.float32)

    def render(self, factors) -> np.ndarray:
        f = self.check_factors(factors)
        if f.shape[0] != 1:
            raise DomainError("render takes a single factor tuple")
        return self.render_batch(f)[0]

    def sample_factors(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise DomainError("n must be >= 1")
        card = np.asarray(self.cardinalities)
        return rng.integers(0, card, size=(n, len(card)), dtype=np.int64)

    def sample_fixed_factor(self, k: int, n: int, rng: np.random.Generator):
        """Sample n tuples sharing one uniformly chosen value of factor k."""
        if not 0 <= k < self.num_factors:
            raise DomainError(f"factor index {k} out of range [0, {self.num_factors})")
        value = int(rng.integers(self.cardinalities[k]))
        f = self.sample_factors(n, rng)
        f[:, k] = value
        return value, f

    def all_factors(self) -> np.ndarray:
        """Every configuration of the factor grid, in lexicographic order."""
        grids = np.meshgrid(*[np.arange(c) for c in self.cardinalities], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)


def build_dataset(spec: DatasetSpec) -> GroundTruthDataset:
    if spec.image_size not in VALID_IMAGE_SIZES:
        raise ConfigurationError(f"image_size must be one of {VALID_IMAGE_SIZES}, got {spec.image_size}")
    if not isinstance(spec.factor_space, FactorSpace):
        raise ConfigurationError("factor_space must be a FactorSpace")
    return GroundTruthDataset(spec)


def dump_dataset(dataset: GroundTruthDataset, out_dir, factors=None) -> List[str]:
    """Write PNGs named by factor tuple plus a factors.csv index."""
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    if factors is None:
        factors = dataset.all_factors()
    factors = dataset.check_factors(factors)
    names = []
    rows = []
    for start in range(0, len(factors), 1024):
        chunk = factors[start:start + 1024]
        images = dataset.render_batch(chunk)
        for f, img in zip(chunk, images):
            name = "_".join(str(int(v)) for v in f) + ".png"
            Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(
                os.path.join(out_dir, name))
            names.append(name)
            rows.append([name] + [int(v) for v in f])
    with open(os.path.join(out_dir, "factors.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename"] + [f"f{i}" for i in range(dataset.num_factors)])
        w.writerows(rows)
    return names
