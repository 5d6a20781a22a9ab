"""Gaussian cloud, cameras, view rings and the clone/split/prune lifecycle.

The cloud is stored as a struct of arrays so the renderer can vectorize over
Gaussians. Every lifecycle operation returns a new cloud; inputs are never
mutated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np


class InvalidParameterError(ValueError):
    pass


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for a unit quaternion ``(w, x, y, z)``. Batched over leading axes."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def covariance_from_rs(rotation, scale) -> np.ndarray:
    """Covariance ``R S S^T R^T`` from a unit quaternion and per-axis scales.

    Works on a single Gaussian (shapes (4,), (3,)) or a batch ((N, 4), (N, 3)).
    """
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
        raise InvalidParameterError(f"scale components must be positive, got {scale.tolist()}")
    R = quat_to_rotmat(rotation)
    RS = R * scale[..., None, :]
    return RS @ np.swapaxes(RS, -1, -2)


@dataclass(frozen=True)
class Gaussian3D:
    position: tuple
    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    scale: tuple = (0.1, 0.1, 0.1)
    opacity: float = 0.5
    color: tuple = (0.5, 0.5, 0.5)
    attn_weight: float = 0.0
    visibility: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise InvalidParameterError(f"quaternion must be unit length, |q|={np.linalg.norm(q)}")
        if any(s <= 0 for s in self.scale):
            raise InvalidParameterError(f"scale must be positive, got {self.scale}")
        if not 0.0 <= self.opacity <= 1.0:
            raise InvalidParameterError(f"opacity must lie in [0, 1], got {self.opacity}")
        if any(not 0.0 <= c <= 1.0 for c in self.color):
            raise InvalidParameterError(f"color must lie in [0, 1]^3, got {self.color}")
        if self.attn_weight < 0 or self.visibility < 0:
            raise InvalidParameterError("attn_weight and visibility must be nonnegative")


@dataclass
class GaussianCloud:
    """N Gaussians as parallel arrays.

    Attributes:
        positions: (N, 3) world-space means.
        rotations: (N, 4) unit quaternions, ``(w, x, y, z)``.
        scales: (N, 3) positive per-axis standard deviations.
        opacities: (N,) values in [0, 1].
        colors: (N, 3) degree-0 RGB in [0, 1].
        attn_weights: (N,) accumulated attention weight per Gaussian.
        visibility: (N,) accumulated compositing mass per Gaussian.
    """

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    attn_weights: np.ndarray = None
    visibility: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        if self.attn_weights is None:
            self.attn_weights = np.zeros(n)
        if self.visibility is None:
            self.visibility = np.zeros(n)
        self.attn_weights = np.asarray(self.attn_weights, dtype=np.float64).reshape(n)
        self.visibility = np.asarray(self.visibility, dtype=np.float64).reshape(n)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            position=tuple(self.positions[i]),
            rotation=tuple(self.rotations[i]),
            scale=tuple(self.scales[i]),
            opacity=float(self.opacities[i]),
            color=tuple(self.colors[i]),
            attn_weight=float(self.attn_weights[i]),
            visibility=float(self.visibility[i]),
        )

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian3D]) -> "GaussianCloud":
        if not gaussians:
            return cls.empty()
        return cls(
            positions=[g.position for g in gaussians],
            rotations=[g.rotation for g in gaussians],
            scales=[g.scale for g in gaussians],
            opacities=[g.opacity for g in gaussians],
            colors=[g.color for g in gaussians],
            attn_weights=[g.attn_weight for g in gaussians],
            visibility=[g.visibility for g in gaussians],
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(), self.rotations.copy(), self.scales.copy(),
            self.opacities.copy(), self.colors.copy(),
            self.attn_weights.copy(), self.visibility.copy(),
        )

    def select(self, idx) -> "GaussianCloud":
        """Sub-cloud by integer index array or boolean mask."""
        return GaussianCloud(
            self.positions[idx], self.rotations[idx], self.scales[idx],
            self.opacities[idx], self.colors[idx],
            self.attn_weights[idx], self.visibility[idx],
        )

    def with_attention(self, weights: np.ndarray) -> "GaussianCloud":
        out = self.copy()
        out.attn_weights = np.asarray(weights, dtype=np.float64).reshape(len(self)).copy()
        return out

    def covariances(self) -> np.ndarray:
        return covariance_from_rs(self.rotations, self.scales)

    def validate(self) -> None:
        norms = np.linalg.norm(self.rotations, axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-9)
        if bad.size:
            raise InvalidParameterError(f"non-unit quaternions at indices {bad.tolist()}")
        if np.any(self.scales <= 0):
            raise InvalidParameterError("scale components must be positive")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise InvalidParameterError("opacity outside [0, 1]")
        if np.any(self.attn_weights < 0) or np.any(self.visibility < 0):
            raise InvalidParameterError("attention accumulators must be nonnegative")


def concat(a: GaussianCloud, b: GaussianCloud) -> GaussianCloud:
    return GaussianCloud(
        np.concatenate([a.positions, b.positions]),
        np.concatenate([a.rotations, b.rotations]),
        np.concatenate([a.scales, b.scales]),
        np.concatenate([a.opacities, b.opacities]),
        np.concatenate([a.colors, b.colors]),
        np.concatenate([a.attn_weights, b.attn_weights]),
        np.concatenate([a.visibility, b.visibility]),
    )


def _check_index(cloud: GaussianCloud, index: int) -> int:
    n = len(cloud)
    if not isinstance(index, (int, np.integer)) or not 0 <= index < n:
        raise IndexError(f"Gaussian index {index} out of range for cloud of size {n}")
    return int(index)


def clone_gaussian(cloud: GaussianCloud, index: int) -> GaussianCloud:
    """Append an exact duplicate of Gaussian ``index``, accumulators included."""
    index = _check_index(cloud, index)
    return concat(cloud, cloud.select([index]))


def split_gaussian(cloud: GaussianCloud, index: int) -> GaussianCloud:
    """Replace Gaussian ``index`` by two half-scale children.

    Children sit at ``mean +/- 0.5 * s_max`` along the parent's largest-scale
    axis. The first child takes the parent's slot, the second is appended.
    Both inherit opacity, color and the attention accumulators.
    """
    index = _check_index(cloud, index)
    R = quat_to_rotmat(cloud.rotations[index])
    axis = int(np.argmax(cloud.scales[index]))
    offset = 0.5 * cloud.scales[index, axis] * R[:, axis]

    out = cloud.copy()
    child = cloud.select([index])
    child.scales = child.scales * 0.5
    child.positions = child.positions - offset
    out.positions[index] = cloud.positions[index] + offset
    out.scales[index] = cloud.scales[index] * 0.5
    return concat(out, child)


def prune_gaussians(cloud: GaussianCloud, opacity_threshold: float) -> GaussianCloud:
    """Drop Gaussians whose opacity is strictly below ``opacity_threshold``."""
    if not 0.0 <= opacity_threshold <= 1.0:
        raise InvalidParameterError(f"opacity threshold must lie in [0, 1], got {opacity_threshold}")
    return cloud.select(cloud.opacities >= opacity_threshold)


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise InvalidParameterError("cannot normalize a zero vector")
    return v / n


@dataclass
class Camera:
    """Pinhole camera looking from ``eye`` toward ``look_at``.

    Camera frame: x right, y down, z forward. Pixel ``(row, col)`` has its
    center at image coordinates ``(col + 0.5, row + 0.5)`` and the principal
    point is the image center.
    """

    eye: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    focal: float = 32.0
    resolution: tuple = (32, 32)  # (width, height)
    azimuth: float = 0.0
    elevation: float = 0.0

    def __post_init__(self):
        self.eye = np.asarray(self.eye, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        if np.allclose(self.eye, self.look_at):
            raise InvalidParameterError("camera eye and look_at coincide")
        if self.resolution[0] < 4 or self.resolution[1] < 4:
            raise InvalidParameterError(f"resolution must be at least 4x4, got {self.resolution}")
        if self.focal <= 0:
            raise InvalidParameterError("focal length must be positive")

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([self.width / 2.0, self.height / 2.0])

    def rotation(self) -> np.ndarray:
        """World-to-camera rotation; rows are the right, down and forward axes."""
        forward = _normalize(self.look_at - self.eye)
        right = _normalize(np.cross(forward, self.up))
        down = np.cross(forward, right)
        return np.stack([right, down, forward])

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.eye) @ self.rotation().T

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation() + self.eye

    def intrinsics(self) -> np.ndarray:
        cx, cy = self.principal_point
        return np.array([[self.focal, 0.0, cx], [0.0, self.focal, cy], [0.0, 0.0, 1.0]])

    def pixel_grid(self) -> np.ndarray:
        """(H, W, 2) array of pixel-center image coordinates ``(x, y)``."""
        xs = np.arange(self.width) + 0.5
        ys = np.arange(self.height) + 0.5
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def with_resolution(self, width: int, height: int, focal: float | None = None) -> "Camera":
        return replace(self, resolution=(width, height), focal=self.focal if focal is None else focal)


@dataclass
class ViewSet:
    cameras: list
    is_uniform_ring: bool = False

    def __post_init__(self):
        if not self.cameras:
            raise InvalidParameterError("a view set needs at least one camera")
        az = [c.azimuth for c in self.cameras]
        if any(a < 0 or a >= 2 * math.pi for a in az):
            raise InvalidParameterError("azimuths must lie in [0, 2*pi)")
        if any(b <= a for a, b in zip(az, az[1:])):
            raise InvalidParameterError("azimuths must be strictly increasing")

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, i: int) -> Camera:
        return self.cameras[i]

    def __iter__(self):
        return iter(self.cameras)


def orbit_eye(azimuth: float, elevation: float, radius: float) -> np.ndarray:
    """Eye position on a sphere around the origin; azimuth 0 is the +z axis, y is up."""
    ce = math.cos(elevation)
    return radius * np.array([ce * math.sin(azimuth), math.sin(elevation), ce * math.cos(azimuth)])


def build_view_ring(
    count: int,
    elevation: float = 0.0,
    radius: float = 4.0,
    focal: float = 32.0,
    resolution: tuple = (32, 32),
    azimuth_offset: float = 0.0,
) -> ViewSet:
    """``count`` cameras at azimuths ``offset + 2*pi*k/count``, all looking at the origin."""
    if count < 1:
        raise InvalidParameterError("view ring needs count >= 1")
    if radius <= 0:
        raise InvalidParameterError(f"ring radius must be positive, got {radius}")
    cams = []
    for k in range(count):
        az = (azimuth_offset + 2.0 * math.pi * k / count) % (2.0 * math.pi)
        cams.append(
            Camera(
                eye=orbit_eye(az, elevation, radius),
                look_at=np.zeros(3),
                focal=focal,
                resolution=resolution,
                azimuth=az,
                elevation=elevation,
            )
        )
    cams.sort(key=lambda c: c.azimuth)
    return ViewSet(cams, is_uniform_ring=True)
