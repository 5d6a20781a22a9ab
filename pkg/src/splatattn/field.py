"""Per-Gaussian attention field: back-projection of 2D attention maps,
re-rendering, the KL guidance loss, and lifecycle synchronization."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Iterable, Union

import numpy as np

from .render import DEFAULT_CONFIG, RenderConfig, RenderOutput, render
from .scene import Camera, GaussianCloud, clone_gaussian, prune_gaussians, split_gaussian

EPS_VIS = 1e-6
EPS_KL = 1e-8


class SyncError(RuntimeError):
    """The attention field and the cloud disagree on the number of Gaussians."""


class DegenerateMapError(ValueError):
    pass


@dataclass
class AttentionMap2D:
    values: np.ndarray
    token_id: int = 0
    view_id: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"attention map must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attention map contains non-finite values")
        if np.any(self.values < 0):
            raise ValueError("attention map values must be nonnegative")

    @property
    def resolution(self) -> tuple:
        return self.values.shape


def _as_grid(m) -> np.ndarray:
    return m.values if isinstance(m, AttentionMap2D) else np.asarray(m, dtype=np.float64)


def bilinear_upsample(m, target: tuple) -> np.ndarray:
    """Corner-aligned bilinear resampling of a 2-D grid to ``target = (H, W)``.

    Corner samples of the source map onto corner samples of the target. A
    source axis of length 1 is broadcast.
    """
    grid = _as_grid(m)
    H, W = int(target[0]), int(target[1])
    if H < 1 or W < 1:
        raise ValueError(f"target resolution must be at least 1x1, got {target}")
    h, w = grid.shape
    if (h, w) == (H, W):
        return grid.copy()

    def axis(n_src, n_dst):
        if n_dst == 1 or n_src == 1:
            pos = np.zeros(n_dst)
        else:
            pos = np.arange(n_dst) * (n_src - 1) / (n_dst - 1)
        lo = np.clip(np.floor(pos).astype(int), 0, max(n_src - 2, 0))
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, H)
    c0, c1, fc = axis(w, W)
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bot = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


@dataclass
class AttentionField:
    """Accumulated attention per Gaussian.

    ``raw`` is the plain sum over views and pixels of composite weight times
    upsampled attention; ``visibility`` is the summed composite weight. In
    the default normalized mode ``weights`` is their ratio. ``raw_mode``
    exposes the raw sums as weights instead.
    """

    raw: np.ndarray
    visibility: np.ndarray
    views_accumulated: int = 0
    raw_mode: bool = False
    eps_vis: float = EPS_VIS

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64).copy()
        self.visibility = np.asarray(self.visibility, dtype=np.float64).copy()
        if self.raw.shape != self.visibility.shape or self.raw.ndim != 1:
            raise ValueError("raw and visibility must be 1-D arrays of equal length")

    @classmethod
    def empty(cls, n: int, raw_mode: bool = False, eps_vis: float = EPS_VIS) -> "AttentionField":
        return cls(np.zeros(n), np.zeros(n), 0, raw_mode, eps_vis)

    @classmethod
    def from_weights(cls, weights, visibility=None, raw_mode: bool = False) -> "AttentionField":
        """Field whose normalized weights equal ``weights`` (visibility defaults to 1)."""
        w = np.asarray(weights, dtype=np.float64)
        vis = np.ones_like(w) if visibility is None else np.asarray(visibility, dtype=np.float64)
        return cls(w * np.maximum(vis, EPS_VIS), vis, 0, raw_mode)

    def __len__(self) -> int:
        return self.raw.size

    @property
    def weights(self) -> np.ndarray:
        if self.raw_mode:
            return self.raw.copy()
        return self.raw / np.maximum(self.visibility, self.eps_vis)

    def copy(self) -> "AttentionField":
        return AttentionField(self.raw, self.visibility, self.views_accumulated, self.raw_mode, self.eps_vis)

    def apply_to(self, cloud: GaussianCloud) -> GaussianCloud:
        """Cloud carrying this field's weights and visibility."""
        check_sync(self, cloud)
        out = cloud.with_attention(self.weights)
        out.visibility = self.visibility.copy()
        return out


def check_sync(fld: AttentionField, cloud: GaussianCloud) -> None:
    if len(fld) != len(cloud):
        raise SyncError(f"attention field has {len(fld)} entries but cloud has {len(cloud)} Gaussians")


def view_contribution(cloud: GaussianCloud, camera: Camera, amap, out: RenderOutput | None = None,
                      config: RenderConfig = DEFAULT_CONFIG) -> tuple:
    """Per-Gaussian ``(raw, visibility)`` increments from one view."""
    if out is None:
        out = render(cloud, camera, "depth", config)
    grid = bilinear_upsample(amap, (camera.height, camera.width))
    comp = out.composite.reshape(len(cloud), -1)
    return comp @ grid.ravel(), comp.sum(axis=1)


def accumulate_view(fld: AttentionField, cloud: GaussianCloud, camera: Camera, amap,
                    out: RenderOutput | None = None, config: RenderConfig = DEFAULT_CONFIG) -> AttentionField:
    """Add one view's attention map into the field; returns a new field."""
    check_sync(fld, cloud)
    d_raw, d_vis = view_contribution(cloud, camera, amap, out, config)
    return merge_contributions(fld, [(d_raw, d_vis)])


def merge_contributions(fld: AttentionField, parts: Iterable[tuple]) -> AttentionField:
    """Fold per-view ``(raw, visibility)`` increments into the field in the given order."""
    new = fld.copy()
    for d_raw, d_vis in parts:
        new.raw = new.raw + d_raw
        new.visibility = new.visibility + d_vis
        new.views_accumulated += 1
    return new


def render_attention(fld: AttentionField, cloud: GaussianCloud, camera: Camera, view_id: int = 0,
                     config: RenderConfig = DEFAULT_CONFIG) -> AttentionMap2D:
    check_sync(fld, cloud)
    out = render(cloud.with_attention(fld.weights), camera, "attn", config)
    return AttentionMap2D(out.attn_image, view_id=view_id)


@dataclass
class KLResult:
    loss: float
    grad_observed: np.ndarray
    grad_rendered: np.ndarray
    P: np.ndarray
    Q: np.ndarray


def softmax_pixels(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()


def attn_kl_loss(rendered, observed, eps_kl: float = EPS_KL) -> KLResult:
    """``KL(softmax(rendered) || normalize(observed))`` over pixels.

    The observed map is resampled to the rendered resolution when needed,
    normalized to sum to one, floored at ``eps_kl`` and renormalized.
    ``grad_observed`` is the derivative w.r.t. the (resampled) observed
    values; ``grad_rendered`` w.r.t. the rendered logits.
    """
    r = _as_grid(rendered)
    o = _as_grid(observed)
    if o.shape != r.shape:
        o = bilinear_upsample(o, r.shape)
    s = o.sum()
    if not s > 0:
        raise DegenerateMapError("degenerate attention map: observed map has zero mass")
    P = softmax_pixels(r)
    q0 = o / s
    floored = q0 > eps_kl
    q1 = np.where(floored, q0, eps_kl)
    Z = q1.sum()
    Q = q1 / Z
    with np.errstate(divide="ignore", invalid="ignore"):
        logP = np.where(P > 0, np.log(P), 0.0)
    logQ = np.log(Q)
    loss = float(np.sum(P * (logP - logQ)))
    # dL/dq1 = -P/q1 + 1/Z; q1 follows q0 only above the floor
    g_q0 = np.where(floored, -P / q1 + 1.0 / Z, 0.0)
    grad_obs = (g_q0 - np.sum(g_q0 * q0)) / s
    grad_r = P * (logP - logQ - loss)
    return KLResult(max(loss, 0.0), grad_obs, grad_r, P, Q)


@dataclass(frozen=True)
class Clone:
    index: int
    cloud_size: int


@dataclass(frozen=True)
class Split:
    index: int
    cloud_size: int


@dataclass(frozen=True)
class Prune:
    keep: tuple  # boolean per Gaussian
    cloud_size: int

    @classmethod
    def below(cls, cloud: GaussianCloud, threshold: float) -> "Prune":
        return cls(tuple(bool(k) for k in cloud.opacities >= threshold), len(cloud))


Event = Union[Clone, Split, Prune]


def sync_resize(fld: AttentionField, event: Event) -> AttentionField:
    """Resize the field to follow a clone, split or prune.

    Each event records the cloud size it was issued against; applying it to
    a field of another length is rejected as stale.
    """
    n = len(fld)
    if event.cloud_size != n:
        raise SyncError(f"stale event {event!r}: field currently has {n} entries")
    new = fld.copy()
    if isinstance(event, (Clone, Split)):
        if not 0 <= event.index < n:
            raise IndexError(f"event index {event.index} out of range for field of size {n}")
        new.raw = np.append(new.raw, new.raw[event.index])
        new.visibility = np.append(new.visibility, new.visibility[event.index])
    elif isinstance(event, Prune):
        keep = np.asarray(event.keep, dtype=bool)
        if keep.size != n:
            raise SyncError(f"prune mask of length {keep.size} does not match field of size {n}")
        new.raw = new.raw[keep]
        new.visibility = new.visibility[keep]
    else:
        raise TypeError(f"unknown event {event!r}")
    return new


def apply_event(cloud: GaussianCloud, fld: AttentionField, event: Event) -> tuple:
    """Apply a lifecycle event to the cloud and the field together."""
    check_sync(fld, cloud)
    if isinstance(event, Clone):
        new_cloud = clone_gaussian(cloud, event.index)
    elif isinstance(event, Split):
        new_cloud = split_gaussian(cloud, event.index)
    elif isinstance(event, Prune):
        new_cloud = cloud.select(np.asarray(event.keep, dtype=bool))
    else:
        raise TypeError(f"unknown event {event!r}")
    new_fld = sync_resize(fld, event)
    check_sync(new_fld, new_cloud)
    return new_cloud, new_fld


def prune_with_field(cloud: GaussianCloud, fld: AttentionField, threshold: float) -> tuple:
    prune_gaussians(cloud, threshold)  # validates the threshold
    return apply_event(cloud, fld, Prune.below(cloud, threshold))
