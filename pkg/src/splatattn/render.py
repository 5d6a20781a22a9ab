"""Dense, differentiable alpha-compositing splat renderer.

Every visible Gaussian is evaluated at every pixel, so the renderer is exact
(no tiling, no cutoff by default) and the analytic gradients can be checked
against central differences. Compositing is front to back with depth
ascending and ties broken by Gaussian index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .scene import Camera, GaussianCloud, covariance_from_rs

CHANNELS = ("color", "attn", "depth", "all")
PARAM_GROUPS = ("position", "opacity", "color", "attn_weight")


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    alpha_clamp: float = 0.99
    cov2d_reg: float = 0.3
    eps_vis: float = 1e-6
    near: float = 0.01
    background: tuple = (0.0, 0.0, 0.0)
    # None evaluates every Gaussian everywhere; a float zeroes alpha outside that many sigmas.
    cutoff_sigma: float | None = None


DEFAULT_CONFIG = RenderConfig()


@dataclass
class Projection:
    """Screen-space footprint of the visible Gaussians, in original index order."""

    index: np.ndarray  # (n,) original indices of Gaussians in front of the near plane
    t_cam: np.ndarray  # (n, 3) camera-space means
    mean2d: np.ndarray  # (n, 2)
    cov2d: np.ndarray  # (n, 2, 2), regularized
    V: np.ndarray  # (n, 3, 3) camera-space 3D covariance
    depth: np.ndarray  # (n,)


def project_cloud(cloud: GaussianCloud, camera: Camera, config: RenderConfig = DEFAULT_CONFIG) -> Projection:
    W = camera.rotation()
    t = (cloud.positions - camera.eye) @ W.T
    keep = np.flatnonzero(t[:, 2] > config.near)
    t = t[keep]
    f = camera.focal
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    mean2d = np.stack([f * tx / tz, f * ty / tz], axis=1) + camera.principal_point

    cov3 = covariance_from_rs(cloud.rotations[keep], cloud.scales[keep]) if keep.size else np.zeros((0, 3, 3))
    V = W @ cov3 @ W.T
    J = np.zeros((len(keep), 2, 3))
    J[:, 0, 0] = f / tz
    J[:, 0, 2] = -f * tx / tz**2
    J[:, 1, 1] = f / tz
    J[:, 1, 2] = -f * ty / tz**2
    cov2d = J @ V @ np.swapaxes(J, 1, 2) + config.cov2d_reg * np.eye(2)
    return Projection(keep, t, mean2d, cov2d, V, tz.copy())


def project(gaussian_cloud: GaussianCloud, index: int, camera: Camera, config: RenderConfig = DEFAULT_CONFIG):
    """Project one Gaussian of a cloud.

    Returns ``(mean2d, cov2d, depth)`` or ``None`` when the Gaussian sits
    behind the near plane (culled).
    """
    proj = project_cloud(gaussian_cloud.select([index]), camera, config)
    if proj.index.size == 0:
        return None
    return proj.mean2d[0], proj.cov2d[0], float(proj.depth[0])


@dataclass
class RenderOutput:
    """Result of one render.

    ``composite`` holds the per-pixel compositing weight ``alpha_i * T_i`` of
    every Gaussian in original index order, shape (N, H, W); culled
    Gaussians get all-zero rows. ``order`` lists the visible Gaussians front
    to back.
    """

    color_image: np.ndarray
    depth_image: np.ndarray
    attn_image: np.ndarray
    alpha_image: np.ndarray
    composite: np.ndarray
    order: np.ndarray
    camera: Camera = None
    config: RenderConfig = DEFAULT_CONFIG
    _cache: dict = field(default=None, repr=False)

    @property
    def shape(self) -> tuple:
        return self.depth_image.shape

    def contrib(self, row: int, col: int) -> list:
        """Front-to-back ``(gaussian_index, composite_weight)`` pairs at one pixel."""
        return [(int(i), float(self.composite[i, row, col])) for i in self.order if self.composite[i, row, col] > 0]

    def contrib_json(self) -> dict:
        h, w = self.shape
        return {
            "height": h,
            "width": w,
            "order": self.order.tolist(),
            "pixels": {f"{r},{c}": self.contrib(r, c) for r in range(h) for c in range(w)},
        }


def _check_finite(cloud: GaussianCloud) -> None:
    arrays = {
        "position": cloud.positions, "rotation": cloud.rotations, "scale": cloud.scales,
        "opacity": cloud.opacities[:, None], "color": cloud.colors, "attn_weight": cloud.attn_weights[:, None],
    }
    bad = {}
    for name, arr in arrays.items():
        rows = np.flatnonzero(~np.all(np.isfinite(arr), axis=1))
        for r in rows:
            bad.setdefault(int(r), []).append(name)
    if bad:
        detail = "; ".join(f"gaussian {i}: {', '.join(v)}" for i, v in sorted(bad.items()))
        raise RenderError(f"non-finite Gaussian parameters ({detail})")


def render(
    cloud: GaussianCloud,
    camera: Camera,
    channel: str = "all",
    config: RenderConfig = DEFAULT_CONFIG,
) -> RenderOutput:
    """Composite the cloud front to back at ``camera``.

    Per pixel ``alpha_i = min(opacity_i * exp(-0.5 d^T cov2d^-1 d), clamp)``
    and ``w_i = alpha_i * prod_{j<i} (1 - alpha_j)``. Color adds the
    background weighted by the final transmittance; the attention and depth
    channels are visibility-normalized weighted averages.
    """
    if channel not in CHANNELS:
        raise ValueError(f"unknown channel {channel!r}; expected one of {CHANNELS}")
    _check_finite(cloud)
    H, W = camera.height, camera.width
    N = len(cloud)
    P = H * W
    proj = project_cloud(cloud, camera, config)
    # stable argsort on depth gives the index tie rule
    sort = np.argsort(proj.depth, kind="stable")
    order = proj.index[sort]
    n = order.size

    pix = camera.pixel_grid().reshape(P, 2)
    mean2d = proj.mean2d[sort]
    cov2d = proj.cov2d[sort]
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)

    dx = pix[None, :, 0] - mean2d[:, 0:1]
    dy = pix[None, :, 1] - mean2d[:, 1:2]
    power = -0.5 * (conic[:, 0:1] * dx * dx + 2.0 * conic[:, 1:2] * dx * dy + conic[:, 2:3] * dy * dy)
    gauss = np.exp(power)
    opac = cloud.opacities[order][:, None]
    raw = opac * gauss
    clamped = raw > config.alpha_clamp
    alpha = np.minimum(raw, config.alpha_clamp)
    if config.cutoff_sigma is not None:
        outside = power < -0.5 * config.cutoff_sigma**2
        alpha = np.where(outside, 0.0, alpha)
        clamped = clamped | outside

    one_minus = 1.0 - alpha
    if n:
        cum = np.cumprod(one_minus, axis=0)
        T = np.vstack([np.ones((1, P)), cum[:-1]])
        T_final = cum[-1]
    else:
        T = np.zeros((0, P))
        T_final = np.ones(P)
    w = alpha * T
    mass = w.sum(axis=0)
    denom = np.maximum(mass, config.eps_vis)

    bg = np.asarray(config.background, dtype=np.float64)
    colors = cloud.colors[order]
    attn = cloud.attn_weights[order]
    depth = proj.depth[sort]

    color_img = np.zeros((P, 3))
    attn_img = np.zeros(P)
    depth_img = np.zeros(P)
    if channel in ("color", "all"):
        color_img = w.T @ colors + T_final[:, None] * bg[None, :]
    if channel in ("attn", "all"):
        attn_img = (w * attn[:, None]).sum(axis=0) / denom
    if channel in ("depth", "all"):
        depth_img = (w * depth[:, None]).sum(axis=0) / denom

    composite = np.zeros((N, P))
    composite[order] = w
    cache = dict(
        order=order, sort=sort, proj=proj, pix=pix, conic=conic, dx=dx, dy=dy, gauss=gauss,
        alpha=alpha, clamped=clamped, T=T, T_final=T_final, w=w, mass=mass, denom=denom,
        colors=colors, attn=attn, attn_img=attn_img,
    )
    return RenderOutput(
        color_image=color_img.reshape(H, W, 3),
        depth_image=depth_img.reshape(H, W),
        attn_image=attn_img.reshape(H, W),
        alpha_image=mass.reshape(H, W),
        composite=composite.reshape(N, H, W),
        order=order,
        camera=camera,
        config=config,
        _cache=cache,
    )


@dataclass
class Gradients:
    position: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    attn_weight: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "Gradients":
        return cls(np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)), np.zeros(n))

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(
            self.position + other.position, self.opacity + other.opacity,
            self.color + other.color, self.attn_weight + other.attn_weight,
        )

    def scaled(self, s: float) -> "Gradients":
        return Gradients(self.position * s, self.opacity * s, self.color * s, self.attn_weight * s)

    def group(self, name: str) -> np.ndarray:
        return getattr(self, name)


def _suffix_exclusive(x: np.ndarray) -> np.ndarray:
    """Sum over rows strictly after each row (axis 0)."""
    return x.sum(axis=0, keepdims=True) - np.cumsum(x, axis=0)


def render_backward(
    cloud: GaussianCloud,
    camera: Camera,
    out: RenderOutput,
    grad_color: np.ndarray | None = None,
    grad_attn: np.ndarray | None = None,
) -> Gradients:
    """Gradients of a scalar loss w.r.t. Gaussian parameters.

    Args:
        cloud: the cloud that produced ``out``.
        camera: the camera that produced ``out``.
        out: forward result of ``render(cloud, camera)``.
        grad_color: (H, W, 3) upstream gradient on the color image, or None.
        grad_attn: (H, W) upstream gradient on the attention image, or None.

    Rotation and scale are not differentiated.
    """
    H, W = camera.height, camera.width
    P = H * W
    N = len(cloud)
    if grad_color is not None and np.shape(grad_color) != (H, W, 3):
        raise ValueError(f"grad_color shape {np.shape(grad_color)} does not match image ({H}, {W}, 3)")
    if grad_attn is not None and np.shape(grad_attn) != (H, W):
        raise ValueError(f"grad_attn shape {np.shape(grad_attn)} does not match image ({H}, {W})")
    if out._cache is None or out.composite.shape[0] != N:
        raise ValueError("forward render does not match this cloud")
    c = out._cache
    grads = Gradients.zeros(N)
    order = c["order"]
    n = order.size
    if n == 0:
        return grads

    alpha, T, T_final, w = c["alpha"], c["T"], c["T_final"], c["w"]
    inv_om = 1.0 / (1.0 - alpha)
    g_alpha = np.zeros((n, P))

    if grad_color is not None:
        gC = np.asarray(grad_color, dtype=np.float64).reshape(P, 3)
        grads.color[order] = w @ gC
        cg = c["colors"] @ gC.T  # (n, P): c_i . gC(p)
        bg = np.asarray(out.config.background, dtype=np.float64)
        tail = _suffix_exclusive(w * cg) + (T_final * (gC @ bg))[None, :]
        g_alpha += T * cg - tail * inv_om

    if grad_attn is not None:
        gA = np.asarray(grad_attn, dtype=np.float64).reshape(P)
        mass, denom = c["mass"], c["denom"]
        a = c["attn"][:, None]
        grads.attn_weight[order] = (w * (gA / denom)[None, :]).sum(axis=1)
        dU = T * a - _suffix_exclusive(w * a) * inv_om
        above = mass > out.config.eps_vis
        A = c["attn_img"]
        dM = T_final[None, :] * inv_om
        dA = np.where(above[None, :], (dU - A[None, :] * dM) / denom[None, :], dU / denom[None, :])
        g_alpha += gA[None, :] * dA

    g_alpha = np.where(c["clamped"], 0.0, g_alpha)
    gauss = c["gauss"]
    grads.opacity[order] = (g_alpha * gauss).sum(axis=1)

    # d alpha / d power = alpha on the unclamped branch
    g_pow = g_alpha * alpha
    dx, dy, conic = c["dx"], c["dy"], c["conic"]
    ka, kb, kc = conic[:, 0:1], conic[:, 1:2], conic[:, 2:3]
    g_mean = np.stack([(g_pow * (ka * dx + kb * dy)).sum(1), (g_pow * (kb * dx + kc * dy)).sum(1)], axis=1)
    g_ka = (g_pow * (-0.5 * dx * dx)).sum(1)
    g_kb = (g_pow * (-dx * dy)).sum(1)  # scalar off-diagonal parameter appears twice
    g_kc = (g_pow * (-0.5 * dy * dy)).sum(1)

    K = np.zeros((n, 2, 2))
    K[:, 0, 0], K[:, 0, 1], K[:, 1, 0], K[:, 1, 1] = conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]
    Gk = np.zeros((n, 2, 2))
    Gk[:, 0, 0], Gk[:, 0, 1], Gk[:, 1, 0], Gk[:, 1, 1] = g_ka, 0.5 * g_kb, 0.5 * g_kb, g_kc
    G_cov = -K @ Gk @ K  # symmetric matrix gradient w.r.t. cov2d

    proj = c["proj"]
    sort = c["sort"]
    t = proj.t_cam[sort]
    V = proj.V[sort]
    f = camera.focal
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = f / tz
    J[:, 0, 2] = -f * tx / tz**2
    J[:, 1, 1] = f / tz
    J[:, 1, 2] = -f * ty / tz**2
    gJ = 2.0 * G_cov @ J @ V

    g_t = np.zeros((n, 3))
    g_t[:, 0] = g_mean[:, 0] * f / tz + gJ[:, 0, 2] * (-f / tz**2)
    g_t[:, 1] = g_mean[:, 1] * f / tz + gJ[:, 1, 2] * (-f / tz**2)
    g_t[:, 2] = (
        g_mean[:, 0] * (-f * tx / tz**2)
        + g_mean[:, 1] * (-f * ty / tz**2)
        + (gJ[:, 0, 0] + gJ[:, 1, 1]) * (-f / tz**2)
        + gJ[:, 0, 2] * (2 * f * tx / tz**3)
        + gJ[:, 1, 2] * (2 * f * ty / tz**3)
    )
    grads.position[order] = g_t @ camera.rotation()
    return grads


LossFn = Callable[[RenderOutput], tuple]


def l2_image_loss(target_color: np.ndarray | None = None, target_attn: np.ndarray | None = None) -> LossFn:
    """Mean squared error on color and/or attention, in ``finite_diff_check`` form."""

    def loss_fn(out: RenderOutput):
        loss = 0.0
        g_c = g_a = None
        if target_color is not None:
            r = out.color_image - target_color
            loss += float(np.sum(r * r)) / r[..., 0].size
            g_c = 2.0 * r / r[..., 0].size
        if target_attn is not None:
            r = out.attn_image - target_attn
            loss += float(np.sum(r * r)) / r.size
            g_a = 2.0 * r / r.size
        return loss, g_c, g_a

    return loss_fn


def _perturbed(cloud: GaussianCloud, group: str, i: int, j: int, delta: float) -> GaussianCloud:
    c = cloud.copy()
    arr = {"position": c.positions, "opacity": c.opacities, "color": c.colors, "attn_weight": c.attn_weights}[group]
    if arr.ndim == 1:
        arr[i] += delta
    else:
        arr[i, j] += delta
    return c


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(
    cloud: GaussianCloud,
    camera: Camera,
    loss_fn: LossFn,
    h: float = 1e-4,
    groups=PARAM_GROUPS,
    floor: float = 1e-8,
    config: RenderConfig = DEFAULT_CONFIG,
) -> dict:
    """Compare analytic gradients with central differences.

    ``loss_fn(out)`` returns ``(loss, grad_color or None, grad_attn or None)``.
    The report maps each parameter group to its maximum relative error
    (``|a - n| / max(|a|, |n|, floor)``), the worst coordinate, and both
    gradient arrays.
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError(f"finite-difference step must lie in (0, 1e-2], got {h}")
    out = render(cloud, camera, "all", config)
    _, g_c, g_a = loss_fn(out)
    analytic = render_backward(cloud, camera, out, g_c, g_a)

    report = {}
    for group in groups:
        a = analytic.group(group)
        num = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            i = idx[0]
            j = idx[1] if len(idx) > 1 else 0
            lp = loss_fn(render(_perturbed(cloud, group, i, j, h), camera, "all", config))[0]
            lm = loss_fn(render(_perturbed(cloud, group, i, j, -h), camera, "all", config))[0]
            num[idx] = (lp - lm) / (2.0 * h)
        err = relative_error(a, num, floor)
        worst = tuple(int(k) for k in np.unravel_index(np.argmax(err), err.shape)) if err.size else ()
        report[group] = {
            "max_rel_err": float(err.max()) if err.size else 0.0,
            "worst": worst,
            "analytic": a,
            "numeric": num,
        }
    return report
