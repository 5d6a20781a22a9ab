"""Slow, loop-based reference implementations used as test oracles."""

import math

import numpy as np


def quat_matrix(q):
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def camera_axes(cam):
    f = cam.look_at - cam.eye
    f = f / np.linalg.norm(f)
    r = np.cross(f, cam.up)
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    return r, d, f


def splat_alpha(cloud, i, cam, px, py, clamp=0.99, reg=0.3):
    """Alpha of Gaussian i at image point (px, py), or None when behind the camera."""
    r, d, f = camera_axes(cam)
    rel = cloud.positions[i] - cam.eye
    tx, ty, tz = rel @ r, rel @ d, rel @ f
    if tz <= 0.01:
        return None, tz
    R = quat_matrix(cloud.rotations[i])
    S = np.diag(cloud.scales[i])
    cov = R @ S @ S @ R.T
    W = np.stack([r, d, f])
    V = W @ cov @ W.T
    fo = cam.focal
    J = np.array([[fo / tz, 0, -fo * tx / tz**2], [0, fo / tz, -fo * ty / tz**2]])
    c2 = J @ V @ J.T + reg * np.eye(2)
    mx = fo * tx / tz + cam.width / 2
    my = fo * ty / tz + cam.height / 2
    dx = np.array([px - mx, py - my])
    power = -0.5 * dx @ np.linalg.inv(c2) @ dx
    return min(clamp, cloud.opacities[i] * math.exp(power)), tz


def composite_weights(cloud, cam):
    """(N, H, W) compositing weights by a per-pixel loop over depth-sorted Gaussians."""
    n = len(cloud)
    out = np.zeros((n, cam.height, cam.width))
    for row in range(cam.height):
        for col in range(cam.width):
            entries = []
            for i in range(n):
                a, z = splat_alpha(cloud, i, cam, col + 0.5, row + 0.5)
                if a is not None:
                    entries.append((z, i, a))
            entries.sort(key=lambda e: (e[0], e[1]))
            T = 1.0
            for _, i, a in entries:
                out[i, row, col] = a * T
                T *= 1 - a
    return out


def raw_accumulation(cloud, cams, maps):
    """w_i = sum over views, pixels of composite weight times map value, by explicit loops."""
    w = np.zeros(len(cloud))
    for cam, m in zip(cams, maps):
        comp = composite_weights(cloud, cam)
        for row in range(cam.height):
            for col in range(cam.width):
                for i in range(len(cloud)):
                    w[i] += comp[i, row, col] * m[row, col]
    return w


def kl_direct(P, Q):
    total = 0.0
    for p, q in zip(P.ravel(), Q.ravel()):
        if p > 0:
            total += p * math.log(p / q)
    return total
