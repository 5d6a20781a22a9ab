"""A miniature multi-layer, multi-head cross-attention stack with a token
vocabulary, plus a synthetic view-biased attention source."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .field import AttentionMap2D
from .scene import Camera


@dataclass
class TokenSet:
    tokens: list  # (word, embedding) pairs
    subject_index: int = 0
    view_index: Optional[int] = None

    def __post_init__(self):
        self.tokens = [(str(w), np.asarray(e, dtype=np.float64)) for w, e in self.tokens]
        if not self.tokens:
            raise ValueError("token set is empty")
        dims = {e.shape for _, e in self.tokens}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise ValueError("token embeddings must be vectors of one common length")
        if not all(np.all(np.isfinite(e)) for _, e in self.tokens):
            raise ValueError("token embeddings must be finite")
        if not 0 <= self.subject_index < len(self.tokens):
            raise ValueError(f"subject_index {self.subject_index} out of range")
        if self.view_index is not None and not 0 <= self.view_index < len(self.tokens):
            raise ValueError(f"view_index {self.view_index} out of range")

    def __len__(self):
        return len(self.tokens)

    @property
    def words(self) -> list:
        return [w for w, _ in self.tokens]

    @property
    def embeddings(self) -> np.ndarray:
        return np.stack([e for _, e in self.tokens])

    @property
    def dim(self) -> int:
        return self.tokens[0][1].size


# A hook receives (layer, head, probs (P, T), tokens, shifted logits (P, T)) and
# returns the modified per-pixel token distribution.
Hook = Callable[[int, int, np.ndarray, TokenSet, np.ndarray], np.ndarray]


@dataclass
class CAStack:
    """Cross-attention heads: ``wq[l, h]`` maps query features to the head
    space, ``wk[l, h]`` maps token embeddings to it."""

    wq: np.ndarray  # (L, H, d, d_in)
    wk: np.ndarray  # (L, H, d, d_emb)
    hook: Optional[Hook] = None
    pixel_softmax: bool = False

    def __post_init__(self):
        self.wq = np.asarray(self.wq, dtype=np.float64)
        self.wk = np.asarray(self.wk, dtype=np.float64)
        if self.wq.ndim != 4 or self.wk.ndim != 4 or self.wq.shape[:3] != self.wk.shape[:3]:
            raise ValueError("wq and wk must have shapes (L, H, d, *) with matching L, H, d")
        L, H, d, _ = self.wq.shape
        if L < 2 or H < 2 or d < 4:
            raise ValueError(f"stack needs L >= 2, H >= 2, d >= 4; got L={L}, H={H}, d={d}")
        if not (np.all(np.isfinite(self.wq)) and np.all(np.isfinite(self.wk))):
            raise ValueError("stack projections must be finite")

    @property
    def n_layers(self) -> int:
        return self.wq.shape[0]

    @property
    def n_heads(self) -> int:
        return self.wq.shape[1]

    @property
    def head_dim(self) -> int:
        return self.wq.shape[2]

    @property
    def query_dim(self) -> int:
        return self.wq.shape[3]

    def with_hook(self, hook: Optional[Hook]) -> "CAStack":
        return replace(self, hook=hook)

    def without_hook(self) -> "CAStack":
        return replace(self, hook=None)

    def _check(self, grid: np.ndarray, tokens: TokenSet):
        if grid.ndim != 3 or grid.shape[2] != self.query_dim:
            raise ValueError(f"query grid must be (h, w, {self.query_dim}), got {grid.shape}")
        if tokens.dim != self.wk.shape[3]:
            raise ValueError(f"token embedding dimension {tokens.dim} does not match stack ({self.wk.shape[3]})")

    def logits(self, layer: int, head: int, grid: np.ndarray, tokens: TokenSet) -> np.ndarray:
        """(P, T) scaled dot-product scores ``Q K^T / sqrt(d)``."""
        grid = np.asarray(grid, dtype=np.float64)
        self._check(grid, tokens)
        Q = grid.reshape(-1, grid.shape[2]) @ self.wq[layer, head].T
        K = tokens.embeddings @ self.wk[layer, head].T
        return Q @ K.T / math.sqrt(self.head_dim)

    def probs(self, layer: int, head: int, grid: np.ndarray, tokens: TokenSet, apply_hook: bool = True) -> np.ndarray:
        """(P, T) per-pixel token distribution, after the hook if one is installed."""
        return self._probs_from_logits(self.logits(layer, head, grid, tokens), layer, head, tokens, apply_hook)

    def _probs_from_logits(self, z, layer, head, tokens, apply_hook=True):
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        if apply_hook and self.hook is not None:
            p = self.hook(layer, head, p, tokens, z)
        return p

    def to_json(self) -> dict:
        return {"wq": self.wq.tolist(), "wk": self.wk.tolist(), "pixel_softmax": self.pixel_softmax}

    @classmethod
    def from_json(cls, doc: dict) -> "CAStack":
        return cls(np.array(doc["wq"]), np.array(doc["wk"]), pixel_softmax=bool(doc.get("pixel_softmax", False)))


def random_stack(n_layers: int = 4, n_heads: int = 4, d: int = 16, seed: int = 0, scale: float = 1.0) -> CAStack:
    rng = np.random.default_rng(seed)
    s = scale / math.sqrt(d)
    return CAStack(rng.normal(0, s, (n_layers, n_heads, d, d)), rng.normal(0, s, (n_layers, n_heads, d, d)))


def ca_map(stack: CAStack, layer: int, head: int, query_grid: np.ndarray, tokens: TokenSet,
           token: int | None = None, pixel_softmax: bool | None = None, view_id: int = 0) -> AttentionMap2D:
    """Attention map of one token for one head.

    By default the softmax runs over tokens at each pixel and the selected
    token's column is returned. With ``pixel_softmax`` the token's logits are
    instead normalized over pixels.
    """
    token = tokens.subject_index if token is None else token
    if not 0 <= token < len(tokens):
        raise IndexError(f"token index {token} out of range for {len(tokens)} tokens")
    h, w = np.shape(query_grid)[:2]
    use_pixel = stack.pixel_softmax if pixel_softmax is None else pixel_softmax
    if use_pixel:
        z = stack.logits(layer, head, query_grid, tokens)[:, token]
        e = np.exp(z - z.max())
        col = e / e.sum()
    else:
        col = stack.probs(layer, head, query_grid, tokens)[:, token]
    return AttentionMap2D(col.reshape(h, w), token_id=token, view_id=view_id)


def forward_all(stack: CAStack, query_grid: np.ndarray, tokens: TokenSet, token: int | None = None) -> list:
    """``[[map for head] for layer]`` for one token (subject by default)."""
    return [
        [ca_map(stack, l, h, query_grid, tokens, token) for h in range(stack.n_heads)]
        for l in range(stack.n_layers)
    ]


def token_mass(stack: CAStack, query_grid: np.ndarray, tokens: TokenSet, token: int) -> float:
    """Total attention mass of one token summed over every head and pixel."""
    return float(sum(m.values.sum() for row in forward_all(stack, query_grid, tokens, token) for m in row))


def positional_encoding(h: int, w: int, n_channels: int) -> np.ndarray:
    """(h, w, n_channels) sin/cos features of normalized pixel coordinates."""
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    feats = []
    k = 0
    while len(feats) < n_channels:
        freq = math.pi * (k // 2 + 1)
        coord = gx if k % 2 == 0 else gy
        feats.append(np.sin(freq * coord))
        if len(feats) < n_channels:
            feats.append(np.cos(freq * coord))
        k += 1
    return np.stack(feats[:n_channels], axis=-1)


def make_query_grid(h: int, w: int, d: int, content_code=None, pe_scale: float = 0.3) -> np.ndarray:
    """Deterministic query features: channel 0 is a constant bias of 1, the
    rest are a scaled positional encoding plus an optional content code."""
    grid = np.zeros((h, w, d))
    grid[..., 0] = 1.0
    grid[..., 1:] = pe_scale * positional_encoding(h, w, d - 1)
    if content_code is not None:
        code = np.asarray(content_code, dtype=np.float64)
        grid[..., 1:] += code.reshape(d - 1) if code.size == d - 1 else code.reshape(h, w, d - 1)
    return grid


@dataclass(frozen=True)
class Blob:
    center: tuple  # normalized image coordinates (x, y) in [0, 1]
    sigma: float  # normalized units

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"blob sigma must be positive, got {self.sigma}")


@dataclass
class BiasSpec:
    epsilon: float
    prior_view: float = 0.0
    prior_blob: Blob = field(default_factory=lambda: Blob((0.5, 0.7), 0.08))
    target_blob_fn: Callable[[Camera], Blob] = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.target_blob_fn is None:
            self.target_blob_fn = point_target_blob(np.zeros(3))

    def with_epsilon(self, epsilon: float) -> "BiasSpec":
        return replace(self, epsilon=epsilon)


def point_target_blob(point, sigma: float = 0.08) -> Callable[[Camera], Blob]:
    """Target blob centered on the projection of a fixed 3-D point."""
    point = np.asarray(point, dtype=np.float64)

    def fn(camera: Camera) -> Blob:
        t = camera.world_to_camera(point[None])[0]
        if t[2] <= 0:
            raise ValueError("target point is behind the camera")
        x = camera.focal * t[0] / t[2] + camera.width / 2.0
        y = camera.focal * t[1] / t[2] + camera.height / 2.0
        return Blob((x / camera.width, y / camera.height), sigma)

    return fn


def gaussian_bump(blob: Blob, resolution: tuple) -> np.ndarray:
    """Isotropic bump over pixel centers, normalized to unit mass on the grid."""
    h, w = resolution
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    d2 = (gx - blob.center[0]) ** 2 + (gy - blob.center[1]) ** 2
    g = np.exp(-0.5 * d2 / blob.sigma**2)
    total = g.sum()
    if not total > 0:
        raise ValueError(f"blob at {blob.center} has no support on a {h}x{w} grid")
    return g / total


def synth_biased_map(bias: BiasSpec, view: Camera, resolution: tuple = None, view_id: int = 0,
                     epsilon: float | None = None) -> AttentionMap2D:
    """``(1 - eps) * G(target) + eps * G(prior)`` with unit-mass bumps.

    ``resolution`` is ``(h, w)`` and defaults to the camera's. ``epsilon``
    overrides the bias coefficient (used when attention modulation weakens
    the prior).
    """
    if resolution is None:
        resolution = (view.height, view.width)
    h, w = resolution
    if h < 8 or w < 8:
        raise ValueError(f"biased maps need resolution >= 8x8, got {resolution}")
    eps = bias.epsilon if epsilon is None else float(epsilon)
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {eps}")
    values = np.zeros((h, w))
    if eps < 1.0:
        values += (1.0 - eps) * gaussian_bump(bias.target_blob_fn(view), resolution)
    if eps > 0.0:
        values += eps * gaussian_bump(bias.prior_blob, resolution)
    return AttentionMap2D(values, view_id=view_id)


def bias_to_json(bias: BiasSpec, target_point=None) -> dict:
    doc = {
        "epsilon": bias.epsilon,
        "prior_view": bias.prior_view,
        "prior_blob": {"center": list(bias.prior_blob.center), "sigma": bias.prior_blob.sigma},
    }
    if target_point is not None:
        doc["target_point"] = list(map(float, target_point))
    return doc


def bias_from_json(doc: dict) -> BiasSpec:
    pb = doc.get("prior_blob", {"center": [0.5, 0.7], "sigma": 0.08})
    sigma = float(doc.get("target_sigma", pb["sigma"]))
    return BiasSpec(
        epsilon=float(doc["epsilon"]),
        prior_view=float(doc.get("prior_view", 0.0)),
        prior_blob=Blob(tuple(pb["center"]), float(pb["sigma"])),
        target_blob_fn=point_target_blob(doc.get("target_point", [0.0, 0.0, 0.0]), sigma),
    )


def tokens_from_json(doc: Sequence[dict], subject_index: int = 0, view_index=None) -> TokenSet:
    return TokenSet([(t["word"], t["embedding"]) for t in doc], subject_index, view_index)


def load_stack(path) -> CAStack:
    with open(path) as fh:
        return CAStack.from_json(json.load(fh))
