"""Staged generation and editing loops at toy scale.

Generation fits a Gaussian cloud to per-view target renders while an
attention field accumulates view-biased subject maps. Attention modulation
weakens the bias at the source; the KL guidance pulls each view's observed
map toward what the 3-D field renders at that view before it is
accumulated.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import ham as ham_mod
from .field import (
    AttentionField,
    AttentionMap2D,
    Prune,
    Split,
    apply_event,
    attn_kl_loss,
    bilinear_upsample,
    merge_contributions,
    render_attention,
    softmax_pixels,
    view_contribution,
)
from .render import DEFAULT_CONFIG, Gradients, RenderConfig, render, render_backward
from .scene import Camera, GaussianCloud, InvalidParameterError, ViewSet, build_view_ring
from .stack import BiasSpec, Blob, CAStack, TokenSet, make_query_grid, point_target_blob, synth_biased_map

GROUPS = ("position", "opacity", "color", "attn_weight")


class DivergenceError(RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class EmptyFusionSetError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


def _check_fields(cls, doc: dict) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return doc


@dataclass
class GenConfig:
    iter0: int = 20
    iter1: int = 200
    iter2: int = 400
    lambda1: float = 10.0
    lr: float = 0.5
    views_per_step: int = 1
    seed: int = 0
    ham_enabled: bool = True
    aag_enabled: bool = True
    target_subclass: str = "side_view"
    lambda_mod: float = 4.0
    epsilon: float = 0.5
    n_views: int = 8
    n_heldout: int = 4
    n_gaussians: int = 64
    resolution: int = 32
    focal: float = 36.0
    radius: float = 4.0
    elevation: float = 0.7
    attn_step: float = 0.02
    logit_floor: float = 0.1
    logit_scale: float = 2.0
    metric_every: int = 10
    n_probes: int = 50
    raw_accumulation: bool = False
    pixel_softmax: bool = False
    attn_geometry_grad: bool = False
    floored_reference: bool = True
    trainable_groups: tuple = ("position", "opacity", "color")
    lr_mults: dict = dc_field(default_factory=lambda: {"position": 0.05, "opacity": 1.0, "color": 1.0})
    prune_every: int = 0
    prune_threshold: float = 0.02
    split_every: int = 0
    threads: int = 1

    def __post_init__(self):
        self.trainable_groups = tuple(self.trainable_groups)
        self.validate()

    def validate(self) -> None:
        if min(self.iter0, self.iter1, self.iter2) < 0:
            raise ConfigError("stage boundaries must be nonnegative")
        if not self.iter0 <= self.iter1 <= self.iter2:
            raise ConfigError(f"need iter0 <= iter1 <= iter2, got {self.iter0}, {self.iter1}, {self.iter2}")
        if self.lambda1 < 0:
            raise ConfigError("lambda1 must be nonnegative")
        if not self.lr > 0 or not self.lambda_mod > 0:
            raise ConfigError("lr and lambda_mod must be positive")
        if self.views_per_step < 1 or self.n_views < 1 or self.n_heldout < 1 or self.threads < 1:
            raise ConfigError("views_per_step, n_views, n_heldout and threads must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        bad = set(self.trainable_groups) - set(GROUPS)
        if bad:
            raise ConfigError(f"unknown trainable groups {sorted(bad)}")

    @classmethod
    def from_dict(cls, doc: dict) -> "GenConfig":
        return cls(**_check_fields(cls, dict(doc)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable_groups"] = list(self.trainable_groups)
        return d


@dataclass
class EditConfig:
    iter: int = 200
    lambda2: float = 10.0
    top_k: int = 4
    mask_source: str = "all-ones"
    scorer: str = "l2-to-target"
    seed: int = 0
    lr: float = 5.0
    n_candidates: int = 3
    candidate_jitter: float = 0.3
    min_score: Optional[float] = None
    epsilon: float = 0.0
    ham_enabled: bool = True
    target_subclass: str = "side_view"
    lambda_mod: float = 4.0
    logit_floor: float = 0.1
    logit_scale: float = 2.0
    attn_geometry_grad: bool = False
    trainable_groups: tuple = ("position", "opacity", "color")
    lr_mults: dict = dc_field(default_factory=lambda: {"position": 0.05, "opacity": 1.0, "color": 1.0})
    occlusion_tol: float = 0.05

    def __post_init__(self):
        self.trainable_groups = tuple(self.trainable_groups)
        if self.iter < 0 or self.top_k < 1 or self.n_candidates < 1:
            raise ConfigError("iter must be >= 0, top_k and n_candidates >= 1")
        if self.lambda2 < 0:
            raise ConfigError("lambda2 must be nonnegative")
        if self.mask_source not in ("fixture", "all-ones"):
            raise ConfigError(f"unknown mask_source {self.mask_source!r}")
        if self.scorer not in ("l2-to-target", "constant"):
            raise ConfigError(f"unknown scorer {self.scorer!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "EditConfig":
        return cls(**_check_fields(cls, dict(doc)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable_groups"] = list(self.trainable_groups)
        return d


def loss_total(task: str, base_loss: float, attn_loss: float, config) -> float:
    """``base + lambda * attn`` with lambda1 for generation and lambda2 for editing."""
    if not (math.isfinite(base_loss) and math.isfinite(attn_loss)):
        raise ValueError(f"non-finite loss terms: base={base_loss}, attn={attn_loss}")
    if task == "generation":
        lam = config.lambda1
    elif task == "editing":
        lam = config.lambda2
    else:
        raise ValueError(f"unknown task {task!r}")
    return base_loss + lam * attn_loss


def sgd_step(cloud: GaussianCloud, grads: Gradients, lr: float, trainable_groups=("position", "opacity", "color"),
             lr_mults: dict | None = None) -> GaussianCloud:
    """Plain gradient descent on the trainable groups.

    Opacity and color are clamped to [0, 1] afterwards; scales are kept
    positive. A non-finite gradient aborts with the offending path.
    """
    lr_mults = lr_mults or {}
    arrays = {"position": "positions", "opacity": "opacities", "color": "colors", "attn_weight": "attn_weights"}
    for g in trainable_groups:
        if g not in arrays:
            raise ValueError(f"unknown parameter group {g!r}")
        arr = grads.group(g)
        bad = np.argwhere(~np.isfinite(arr))
        if bad.size:
            raise FloatingPointError(f"non-finite gradient at {g}{[int(k) for k in bad[0]]}")
    out = cloud.copy()
    for g in trainable_groups:
        name = arrays[g]
        setattr(out, name, getattr(out, name) - lr * lr_mults.get(g, 1.0) * grads.group(g))
    out.opacities = np.clip(out.opacities, 0.0, 1.0)
    out.colors = np.clip(out.colors, 0.0, 1.0)
    out.attn_weights = np.maximum(out.attn_weights, 0.0)
    out.scales = np.maximum(out.scales, 1e-6)
    return out


def l2_loss(image: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> tuple:
    """Mean squared error over pixels and channels, optionally masked per pixel."""
    r = image - target
    if mask is not None:
        r = r * mask[..., None]
    n = r.size
    return float(np.sum(r * r)) / n, 2.0 * r / n if mask is None else 2.0 * r * mask[..., None] / n


def attention_logits(amap, floor: float = 0.1, scale: float = 1.0) -> np.ndarray:
    """Log-domain attention ``scale * log(1 + N * q / floor)`` of a map
    normalized to unit mass over its N pixels; nonnegative, zero where the
    map is zero."""
    v = amap.values if isinstance(amap, AttentionMap2D) else np.asarray(amap, dtype=np.float64)
    s = v.sum()
    if not s > 0:
        return np.zeros_like(v)
    return scale * np.log1p(v.size * (v / s) / floor)


def kl_correct(observed: np.ndarray, kl, step: float) -> np.ndarray:
    """One mirror-descent step on the observed map's log values.

    ``observed * grad_observed`` is the KL gradient w.r.t. the log of the
    observed values (``Q - P`` away from the floor), so the update
    multiplies each pixel by ``exp(-step * N * (Q - P))``.
    """
    if step == 0.0:
        return observed
    g_log = observed * kl.grad_observed * observed.sum()
    return observed * np.exp(-step * observed.size * g_log)


# ---------------------------------------------------------------- scenes


def procedural_scene(n: int = 64, seed: int = 0, radius: float = 0.8, scale: float = 0.18) -> GaussianCloud:
    """Gaussians on a Fibonacci sphere with smoothly varying colors."""
    rng = np.random.default_rng(seed)
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = math.pi * (1 + 5**0.5) * k
    pts = np.stack([np.cos(theta) * np.sin(phi), np.cos(phi), np.sin(theta) * np.sin(phi)], axis=1)
    pos = radius * pts
    colors = np.clip(0.5 + 0.4 * pts[:, [0, 1, 2]] * np.array([1.0, 0.8, -1.0]), 0.05, 0.95)
    colors = np.clip(colors + rng.normal(0, 0.03, colors.shape), 0.0, 1.0)
    return GaussianCloud(
        positions=pos,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        scales=np.full((n, 3), scale),
        opacities=np.full(n, 0.8),
        colors=colors,
    )


def perturb_cloud(cloud: GaussianCloud, seed: int, pos_sigma: float = 0.06, color_sigma: float = 0.15) -> GaussianCloud:
    rng = np.random.default_rng(seed)
    out = cloud.copy()
    out.positions = out.positions + rng.normal(0, pos_sigma, out.positions.shape)
    out.colors = np.clip(out.colors + rng.normal(0, color_sigma, out.colors.shape), 0.0, 1.0)
    out.opacities = np.clip(out.opacities + rng.normal(0, 0.1, out.opacities.shape), 0.05, 1.0)
    return out


def view_rings(config: GenConfig) -> tuple:
    res = (config.resolution, config.resolution)
    train = build_view_ring(config.n_views, config.elevation, config.radius, config.focal, res)
    held = build_view_ring(config.n_heldout, config.elevation, config.radius, config.focal, res,
                           azimuth_offset=math.pi / config.n_views)
    return train, held


TARGET_POINT = (0.0, 0.8, 0.0)
BLOB_SIGMA = 0.12


def default_bias(epsilon: float) -> BiasSpec:
    """Target blob on the projection of the top of the procedural scene; the
    prior blob sits below the image center in every view."""
    return BiasSpec(epsilon, 0.0, Blob((0.5, 0.66), BLOB_SIGMA), point_target_blob(TARGET_POINT, BLOB_SIGMA))


@dataclass
class GenerationProblem:
    gt: GaussianCloud
    cloud0: GaussianCloud
    views: ViewSet
    heldout: ViewSet
    targets: list
    bias: BiasSpec


def make_generation_problem(config: GenConfig, bias: BiasSpec | None = None) -> GenerationProblem:
    gt = procedural_scene(config.n_gaussians, seed=1000 + config.seed)
    cloud0 = perturb_cloud(gt, seed=config.seed)
    views, heldout = view_rings(config)
    targets = [render(gt, cam, "color").color_image for cam in views]
    return GenerationProblem(gt, cloud0, views, heldout, targets, bias or default_bias(config.epsilon))


# ---------------------------------------------------------------- HAM plumbing


@dataclass
class HamContext:
    plain: CAStack
    modulated: CAStack
    tokens: TokenSet
    view_token: int


def prepare_ham(sgt, target_subclass: str, lambda_mod: float, seed: int, n_probes: int = 50,
                pixel_softmax: bool = False, stack: CAStack | None = None) -> HamContext:
    """Profile a planted stack and install modulation for ``target_subclass``."""
    plain = stack if stack is not None else ham_mod.planted_stack(sgt, seed=seed)
    plain = CAStack(plain.wq, plain.wk, None, pixel_softmax)
    probes = ham_mod.make_probes(n_probes, plain.query_dim, seed=seed + 1)
    W = ham_mod.accumulate_weights(ham_mod.WeightMatrices.zeros(sgt, plain.n_layers, plain.n_heads),
                                   probes, plain, sgt, np.random.default_rng(seed + 2))
    modulated = ham_mod.modulate(plain, W, sgt, target_subclass, lambda_mod)
    f = sgt.subclass_index(target_subclass)
    subj = sgt.subclasses[0]
    view_sub = sgt.subclasses[f]
    tokens = TokenSet([(subj.words[0], subj.embeddings[0]), (view_sub.words[0], view_sub.embeddings[0])], 0, 1)
    return HamContext(plain, modulated, tokens, 1)


def odds_multiplier(ctx: HamContext, query_grid: np.ndarray) -> float:
    """Geometric-mean factor by which modulation raises the view token's
    attention odds against the subject token, over all heads and pixels."""
    from .stack import forward_all

    def log_odds(stack):
        v = forward_all(stack, query_grid, ctx.tokens, ctx.view_token)
        s = forward_all(stack, query_grid, ctx.tokens, ctx.tokens.subject_index)
        return np.array([[np.log(v[l][h].values) - np.log(s[l][h].values) for h in range(stack.n_heads)]
                         for l in range(stack.n_layers)])

    return float(np.exp(np.mean(log_odds(ctx.modulated) - log_odds(ctx.plain))))


def effective_epsilon(epsilon: float, rho: float) -> float:
    """Bias coefficient after the target/prior odds are multiplied by ``rho``."""
    if epsilon == 0.0:
        return 0.0
    return epsilon / (epsilon + (1.0 - epsilon) * rho)


def view_query_grid(d: int, view_id: int, seed: int, size: int = 8) -> np.ndarray:
    rng = np.random.default_rng([seed, view_id])
    return make_query_grid(size, size, d, rng.normal(0.0, 0.3, d - 1))


# ---------------------------------------------------------------- metrics


def inconsistency_metric(fld: AttentionField, cloud: GaussianCloud, heldout_views, per_view_maps,
                         config: RenderConfig = DEFAULT_CONFIG, threads: int = 1) -> float:
    """Mean KL between the field's rendered attention and reference maps over held-out views.

    ``per_view_maps`` is a sequence aligned with the views or a callable
    ``(view_id, camera) -> map``.
    """
    cams = list(heldout_views)

    def one(i):
        cam = cams[i]
        ref = per_view_maps(i, cam) if callable(per_view_maps) else per_view_maps[i]
        rendered = render_attention(fld, cloud, cam, i, config)
        return attn_kl_loss(rendered, ref).loss

    vals = _map_ordered(one, range(len(cams)), threads)
    return float(np.mean(vals))


def clean_maps(bias: BiasSpec, floor: float | None = None, scale: float = 1.0) -> Callable:
    """Unbiased reference maps.

    With ``floor`` set, each reference is the softmax of the encoded clean
    map, i.e. the distribution a perfectly consistent field renders under
    :func:`attention_logits`.
    """

    def ref(i, cam):
        m = synth_biased_map(bias, cam, view_id=i, epsilon=0.0)
        if floor is None:
            return m
        z = attention_logits(m, floor, scale)
        e = np.exp(z - z.max())
        return AttentionMap2D(e / e.sum(), view_id=i)

    return ref


def _map_ordered(fn, items, threads: int) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------- generation


HISTORY_COLUMNS = ("step", "base_loss", "attn_loss", "total", "inconsistency_metric", "stage", "ham_active", "aag_active")


@dataclass
class GenerationResult:
    cloud: GaussianCloud
    field: AttentionField
    history: list
    snapshots: dict  # stage name -> (field, cloud) at the end of that stage


def stage_of(step: int, config: GenConfig) -> int:
    if step < config.iter0:
        return 1
    if step < config.iter1:
        return 2
    return 3


def run_generation(cloud0: GaussianCloud, config: GenConfig, bias: BiasSpec, sgt,
                   problem: GenerationProblem | None = None, stack: CAStack | None = None,
                   render_config: RenderConfig = DEFAULT_CONFIG,
                   on_step: Callable | None = None) -> GenerationResult:
    """Three-stage generation loop.

    Stage 1 fits color only while maps accumulate; stage 2 adds the KL
    guidance with HAM active; stage 3 drops HAM. HAM is active iff
    ``step < iter1``; the KL term is active iff ``step >= iter0`` and its
    weight is positive.
    """
    config.validate()
    if len(cloud0) == 0:
        raise InvalidParameterError("initial cloud is empty")
    if problem is None:
        problem = make_generation_problem(config, bias)
    views, heldout, targets = problem.views, problem.heldout, problem.targets
    refs = clean_maps(bias, config.logit_floor if config.floored_reference else None, config.logit_scale)
    cloud = cloud0.copy()
    fld = AttentionField.empty(len(cloud), raw_mode=config.raw_accumulation)
    history = []
    snapshots = {}

    rho = 1.0
    if config.ham_enabled and config.iter1 > 0:
        ctx = prepare_ham(sgt, config.target_subclass, config.lambda_mod, config.seed, config.n_probes,
                          config.pixel_softmax, stack)
        rhos = [odds_multiplier(ctx, view_query_grid(ctx.plain.query_dim, v, config.seed)) for v in range(len(views))]
    else:
        rhos = [1.0] * len(views)

    n_views = len(views)
    cursor = 0
    for step in range(config.iter2):
        stage = stage_of(step, config)
        ham_active = config.ham_enabled and step < config.iter1
        aag_active = config.aag_enabled and config.lambda1 > 0 and step >= config.iter0
        ids = [(cursor + j) % n_views for j in range(config.views_per_step)]
        cursor = (cursor + config.views_per_step) % n_views

        def per_view(v, cloud=cloud, fld=fld, ham_active=ham_active, aag_active=aag_active):
            cam = views[v]
            out_cloud = cloud.with_attention(fld.weights)
            out = render(out_cloud, cam, "all", render_config)
            base, g_color = l2_loss(out.color_image, targets[v])
            eps = effective_epsilon(bias.epsilon, rhos[v]) if ham_active else bias.epsilon
            observed = synth_biased_map(bias, cam, view_id=v, epsilon=eps).values
            attn = 0.0
            g_attn = None
            if aag_active:
                kl = attn_kl_loss(out.attn_image, observed)
                attn = kl.loss
                observed = kl_correct(observed, kl, config.attn_step * config.lambda1)
                if config.attn_geometry_grad:
                    g_attn = config.lambda1 * kl.grad_rendered
            contrib = view_contribution(cloud, cam, attention_logits(observed, config.logit_floor, config.logit_scale), out, render_config)
            grads = render_backward(out_cloud, cam, out, g_color, g_attn)
            return base, attn, contrib, grads

        results = _map_ordered(per_view, ids, config.threads)
        base = float(np.mean([r[0] for r in results]))
        attn = float(np.mean([r[1] for r in results]))
        total = loss_total("generation", base, attn, config) if aag_active else base
        if not math.isfinite(total) or total > 1e6:
            history.append(_row(step, base, attn, total, float("nan"), stage, ham_active, aag_active))
            raise DivergenceError(f"loss diverged at step {step}: {total}", history)

        fld = merge_contributions(fld, [r[2] for r in results])
        grads = results[0][3]
        for r in results[1:]:
            grads = grads + r[3]
        cloud = sgd_step(cloud, grads.scaled(1.0 / len(results)), config.lr, config.trainable_groups, config.lr_mults)
        cloud, fld = _lifecycle(cloud, fld, step, config)

        metric = float("nan")
        last = step == config.iter2 - 1
        if last or (config.metric_every and (step + 1) % config.metric_every == 0):
            metric = inconsistency_metric(fld, cloud, heldout, refs, render_config, config.threads)
        history.append(_row(step, base, attn, total, metric, stage, ham_active, aag_active))
        if on_step is not None:
            on_step(step, cloud, fld)
        if last or stage_of(step + 1, config) != stage:
            snapshots[f"stage{stage}"] = (fld.copy(), cloud.copy())

    return GenerationResult(cloud, fld, history, snapshots)


def _row(step, base, attn, total, metric, stage, ham_active, aag_active) -> dict:
    return {
        "step": step, "base_loss": base, "attn_loss": attn, "total": total,
        "inconsistency_metric": metric, "stage": stage,
        "ham_active": int(ham_active), "aag_active": int(aag_active),
    }


def _lifecycle(cloud, fld, step, config):
    if config.split_every and (step + 1) % config.split_every == 0:
        i = int(np.argmax(cloud.scales.max(axis=1)))
        cloud, fld = apply_event(cloud, fld, Split(i, len(cloud)))
    if config.prune_every and (step + 1) % config.prune_every == 0:
        event = Prune.below(cloud, config.prune_threshold)
        if any(event.keep):
            cloud, fld = apply_event(cloud, fld, event)
    return cloud, fld


def final_metric(history: list) -> float:
    for row in reversed(history):
        if math.isfinite(row["inconsistency_metric"]):
            return row["inconsistency_metric"]
    return float("nan")


# ---------------------------------------------------------------- editing


def reproject_coords(src_camera: Camera, depth_of_target: np.ndarray, target_camera: Camera) -> tuple:
    """Source-image coordinates ``(x, y)`` and source-camera depth for every target pixel."""
    pix = target_camera.pixel_grid()
    f = target_camera.focal
    c = target_camera.principal_point
    z = depth_of_target
    cam_pts = np.stack([(pix[..., 0] - c[0]) * z / f, (pix[..., 1] - c[1]) * z / f, z], axis=-1)
    world = target_camera.camera_to_world(cam_pts.reshape(-1, 3))
    t = src_camera.world_to_camera(world)
    zs = t[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = src_camera.focal * t[:, 0] / zs + src_camera.principal_point[0]
        y = src_camera.focal * t[:, 1] / zs + src_camera.principal_point[1]
    shape = depth_of_target.shape
    return x.reshape(shape), y.reshape(shape), zs.reshape(shape)


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample at image coordinates where pixel ``(r, c)`` has its center at ``(c + 0.5, r + 0.5)``.

    Coordinates are clamped to the pixel-center hull.
    """
    H, W = image.shape[:2]
    u = np.clip(x - 0.5, 0, W - 1)
    v = np.clip(y - 0.5, 0, H - 1)
    u = np.nan_to_num(u)
    v = np.nan_to_num(v)
    c0 = np.clip(np.floor(u).astype(int), 0, max(W - 2, 0))
    r0 = np.clip(np.floor(v).astype(int), 0, max(H - 2, 0))
    c1 = np.minimum(c0 + 1, W - 1)
    r1 = np.minimum(r0 + 1, H - 1)
    fu = u - c0
    fv = v - r0
    if image.ndim == 3:
        fu = fu[..., None]
        fv = fv[..., None]
    top = image[r0, c0] * (1 - fu) + image[r0, c1] * fu
    bot = image[r1, c0] * (1 - fu) + image[r1, c1] * fu
    return top * (1 - fv) + bot * fv


def reproject(source_view_image: np.ndarray, source_camera: Camera, depth_of_target: np.ndarray,
              target_camera: Camera, source_depth: np.ndarray | None = None,
              target_valid: np.ndarray | None = None, occlusion_tol: float = 0.05) -> tuple:
    """Warp a source-view image into the target view through the target's depth.

    Returns ``(image, valid)``. A pixel is invalid when its depth is not
    usable, it falls outside the source frustum, or (given the source's own
    depth) the source sees a surface more than ``occlusion_tol`` relatively
    closer or farther.
    """
    x, y, zs = reproject_coords(source_camera, depth_of_target, target_camera)
    H, W = source_view_image.shape[:2]
    valid = (depth_of_target > 0) & np.isfinite(x) & np.isfinite(y) & (zs > 1e-6)
    valid &= (x >= 0.5) & (x <= W - 0.5) & (y >= 0.5) & (y <= H - 0.5)
    if target_valid is not None:
        valid &= target_valid
    if source_depth is not None:
        ds = bilinear_sample(source_depth, x, y)
        valid &= np.abs(ds - zs) <= occlusion_tol * np.maximum(zs, 1e-12)
    img = bilinear_sample(source_view_image, x, y)
    img = np.where(valid[..., None] if img.ndim == 3 else valid, img, 0.0)
    return img, valid


@dataclass
class EditResult:
    cloud: GaussianCloud
    history: list
    fused: list  # per-view guidance images
    selected_views: list
    masks: list


def edit_candidates(image: np.ndarray, target: np.ndarray, strength: float, n: int, jitter: float,
                    rng: np.random.Generator) -> list:
    """Blends ``image + a * (target - image)``; the first uses ``a = strength``, the rest are jittered down."""
    out = []
    for j in range(n):
        a = strength if j == 0 else strength * (1.0 - jitter * rng.random())
        out.append(image + a * (target - image))
    return out


def score_candidate(candidate: np.ndarray, target: np.ndarray, scorer: str) -> float:
    if scorer == "constant":
        return 0.0
    return -float(np.mean((candidate - target) ** 2))


def run_editing(cloud: GaussianCloud, edit_target_images: Sequence[np.ndarray], config: EditConfig, sgt,
                views: ViewSet, masks: Sequence[np.ndarray] | None = None, stack: CAStack | None = None,
                render_config: RenderConfig = DEFAULT_CONFIG) -> EditResult:
    """Two-stage editing loop.

    Stage 1 makes candidate edits per view, scores them and keeps the top_k
    views. Stage 2 fuses the kept edits into every view by depth
    reprojection of their edit deltas, blends with the original render under
    the mask, and runs ``config.iter`` round-robin steps on masked L2. The
    weighted KL attention term is always reported; its gradient reaches the
    geometry only with ``attn_geometry_grad``.
    """
    n_views = len(views)
    if len(edit_target_images) != n_views:
        raise ConfigError(f"expected {n_views} edit targets, got {len(edit_target_images)}")
    if config.top_k > n_views:
        raise ConfigError(f"top_k={config.top_k} exceeds the number of views ({n_views})")
    if masks is None:
        if config.mask_source == "fixture":
            raise ConfigError("mask_source 'fixture' needs mask images")
        masks = [np.ones((cam.height, cam.width)) for cam in views]
    masks = [np.clip(np.asarray(m, dtype=np.float64), 0.0, 1.0) for m in masks]
    rng = np.random.default_rng(config.seed)

    strength = 1.0
    if config.ham_enabled:
        ctx = prepare_ham(sgt, config.target_subclass, config.lambda_mod, config.seed, stack=stack)
        rho = odds_multiplier(ctx, view_query_grid(ctx.plain.query_dim, 0, config.seed))
    else:
        rho = 1.0
    strength = 1.0 - effective_epsilon(config.epsilon, rho)

    originals = [render(cloud, cam, "all", render_config) for cam in views]
    X0 = [o.color_image for o in originals]
    best = []
    for v, cam in enumerate(views):
        cands = edit_candidates(X0[v], edit_target_images[v], strength, config.n_candidates,
                                config.candidate_jitter, rng)
        scores = [score_candidate(c, edit_target_images[v], config.scorer) for c in cands]
        ok = [(s, j) for j, s in enumerate(scores)
              if math.isfinite(s) and (config.min_score is None or s >= config.min_score)]
        if ok:
            s, j = max(ok, key=lambda t: (t[0], -t[1]))
            best.append((s, v, cands[j]))
    if not best:
        raise EmptyFusionSetError("empty fusion set: no candidate passed the scorer")
    best.sort(key=lambda t: (-t[0], t[1]))
    kept = best[: config.top_k]
    selected = [v for _, v, _ in kept]

    valid_depth = [o.alpha_image > 0.5 for o in originals]
    fused = []
    for t, cam_t in enumerate(views):
        acc = np.zeros_like(X0[t])
        cnt = np.zeros(X0[t].shape[:2])
        for _, s, edit in kept:
            delta = edit - X0[s]
            img, ok = reproject(delta, views[s], originals[t].depth_image, cam_t, originals[s].depth_image,
                                valid_depth[t], config.occlusion_tol)
            acc += img * ok[..., None]
            cnt += ok
        mean_delta = np.where(cnt[..., None] > 0, acc / np.maximum(cnt, 1)[..., None], 0.0)
        mf = X0[t] + mean_delta
        fused.append(masks[t][..., None] * mf + (1.0 - masks[t][..., None]) * X0[t])

    obs = [masks[t] * np.linalg.norm(fused[t] - X0[t], axis=-1) for t in range(n_views)]
    logits = [attention_logits(o, config.logit_floor, config.logit_scale) for o in obs]
    refs = [softmax_pixels(z) if o.sum() > 0 else None for z, o in zip(logits, obs)]
    fld = AttentionField.empty(len(cloud))
    for t, cam in enumerate(views):
        if refs[t] is not None:
            fld = merge_contributions(fld, [view_contribution(cloud, cam, logits[t], originals[t], render_config)])

    history = []
    for step in range(config.iter):
        v = step % n_views
        cam = views[v]
        attn_cloud = cloud.with_attention(fld.weights)
        out = render(attn_cloud, cam, "all", render_config)
        base, g_color = l2_loss(out.color_image, fused[v], masks[v])
        attn = 0.0
        g_attn = None
        if config.lambda2 > 0 and refs[v] is not None:
            kl = attn_kl_loss(out.attn_image, refs[v])
            attn = kl.loss
            if config.attn_geometry_grad:
                g_attn = config.lambda2 * kl.grad_rendered
        total = loss_total("editing", base, attn, config)
        if not math.isfinite(total) or total > 1e6:
            raise DivergenceError(f"editing loss diverged at step {step}: {total}", history)
        if g_attn is not None or base > 0:
            grads = render_backward(attn_cloud, cam, out, g_color, g_attn)
            cloud = sgd_step(cloud, grads, config.lr, config.trainable_groups, config.lr_mults)
        history.append({"step": step, "view": v, "base_loss": base, "attn_loss": attn, "total": total})
    return EditResult(cloud, history, fused, selected, masks)
