"""Semantic guidance trees, head/layer relevance profiling and attention
modulation for the cross-attention stack."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from .stack import CAStack, TokenSet


class SGTValidationError(ValueError):
    pass


@dataclass
class SubClass:
    name: str
    class_index: int
    words: list
    embeddings: np.ndarray  # (n_instances, d)


@dataclass
class SemanticGuidanceTree:
    classes: list
    subclasses: list

    @property
    def M(self) -> int:
        return len(self.classes)

    @property
    def F(self) -> int:
        return len(self.subclasses)

    @property
    def dim(self) -> int:
        return self.subclasses[0].embeddings.shape[1]

    def class_of(self, f: int) -> int:
        return self.subclasses[f].class_index

    def subclasses_of(self, m: int) -> list:
        return [f for f, s in enumerate(self.subclasses) if s.class_index == m]

    def subclass_index(self, name: str) -> int:
        for f, s in enumerate(self.subclasses):
            if s.name == name:
                return f
        raise KeyError(f"unknown subclass {name!r}")

    def class_index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}") from None

    def sample_instances(self, rng: np.random.Generator) -> np.ndarray:
        """One embedding per subclass, drawn uniformly; shape (F, d)."""
        return np.stack([s.embeddings[rng.integers(len(s.words))] for s in self.subclasses])

    def first_instances(self) -> np.ndarray:
        return np.stack([s.embeddings[0] for s in self.subclasses])

    def to_json(self) -> dict:
        doc = {}
        for m, cname in enumerate(self.classes):
            doc[cname] = {
                s.name: [{"word": w, "embedding": e.tolist()} for w, e in zip(s.words, s.embeddings)]
                for s in self.subclasses
                if s.class_index == m
            }
        return doc


def _parse_instances(path: str, items, dim):
    if not isinstance(items, list):
        raise SGTValidationError(f"{path}: instance list expected")
    if not items:
        raise SGTValidationError(f"{path}: subclass has no instances")
    words, embs = [], []
    for k, it in enumerate(items):
        if not isinstance(it, dict) or "word" not in it or "embedding" not in it:
            raise SGTValidationError(f"{path}[{k}]: instance needs 'word' and 'embedding'")
        e = np.asarray(it["embedding"], dtype=np.float64)
        if e.ndim != 1 or not np.all(np.isfinite(e)):
            raise SGTValidationError(f"{path}[{k}]: embedding must be a finite vector")
        if dim is not None and e.size != dim:
            raise SGTValidationError(f"{path}[{k}]: embedding has dimension {e.size}, expected {dim}")
        words.append(str(it["word"]))
        embs.append(e)
    return words, np.stack(embs)


def parse_sgt(document, dim: int | None = None) -> SemanticGuidanceTree:
    """Validate a tree document.

    Two layouts are accepted. Nested: ``{class: {subclass: [instance, ...]}}``.
    Flat: ``{"classes": {class: [subclass, ...]}, "subclasses": {subclass: [instance, ...]}}``,
    where a subclass listed under no class is an orphan. Instances are
    ``{"word": str, "embedding": [float, ...]}``. ``dim`` fixes the expected
    embedding length; otherwise the first embedding sets it.
    """
    if isinstance(document, str):
        document = json.loads(document)
    if not isinstance(document, dict):
        raise SGTValidationError("tree document must be a JSON object")

    if set(document) == {"classes", "subclasses"}:
        class_map = document["classes"]
        sub_map = document["subclasses"]
        owner = {}
        for cname, subs in class_map.items():
            for s in subs:
                if s in owner:
                    raise SGTValidationError(f"{cname}/{s}: subclass already belongs to class {owner[s]!r}")
                if s not in sub_map:
                    raise SGTValidationError(f"{cname}/{s}: subclass has no instance list")
                owner[s] = cname
        for s in sub_map:
            if s not in owner:
                raise SGTValidationError(f"subclasses/{s}: orphan subclass not attached to any class")
        nested = {c: {s: sub_map[s] for s in subs} for c, subs in class_map.items()}
    else:
        nested = document

    classes, subclasses, seen = [], [], {}
    for m, (cname, subs) in enumerate(nested.items()):
        if not isinstance(subs, dict) or not subs:
            raise SGTValidationError(f"{cname}: class must contain at least one subclass")
        classes.append(str(cname))
        for sname, items in subs.items():
            path = f"{cname}/{sname}"
            if sname in seen:
                raise SGTValidationError(f"{path}: subclass already belongs to class {seen[sname]!r}")
            seen[sname] = cname
            words, embs = _parse_instances(path, items, dim)
            dim = embs.shape[1]
            subclasses.append(SubClass(str(sname), m, words, embs))
    if len(classes) < 2:
        raise SGTValidationError(f"tree needs at least 2 classes, got {len(classes)}")
    return SemanticGuidanceTree(classes, subclasses)


def load_sgt(path=None, dim: int | None = None) -> SemanticGuidanceTree:
    """Load a tree from ``path``, or the bundled fixture when ``path`` is None."""
    if path is None:
        text = resources.files("splatattn").joinpath("data/sgt_fixture.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return parse_sgt(json.loads(text), dim)


@dataclass
class WeightMatrices:
    """Accumulated one-hot votes.

    ``layer_weights`` is (M, L). ``head_weights`` is (F, L*H) with head
    ``(l, h)`` in column ``l*H + h``.
    """

    layer_weights: np.ndarray
    head_weights: np.ndarray
    n_heads: int
    probes_seen: int = 0

    @classmethod
    def zeros(cls, sgt: SemanticGuidanceTree, n_layers: int, n_heads: int) -> "WeightMatrices":
        return cls(np.zeros((sgt.M, n_layers)), np.zeros((sgt.F, n_layers * n_heads)), n_heads, 0)

    @property
    def n_layers(self) -> int:
        return self.layer_weights.shape[1]

    def copy(self) -> "WeightMatrices":
        return WeightMatrices(self.layer_weights.copy(), self.head_weights.copy(), self.n_heads, self.probes_seen)

    def normalized(self) -> tuple:
        if self.probes_seen == 0:
            raise ValueError("no probes accumulated yet")
        return self.layer_weights / self.probes_seen, self.head_weights / self.probes_seen

    def head_argmax(self) -> np.ndarray:
        """(L, H) winning subclass per head."""
        return np.argmax(self.head_weights, axis=0).reshape(self.n_layers, self.n_heads)

    def layer_argmax(self) -> np.ndarray:
        return np.argmax(self.layer_weights, axis=0)


def _as_probe_array(probe_queries) -> np.ndarray:
    if isinstance(probe_queries, np.ndarray) and probe_queries.ndim == 3:
        grids = [probe_queries]
    else:
        grids = list(probe_queries)
    if not grids:
        raise ValueError("empty probe set")
    flat = np.concatenate([np.asarray(g, dtype=np.float64).reshape(-1, np.shape(g)[-1]) for g in grids])
    if flat.shape[0] == 0:
        raise ValueError("empty probe set")
    return flat


def pooled_scores(stack: CAStack, layer: int, probe_queries, instance_sample) -> np.ndarray:
    """(H, F) pixel-averaged scaled dot products of every head against every key."""
    X = _as_probe_array(probe_queries)
    keys_in = np.asarray(instance_sample, dtype=np.float64)
    if keys_in.shape[1] != stack.wk.shape[3]:
        raise ValueError(f"instance embeddings have dimension {keys_in.shape[1]}, stack expects {stack.wk.shape[3]}")
    qbar = X.mean(axis=0)
    out = np.empty((stack.n_heads, keys_in.shape[0]))
    for h in range(stack.n_heads):
        q = stack.wq[layer, h] @ qbar
        K = keys_in @ stack.wk[layer, h].T
        out[h] = K @ q / math.sqrt(stack.head_dim)
    return out


def srp_head_scores(stack: CAStack, head: tuple, probe_queries, sgt: SemanticGuidanceTree, instance_sample) -> int:
    """Subclass whose sampled key gets the highest pooled score from this head."""
    layer, h = head
    scores = pooled_scores(stack, layer, probe_queries, instance_sample)[h]
    return int(np.argmax(scores))


def srp_layer_scores(stack: CAStack, layer: int, probe_queries, sgt: SemanticGuidanceTree, instance_sample) -> int:
    """Class with the highest pooled score summed over its subclasses and all heads of the layer."""
    if stack.n_heads == 0:
        raise ValueError("empty layer")
    per_sub = pooled_scores(stack, layer, probe_queries, instance_sample).sum(axis=0)
    class_scores = np.array([per_sub[sgt.subclasses_of(m)].sum() for m in range(sgt.M)])
    return int(np.argmax(class_scores))


def accumulate_weights(matrices: WeightMatrices, probes: Sequence, stack: CAStack, sgt: SemanticGuidanceTree,
                       rng: np.random.Generator) -> WeightMatrices:
    """Add one vote per head and per layer for every probe batch.

    Instances are redrawn from each subclass for every probe.
    """
    out = matrices.copy()
    H = stack.n_heads
    for probe in probes:
        sample = sgt.sample_instances(rng)
        for l in range(stack.n_layers):
            scores = pooled_scores(stack, l, probe, sample)
            winners = np.argmax(scores, axis=1)
            out.head_weights[winners, l * H + np.arange(H)] += 1
            per_sub = scores.sum(axis=0)
            class_scores = np.array([per_sub[sgt.subclasses_of(m)].sum() for m in range(sgt.M)])
            out.layer_weights[int(np.argmax(class_scores)), l] += 1
        out.probes_seen += 1
    return out


@dataclass(frozen=True)
class ModulationHook:
    """Scales the target token's attention per head.

    ``mode="post"`` multiplies the post-softmax target column by the head's
    gain and renormalizes each pixel. ``mode="pre"`` multiplies the target
    logit by the gain before the softmax. Heads with zero gain pass through.
    """

    gains: np.ndarray  # (L, H)
    target_words: tuple
    mode: str = "post"

    def target_token(self, tokens: TokenSet) -> int:
        for i, w in enumerate(tokens.words):
            if w in self.target_words:
                return i
        return tokens.view_index if tokens.view_index is not None else tokens.subject_index

    def __call__(self, layer, head, probs, tokens, logits):
        g = float(self.gains[layer, head])
        if g == 0.0:
            return probs
        t = self.target_token(tokens)
        if self.mode == "pre":
            z = logits.copy()
            z[:, t] *= g
            z -= z.max(axis=1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=1, keepdims=True)
        p = probs.copy()
        p[:, t] *= g
        return p / p.sum(axis=1, keepdims=True)


def modulation_gains(matrices: WeightMatrices, sgt: SemanticGuidanceTree, target_subclass, lam: float) -> np.ndarray:
    """(L, H) gains ``lam * What_l[m*] * What_h[f*]`` from probe-normalized counts."""
    f = sgt.subclass_index(target_subclass) if isinstance(target_subclass, str) else int(target_subclass)
    if not 0 <= f < sgt.F:
        raise KeyError(f"unknown subclass index {f}")
    if not lam > 0:
        raise ValueError(f"modulation coefficient must be positive, got {lam}")
    m = sgt.class_of(f)
    wl, wh = matrices.normalized()
    return lam * wl[m][:, None] * wh[f].reshape(matrices.n_layers, matrices.n_heads)


def modulate(stack: CAStack, matrices: WeightMatrices, sgt: SemanticGuidanceTree, target_subclass, lam: float,
             mode: str = "post") -> CAStack:
    """Copy of ``stack`` with a modulation hook for ``target_subclass`` installed."""
    if mode not in ("post", "pre"):
        raise ValueError(f"unknown modulation mode {mode!r}")
    gains = modulation_gains(matrices, sgt, target_subclass, lam)
    f = sgt.subclass_index(target_subclass) if isinstance(target_subclass, str) else int(target_subclass)
    hook = ModulationHook(gains, tuple(sgt.subclasses[f].words), mode)
    return stack.with_hook(hook)


def constant_gain_hook(stack: CAStack, gain: float, target_words=(), mode: str = "post") -> CAStack:
    return stack.with_hook(ModulationHook(np.full((stack.n_layers, stack.n_heads), float(gain)), tuple(target_words), mode))


# Default planting: one layer per class, with the view class owning two layers.
DEFAULT_PLAN = (
    ("animal", "vehicle", "animal", "vehicle"),
    ("color", "material", "color", "material"),
    ("side_view", "back_view", "side_view", "side_view"),
    ("back_view", "side_view", "side_view", "back_view"),
)


def planted_stack(sgt: SemanticGuidanceTree, plan=DEFAULT_PLAN, alpha: float = 8.0, noise: float = 0.05,
                  seed: int = 0) -> CAStack:
    """Stack whose head ``(l, h)`` responds to subclass ``plan[l][h]``.

    Keys are a noisy identity. Queries read the constant bias channel of the
    query grid and write the mean embedding of the planted subclass, so the
    planted subclass dominates the pooled score.
    """
    rng = np.random.default_rng(seed)
    L, H = len(plan), len(plan[0])
    d = sgt.dim
    wq = rng.normal(0.0, noise, (L, H, d, d))
    wk = np.eye(d)[None, None] + rng.normal(0.0, noise, (L, H, d, d))
    for l, row in enumerate(plan):
        for h, name in enumerate(row):
            u = sgt.subclasses[sgt.subclass_index(name)].embeddings.mean(axis=0)
            wq[l, h, :, 0] += alpha * u / np.linalg.norm(u)
    return CAStack(wq, wk)


def plan_truth(sgt: SemanticGuidanceTree, plan=DEFAULT_PLAN) -> tuple:
    """Expected ``(head subclass indices (L, H), layer class indices (L,))`` for a plan."""
    heads = np.array([[sgt.subclass_index(n) for n in row] for row in plan])
    layers = []
    for row in heads:
        counts = np.bincount([sgt.class_of(f) for f in row], minlength=sgt.M)
        layers.append(int(np.argmax(counts)))
    return heads, np.array(layers)


def make_probes(n: int, d: int, size: tuple = (8, 8), seed: int = 0, spread: float = 0.5) -> list:
    """Seeded probe query grids: bias channel near 1, other channels random."""
    rng = np.random.default_rng(seed)
    probes = []
    for _ in range(n):
        g = rng.normal(0.0, spread, size + (d,))
        g[..., 0] = 1.0 + rng.normal(0.0, 0.05, size)
        probes.append(g)
    return probes
