"""Command-line entry point: ``splatattn {generate,edit,profile,biaslab}``.

Exit codes are 0 on success, 2 for bad input and 3 for numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bias_lab, ham, io
from .field import render_attention
from .pipeline import (
    HISTORY_COLUMNS,
    ConfigError,
    DivergenceError,
    EditConfig,
    EmptyFusionSetError,
    GenConfig,
    make_generation_problem,
    run_editing,
    run_generation,
)
from .render import render
from .scene import InvalidParameterError
from .stack import load_stack

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class InputError(Exception):
    pass


def _read_json(path) -> tuple:
    """Parsed document and raw bytes of a JSON file."""
    p = Path(path)
    if not p.is_file():
        raise InputError(f"config file not found: {path}")
    raw = p.read_bytes()
    try:
        return json.loads(raw), raw
    except json.JSONDecodeError as e:
        raise InputError(f"malformed JSON in {path}: {e}") from None


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _floats(text: str, n: int, what: str) -> list:
    parts = text.split(",")
    if len(parts) != n:
        raise InputError(f"{what} needs {n} comma-separated values, got {text!r}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise InputError(f"{what} has a non-numeric entry: {text!r}") from None


# ---------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    doc, raw = _read_json(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.threads is not None:
        doc["threads"] = args.threads
    if args.lambda1 is not None:
        doc["lambda1"] = args.lambda1
    if args.stage_override:
        a, b, c = (int(x) for x in _floats(args.stage_override, 3, "--stage-override"))
        doc.update(iter0=a, iter1=b, iter2=c)
    if args.flag_raw_accumulation:
        doc["raw_accumulation"] = True
    if args.flag_pixel_softmax:
        doc["pixel_softmax"] = True
    config = GenConfig.from_dict(doc)
    sgt = ham.load_sgt(args.sgt) if args.sgt else ham.load_sgt()
    stack = load_stack(args.stack) if args.stack else None

    out = _out_dir(args.out)
    problem = make_generation_problem(config)
    result = run_generation(problem.cloud0, config, problem.bias, sgt, problem, stack)

    io.save_scene(out / "scene.json", result.cloud, list(problem.views), result.field)
    io.write_history(out / "history.csv", result.history, HISTORY_COLUMNS)
    for name, (fld, cloud) in sorted(result.snapshots.items()):
        for v, cam in enumerate(problem.views):
            io.write_pgm16(out / f"attn_{name}_view{v}.pgm", render_attention(fld, cloud, cam, v).values)
    resolved = config.to_dict()
    del resolved["threads"]  # results do not depend on it
    io.write_manifest(out, "generate", args.config, config.seed, [raw, _json_bytes(resolved)])
    return EXIT_OK


def _json_bytes(doc) -> bytes:
    return io.dumps(doc).encode("utf-8")


# ---------------------------------------------------------------- edit


def _edit_targets(args, cloud, cams) -> list:
    if args.targets:
        d = Path(args.targets)
        paths = [d / f"target_view{v}.ppm" for v in range(len(cams))]
        missing = [str(p) for p in paths if not p.is_file()]
        if missing:
            raise InputError(f"missing edit target images: {', '.join(missing)}")
        return [io.read_ppm(p) for p in paths]
    rgb = _floats(args.recolor or "0.9,0.2,0.2", 3, "--recolor")
    recolored = cloud.copy()
    recolored.colors[:] = np.clip(rgb, 0.0, 1.0)
    return [render(recolored, cam, "color").color_image for cam in cams]


def _edit_masks(args, cams):
    if not args.masks:
        return None
    d = Path(args.masks)
    masks = []
    for v, cam in enumerate(cams):
        p = d / f"mask_view{v}.pgm"
        if not p.is_file():
            raise InputError(f"missing mask image: {p}")
        m = io.read_pgm16(p)
        if m.shape != (cam.height, cam.width):
            raise InputError(f"mask {p} has shape {m.shape}, camera needs {(cam.height, cam.width)}")
        masks.append(m)
    return masks


def cmd_edit(args) -> int:
    doc, raw = _read_json(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.lambda2 is not None:
        doc["lambda2"] = args.lambda2
    config = EditConfig.from_dict(doc)
    if not args.scene:
        raise InputError("edit needs --scene")
    scene_path = Path(args.scene)
    if not scene_path.is_file():
        raise InputError(f"scene file not found: {args.scene}")
    scene_raw = scene_path.read_bytes()
    try:
        cloud, cams, fld = io.scene_from_json(json.loads(scene_raw))
    except json.JSONDecodeError as e:
        raise InputError(f"malformed JSON in {args.scene}: {e}") from None
    if not cams:
        raise InputError(f"scene {args.scene} has no cameras")
    masks = _edit_masks(args, cams)
    targets = _edit_targets(args, cloud, cams)
    sgt = ham.load_sgt(args.sgt) if args.sgt else ham.load_sgt()
    stack = load_stack(args.stack) if args.stack else None

    result = run_editing(cloud, targets, config, sgt, cams, masks, stack)

    out = _out_dir(args.out)
    io.save_scene(out / "scene.json", result.cloud, cams, fld)
    io.write_csv(out / "history.csv", ("step", "view", "base_loss", "attn_loss", "total"),
                 ([r["step"], r["view"], r["base_loss"], r["attn_loss"], r["total"]] for r in result.history))
    for v, img in enumerate(result.fused):
        io.write_ppm(out / f"fused_view{v}.ppm", img)
    io.write_csv(out / "selected_views.csv", ("rank", "view"), enumerate(result.selected_views))
    io.write_manifest(out, "edit", args.config, config.seed, [raw, scene_raw] + [t.tobytes() for t in targets])
    return EXIT_OK


# ---------------------------------------------------------------- profile

PROFILE_KEYS = {"n_probes", "seed", "alpha", "noise", "probe_size", "spread"}


def cmd_profile(args) -> int:
    doc, raw = (_read_json(args.config) if args.config else ({}, b""))
    unknown = set(doc) - PROFILE_KEYS
    if unknown:
        raise InputError(f"unknown profile config fields: {sorted(unknown)}")
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    n = args.probes if args.probes is not None else int(doc.get("n_probes", 50))
    if n < 1:
        raise InputError("need at least one probe")
    sgt_raw = Path(args.sgt).read_bytes() if args.sgt else b""
    sgt = ham.load_sgt(args.sgt) if args.sgt else ham.load_sgt()
    if args.stack:
        stack = load_stack(args.stack)
    else:
        stack = ham.planted_stack(sgt, alpha=float(doc.get("alpha", 8.0)), noise=float(doc.get("noise", 0.05)), seed=seed)
    size = tuple(doc.get("probe_size", (8, 8)))
    probes = ham.make_probes(n, stack.query_dim, size, seed=seed + 1, spread=float(doc.get("spread", 0.5)))
    W = ham.accumulate_weights(ham.WeightMatrices.zeros(sgt, stack.n_layers, stack.n_heads), probes, stack, sgt,
                               np.random.default_rng(seed + 2))
    layer_w, head_w = W.normalized()
    norm = ham.WeightMatrices(layer_w, head_w, W.n_heads, W.probes_seen)
    head_csv, layer_csv = io.weight_csvs(norm, sgt)

    out = _out_dir(args.out)
    (out / "head_weights.csv").write_text(head_csv)
    (out / "layer_weights.csv").write_text(layer_csv)
    io.write_manifest(out, "profile", args.config, seed, [raw, sgt_raw, str(n).encode()])
    return EXIT_OK


# ---------------------------------------------------------------- biaslab

DEFAULT_EPSILONS = [i / 20 for i in range(21)]


def cmd_biaslab(args) -> int:
    doc, raw = _read_json(args.config)
    if not isinstance(doc, dict) or "p_prior" not in doc:
        raise InputError(f"{args.config}: model JSON needs a 'p_prior' field")
    model = bias_lab.model_from_json(doc)
    eps = doc.get("epsilons", DEFAULT_EPSILONS)
    v_star = doc.get("v_star", 0)
    evidence = tuple(doc.get("evidence_state", (1, 0)))
    rows = bias_lab.sweep(model, v_star, eps, evidence)

    out = _out_dir(args.out)
    io.write_csv(out / "sweep.csv", ("epsilon", "R", "regime", "C"), rows)
    io.write_manifest(out, "biaslab", args.config, args.seed, [raw])
    return EXIT_OK


# ---------------------------------------------------------------- dispatch


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatattn", description="Attention-guided Gaussian splatting toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON config file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)

    g = sub.add_parser("generate", help="three-stage generation run")
    common(g)
    g.add_argument("--stage-override", help="iter0,iter1,iter2")
    g.add_argument("--lambda1", type=float)
    g.add_argument("--flag-raw-accumulation", action="store_true", help="keep unnormalized attention sums")
    g.add_argument("--flag-pixel-softmax", action="store_true", help="softmax over pixels instead of tokens")
    g.add_argument("--sgt")
    g.add_argument("--stack")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("edit", help="multi-view editing run")
    common(e)
    e.add_argument("--scene", help="scene JSON with cameras")
    e.add_argument("--targets", help="directory with target_view<i>.ppm")
    e.add_argument("--masks", help="directory with mask_view<i>.pgm")
    e.add_argument("--recolor", help="r,g,b used to synthesize targets when --targets is absent")
    e.add_argument("--lambda2", type=float)
    e.add_argument("--sgt")
    e.add_argument("--stack")
    e.set_defaults(func=cmd_edit)

    pr = sub.add_parser("profile", help="head and layer role profiling")
    common(pr, config_required=False)
    pr.add_argument("--probes", type=int)
    pr.add_argument("--sgt")
    pr.add_argument("--stack")
    pr.set_defaults(func=cmd_profile)

    b = sub.add_parser("biaslab", help="view-bias sweep over epsilon")
    common(b)
    b.set_defaults(func=cmd_biaslab)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (DivergenceError, FloatingPointError, EmptyFusionSetError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ConfigError, ham.SGTValidationError, InvalidParameterError,
            FileNotFoundError, KeyError, ValueError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
