"""Readers and writers: PPM/PGM images, CSV tables, scene JSON, run manifests."""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io as _io
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .field import AttentionField
from .scene import Camera, GaussianCloud


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit binary PPM (P6) from an (H, W, 3) array in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_header(fh, magic: bytes) -> tuple:
    tokens, comments = [], []
    if fh.readline().strip() != magic:
        raise ValueError(f"not a {magic.decode()} file")
    while len(tokens) < 3:
        line = fh.readline()
        if not line:
            raise ValueError("truncated header")
        line = line.strip()
        if line.startswith(b"#"):
            comments.append(line[1:].decode("ascii").strip())
            continue
        tokens.extend(line.split())
    w, h, maxval = (int(t) for t in tokens[:3])
    return w, h, maxval, comments


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h, maxval, _ = _read_header(fh, b"P6")
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_pgm16(path, grid: np.ndarray, scale: float | None = None) -> float:
    """16-bit binary PGM (P5). Pixel values are ``round(v / scale * 65535)``;
    ``scale`` defaults to the grid maximum and is stored in a ``# scale``
    comment so :func:`read_pgm16` can restore physical values."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"PGM needs a 2-D grid, got {g.shape}")
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ValueError("PGM values must be finite and nonnegative")
    if scale is None:
        scale = float(g.max()) if g.size and g.max() > 0 else 1.0
    data = np.round(np.clip(g / scale, 0.0, 1.0) * 65535.0).astype(">u2")
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n# scale {scale!r}\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())
    return scale


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h, maxval, comments = _read_header(fh, b"P5")
        data = np.frombuffer(fh.read(w * h * 2), dtype=">u2")
    scale = 1.0
    for c in comments:
        if c.startswith("scale"):
            scale = float(c.split()[1])
    return data.reshape(h, w).astype(np.float64) / maxval * scale


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([_fmt(v) for v in r])


def read_csv(path) -> tuple:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_history(path, history: list, columns: Sequence[str]) -> None:
    write_csv(path, columns, ([row[c] for c in columns] for row in history))


def weight_csvs(matrices, sgt) -> tuple:
    """CSV text for the head and layer vote matrices."""
    L, H = matrices.n_layers, matrices.n_heads
    head_cols = [f"l{l}h{h}" for l in range(L) for h in range(H)]
    buf_h = _io.StringIO()
    wr = csv.writer(buf_h, lineterminator="\n")
    wr.writerow(["subclass", "class"] + head_cols)
    for f, sub in enumerate(sgt.subclasses):
        wr.writerow([sub.name, sgt.classes[sub.class_index]] + [_fmt(v) for v in matrices.head_weights[f]])
    buf_l = _io.StringIO()
    wr = csv.writer(buf_l, lineterminator="\n")
    wr.writerow(["class"] + [f"l{l}" for l in range(L)])
    for m, name in enumerate(sgt.classes):
        wr.writerow([name] + [_fmt(v) for v in matrices.layer_weights[m]])
    return buf_h.getvalue(), buf_l.getvalue()


# ---------------------------------------------------------------- scenes


def cloud_to_json(cloud: GaussianCloud) -> list:
    return [
        {
            "position": cloud.positions[i].tolist(),
            "rotation_quat": cloud.rotations[i].tolist(),
            "scale": cloud.scales[i].tolist(),
            "opacity": float(cloud.opacities[i]),
            "color": cloud.colors[i].tolist(),
            "attn_weight": float(cloud.attn_weights[i]),
            "visibility": float(cloud.visibility[i]),
        }
        for i in range(len(cloud))
    ]


def cloud_from_json(items: list) -> GaussianCloud:
    if not items:
        return GaussianCloud.empty()
    try:
        return GaussianCloud(
            positions=[g["position"] for g in items],
            rotations=[g["rotation_quat"] for g in items],
            scales=[g["scale"] for g in items],
            opacities=[g["opacity"] for g in items],
            colors=[g["color"] for g in items],
            attn_weights=[g.get("attn_weight", 0.0) for g in items],
            visibility=[g.get("visibility", 0.0) for g in items],
        )
    except KeyError as e:
        raise ValueError(f"Gaussian entry missing field {e}") from None


def camera_to_json(cam: Camera) -> dict:
    return {
        "eye": cam.eye.tolist(), "look_at": cam.look_at.tolist(), "up": cam.up.tolist(),
        "focal": float(cam.focal), "resolution": list(cam.resolution),
        "azimuth": float(cam.azimuth), "elevation": float(cam.elevation),
    }


def camera_from_json(d: dict) -> Camera:
    return Camera(
        eye=d["eye"], look_at=d["look_at"], up=d.get("up", [0.0, 1.0, 0.0]), focal=d.get("focal", 32.0),
        resolution=tuple(d.get("resolution", (32, 32))), azimuth=d.get("azimuth", 0.0),
        elevation=d.get("elevation", 0.0),
    )


def scene_to_json(cloud: GaussianCloud, cameras: Sequence[Camera] = (), fld: AttentionField | None = None) -> dict:
    doc = {"gaussians": cloud_to_json(cloud), "cameras": [camera_to_json(c) for c in cameras]}
    if fld is not None:
        doc["attention_field"] = {
            "raw": fld.raw.tolist(), "visibility": fld.visibility.tolist(),
            "views_accumulated": fld.views_accumulated, "raw_mode": fld.raw_mode,
        }
    return doc


def scene_from_json(doc: dict) -> tuple:
    cloud = cloud_from_json(doc.get("gaussians", []))
    cams = [camera_from_json(c) for c in doc.get("cameras", [])]
    fld = None
    if "attention_field" in doc:
        a = doc["attention_field"]
        fld = AttentionField(a["raw"], a["visibility"], int(a.get("views_accumulated", 0)), bool(a.get("raw_mode", False)))
        if len(fld) != len(cloud):
            raise ValueError(f"attention field has {len(fld)} entries for {len(cloud)} Gaussians")
    return cloud, cams, fld


def dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save_scene(path, cloud: GaussianCloud, cameras: Sequence[Camera] = (), fld: AttentionField | None = None) -> None:
    Path(path).write_text(dumps(scene_to_json(cloud, cameras, fld)))


def load_scene(path) -> tuple:
    return scene_from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- manifests


def blob_hash(data: bytes) -> str:
    """Git blob object id of ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def inputs_hash(parts: Sequence[bytes]) -> str:
    h = hashlib.sha1()
    for p in parts:
        h.update(blob_hash(p).encode("ascii"))
    return h.hexdigest()


def created_at() -> str:
    """UTC timestamp, pinned by ``SOURCE_DATE_EPOCH`` when that is set."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        t = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc)
    else:
        t = _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0)
    return t.isoformat().replace("+00:00", "Z")


def write_manifest(out_dir, command: str, config_path, seed, inputs: Sequence[bytes]) -> dict:
    """Write ``manifest.json`` listing every other file in ``out_dir`` with its blob hash."""
    out_dir = Path(out_dir)
    outputs = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            outputs[p.relative_to(out_dir).as_posix()] = blob_hash(p.read_bytes())
    doc = {
        "command": command,
        "config_path": None if config_path is None else str(config_path),
        "output_dir": str(out_dir),
        "seed": seed,
        "created_at": created_at(),
        "input_hash": inputs_hash(inputs),
        "outputs": outputs,
    }
    (out_dir / "manifest.json").write_text(dumps(doc))
    return doc
