"""Procedural toy dataset with recoverable ground-truth correspondence."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .config import ValidationError
from .imageio import read_pgm, read_ppm, write_pgm, write_ppm


@dataclass
class TransformDescriptor:
    kind: str = "identity"
    dx: int = 0
    dy: int = 0
    block: int = 0
    perm: tuple[int, ...] = field(default_factory=tuple)
    factor: float = 1.0


@dataclass
class ToySample:
    i_ref: np.ndarray   # [3, H, W]
    s_ref: np.ndarray   # [1, H, W]
    s_tgt: np.ndarray   # [1, H, W]
    i_tgt: np.ndarray   # [3, H, W]
    transform: TransformDescriptor
    seed: int


def semantic_from_image(img: np.ndarray) -> np.ndarray:
    """Edge-like map: channel-mean gradient magnitude, thresholded at its median."""
    mean = img.mean(axis=0)
    gy, gx = np.gradient(mean)
    mag = np.hypot(gx, gy)
    return (mag > np.median(mag)).astype(np.float64)[None]


def generate_texture(rng: np.random.Generator, resolution: int) -> np.ndarray:
    """Seeded colored blobs over smooth gradients, quantized to 8-bit levels."""
    h = w = resolution
    yy, xx = np.mgrid[0:h, 0:w] / max(h - 1, 1)
    img = np.empty((3, h, w))
    for c in range(3):
        a, b = rng.uniform(-0.5, 0.5, size=2)
        img[c] = 0.5 + a * (yy - 0.5) + b * (xx - 0.5)
    n_blobs = 6 + resolution // 8
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radius = rng.uniform(resolution / 16, resolution / 4)
        color = rng.uniform(0, 1, size=3)
        dist2 = (np.arange(h)[:, None] - cy) ** 2 + (np.arange(w)[None, :] - cx) ** 2
        bump = np.exp(-dist2 / (2 * radius**2))
        img += (color[:, None, None] - img) * bump * rng.uniform(0.5, 1.0)
    img = np.clip(img, 0.0, 1.0)
    return np.rint(img * 255.0) / 255.0


def apply_transform(img: np.ndarray, desc: TransformDescriptor) -> np.ndarray:
    h, w = img.shape[1:]
    gt = gt_correspondence(desc, h, w)
    flat = img.reshape(img.shape[0], h * w)
    return flat[:, gt].reshape(img.shape)


def gt_correspondence(desc: TransformDescriptor, h: int, w: int) -> np.ndarray:
    """Flat reference index matched to each target query, by construction."""
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    if desc.kind == "identity":
        src_r, src_c = rows + np.zeros_like(cols), cols + np.zeros_like(rows)
    elif desc.kind == "translate":
        src_r = (rows - desc.dy) % h + np.zeros_like(cols)
        src_c = (cols - desc.dx) % w + np.zeros_like(rows)
    elif desc.kind == "permute":
        b = desc.block
        perm = np.asarray(desc.perm)
        bw = w // b
        block_id = (rows // b) * bw + (cols // b)
        src_block = perm[block_id]
        src_r = (src_block // bw) * b + rows % b
        src_c = (src_block % bw) * b + cols % b
    elif desc.kind == "scale":
        src_r = (np.floor(rows / desc.factor).astype(int) % h) + np.zeros_like(cols)
        src_c = (np.floor(cols / desc.factor).astype(int) % w) + np.zeros_like(rows)
    else:
        raise ValidationError(f"unknown transform kind {desc.kind!r}")
    return (src_r * w + src_c).reshape(-1)


def parse_transform_spec(spec: str, rng: np.random.Generator, resolution: int) -> TransformDescriptor:
    """'identity' | 'translate[:dx,dy]' | 'permute[:block]' | 'scale[:factor]'."""
    name, _, args = spec.partition(":")
    name = name.strip()
    if name == "identity":
        return TransformDescriptor(kind="identity")
    if name == "translate":
        if args:
            try:
                dx, dy = (int(v) for v in args.split(","))
            except ValueError:
                raise ValidationError(f"bad translate args {args!r}, want dx,dy") from None
        else:
            dx, dy = (int(v) for v in rng.integers(1, resolution, size=2))
        return TransformDescriptor(kind="translate", dx=dx, dy=dy)
    if name == "permute":
        block = int(args) if args else max(resolution // 8, 1)
        if resolution % block:
            raise ValidationError(f"permute block {block} does not divide resolution {resolution}")
        n = (resolution // block) ** 2
        return TransformDescriptor(kind="permute", block=block,
                                   perm=tuple(int(v) for v in rng.permutation(n)))
    if name == "scale":
        factor = float(args) if args else float(rng.choice([0.5, 1.5, 2.0]))
        if not 0.5 <= factor <= 2.0:
            raise ValidationError(f"scale factor {factor} outside [0.5, 2]")
        return TransformDescriptor(kind="scale", factor=factor)
    raise ValidationError(f"unknown transform family {name!r}")


def gen_toy_dataset(n: int, resolution: int, transform_spec: str, seed: int) -> list[ToySample]:
    samples = []
    for i in range(n):
        sample_seed = seed * 100003 + i
        rng = nm.make_rng(sample_seed)
        i_ref = generate_texture(rng, resolution)
        desc = parse_transform_spec(transform_spec, rng, resolution)
        i_tgt = apply_transform(i_ref, desc)
        samples.append(
            ToySample(
                i_ref=i_ref,
                s_ref=semantic_from_image(i_ref),
                s_tgt=semantic_from_image(i_tgt),
                i_tgt=i_tgt,
                transform=desc,
                seed=sample_seed,
            )
        )
    return samples


def save_dataset(samples: list[ToySample], out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        d = out / f"sample_{i:04d}"
        d.mkdir(exist_ok=True)
        write_ppm(d / "i_ref.ppm", s.i_ref)
        write_ppm(d / "i_tgt.ppm", s.i_tgt)
        write_pgm(d / "s_ref.pgm", s.s_ref)
        write_pgm(d / "s_tgt.pgm", s.s_tgt)
        meta = {"seed": s.seed, "transform": asdict(s.transform)}
        meta["transform"]["perm"] = list(meta["transform"]["perm"])
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_sample(sample_dir) -> ToySample:
    d = Path(sample_dir)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read sample {d}: {exc}") from None
    tr = meta["transform"]
    tr["perm"] = tuple(tr["perm"])
    return ToySample(
        i_ref=read_ppm(d / "i_ref.ppm"),
        i_tgt=read_ppm(d / "i_tgt.ppm"),
        s_ref=read_pgm(d / "s_ref.pgm"),
        s_tgt=read_pgm(d / "s_tgt.pgm"),
        transform=TransformDescriptor(**tr),
        seed=meta["seed"],
    )


def load_dataset(data_dir) -> list[ToySample]:
    d = Path(data_dir)
    dirs = sorted(p for p in d.glob("sample_*") if p.is_dir())
    if not dirs:
        raise ValidationError(f"no sample_* directories under {d}")
    return [load_sample(p) for p in dirs]
