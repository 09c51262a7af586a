"""Datasets on disk (manifest.json + 8-bit PGM), the synthetic generator, and checkpoints."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .config import NetworkConfig, SynthConfig, TrainingConfig, section_from_dict

SCHEMA_VERSION = 1
CKPT_MAGIC = b"FMCKPT1\0"
CKPT_VERSION = 1


class DataError(ValueError):
    pass


@dataclass
class MultiAnnotatedSample:
    image: np.ndarray  # [C_X, H, W] in [0, 1]
    masks: list[np.ndarray]  # E binary [H, W]
    id: str = ""

    def __post_init__(self):
        if not self.masks:
            raise DataError(f"sample {self.id!r} has no masks")
        hw = self.image.shape[1:]
        for m in self.masks:
            if m.shape != hw:
                raise DataError(f"sample {self.id!r}: mask shape {m.shape} vs image {hw}")


# ---------------------------------------------------------------------- PGM


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise DataError(f"write_pgm expects a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def _tokens(buf: bytes, pos: int, count: int):
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        out.append(buf[start:pos])
    return out, pos


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) graymap with maxval <= 255 as uint8 [H, W]."""
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    if buf[:2] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5)")
    try:
        (w, h, maxval), pos = _tokens(buf, 2, 3)
        w, h, maxval = int(w), int(h), int(maxval)
    except (DataError, ValueError) as e:
        raise DataError(f"{path}: malformed PGM header") from e
    if not 0 < maxval < 256 or w < 1 or h < 1:
        raise DataError(f"{path}: unsupported PGM geometry {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace after maxval
    body = buf[pos : pos + w * h]
    if len(body) != w * h:
        raise DataError(f"{path}: PGM body has {len(body)} bytes, expected {w * h}")
    img = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return img


def to_u8(x: np.ndarray) -> np.ndarray:
    """Map [0, 1] reals to 0..255 by rounding, clipping out-of-range values."""
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


# ------------------------------------------------------------------ dataset


def save_dataset(directory, samples, annotators: int | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "images").mkdir(exist_ok=True)
    (d / "masks").mkdir(exist_ok=True)
    records = []
    for s in samples:
        imgs = []
        for c in range(s.image.shape[0]):
            rel = f"images/{s.id}_c{c}.pgm"
            write_pgm(d / rel, to_u8(s.image[c]))
            imgs.append(rel)
        masks = []
        for e, m in enumerate(s.masks):
            rel = f"masks/{s.id}_a{e}.pgm"
            write_pgm(d / rel, (np.asarray(m) > 0).astype(np.uint8) * 255)
            masks.append(rel)
        records.append({"id": s.id, "images": imgs, "masks": masks})
    first = samples[0] if samples else None
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "channels": int(first.image.shape[0]) if first else 0,
        "height": int(first.image.shape[1]) if first else 0,
        "width": int(first.image.shape[2]) if first else 0,
        "annotators": annotators if annotators is not None else (max(len(s.masks) for s in samples) if samples else 0),
        "samples": records,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return d


def load_dataset(directory) -> list[MultiAnnotatedSample]:
    d = Path(directory)
    mpath = d / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as e:
        raise DataError(f"{mpath}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{mpath}: invalid JSON ({e})") from e
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{mpath}: unknown schema version {manifest.get('schema_version')!r}")
    C, H, W = manifest["channels"], manifest["height"], manifest["width"]
    out = []
    for rec in manifest["samples"]:

        def load(rel):
            p = d / rel
            img = read_pgm(p)
            if img.shape != (H, W):
                raise DataError(f"{p}: size {img.shape[1]}x{img.shape[0]}, manifest says {W}x{H}")
            return img

        if len(rec["images"]) != C:
            raise DataError(f"{mpath}: sample {rec['id']} lists {len(rec['images'])} channels, expected {C}")
        if not rec["masks"]:
            raise DataError(f"{mpath}: sample {rec['id']} has no masks")
        image = np.stack([load(p).astype(np.float64) / 255.0 for p in rec["images"]])
        masks = [(load(p) >= 128).astype(np.uint8) for p in rec["masks"]]
        out.append(MultiAnnotatedSample(image, masks, rec["id"]))
    return out


# ---------------------------------------------------------------- synthetic


@dataclass
class Ellipse:
    cy: float
    cx: float
    a: float  # semi-axis along the rotated x direction
    b: float
    theta: float

    def local(self, size: int):
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        dy, dx = yy - self.cy, xx - self.cx
        c, s = math.cos(self.theta), math.sin(self.theta)
        return dx * c + dy * s, -dx * s + dy * c

    def rho(self, size: int, dr: float = 0.0) -> np.ndarray:
        u, v = self.local(size)
        return np.sqrt((u / (self.a + dr)) ** 2 + (v / (self.b + dr)) ** 2)

    def mask(self, size: int, dr: float = 0.0) -> np.ndarray:
        if self.a + dr <= 0 or self.b + dr <= 0:
            return np.zeros((size, size), dtype=np.uint8)
        return (self.rho(size, dr) <= 1.0).astype(np.uint8)


def _draw_ellipse(rng: np.random.Generator, size: int) -> Ellipse:
    while True:
        a = rng.uniform(0.12, 0.3) * size
        b = rng.uniform(0.12, 0.3) * size
        cy, cx = rng.uniform(0.35, 0.65, size=2) * (size - 1)
        theta = rng.uniform(0.0, math.pi)
        if min(a, b) >= 1.0:
            return Ellipse(cy, cx, a, b, theta)


def synth_sample(cfg: SynthConfig, index: int) -> tuple[MultiAnnotatedSample, Ellipse]:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(index,)))
    n = cfg.size
    ell = _draw_ellipse(rng, n)
    blob = 1.0 / (1.0 + np.exp((ell.rho(n) - 1.0) / 0.15))
    image = np.clip(0.2 + 0.6 * blob + cfg.noise * rng.standard_normal((n, n)), 0.0, 1.0)
    masks = []
    for _ in range(cfg.annotators):
        empty = rng.random() < cfg.p_empty
        dr = cfg.sigma_r * rng.standard_normal()
        masks.append(np.zeros((n, n), np.uint8) if empty else ell.mask(n, dr))
    return MultiAnnotatedSample(image[None], masks, f"s{index:05d}"), ell


def synth_samples(cfg: SynthConfig) -> list[MultiAnnotatedSample]:
    cfg.validate()
    return [synth_sample(cfg, i)[0] for i in range(cfg.n_samples)]


def synth_generate(cfg: SynthConfig, directory) -> list[MultiAnnotatedSample]:
    """Generate ``cfg.n_samples`` images with ``cfg.annotators`` masks each and write them out."""
    samples = synth_samples(cfg)
    save_dataset(directory, samples, annotators=cfg.annotators)
    return samples


def synth_pixel_probability(ell: Ellipse, size: int, sigma_r: float, p_empty: float) -> np.ndarray:
    """Probability that one annotator marks each pixel, under the generator's law.

    A pixel at local coordinates (u, v) is inside the jittered ellipse iff
    (u/(a+dr))^2 + (v/(b+dr))^2 <= 1, which is monotone in dr, so it is inside
    iff dr >= dr* for a threshold dr* found by bisection.
    """
    u, v = ell.local(size)
    u, v = np.abs(u).ravel(), np.abs(v).ravel()
    lo = np.full(u.shape, -min(ell.a, ell.b) + 1e-12)
    hi = np.full(u.shape, np.hypot(u, v).max() + 1.0)

    def inside(dr):
        return (u / (ell.a + dr)) ** 2 + (v / (ell.b + dr)) ** 2 <= 1.0

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        ok = inside(mid)
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    thr = hi
    if sigma_r == 0:
        p_in = inside(np.zeros_like(u)).astype(np.float64)
    else:
        p_in = ndtr(-thr / sigma_r)
    return ((1.0 - p_empty) * p_in).reshape(size, size)


# --------------------------------------------------------------- checkpoint


def save_checkpoint(path, params, train_config: TrainingConfig | None, iteration: int) -> None:
    entries, offset = [], 0
    for name, arr in params.tensors.items():
        nbytes = arr.size * 8
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "version": CKPT_VERSION,
        "network": asdict(params.config),
        "training": asdict(train_config) if train_config is not None else None,
        "iteration": int(iteration),
        "seed": train_config.seed if train_config is not None else None,
        "params": entries,
        "blob_nbytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.tensors.values())
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns ``(params, training_config_or_None, iteration)``."""
    from .net import VelocityNetParams, param_shapes

    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    if buf[:8] != CKPT_MAGIC:
        raise DataError(f"{path}: bad magic {buf[:8]!r}")
    if len(buf) < 16:
        raise DataError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    try:
        header = json.loads(buf[16 : 16 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: corrupt header") from e
    if header.get("version") != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    blob = buf[16 + hlen :]
    if len(blob) != header["blob_nbytes"] or sum(e["nbytes"] for e in header["params"]) != len(blob):
        raise DataError(f"{path}: parameter blob is {len(blob)} bytes, header expects {header['blob_nbytes']}")
    net_cfg = section_from_dict(NetworkConfig, header["network"]).validate()
    expected = param_shapes(net_cfg)
    tensors = {}
    for e in header["params"]:
        shape = tuple(e["shape"])
        if expected.get(e["name"]) != shape:
            raise DataError(f"{path}: parameter {e['name']} shape {shape} does not fit the network config")
        arr = np.frombuffer(blob, dtype="<f8", count=int(np.prod(shape)), offset=e["offset"])
        tensors[e["name"]] = arr.astype(np.float64).reshape(shape)
    if set(tensors) != set(expected):
        raise DataError(f"{path}: parameter set does not match the network config")
    tensors = {k: tensors[k] for k in expected}
    train_cfg = header.get("training")
    train_cfg = section_from_dict(TrainingConfig, train_cfg) if train_cfg is not None else None
    return VelocityNetParams(net_cfg, tensors), train_cfg, header["iteration"]
