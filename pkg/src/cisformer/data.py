"""Synthetic camouflage scenes, ground-truth boundaries, RLE masks and annotation files."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .config import SynthConfig


@dataclass
class Sample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    masks: np.ndarray  # uint8 [G, H, W]
    boundaries: np.ndarray  # uint8 [G, H, W]
    image_id: int | str
    file_name: str = ""


# -- boundaries --------------------------------------------------------------

def gt_boundary_from_mask(mask: np.ndarray, width: int = 2) -> np.ndarray:
    """Inner edge band: ``mask XOR erosion(mask, (2*width+1)^2 square)``.

    Pixels outside the frame count as background, so a mask touching the
    image border gets boundary pixels along that border.
    """
    if width < 1:
        raise ValueError("boundary width must be >= 1")
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.zeros(m.shape, dtype=np.uint8)
    structure = np.ones((2 * width + 1, 2 * width + 1), dtype=bool)
    eroded = ndimage.binary_erosion(m, structure=structure, border_value=0)
    return (m ^ eroded).astype(np.uint8)


# -- synthetic generator -----------------------------------------------------

def smooth_noise(rng: np.random.Generator, shape, std: float, scales=(1.5, 3.0, 6.0)) -> np.ndarray:
    """Multi-octave Gaussian-filtered white noise rescaled to the requested std."""
    field = np.zeros(shape, dtype=np.float64)
    for i, s in enumerate(scales):
        field += ndimage.gaussian_filter(rng.standard_normal(shape), s, mode="wrap") * (1.5 ** i)
    field -= field.mean()
    return field * (std / (field.std() + 1e-12))


def _blob_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    # smooth coordinate warp
    warp_y = smooth_noise(rng, (size, size), size * 0.03, scales=(size / 8,))
    warp_x = smooth_noise(rng, (size, size), size * 0.03, scales=(size / 8,))
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    radius = rng.uniform(0.10, 0.2) * size
    dy = yy + warp_y - cy
    dx = xx + warp_x - cx
    theta = np.arctan2(dy, dx)
    r = np.hypot(dy, dx)
    profile = np.ones_like(theta)
    for k in (2, 3, 4):
        profile += rng.uniform(0, 0.18) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return r <= radius * profile


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)


def background_ring(masks: np.ndarray, index: int, radius: int = 4) -> np.ndarray:
    union = masks.any(0)
    ring = ndimage.binary_dilation(masks[index].astype(bool), iterations=radius)
    return ring & ~union


def synth_sample(cfg: SynthConfig, rng: np.random.Generator, image_id=0) -> Sample:
    s = cfg.image_size
    n_target = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    base = rng.uniform(0.3, 0.7, size=3)
    gains = rng.uniform(0.8, 1.2, size=3)
    texture = smooth_noise(rng, (s, s), cfg.texture_std)
    img = base[:, None, None] + gains[:, None, None] * texture[None]

    min_area = max(30, (s * s) // 200)
    raw: list[np.ndarray] = []
    attempts = 0
    while len(raw) < n_target and (attempts < 200 or len(raw) < cfg.min_instances):
        attempts += 1
        cand = _blob_mask(rng, s)
        if cand.sum() < 2 * min_area:
            continue
        # later blobs are in front; every earlier blob must stay substantially visible
        ok = all((m & ~cand).sum() >= max(min_area, 0.5 * m.sum()) for m in raw)
        if ok:
            raw.append(cand)
    visible = []
    for i, m in enumerate(raw):
        v = m.copy()
        for later in raw[i + 1:]:
            v &= ~later
        visible.append(v)
    masks = np.stack(visible).astype(np.uint8) if visible else np.zeros((0, s, s), np.uint8)

    deltas = []
    for i in range(len(masks)):
        inst = smooth_noise(rng, (s, s), cfg.texture_std)
        delta = rng.choice([-1.0, 1.0], size=3) * rng.uniform(0.5, 0.9, size=3) * cfg.contrast
        deltas.append(delta)
        m = masks[i].astype(bool)
        img[:, m] = (base + delta)[:, None] + gains[:, None] * inst[m][None]
    # pin each instance's mean contrast against its surrounding background ring
    for i, delta in enumerate(deltas):
        m = masks[i].astype(bool)
        ring = background_ring(masks, i)
        if not ring.any():
            continue
        for c in range(3):
            shift = img[c][ring].mean() + delta[c] - img[c][m].mean()
            img[c][m] += shift
    image = _quantize(img)
    bounds = np.stack([gt_boundary_from_mask(m, cfg.boundary_width) for m in masks]) if len(masks) \
        else np.zeros_like(masks)
    return Sample(image, masks, bounds, image_id, f"{image_id:06d}.png" if isinstance(image_id, int) else "")


def synth_generate(cfg: SynthConfig, num_images: int, seed: int) -> list[Sample]:
    """Deterministic synthetic split; per-image generators come from seed splitting."""
    children = np.random.SeedSequence(seed).spawn(num_images)
    return [synth_sample(cfg, np.random.default_rng(ss), image_id=i) for i, ss in enumerate(children)]


def contrast_stats(sample: Sample) -> list[float]:
    """Mean over channels of ``|interior mean - background ring mean|`` for each instance."""
    out = []
    for i in range(len(sample.masks)):
        m = sample.masks[i].astype(bool)
        ring = background_ring(sample.masks, i)
        if not ring.any():
            continue
        out.append(float(np.mean([abs(sample.image[c][m].mean() - sample.image[c][ring].mean())
                                  for c in range(3)])))
    return out


# -- run-length encoding ----------------------------------------------------

def rle_encode(mask: np.ndarray) -> dict:
    """Uncompressed column-major RLE; counts alternate zeros/ones starting with zeros."""
    m = np.asarray(mask).astype(np.uint8)
    h, w = m.shape
    flat = m.flatten(order="F")
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"counts": [int(c) for c in counts], "size": [int(h), int(w)]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, str):
        counts = rle_string_to_counts(counts)
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    val = 0
    for c in counts:
        if val:
            flat[pos:pos + c] = 1
        pos += c
        val ^= 1
    if pos != h * w:
        raise ValueError(f"RLE covers {pos} pixels, expected {h * w}")
    return flat.reshape((h, w), order="F")


def rle_counts_to_string(counts: list[int]) -> str:
    """COCO's compact ASCII form of RLE counts (delta + 5-bit varint)."""
    out = []
    for i, x in enumerate(counts):
        if i > 2:
            x -= counts[i - 2]
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def rle_string_to_counts(s: str) -> list[int]:
    counts: list[int] = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


# -- annotation files -------------------------------------------------------

def instance_record(mask: np.ndarray, score: float | None = None) -> dict:
    rle = rle_encode(mask)
    rec = {"rle_counts": rle["counts"], "rle_size": rle["size"]}
    if score is not None:
        rec["score"] = float(score)
    return rec


def write_annotations(path: str | Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        json.dump({"images": records}, fh)


def read_annotations(path: str | Path) -> list[dict]:
    """Read either the native ``{"images": [...instances...]}`` layout or a COCO instances file."""
    with open(path) as fh:
        data = json.load(fh)
    if "annotations" in data:
        return _from_coco(data)
    return data["images"]


def _from_coco(data: dict) -> list[dict]:
    images = {im["id"]: {"image_id": im["id"], "file_name": im.get("file_name", ""),
                         "height": im["height"], "width": im["width"], "instances": []}
              for im in data["images"]}
    for ann in data["annotations"]:
        seg = ann["segmentation"]
        if not isinstance(seg, dict):
            raise ValueError("only RLE segmentations are supported")
        counts = seg["counts"]
        if isinstance(counts, str):
            counts = rle_string_to_counts(counts)
        rec = {"rle_counts": counts, "rle_size": seg["size"]}
        if "score" in ann:
            rec["score"] = ann["score"]
        images[ann["image_id"]]["instances"].append(rec)
    return list(images.values())


def record_masks(record: dict) -> np.ndarray:
    h, w = record["height"], record["width"]
    masks = [rle_decode({"counts": r["rle_counts"], "size": r["rle_size"]}) for r in record["instances"]]
    return np.stack(masks) if masks else np.zeros((0, h, w), np.uint8)


def save_dataset(samples: list[Sample], root: str | Path, split: str) -> Path:
    """Write ``root/split/*.png`` plus ``root/split.json``; returns the annotation path."""
    root = Path(root)
    img_dir = root / split
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for smp in samples:
        name = smp.file_name or f"{smp.image_id}.png"
        arr = np.round(smp.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(arr).save(img_dir / name)
        records.append({"image_id": smp.image_id, "file_name": f"{split}/{name}",
                        "height": int(smp.image.shape[1]), "width": int(smp.image.shape[2]),
                        "instances": [instance_record(m) for m in smp.masks]})
    ann = root / f"{split}.json"
    write_annotations(ann, records)
    return ann


def load_dataset(annotation_path: str | Path, image_root: str | Path | None = None,
                 boundary_width: int = 2) -> list[Sample]:
    annotation_path = Path(annotation_path)
    root = Path(image_root) if image_root else annotation_path.parent
    out = []
    for rec in read_annotations(annotation_path):
        img = np.asarray(Image.open(root / rec["file_name"]).convert("RGB"), dtype=np.float32) / 255
        masks = record_masks(rec)
        bounds = np.stack([gt_boundary_from_mask(m, boundary_width) for m in masks]) if len(masks) \
            else np.zeros_like(masks)
        out.append(Sample(img.transpose(2, 0, 1).copy(), masks, bounds, rec["image_id"], rec["file_name"]))
    return out
