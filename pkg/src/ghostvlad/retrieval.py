"""Descriptor index, exhaustive retrieval, Recall@N, and a synthetic
geotagged dataset generator.

The dataset manifest is JSON-Lines: one object per image with keys
``id``, ``image`` (path relative to the manifest), ``x_m``, ``y_m``
(planar meters), and ``split`` (db/query/train/val/test). Ground truth
for evaluation is purely geometric: a retrieved db image is correct
when it lies within the tolerance radius of the query's true position.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from .images import load_image_chw, write_ppm
from .rng import lane_rng

__all__ = [
    "SPLITS",
    "ImageRecord",
    "DescriptorIndex",
    "load_manifest",
    "save_manifest",
    "build_index",
    "query_topn",
    "recall_at_n",
    "synth_dataset",
]

SPLITS = ("db", "query", "train", "val", "test")


@dataclass(frozen=True)
class ImageRecord:
    """One manifest row: identity, pixels on disk, position, split."""

    id: str
    image: str
    x_m: float
    y_m: float
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"{self.id}: unknown split {self.split!r}")
        if not (math.isfinite(self.x_m) and math.isfinite(self.y_m)):
            raise ValueError(f"{self.id}: position must be finite")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x_m, self.y_m])


def save_manifest(path, records) -> None:
    """Write records as JSON-Lines with a fixed key order."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(
                json.dumps(
                    {"id": r.id, "image": r.image, "x_m": r.x_m, "y_m": r.y_m, "split": r.split}
                )
                + "\n"
            )


def load_manifest(path) -> list:
    """Read a JSON-Lines manifest; ids must be unique."""
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                record = ImageRecord(
                    id=str(doc["id"]),
                    image=str(doc["image"]),
                    x_m=float(doc["x_m"]),
                    y_m=float(doc["y_m"]),
                    split=str(doc["split"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: bad manifest row: {exc}") from exc
            if record.id in seen:
                raise ValueError(f"{path}:{line_no}: duplicate id {record.id!r}")
            seen.add(record.id)
            records.append(record)
    return records


class DescriptorIndex:
    """L2-normalized global descriptors, one row per db image."""

    def __init__(self, descriptors: np.ndarray, ids):
        descriptors = np.asarray(descriptors, dtype=np.float32)
        ids = list(ids)
        if descriptors.ndim != 2 or descriptors.shape[0] != len(ids):
            raise ValueError(f"{descriptors.shape} descriptors for {len(ids)} ids")
        norms = np.linalg.norm(descriptors, axis=1)
        if descriptors.shape[0] and not np.all(np.abs(norms - 1.0) <= 1e-5):
            raise ValueError("index rows must be unit-norm within 1e-5")
        self.descriptors = descriptors
        self.ids = ids

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def save(self, path) -> None:
        checkpoint.save_arrays(
            path,
            {
                "index.descriptors": self.descriptors,
                "index.ids": checkpoint.text_to_array("\n".join(self.ids)),
            },
        )

    @classmethod
    def load(cls, path) -> "DescriptorIndex":
        arrays = checkpoint.load_arrays(path)
        try:
            descriptors = arrays["index.descriptors"]
            ids = checkpoint.array_to_text(arrays["index.ids"]).split("\n")
        except KeyError as exc:
            raise checkpoint.CheckpointError(f"{path}: not a descriptor index") from exc
        return cls(descriptors, ids)


def build_index(records, extractor, root, size_hw, batch_size: int = 8) -> DescriptorIndex:
    """Extract descriptors for ``records`` in id order.

    ``extractor`` maps a float32 (N, 3, H, W) batch to (N, dim) unit
    rows; ``root`` anchors the records' relative image paths.
    """
    records = sorted(records, key=lambda r: r.id)
    if not records:
        raise ValueError("cannot index an empty record list")
    root = Path(root)
    rows = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        batch = np.stack([load_image_chw(root / r.image, size_hw) for r in chunk])
        rows.append(np.asarray(extractor(batch), dtype=np.float32))
    return DescriptorIndex(np.concatenate(rows, axis=0), [r.id for r in records])


def query_topn(index: DescriptorIndex, descriptor: np.ndarray, n: int):
    """Exhaustive Euclidean search: ascending distance, ties by id,
    min(n, db size) results as (id, distance) pairs."""
    descriptor = np.asarray(descriptor, dtype=np.float32).reshape(-1)
    if descriptor.shape[0] != index.dim:
        raise ValueError(f"descriptor dim {descriptor.shape[0]} != index dim {index.dim}")
    if n < 1:
        raise ValueError("n must be >= 1")
    dists = np.linalg.norm(index.descriptors - descriptor[None, :], axis=1)
    order = sorted(range(len(index)), key=lambda i: (float(dists[i]), index.ids[i]))
    return [(index.ids[i], float(dists[i])) for i in order[:n]]


def recall_at_n(query_records, query_descriptors, index: DescriptorIndex, records, tolerance_m: float, at=(1, 5, 10, 20, 25)) -> dict:
    """Fraction of queries with a within-tolerance db hit in the top N.

    ``records`` supplies positions for every indexed id (extra records
    are fine). Returns {N: recall} for each N in ``at``.
    """
    query_records = list(query_records)
    if not query_records:
        raise ValueError("no queries to evaluate")
    if tolerance_m <= 0:
        raise ValueError("tolerance_m must be positive")
    query_descriptors = np.asarray(query_descriptors)
    if query_descriptors.shape[0] != len(query_records):
        raise ValueError("one descriptor row per query record required")
    positions = {r.id: (r.x_m, r.y_m) for r in records}
    missing = [i for i in index.ids if i not in positions]
    if missing:
        raise ValueError(f"records missing positions for indexed ids, e.g. {missing[0]!r}")

    at = sorted(set(int(n) for n in at))
    max_n = min(at[-1], len(index))
    hits = np.zeros(len(at), dtype=np.int64)
    for record, descriptor in zip(query_records, query_descriptors):
        ranked = query_topn(index, descriptor, max_n)
        qx, qy = record.x_m, record.y_m
        first_hit = None
        for rank, (hit_id, _) in enumerate(ranked, start=1):
            hx, hy = positions[hit_id]
            if math.hypot(hx - qx, hy - qy) <= tolerance_m:
                first_hit = rank
                break
        if first_hit is not None:
            for slot, n in enumerate(at):
                if first_hit <= n:
                    hits[slot] += 1
    return {n: float(hits[slot]) / len(query_records) for slot, n in enumerate(at)}


def _place_texture(rng, height: int, width: int) -> np.ndarray:
    """A distinct procedural texture, float32 in [0, 1].

    Each place draws its own spatial frequency band (log-uniform over
    four octaves), stripe profile, blob density and size scale, and
    per-channel amplitude palette, so places differ in structure across
    scales and channels rather than only in phase. That keeps place
    identity visible to feature extractors even under the view-level
    crop and photometric jitter."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
    canvas = np.zeros((height, width, 3), dtype=np.float32)
    base_freq = float(np.exp(rng.uniform(np.log(0.015), np.log(0.3))))
    for harmonic in range(int(rng.integers(1, 4))):
        theta = rng.uniform(0.0, np.pi)
        freq = base_freq * (harmonic + 1)
        phase = rng.uniform(0.0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        if rng.uniform() < 0.5:
            wave = np.sign(wave) * np.sqrt(np.abs(wave))  # bar-like profile
        amp = (rng.uniform(0.15, 0.5, size=3) / (harmonic + 1)).astype(np.float32)
        canvas += wave[:, :, None] * amp[None, None, :]
    for _ in range(int(rng.integers(0, 9))):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        radius = float(np.exp(rng.uniform(np.log(0.04), np.log(0.3)))) * min(height, width)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2)))
        color = rng.uniform(-0.8, 0.8, size=3).astype(np.float32)
        canvas += blob[:, :, None] * color[None, None, :]
    canvas += rng.normal(0.0, 0.03, size=canvas.shape).astype(np.float32)
    canvas = (canvas - canvas.min()) / max(canvas.max() - canvas.min(), 1e-6)
    return canvas.astype(np.float32)


def synth_dataset(
    seed: int,
    num_places: int,
    views_per_place: int,
    out_dir,
    size_hw: tuple = (96, 128),
    spacing_m: float = 100.0,
    positive_radius_m: float = 5.0,
    negative_radius_m: float = 25.0,
    nuisance: float = 1.0,
) -> list:
    """Generate a synthetic geotagged place-recognition dataset.

    Places sit on a square grid ``spacing_m`` apart, each with its own
    procedural texture. Views are random crops of that texture under
    brightness/contrast jitter, channel mixing, and sensor noise, with
    positions jittered inside ``positive_radius_m``; even-numbered
    views are tagged db and odd-numbered query. ``nuisance`` in [0, 1]
    scales every view-to-view perturbation: 0 gives near-identical
    views of each place, 1 the full crop and photometric jitter.
    Writes PPM images and ``manifest.jsonl`` under ``out_dir`` and
    returns the records. Byte-deterministic for a fixed seed.
    """
    if num_places < 1 or views_per_place < 1:
        raise ValueError("need at least one place and one view")
    if not 0.0 <= nuisance <= 1.0:
        raise ValueError(f"nuisance must lie in [0, 1], got {nuisance}")
    if spacing_m <= 2 * negative_radius_m:
        raise ValueError(
            f"grid spacing {spacing_m} must exceed twice the negative radius {negative_radius_m}"
        )
    height, width = size_hw
    master_h, master_w = int(height * 1.5), int(width * 1.5)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    cols = math.ceil(math.sqrt(num_places))

    span_y = master_h - height
    span_x = master_w - width
    jit_y = int(round(span_y * nuisance))
    jit_x = int(round(span_x * nuisance))

    records = []
    for p in range(num_places):
        texture = _place_texture(lane_rng(seed, f"place.{p}"), master_h, master_w)
        px = (p % cols) * spacing_m
        py = (p // cols) * spacing_m
        for v in range(views_per_place):
            rng = lane_rng(seed, f"view.{p}.{v}")
            oy = (span_y - jit_y) // 2 + int(rng.integers(0, jit_y + 1))
            ox = (span_x - jit_x) // 2 + int(rng.integers(0, jit_x + 1))
            view = texture[oy : oy + height, ox : ox + width].copy()

            contrast = 1.0 + rng.uniform(-0.4, 0.4) * nuisance
            brightness = rng.uniform(-0.22, 0.22) * nuisance
            view = (view - 0.5) * contrast + 0.5 + brightness
            mix = np.eye(3, dtype=np.float32) + (
                rng.uniform(-0.18, 0.18, size=(3, 3)) * nuisance
            ).astype(np.float32)
            view = view @ mix.T
            view += rng.normal(0.0, rng.uniform(0.02, 0.07) * nuisance, size=view.shape).astype(
                np.float32
            )
            pixels = np.clip(np.rint(view * 255.0), 0, 255).astype(np.uint8)

            radius = positive_radius_m * math.sqrt(rng.uniform())
            angle = rng.uniform(0.0, 2 * np.pi)
            name = f"p{p:03d}_v{v:02d}"
            rel = f"images/{name}.ppm"
            write_ppm(out_dir / rel, pixels)
            records.append(
                ImageRecord(
                    id=name,
                    image=rel,
                    x_m=round(px + radius * math.cos(angle), 3),
                    y_m=round(py + radius * math.sin(angle), 3),
                    split="db" if v % 2 == 0 else "query",
                )
            )
    save_manifest(out_dir / "manifest.jsonl", records)
    return records
