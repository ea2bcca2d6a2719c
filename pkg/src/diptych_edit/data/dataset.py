"""Editing-pair datasets: generation, on-disk layout, and validated loading.

Layout of a dataset directory::

    manifest.json              version, generator seed, counts, record list
    records/00000.json         sidecar: instruction, task type, seed, metadata
    records/00000_source.png   8-bit previews
    records/00000_target.png
    records/00000_source.f32   exact little-endian float32 (H, W, 3) arrays
    records/00000_target.f32
    records/00000_region.u8    edit-region mask, one byte per pixel
    records/00000_focus.u8     pixels inspected by the task predicate

Every manifest record lists the sha256 of each of its files; loading verifies
them and re-checks the pair invariants.
"""

from __future__ import annotations

import hashlib
import json
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .palette import PANEL, TASK_TYPES
from .scenes import EditPair, gen_edit_pair

VERSION = 1

# Task-type counts of the reference 50K editing corpus; the default toy mix keeps these ratios.
REFERENCE_COUNTS = {
    "removal": 13272,
    "addition": 11938,
    "swap": 5823,
    "attribute_mod": 11484,
    "style": 10530,
}


class DatasetError(ValueError):
    pass


def ratio_counts(total: int, reference: dict[str, int] = REFERENCE_COUNTS) -> dict[str, int]:
    """Split ``total`` in proportion to ``reference`` (largest-remainder rounding)."""
    ref_total = sum(reference.values())
    exact = {k: Fraction(v * total, ref_total) for k, v in reference.items()}
    counts = {k: int(v) for k, v in exact.items()}
    short = total - sum(counts.values())
    by_remainder = sorted(reference, key=lambda k: (-(exact[k] - counts[k]), list(reference).index(k)))
    for k in by_remainder[:short]:
        counts[k] += 1
    return counts


def record_seeds(seed: int, n: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def _task_sequence(counts: dict[str, int]) -> list[str]:
    return [t for t in TASK_TYPES for _ in range(counts.get(t, 0))]


def generate_pairs(counts: dict[str, int], seed: int, corruption_rate: float = 0.0) -> list[EditPair]:
    """Pure function of (counts, seed): one independently seeded draw per record.

    With ``corruption_rate > 0`` that fraction of records gets its target
    replaced by the unedited source (a failed edit), flagged ``corrupted``.
    """
    unknown = set(counts) - set(TASK_TYPES)
    if unknown:
        raise DatasetError(f"unknown task types {sorted(unknown)}")
    if any(v < 0 for v in counts.values()):
        raise DatasetError("counts must be non-negative")
    tasks = _task_sequence(counts)
    seeds = record_seeds(seed, len(tasks))
    pairs = []
    for task, s in zip(tasks, seeds):
        rng = np.random.default_rng(s)
        pair = gen_edit_pair(rng, task, seed=s)
        if corruption_rate > 0 and rng.random() < corruption_rate:
            pair.target = pair.source.copy()
            pair.corrupted = True
        pairs.append(pair)
    return pairs


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _png_bytes(img: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def write_pair(directory: Path, index: int, pair: EditPair) -> dict:
    stem = f"{index:05d}"
    files = {
        "sidecar": f"records/{stem}.json",
        "source_png": f"records/{stem}_source.png",
        "target_png": f"records/{stem}_target.png",
        "source": f"records/{stem}_source.f32",
        "target": f"records/{stem}_target.f32",
        "region": f"records/{stem}_region.u8",
        "focus": f"records/{stem}_focus.u8",
    }
    sidecar = {
        "instruction": pair.instruction,
        "task_type": pair.task_type,
        "seed": pair.seed,
        "corrupted": pair.corrupted,
        "shape": list(pair.source.shape),
        "meta": pair.meta,
    }
    focus = pair.focus_mask if pair.focus_mask is not None else pair.edit_region_mask
    blobs = {
        "sidecar": (json.dumps(sidecar, indent=1, sort_keys=True) + "\n").encode(),
        "source_png": _png_bytes(pair.source),
        "target_png": _png_bytes(pair.target),
        "source": np.ascontiguousarray(pair.source, dtype="<f4").tobytes(),
        "target": np.ascontiguousarray(pair.target, dtype="<f4").tobytes(),
        "region": np.ascontiguousarray(pair.edit_region_mask, dtype=np.uint8).tobytes(),
        "focus": np.ascontiguousarray(focus, dtype=np.uint8).tobytes(),
    }
    sums = {}
    for key, rel in files.items():
        (directory / rel).write_bytes(blobs[key])
        sums[key] = _sha(blobs[key])
    return {"index": index, "task_type": pair.task_type, "files": files, "sha256": sums}


def gen_dataset(directory, counts: dict[str, int], seed: int, corruption_rate: float = 0.0) -> dict:
    """Generate pairs and write them; returns the manifest."""
    if not counts or any(v <= 0 for v in counts.values()):
        raise DatasetError("counts must be positive")
    d = Path(directory)
    (d / "records").mkdir(parents=True, exist_ok=True)
    pairs = generate_pairs(counts, seed, corruption_rate)
    records = [write_pair(d, i, p) for i, p in enumerate(pairs)]
    manifest = {
        "version": VERSION,
        "generator_seed": seed,
        "corruption_rate": corruption_rate,
        "counts": {t: counts.get(t, 0) for t in TASK_TYPES if counts.get(t, 0)},
        "total": len(records),
        "records": records,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def manifest_hash(directory) -> str:
    return _sha((Path(directory) / "manifest.json").read_bytes())


def _read_checked(directory: Path, rel: str, expected: str) -> bytes:
    path = directory / rel
    if not path.exists():
        raise DatasetError(f"missing file {rel}")
    data = path.read_bytes()
    if _sha(data) != expected:
        raise DatasetError(f"checksum mismatch for {rel}")
    return data


def load_manifest(directory) -> dict:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"no manifest.json in {d}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest parse error: {exc}") from exc
    for key in ("version", "counts", "total", "records"):
        if key not in manifest:
            raise DatasetError(f"manifest missing {key!r}")
    if manifest["version"] != VERSION:
        raise DatasetError(f"unsupported dataset version {manifest['version']}")
    if sum(manifest["counts"].values()) != manifest["total"] or len(manifest["records"]) != manifest["total"]:
        raise DatasetError("manifest counts do not match its records")
    return manifest


def read_dataset(directory):
    """Yield the dataset's pairs in manifest order, validating each one."""
    d = Path(directory)
    manifest = load_manifest(d)
    for rec in manifest["records"]:
        files, sums = rec["files"], rec["sha256"]
        side = json.loads(_read_checked(d, files["sidecar"], sums["sidecar"]))
        shape = tuple(side["shape"])
        src = np.frombuffer(_read_checked(d, files["source"], sums["source"]), dtype="<f4").reshape(shape)
        tgt = np.frombuffer(_read_checked(d, files["target"], sums["target"]), dtype="<f4").reshape(shape)
        region = np.frombuffer(_read_checked(d, files["region"], sums["region"]), dtype=np.uint8)
        focus = np.frombuffer(_read_checked(d, files["focus"], sums["focus"]), dtype=np.uint8)
        pair = EditPair(
            source=src.astype(np.float32),
            target=tgt.astype(np.float32),
            instruction=side["instruction"],
            task_type=side["task_type"],
            edit_region_mask=region.reshape(shape[:2]).astype(bool),
            seed=side["seed"],
            focus_mask=focus.reshape(shape[:2]).astype(bool),
            meta=side["meta"],
            corrupted=side["corrupted"],
        )
        validate_pair(pair)
        yield pair


def validate_pair(pair: EditPair) -> None:
    if pair.task_type not in TASK_TYPES:
        raise DatasetError(f"unknown task type {pair.task_type!r}")
    if pair.source.shape != (PANEL, PANEL, 3) or pair.target.shape != pair.source.shape:
        raise DatasetError(f"bad image shapes {pair.source.shape}, {pair.target.shape}")
    for img in (pair.source, pair.target):
        if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
            raise DatasetError("image values outside [0, 1]")
    outside = ~pair.edit_region_mask
    if np.any(pair.source[outside] != pair.target[outside]):
        raise DatasetError("source and target differ outside the edit region")
    if not pair.instruction:
        raise DatasetError("empty instruction")

