"""Dataset manifests, sample loading and the easy-sample mining swap."""

import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class DatasetKind(str, Enum):
    SOD = "sod"
    COD = "cod"
    CONNECTION = "connection"


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    mask_path: str = None


@dataclass
class DatasetManifest:
    name: str
    kind: DatasetKind
    entries: list

    def __post_init__(self):
        self.kind = DatasetKind(self.kind)
        if not self.entries:
            raise ValueError(f"manifest {self.name!r} is empty")
        images = [e.image_path for e in self.entries]
        if len(set(images)) != len(images):
            raise ValueError(f"manifest {self.name!r} has duplicate image paths")
        masks = [e.mask_path for e in self.entries if e.mask_path is not None]
        if len(set(masks)) != len(masks):
            raise ValueError(f"manifest {self.name!r} has duplicate mask paths")
        if self.kind in (DatasetKind.SOD, DatasetKind.COD):
            missing = [e.image_path for e in self.entries if e.mask_path is None]
            if missing:
                raise ValueError(f"{self.kind.value} manifest {self.name!r} has entries without masks: {missing[:3]}")
        elif any(e.mask_path is not None for e in self.entries):
            raise ValueError(f"connection manifest {self.name!r} must not carry masks")

    def __len__(self):
        return len(self.entries)

    @classmethod
    def read(cls, path, kind, name=None):
        """Parse a tab-separated `image_path[\\t mask_path]` file."""
        entries = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) == 1:
                entries.append(ManifestEntry(parts[0]))
            elif len(parts) == 2:
                entries.append(ManifestEntry(parts[0], parts[1]))
            else:
                raise ValueError(f"{path}:{lineno}: expected 1 or 2 tab-separated fields")
        return cls(name=name or Path(path).stem, kind=kind, entries=entries)

    def write(self, path):
        lines = []
        for e in self.entries:
            lines.append(e.image_path if e.mask_path is None else f"{e.image_path}\t{e.mask_path}")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class Sample:
    image: torch.Tensor  # 3 x H x W, normalized
    mask: torch.Tensor = None  # 1 x H x W, {0, 1}


def _read_raster(path, mode):
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert(mode), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read raster {path}: {exc}") from exc


def load_sample(entry, target_size, mean=IMAGENET_MEAN, std=IMAGENET_STD, flip=False):
    """Load one (image, mask) pair resized to `target_size` (H, W).

    The image is resized bilinearly and normalized per channel; the mask is
    resized with nearest-neighbor and re-binarized at 0.5. Image and mask may
    have different native sizes; each is resized independently.
    """
    h, w = target_size
    if h <= 0 or w <= 0:
        raise ValueError(f"target_size must be positive, got {target_size}")
    raw = _read_raster(entry.image_path, "RGB")  # H x W x 3
    image = torch.from_numpy(raw).permute(2, 0, 1).unsqueeze(0)
    image = F.interpolate(image, size=(h, w), mode="bilinear", align_corners=False).squeeze(0)
    image = (image - torch.tensor(mean).view(3, 1, 1)) / torch.tensor(std).view(3, 1, 1)

    mask = None
    if entry.mask_path is not None:
        raw = _read_raster(entry.mask_path, "L")
        mask = torch.from_numpy(raw).view(1, 1, *raw.shape)
        mask = F.interpolate(mask, size=(h, w), mode="nearest").squeeze(0)
        mask = (mask >= 0.5).float()

    if flip:
        image = torch.flip(image, dims=(-1,))
        if mask is not None:
            mask = torch.flip(mask, dims=(-1,))
    return Sample(image=image, mask=mask)


@dataclass
class Batch:
    images: torch.Tensor  # B x 3 x H x W
    masks: torch.Tensor = None  # B x 1 x H x W or None


def _flip_coin(seed, epoch, index):
    return random.Random((seed * 1_000_003 + epoch) * 1_000_003 + index).random() < 0.5


def _epoch_order(n, shuffle, seed, epoch):
    order = list(range(n))
    if shuffle:
        random.Random(seed * 1_000_003 + epoch).shuffle(order)
    return order


def _load_batch(manifest, indices, target_size, mean, std, flip, seed, epoch, num_workers):
    def load(idx):
        do_flip = flip and _flip_coin(seed, epoch, idx)
        return load_sample(manifest.entries[idx], target_size, mean, std, flip=do_flip)

    if num_workers > 1:
        with ThreadPoolExecutor(max_workers=num_workers) as pool:
            samples = list(pool.map(load, indices))
    else:
        samples = [load(idx) for idx in indices]
    images = torch.stack([s.image for s in samples])
    masks = None
    if samples[0].mask is not None:
        masks = torch.stack([s.mask for s in samples])
    return Batch(images=images, masks=masks)


def batch_iterator(manifest, batch_size, shuffle=False, seed=0, *, target_size=(352, 352),
                   mean=IMAGENET_MEAN, std=IMAGENET_STD, flip=False, num_workers=0, epoch=0):
    """One epoch of batches in seed-determined order; the tail batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = _epoch_order(len(manifest), shuffle, seed, epoch)
    for start in range(0, len(order), batch_size):
        indices = order[start : start + batch_size]
        yield _load_batch(manifest, indices, target_size, mean, std, flip, seed, epoch, num_workers)


class BatchCycler:
    """Endless epoch-cycling batch source with a checkpointable cursor.

    The order within an epoch is a pure function of (seed, epoch), so
    restoring `(epoch, cursor)` resumes the exact stream position.
    """

    def __init__(self, manifest, batch_size, seed=0, shuffle=True, *, target_size=(352, 352),
                 mean=IMAGENET_MEAN, std=IMAGENET_STD, flip=False, num_workers=0):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.manifest = manifest
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.target_size = target_size
        self.mean = mean
        self.std = std
        self.flip = flip
        self.num_workers = num_workers
        self.epoch = 0
        self.cursor = 0

    def state(self):
        return {"epoch": self.epoch, "cursor": self.cursor}

    def set_state(self, state):
        self.epoch = int(state["epoch"])
        self.cursor = int(state["cursor"])

    def next(self):
        order = _epoch_order(len(self.manifest), self.shuffle, self.seed, self.epoch)
        indices = order[self.cursor : self.cursor + self.batch_size]
        batch = _load_batch(self.manifest, indices, self.target_size, self.mean, self.std,
                            self.flip, self.seed, self.epoch, self.num_workers)
        self.cursor += len(indices)
        if self.cursor >= len(order):
            self.epoch += 1
            self.cursor = 0
        return batch


@dataclass
class MiningReport:
    scored: list  # (entry_id, mae) ascending
    selected_ids: list
    replaced_ids: list
    seed: int

    def to_dict(self):
        return {
            "scored": [[entry_id, value] for entry_id, value in self.scored],
            "selected_ids": list(self.selected_ids),
            "replaced_ids": list(self.replaced_ids),
            "seed": self.seed,
        }

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def mine_easy_cod_samples(cod_manifest, sod_manifest, saliency_model, m, seed, *,
                          target_size=(352, 352), batch_size=8,
                          mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Swap the m easiest camouflage samples into the saliency training set.

    `saliency_model` maps a normalized image batch to a probability map batch
    in [0, 1]; samples are ranked by MAE against their camouflage ground
    truth (easiest first, ties broken by manifest order). The m selected
    entries replace m seed-randomized saliency entries in place, keeping the
    manifest size unchanged.
    """
    if m > min(len(cod_manifest), len(sod_manifest)):
        raise ValueError(f"m={m} exceeds manifest sizes ({len(cod_manifest)} cod, {len(sod_manifest)} sod)")
    if m < 0:
        raise ValueError(f"m must be >= 0, got {m}")

    augmented = DatasetManifest(name=sod_manifest.name, kind=sod_manifest.kind,
                                entries=list(sod_manifest.entries))
    if m == 0:
        return augmented, MiningReport(scored=[], selected_ids=[], replaced_ids=[], seed=seed)

    maes = []
    with torch.no_grad():
        for start in range(0, len(cod_manifest), batch_size):
            entries = cod_manifest.entries[start : start + batch_size]
            samples = [load_sample(e, target_size, mean, std) for e in entries]
            images = torch.stack([s.image for s in samples])
            masks = torch.stack([s.mask for s in samples])
            preds = saliency_model(images)
            if preds.shape != masks.shape:
                raise ValueError(f"saliency model returned shape {tuple(preds.shape)}, expected {tuple(masks.shape)}")
            maes.extend((preds - masks).abs().mean(dim=(1, 2, 3)).tolist())

    ranking = sorted(range(len(cod_manifest)), key=lambda i: (maes[i], i))
    scored = [(cod_manifest.entries[i].image_path, maes[i]) for i in ranking]
    selected = [cod_manifest.entries[i] for i in ranking[:m]]

    replaced_positions = sorted(random.Random(seed).sample(range(len(sod_manifest)), m))
    replaced_ids = [augmented.entries[pos].image_path for pos in replaced_positions]
    for pos, entry in zip(replaced_positions, selected):
        augmented.entries[pos] = entry
    augmented = DatasetManifest(name=augmented.name, kind=augmented.kind, entries=augmented.entries)

    report = MiningReport(
        scored=scored,
        selected_ids=[e.image_path for e in selected],
        replaced_ids=replaced_ids,
        seed=seed,
    )
    return augmented, report


def save_grayscale(path, array01):
    """Write a [0, 1] map as an 8-bit grayscale raster."""
    arr = np.asarray(array01, dtype=np.float64)
    Image.fromarray((arr.clip(0.0, 1.0) * 255.0).round().astype(np.uint8)).save(path)
