"""Synthetic grouped volumes, JSONL persistence and seeded batching.

Each sample is ``S`` slice vectors.  Slice ``s`` of a sample with class ``y``
in group ``g`` is::

    class_mean[y] * depth_profile[s] + site_offset[g] + N(0, noise_sigma^2)

Class means are orthogonal directions scaled by ``class_separation``; site
offsets are random unit directions scaled by ``site_shift_scale``; the depth
profile is a bell over the slice axis so middle slices carry most of the
class signal.  A ``pathological_group`` sees its class means through a random
rotation, so its class structure is not shared with any other group.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np

from .model import VolumeBatch
from .robust import group_index_task2

REGIMES = {"task1_sites": "site", "task2_gender_class": "gender"}
_SPLIT_CODE = {"train": 0, "val": 1}
_STRUCTURE_STREAM = 7919


@dataclass
class GenConfig:
    regime: str = "task1_sites"
    classes: int = 2
    # counts[split][attribute value][class]; attribute is the site or the gender
    train_counts: list = field(default_factory=list)
    val_counts: list = field(default_factory=list)
    slices: int = 16
    input_dim: int = 16
    class_separation: float = 1.0
    site_shift_scale: float = 1.0
    pathological_group: int | None = None
    noise_sigma: float = 1.0
    seed: int = 0
    scale: float = 1.0
    literal_group_index: bool = False

    @property
    def attribute(self) -> str:
        return REGIMES[self.regime]

    @property
    def num_groups(self) -> int:
        return len(self.train_counts) if self.regime == "task1_sites" else 2 * self.classes

    def group_of(self, attr: int, label: int) -> int:
        if self.regime == "task1_sites":
            return attr
        return group_index_task2(attr, label, literal=self.literal_group_index)

    def counts(self, split: str) -> np.ndarray:
        raw = np.asarray(self.train_counts if split == "train" else self.val_counts, dtype=np.float64)
        if self.scale == 1.0:
            return raw.astype(np.int64)
        scaled = np.rint(raw * self.scale).astype(np.int64)
        return np.where(raw > 0, np.maximum(scaled, 1), 0)

    def validate(self) -> "GenConfig":
        if self.regime not in REGIMES:
            raise ValueError(f"data.regime must be one of {sorted(REGIMES)}, got {self.regime!r}")
        for split in ("train", "val"):
            key = f"data.{split}_counts"
            raw = np.asarray(getattr(self, f"{split}_counts"))
            if raw.ndim != 2 or raw.shape[1] != self.classes:
                raise ValueError(f"{key} must be a grid of {self.classes} counts per row, got shape {raw.shape}")
            if np.any(raw < 0) or np.any(raw != np.floor(raw)):
                raise ValueError(f"{key} must hold non-negative integers")
        if np.shape(self.train_counts) != np.shape(self.val_counts):
            raise ValueError("data.val_counts must have the same grid shape as data.train_counts")
        if self.regime == "task2_gender_class" and (len(self.train_counts) != 2 or self.classes != 4):
            raise ValueError("data.train_counts for task2_gender_class must be 2 genders x 4 classes")
        if self.classes > self.input_dim:
            raise ValueError("data.input_dim must be at least data.classes for orthogonal class means")
        if self.pathological_group is not None and not 0 <= self.pathological_group < self.num_groups:
            raise ValueError(f"data.pathological_group must lie in [0, {self.num_groups})")
        for key in ("slices", "input_dim"):
            if getattr(self, key) < 1:
                raise ValueError(f"data.{key} must be positive")
        if self.noise_sigma < 0 or self.site_shift_scale < 0 or self.scale <= 0:
            raise ValueError("data.noise_sigma and data.site_shift_scale must be >= 0, data.scale > 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"data.{sorted(unknown)[0]}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroupedSample:
    features: np.ndarray  # [S, D_in]
    label: int
    group: int
    attrs: dict

    def __eq__(self, other) -> bool:
        return (isinstance(other, GroupedSample) and self.label == other.label
                and self.group == other.group and self.attrs == other.attrs
                and self.features.shape == other.features.shape
                and self.features.tobytes() == other.features.tobytes())


@dataclass
class GroupedDataset:
    samples: list[GroupedSample]
    split: str = "train"
    provenance: dict | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other) -> bool:
        return isinstance(other, GroupedDataset) and self.samples == other.samples

    @property
    def features(self) -> np.ndarray:
        return np.stack([s.features for s in self.samples])

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def groups(self) -> np.ndarray:
        return np.array([s.group for s in self.samples], dtype=np.int64)

    def attr(self, name: str) -> np.ndarray:
        if name == "group":
            return self.groups
        return np.array([s.attrs[name] for s in self.samples], dtype=np.int64)

    def attribute_name(self) -> str:
        if not self.samples:
            return "group"
        keys = [k for k in self.samples[0].attrs if k != "class"]
        return keys[0] if keys else "group"

    def cell_counts(self) -> dict[tuple[int, int], int]:
        """(attribute value, class) -> count."""
        name = self.attribute_name()
        out: dict[tuple[int, int], int] = {}
        for s in self.samples:
            key = (s.group if name == "group" else s.attrs[name], s.label)
            out[key] = out.get(key, 0) + 1
        return out

    def to_batch(self) -> VolumeBatch:
        name = self.attribute_name()
        return VolumeBatch(self.features, self.labels, self.groups, self.attr(name))


# generation -------------------------------------------------------------------

def depth_profile(slices: int) -> np.ndarray:
    """Bell weighting over the slice axis, peak 1 at the centre."""
    s = np.arange(slices, dtype=np.float64)
    centre = (slices - 1) / 2.0
    width = max(slices / 4.0, 0.5)
    return np.exp(-0.5 * ((s - centre) / width) ** 2)


def _random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _structure(config: GenConfig) -> dict:
    rng = np.random.default_rng([config.seed, _STRUCTURE_STREAM])
    basis = _random_orthogonal(rng, config.input_dim)
    class_means = config.class_separation * basis[:, :config.classes].T  # [C, D]
    offsets = rng.standard_normal((config.num_groups, config.input_dim))
    offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
    offsets *= config.site_shift_scale
    rotation = _random_orthogonal(rng, config.input_dim)
    return {"class_means": class_means, "offsets": offsets, "rotation": rotation,
            "profile": depth_profile(config.slices)}


def _make_sample(config: GenConfig, structure: dict, split: str, index: int,
                 attr: int, label: int) -> GroupedSample:
    g = config.group_of(attr, label)
    mean = structure["class_means"][label]
    if config.pathological_group is not None and g == config.pathological_group:
        mean = structure["rotation"] @ mean
    rng = np.random.default_rng([config.seed, _SPLIT_CODE[split], index])
    noise = rng.standard_normal((config.slices, config.input_dim)) * config.noise_sigma
    feats = structure["profile"][:, None] * mean[None, :] + structure["offsets"][g][None, :] + noise
    return GroupedSample(feats, int(label), int(g), {config.attribute: int(attr), "class": int(label)})


def generate(config: GenConfig) -> tuple[GroupedDataset, GroupedDataset]:
    """Build (train, val) with exactly the configured per-cell counts."""
    config.validate()
    structure = _structure(config)
    out = []
    for split in ("train", "val"):
        counts = config.counts(split)
        samples, index = [], 0
        for attr in range(counts.shape[0]):
            for label in range(counts.shape[1]):
                for _ in range(int(counts[attr, label])):
                    samples.append(_make_sample(config, structure, split, index, attr, label))
                    index += 1
        out.append(GroupedDataset(samples, split, config.to_dict()))
    return out[0], out[1]


# presets ----------------------------------------------------------------------

def preset_path(name: str) -> Path:
    return Path(str(resources.files("grdo") / "presets" / f"{name}.json"))


def load_preset(name: str) -> dict:
    return json.loads(preset_path(name).read_text())


# persistence ------------------------------------------------------------------

def _sample_to_json(s: GroupedSample) -> str:
    return json.dumps({"features": s.features.tolist(), "label": s.label,
                       "group": s.group, "attrs": s.attrs})


def save(dataset: GroupedDataset, path) -> None:
    with open(path, "w") as fh:
        for s in dataset.samples:
            fh.write(_sample_to_json(s))
            fh.write("\n")


class DatasetFormatError(ValueError):
    pass


def load(path, split: str = "train") -> GroupedDataset:
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                feats = np.asarray(rec["features"], dtype=np.float64)
                if feats.ndim != 2:
                    raise ValueError(f"features must be a 2-D list, got {feats.ndim}-D")
                samples.append(GroupedSample(feats, int(rec["label"]), int(rec["group"]),
                                             {k: int(v) for k, v in rec["attrs"].items()}))
            except KeyError as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: missing field {exc.args[0]!r}") from None
            except (ValueError, TypeError, AttributeError) as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
    return GroupedDataset(samples, split)


# batching ---------------------------------------------------------------------

def batch_iter(dataset: GroupedDataset, batch_size: int, seed: int, epoch: int) -> Iterator[VolumeBatch]:
    """Shuffle keyed by (seed, epoch); the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    name = dataset.attribute_name()
    for start in range(0, n, batch_size):
        chunk = [dataset.samples[i] for i in order[start:start + batch_size]]
        yield VolumeBatch(np.stack([s.features for s in chunk]),
                          [s.label for s in chunk], [s.group for s in chunk],
                          np.array([s.group if name == "group" else s.attrs[name] for s in chunk]))


def num_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
