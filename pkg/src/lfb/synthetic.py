"""Synthetic long-range recognition task and a shape-faithful stand-in backbone.

Each episode is a feature bank of ``T`` steps with 1..k actor rows per step.
All rows are class-uninformative background noise except a single planted
cue row at step ``t - offset``, drawn around a class-specific mean. The
label belongs to step ``t``. A model that only sees the clip
``(t - clip_span, t]`` cannot do better than chance once ``offset >= clip_span``;
a model whose bank window reaches ``t - offset`` can recover the label.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .bank import FeatureBank, WindowSpec, pad_and_mask
from .model import Batch
from .tensor import RngStream


@dataclass
class SyntheticTaskSpec:
    episodes: int = 512
    test_episodes: int = 2048
    T: int = 96
    d: int = 32
    offset: int = 20
    clip_span: int = 4
    noise_scale: float = 0.5
    num_classes: int = 4
    actors_min: int = 1
    actors_max: int = 3
    marker_scale: float = 6.0
    cue_scale: float = 3.0
    steps_per_second: float = 1.0

    def validate(self) -> list[str]:
        errors = []
        if self.episodes < 1:
            errors.append("task.episodes must be >= 1")
        if self.test_episodes < 1:
            errors.append("task.test_episodes must be >= 1")
        if self.T < 1:
            errors.append("task.T must be >= 1")
        if not 0 <= self.offset < self.T:
            errors.append(f"task.offset must satisfy 0 <= offset < T ({self.T})")
        if self.clip_span < 1:
            errors.append("task.clip_span must be >= 1")
        if self.d < 2:
            errors.append("task.d must be >= 2")
        if self.num_classes < 2:
            errors.append("task.num_classes must be >= 2")
        if not 1 <= self.actors_min <= self.actors_max:
            errors.append("task needs 1 <= actors_min <= actors_max")
        if self.noise_scale < 0:
            errors.append("task.noise_scale must be >= 0")
        if self.steps_per_second <= 0:
            errors.append("task.steps_per_second must be > 0")
        return errors


@dataclass
class Episode:
    bank: FeatureBank
    label_step: int
    label: int


@dataclass
class SyntheticDataset:
    spec: SyntheticTaskSpec
    train: list[Episode]
    test: list[Episode]
    class_means: np.ndarray

    def reservoir(self) -> np.ndarray:
        """All bank rows of the training split (source of STO distractors)."""
        return np.concatenate([ep.bank.all_rows() for ep in self.train], axis=0)


def _class_means(spec: SyntheticTaskSpec, rng: RngStream) -> np.ndarray:
    marker = rng.normal(spec.d)
    marker /= np.linalg.norm(marker)
    dirs = rng.normal((spec.num_classes, spec.d))
    dirs -= np.outer(dirs @ marker, marker)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return spec.marker_scale * marker + spec.cue_scale * dirs


def _episode(spec: SyntheticTaskSpec, means: np.ndarray, rng: RngStream) -> Episode:
    label = int(rng.integers(0, spec.num_classes))
    t = int(rng.integers(spec.offset, spec.T))
    cue_step = t - spec.offset
    bank = FeatureBank(spec.d, spec.steps_per_second)
    for s in range(spec.T):
        n = int(rng.integers(spec.actors_min, spec.actors_max + 1))
        rows = rng.normal((n, spec.d))
        if s == cue_step:
            rows[0] = means[label] + spec.noise_scale * rng.normal(spec.d)
        bank.append_step(rows)
    return Episode(bank, t, label)


def generate(spec: SyntheticTaskSpec, seed: int) -> SyntheticDataset:
    errors = spec.validate()
    if errors:
        raise ValueError("; ".join(errors))
    means = _class_means(spec, RngStream(seed, "task/means"))
    train_rng = RngStream(seed, "data/train")
    test_rng = RngStream(seed, "data/test")
    train = [_episode(spec, means, train_rng) for _ in range(spec.episodes)]
    test = [_episode(spec, means, test_rng) for _ in range(spec.test_episodes)]
    return SyntheticDataset(spec, train, test, means)


# ------------------------------------------------------------ file layout

def write_dataset(ds: SyntheticDataset, out_dir: str | os.PathLike) -> list[Path]:
    """``<out>/<split>/episode_NNNNN.lfbk`` plus ``<out>/<split>/labels.txt``."""
    out = Path(out_dir)
    written = []
    for split, episodes in (("train", ds.train), ("test", ds.test)):
        sdir = out / split
        sdir.mkdir(parents=True, exist_ok=True)
        lines = []
        for i, ep in enumerate(episodes):
            path = sdir / f"episode_{i:05d}.lfbk"
            ep.bank.save(path)
            written.append(path)
            lines.append(f"{path.name} {ep.label_step} {ep.label}\n")
        labels = sdir / "labels.txt"
        labels.write_text("".join(lines))
        written.append(labels)
    np.save(out / "class_means.npy", ds.class_means)
    written.append(out / "class_means.npy")
    return written


def read_dataset(spec: SyntheticTaskSpec, data_dir: str | os.PathLike) -> SyntheticDataset:
    root = Path(data_dir)
    splits = {}
    for split in ("train", "test"):
        episodes = []
        for line in (root / split / "labels.txt").read_text().splitlines():
            if not line.strip():
                continue
            name, step, label = line.split()
            episodes.append(Episode(FeatureBank.load(root / split / name), int(step), int(label)))
        splits[split] = episodes
    means = np.load(root / "class_means.npy")
    return SyntheticDataset(spec, splits["train"], splits["test"], means)


# --------------------------------------------------------------- batching

class WindowedSplit:
    """Per-episode query, bank window and clip rows, precomputed once."""

    def __init__(self, episodes: list[Episode], window: WindowSpec, clip_span: int):
        self.labels = np.array([ep.label for ep in episodes], dtype=np.int64)
        self.queries = np.stack([ep.bank.step(ep.label_step)[0] for ep in episodes]).astype(np.float64)
        self.windows = [ep.bank.window(ep.label_step, window) for ep in episodes]
        self.clips = [
            ep.bank.gather(max(0, ep.label_step - clip_span + 1), ep.label_step) for ep in episodes
        ]

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        bank_rows, bank_mask = pad_and_mask([self.windows[i] for i in idx])
        clip_rows, clip_mask = pad_and_mask([self.clips[i] for i in idx])
        return Batch(self.queries[idx][:, None, :], bank_rows, bank_mask, clip_rows, clip_mask,
                     self.labels[idx])


class BatchSampler:
    """Epoch-wise shuffled minibatches from a dedicated data stream."""

    def __init__(self, n: int, batch_size: int, rng: RngStream):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


# ------------------------------------------------------ reference observer

def nearest_centroid_accuracy(ds: SyntheticDataset, span_of) -> float:
    """Accuracy of a centroid observer restricted to the steps ``span_of(ep)`` returns.

    Centroids are the mean true cue rows per class over the training split.
    On a test episode the observer picks the single visible row closest to
    any centroid and predicts that centroid's class.
    """
    spec = ds.spec
    cues = np.stack([ep.bank.step(ep.label_step - spec.offset)[0] for ep in ds.train])
    labels = np.array([ep.label for ep in ds.train])
    centroids = np.stack([cues[labels == c].mean(axis=0) for c in range(spec.num_classes)])
    correct = 0
    for ep in ds.test:
        lo, hi = span_of(ep)
        rows = ep.bank.gather(lo, hi).rows.astype(np.float64)
        dist = ((rows[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        _, cls = np.unravel_index(np.argmin(dist), dist.shape)
        correct += int(cls == ep.label)
    return correct / len(ds.test)


# ------------------------------------------------------ stand-in backbone

def synthetic_backbone(frames: np.ndarray, seed: int = 0, channels: int = 2048) -> np.ndarray:
    """``32 x H x W x 3`` frames -> ``16 x H/16 x W/16 x channels`` features.

    Halves time by averaging frame pairs, splits space into 16 x 16 patches,
    summarises each patch on a 4 x 4 subgrid, and projects with a fixed
    random matrix followed by ReLU.
    """
    frames = np.asarray(frames, dtype=np.float64)
    t, h, w, c = frames.shape
    if t % 2 or h % 16 or w % 16:
        raise ValueError(f"frames {frames.shape} must have even T and H, W divisible by 16")
    pairs = frames.reshape(t // 2, 2, h, w, c).mean(axis=1)
    sub = pairs.reshape(t // 2, h // 16, 4, 4, w // 16, 4, 4, c).mean(axis=(3, 6))
    patches = sub.transpose(0, 1, 4, 2, 3, 5).reshape(t // 2, h // 16, w // 16, 16 * c)
    proj = RngStream(seed, "backbone").normal((16 * c, channels), 1.0 / math.sqrt(16 * c))
    return np.maximum(patches @ proj, 0.0)


def spec_dict(spec: SyntheticTaskSpec) -> dict:
    return asdict(spec)
