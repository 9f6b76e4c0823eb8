"""Synthetic source/target domain pairs for desk-scale transfer experiments.

Every task draws a shared generative model from ``seed`` and samples a source
and a target domain from it.  The target applies a parametric shift: a
rotation of the informative feature block, a label permutation and extra
noise.  With ``redundancy_stress`` the informative block is repeated
``copies`` times in the input so that consecutive layers carry strongly
correlated copies of the same factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

KINDS = ("tokens", "images", "seq2seq")


@dataclass(frozen=True)
class Shift:
    angle: float = 0.0        # radians, applied pairwise to informative dims / colour channels
    remap_labels: bool = False
    noise: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.angle == 0.0 and not self.remap_labels and self.noise == 0.0


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "tokens"
    n_classes: int = 4
    n_train: int = 256
    n_val: int = 128
    n_test: int = 256
    shift: Shift = field(default_factory=Shift)
    redundancy_stress: bool = False
    copies: int = 3
    informative: int = 3
    noise: float = 0.6
    seq_len: int = 8
    in_features: int = 12
    tgt_len: int = 6
    image_size: int = 16
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.n_classes < 2:
            raise ConfigError("a task needs at least two classes")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("every split needs at least one example")
        if self.kind != "images":
            used = self.informative * (self.copies if self.redundancy_stress else 1)
            if used > self.in_features:
                raise ConfigError(f"{used} informative dims exceed in_features={self.in_features}")
        if self.kind == "seq2seq" and self.in_features < self.tgt_len:
            raise ConfigError("seq2seq decoder queries need in_features >= tgt_len")


@dataclass
class Split:
    x: object  # ndarray, or (src, tgt) pair for seq2seq
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def batch(self, idx: np.ndarray) -> "Split":
        if isinstance(self.x, tuple):
            return Split(tuple(part[idx] for part in self.x), self.y[idx])
        return Split(self.x[idx], self.y[idx])


@dataclass
class Domain:
    train: Split
    val: Split
    test: Split


def _rotation(n: int, angle: float) -> np.ndarray:
    rot = np.eye(n)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, n - 1, 2):
        rot[i:i + 2, i:i + 2] = [[c, -s], [s, c]]
    return rot


class _Generator:
    def __init__(self, spec: TaskSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        s = spec
        if s.kind == "tokens":
            self.protos = rng.normal(size=(s.n_classes, s.seq_len, s.informative)) * 1.2
        elif s.kind == "images":
            self.centers = rng.uniform(3, s.image_size - 3, size=(s.n_classes, 2, 2))
            self.colors = rng.normal(size=(s.n_classes, 2, s.in_channels))
        else:
            self.codes = rng.normal(size=(s.n_classes, s.informative)) * 1.5
            self.offset = int(rng.integers(1, s.seq_len))
        self.perm = rng.permutation(s.n_classes)
        while s.n_classes > 1 and np.all(self.perm == np.arange(s.n_classes)):
            self.perm = rng.permutation(s.n_classes)

    def _layout(self, block: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Place informative ``block`` (..., m) into the full feature vector."""
        s = self.spec
        reps = s.copies if s.redundancy_stress else 1
        parts = [block] * reps
        free = s.in_features - block.shape[-1] * reps
        if free:
            parts.append(rng.normal(size=block.shape[:-1] + (free,)))
        return np.concatenate(parts, axis=-1)

    def sample(self, n: int, shift: Shift, rng: np.random.Generator) -> Split:
        s = self.spec
        y = rng.integers(0, s.n_classes, size=n if s.kind != "seq2seq" else (n, s.seq_len))
        noise = s.noise + shift.noise
        if s.kind == "tokens":
            block = self.protos[y] + noise * rng.normal(size=(n, s.seq_len, s.informative))
            block = block @ _rotation(s.informative, shift.angle).T
            x, labels = self._layout(block, rng), y
        elif s.kind == "images":
            x, labels = self._images(y, shift, noise, rng), y
        else:
            block = self.codes[y] + noise * rng.normal(size=(n, s.seq_len, s.informative))
            block = block @ _rotation(s.informative, shift.angle).T
            src = self._layout(block, rng)
            tgt = np.zeros((n, s.tgt_len, s.in_features))
            tgt[:, np.arange(s.tgt_len), np.arange(s.tgt_len)] = 1.0
            tgt += 0.1 * rng.normal(size=tgt.shape)
            pos = (np.arange(s.tgt_len) + self.offset) % s.seq_len
            x, labels = (src, tgt), y[:, pos]
        if shift.remap_labels:
            labels = self.perm[labels]
        return Split(x, np.asarray(labels, dtype=np.int64))

    def _images(self, y, shift, noise, rng):
        s = self.spec
        n = len(y)
        grid = np.arange(s.image_size)
        yy, xx = np.meshgrid(grid, grid, indexing="ij")
        imgs = np.zeros((n, s.in_channels, s.image_size, s.image_size))
        jitter = rng.normal(scale=1.0, size=(n, 2, 2))
        for b in range(2):
            cy = self.centers[y, b, 0] + jitter[:, b, 0]
            cx = self.centers[y, b, 1] + jitter[:, b, 1]
            blob = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2) / 6.0)
            imgs += self.colors[y, b][:, :, None, None] * blob[:, None]
        if s.redundancy_stress and s.in_channels > 1:
            # every channel becomes a scaled copy of the first
            imgs[:, 1:] = imgs[:, :1] * np.linspace(1.0, 0.8, s.in_channels - 1)[None, :, None, None]
        rot = _rotation(s.in_channels, shift.angle)
        imgs = np.einsum("ij,bjhw->bihw", rot, imgs)
        return imgs + noise * 0.5 * rng.normal(size=imgs.shape)


def generate_task(spec: TaskSpec) -> tuple[Domain, Domain]:
    """Deterministic (source, target) datasets for ``spec``."""
    gen = _Generator(spec)
    out = []
    for d, shift in enumerate((Shift(), spec.shift)):
        rng = np.random.default_rng([spec.seed, d])
        out.append(Domain(*(gen.sample(n, shift, rng) for n in (spec.n_train, spec.n_val, spec.n_test))))
    return out[0], out[1]
