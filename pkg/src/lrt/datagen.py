"""Seeded synthetic few-shot class-incremental datasets.

Visual class structure is derived from text structure: every class name is a
short token sequence, its text direction is the normalised mean token
embedding, and a fixed angle-preserving linear map renders that direction into
a patch grid.  Text relations therefore predict visual relations exactly when
both noise knobs are zero.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np

from . import container
from .errors import ConfigError, ParseError

MAGIC = b"LRTD"


@dataclass
class GeneratorConfig:
    n_base_classes: int = 20
    n_inc_sessions: int = 4
    n_way: int = 5
    n_shot: int = 5
    samples_per_base_class: int = 100
    n_test_per_class: int = 20
    H: int = 6
    W: int = 6
    D_raw: int = 8
    D_T: int = 16
    d_tok: int = 8
    vocab_size: int = 64
    tokens_per_name: int = 3
    shared_text: float = 0.8
    text_to_visual_noise: float = 0.1
    within_class_noise: float = 0.2
    pixel_noise: float = 0.1
    seed: int = 0

    def validate(self):
        counts = ("n_base_classes", "n_way", "n_shot", "samples_per_base_class", "n_test_per_class",
                  "H", "W", "D_raw", "D_T", "d_tok", "vocab_size", "tokens_per_name")
        for name in counts:
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_inc_sessions < 0:
            raise ConfigError("n_inc_sessions must be non-negative")
        for name in ("shared_text", "text_to_visual_noise", "within_class_noise", "pixel_noise"):
            if getattr(self, name) < 0 or not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be a finite non-negative float")
        if self.H < 2 or self.W < 2 or self.D_raw < 2:
            raise ConfigError("patch grid needs H, W >= 2 and D_raw >= 2")
        if self.d_tok > self.D_raw:
            raise ConfigError("d_tok must not exceed D_raw (the rendering map must preserve angles)")
        if self.tokens_per_name > self.vocab_size:
            raise ConfigError("tokens_per_name exceeds vocab_size")
        if math.comb(self.vocab_size, self.tokens_per_name) < self.n_classes:
            raise ConfigError("vocabulary too small for distinct class names")
        if self.samples_per_base_class < self.n_way * self.n_shot:
            raise ConfigError("base classes need at least n_way * n_shot samples")

    @property
    def n_classes(self):
        return self.n_base_classes + self.n_way * self.n_inc_sessions


@dataclass
class SampleRecord:
    image: np.ndarray  # (H, W, D_raw)
    label: int
    class_tokens: Tuple[int, ...]


@dataclass
class DatasetManifest:
    classes: List[Tuple[int, Tuple[int, ...]]]
    sessions: List[List[int]]
    samples: List[int]
    test_samples: List[int]
    dims: Tuple[int, int, int]
    seed: int
    n_way: int
    n_shot: int
    config: dict = field(default_factory=dict)

    def validate(self):
        n = len(self.classes)
        ids = [cid for cid, _ in self.classes]
        if ids != list(range(n)):
            raise ConfigError("class ids must be 0..n-1 in order")
        seen = set()
        for s, members in enumerate(self.sessions):
            for c in members:
                if not 0 <= c < n:
                    raise ConfigError(f"session {s + 1} references unknown class {c}")
                if c in seen:
                    raise ConfigError(f"class {c} appears in more than one session")
                seen.add(c)
        if len(self.samples) != n or len(self.test_samples) != n:
            raise ConfigError("per-class sample counts do not match the class list")
        if not self.sessions or not self.sessions[0]:
            raise ConfigError("manifest has no base session")
        for c in self.sessions[0]:
            if self.samples[c] < self.n_way * self.n_shot:
                raise ConfigError(f"base class {c} has fewer than n_way*n_shot samples")
        for members in self.sessions[1:]:
            for c in members:
                if self.samples[c] != self.n_shot:
                    raise ConfigError(f"incremental class {c} must have exactly n_shot samples")
        H, W, D = self.dims
        if H < 2 or W < 2 or D < 2:
            raise ConfigError("dims must satisfy H, W >= 2 and D_raw >= 2")

    def tokens(self, c):
        return self.classes[c][1]

    def session_of(self, c):
        for s, members in enumerate(self.sessions):
            if c in members:
                return s + 1
        raise KeyError(c)

    def to_json(self):
        d = asdict(self)
        d["classes"] = [[cid, list(tok)] for cid, tok in self.classes]
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(
            classes=[(int(cid), tuple(int(t) for t in tok)) for cid, tok in d["classes"]],
            sessions=[[int(c) for c in s] for s in d["sessions"]],
            samples=[int(x) for x in d["samples"]],
            test_samples=[int(x) for x in d["test_samples"]],
            dims=tuple(int(x) for x in d["dims"]),
            seed=int(d["seed"]),
            n_way=int(d["n_way"]),
            n_shot=int(d["n_shot"]),
            config=dict(d.get("config", {})),
        )


@dataclass
class Dataset:
    """A manifest plus the generating tables and the per-class image stacks."""

    manifest: DatasetManifest
    token_table: np.ndarray  # (vocab, d_tok)
    render: np.ndarray  # (H, W, D_raw, d_tok)
    text_dirs: np.ndarray  # (n_classes, d_tok) unit rows
    train: List[np.ndarray]  # per class, (n, H, W, D_raw)
    test: List[np.ndarray]

    @property
    def n_classes(self):
        return len(self.manifest.classes)

    def records(self, split="train", classes=None):
        stacks = self.train if split == "train" else self.test
        for c in (range(self.n_classes) if classes is None else classes):
            for img in stacks[c]:
                yield SampleRecord(img, c, self.manifest.tokens(c))

    def arrays(self, classes, split="train"):
        """Stacked images and labels for ``classes``."""
        stacks = self.train if split == "train" else self.test
        xs = [stacks[c] for c in classes]
        ys = [np.full(len(stacks[c]), c, dtype=np.int64) for c in classes]
        return np.concatenate(xs), np.concatenate(ys)


def split_sessions(n_classes, n_base, n_way, n_sessions):
    """Consecutive class-id blocks: ``n_base`` ids, then ``n_sessions`` blocks of ``n_way``."""
    if n_base <= 0 or n_way <= 0 or n_sessions < 0:
        raise ConfigError("n_base and n_way must be positive, n_sessions non-negative")
    if n_base + n_way * n_sessions > n_classes:
        raise ConfigError(f"{n_classes} classes cannot fill {n_base} base + {n_sessions}x{n_way} classes")
    out = [list(range(n_base))]
    for s in range(n_sessions):
        lo = n_base + s * n_way
        out.append(list(range(lo, lo + n_way)))
    return out


def _orthonormal_columns(rng, rows, cols):
    q, r = np.linalg.qr(rng.normal(size=(rows, cols)))
    return q * np.sign(np.diag(r))


def _draw(rng, render, visual_dir, n, config):
    dt = render.shape[-1]
    zeta = rng.normal(size=(n, dt)) / math.sqrt(dt)
    latent = visual_dir + config.within_class_noise * zeta
    imgs = np.einsum("hwdk,nk->nhwd", render, latent)
    if config.pixel_noise > 0:
        imgs = imgs + config.pixel_noise * rng.normal(size=imgs.shape) / math.sqrt(render.shape[2])
    return imgs


def _names(rng, table, count, tokens_per_name, taken=()):
    names, used = [], {tuple(sorted(t)) for t in taken}
    while len(names) < count:
        tok = tuple(int(t) for t in rng.choice(len(table), tokens_per_name, replace=False))
        key = tuple(sorted(tok))
        if key in used or np.linalg.norm(table[list(tok)].mean(axis=0)) == 0.0:
            continue
        used.add(key)
        names.append(tok)
    return names


def generate(config: GeneratorConfig) -> Dataset:
    """Draw a dataset.

    1. token table: a shared direction (weight ``shared_text``) plus isotropic Gaussian parts;
    2. class names: distinct token sets; text direction = normalised mean token embedding;
    3. rendering map: per patch ``gain * Q`` with ``Q`` orthonormal, so ``G^T G = H*W*I``;
       class mean = ``G (tau + text_to_visual_noise * xi)``;
    4. sample = mean + ``within_class_noise * G zeta`` + ``pixel_noise`` i.i.d. noise.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    H, W, D, dt = config.H, config.W, config.D_raw, config.d_tok
    n_classes = config.n_classes

    u0 = rng.normal(size=dt)
    u0 /= np.linalg.norm(u0)
    table = config.shared_text * u0 + rng.normal(size=(config.vocab_size, dt)) / math.sqrt(dt)

    names = _names(rng, table, n_classes, config.tokens_per_name)
    text_dirs = np.stack([table[list(t)].mean(axis=0) for t in names])
    text_dirs /= np.linalg.norm(text_dirs, axis=1, keepdims=True)

    q = _orthonormal_columns(rng, D, dt)
    gains = rng.uniform(0.5, 1.5, size=(H, W))
    gains *= math.sqrt(H * W / (gains ** 2).sum())
    render = gains[:, :, None, None] * q[None, None, :, :]

    deviation = rng.normal(size=(n_classes, dt)) / math.sqrt(dt)
    visual_dirs = text_dirs + config.text_to_visual_noise * deviation

    counts = [config.samples_per_base_class] * config.n_base_classes + \
        [config.n_shot] * (config.n_way * config.n_inc_sessions)
    train, test = [], []
    for c in range(n_classes):
        for n, bucket in ((counts[c], train), (config.n_test_per_class, test)):
            bucket.append(_draw(rng, render, visual_dirs[c], n, config))

    manifest = DatasetManifest(
        classes=[(c, names[c]) for c in range(n_classes)],
        sessions=split_sessions(n_classes, config.n_base_classes, config.n_way, config.n_inc_sessions),
        samples=counts,
        test_samples=[config.n_test_per_class] * n_classes,
        dims=(H, W, D),
        seed=config.seed,
        n_way=config.n_way,
        n_shot=config.n_shot,
        config=asdict(config),
    )
    manifest.validate()
    return Dataset(manifest, table, render, text_dirs, train, test)


def save(dataset: Dataset, path):
    """Write ``dataset`` to ``path``; returns the SHA-256 of the written bytes."""
    arrays = {"token_table": dataset.token_table, "render": dataset.render, "text_dirs": dataset.text_dirs}
    for c in range(dataset.n_classes):
        arrays[f"train/{c}"] = dataset.train[c]
        arrays[f"test/{c}"] = dataset.test[c]
    return container.write(path, MAGIC, dataset.manifest.to_json(), arrays)


def load(path) -> Dataset:
    meta, arrays = container.read(path, MAGIC)
    try:
        manifest = DatasetManifest.from_json(meta)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"manifest is missing or has malformed fields ({exc})", 0) from None
    manifest.validate()
    n = len(manifest.classes)
    try:
        train = [arrays[f"train/{c}"] for c in range(n)]
        test = [arrays[f"test/{c}"] for c in range(n)]
        ds = Dataset(manifest, arrays["token_table"], arrays["render"], arrays["text_dirs"], train, test)
    except KeyError as exc:
        raise ParseError(f"missing tensor section {exc}", 0) from None
    for c in range(n):
        if train[c].shape != (manifest.samples[c], *manifest.dims):
            raise ConfigError(f"train images of class {c} do not match the manifest")
        if test[c].shape != (manifest.test_samples[c], *manifest.dims):
            raise ConfigError(f"test images of class {c} do not match the manifest")
    return ds


def world_pool(dataset: Dataset, n_classes, n_per_class, seed):
    """Extra labelled samples from the dataset's generating world.

    Class names are fresh token sets disjoint from every session class; images are
    rendered through the stored map with the dataset's noise settings.  Returns
    ``(images (n_classes * n_per_class, H, W, D_raw), labels, names)``.
    """
    cfg = GeneratorConfig(**dataset.manifest.config)
    table = dataset.token_table
    if math.comb(len(table), cfg.tokens_per_name) < n_classes + dataset.n_classes:
        raise ConfigError("vocabulary too small for the requested pool")
    rng = np.random.default_rng([seed, 0x5EED])
    taken = [tok for _, tok in dataset.manifest.classes]
    names = _names(rng, table, n_classes, cfg.tokens_per_name, taken)
    X = []
    for tok in names:
        d = table[list(tok)].mean(axis=0)
        d = d / np.linalg.norm(d)
        d = d + cfg.text_to_visual_noise * rng.normal(size=d.shape) / math.sqrt(len(d))
        X.append(_draw(rng, dataset.render, d, n_per_class, cfg))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    return np.concatenate(X), labels, names
