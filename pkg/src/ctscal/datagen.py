"""Synthetic multi-domain image benchmark.

Each class is a binary content pattern (horizontal bar, vertical bar,
diagonal stripe, centred block) drawn with random position and thickness
jitter and a random contrast. Each domain renders the pattern with its own per-channel gain and
offset, so domains differ in feature statistics while sharing content.
Domain 3 (red channel inverted) has the largest style
displacement and is the default leave-out target.
"""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, InputError
from .numerics import make_rng

CLASS_NAMES = ("hbar", "vbar", "diagonal", "block")


@dataclass(frozen=True)
class DomainStyle:
    offset: tuple  # per-channel background level
    gain: tuple  # per-channel pattern contrast (negative = inverted)


DEFAULT_DOMAINS = (
    DomainStyle(offset=(0.10, 0.12, 0.08), gain=(0.75, 0.70, 0.80)),
    DomainStyle(offset=(0.33, 0.30, 0.35), gain=(0.55, 0.65, 0.45)),
    DomainStyle(offset=(0.50, 0.40, 0.30), gain=(0.40, 0.55, 0.55)),
    DomainStyle(offset=(0.88, 0.25, 0.20), gain=(-0.60, 0.60, 0.65)),
)


@dataclass(frozen=True)
class GeneratorConfig:
    size: int = 16
    n_classes: int = 4
    domains: tuple = DEFAULT_DOMAINS
    position_jitter: int = 2
    base_thickness: int = 3
    thickness_jitter: int = 1
    block_side: int = 6
    noise_std: float = 0.1
    contrast_min: float = 0.2  # per-sample pattern contrast drawn from U(contrast_min, 1)
    domain_gain_gap: float = 0.15

    @property
    def n_domains(self):
        return len(self.domains)

    def to_dict(self):
        d = asdict(self)
        d["domains"] = [asdict(s) for s in self.domains]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "domains" in d:
            d["domains"] = tuple(
                DomainStyle(tuple(s["offset"]), tuple(s["gain"])) for s in d["domains"]
            )
        return cls(**d)


@dataclass
class LabeledImage:
    id: int
    label: int
    domain: int
    pixels: np.ndarray


@dataclass
class Dataset:
    ids: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    pixels: np.ndarray  # (N, 3, H, W)

    def __len__(self):
        return len(self.ids)

    def subset(self, mask_or_index):
        return Dataset(self.ids[mask_or_index], self.labels[mask_or_index],
                       self.domains[mask_or_index], self.pixels[mask_or_index])

    def images(self):
        return [LabeledImage(int(i), int(y), int(d), x)
                for i, y, d, x in zip(self.ids, self.labels, self.domains, self.pixels)]

    @classmethod
    def from_images(cls, images):
        images = list(images)
        return cls(
            ids=np.array([im.id for im in images], dtype=np.int64),
            labels=np.array([im.label for im in images], dtype=np.int64),
            domains=np.array([im.domain for im in images], dtype=np.int64),
            pixels=np.stack([np.asarray(im.pixels, dtype=np.float64) for im in images])
            if images else np.zeros((0, 3, 16, 16)),
        )


def content_mask(label, dy, dx, dt, cfg=GeneratorConfig()):
    """Binary pattern for ``label`` with position offset (dy, dx) and thickness delta dt."""
    n = cfg.size
    c = n // 2
    rows, cols = np.mgrid[0:n, 0:n]
    t = cfg.base_thickness + dt
    if label == 0:
        top = c + dy - t // 2
        mask = (rows >= top) & (rows < top + t)
    elif label == 1:
        left = c + dx - t // 2
        mask = (cols >= left) & (cols < left + t)
    elif label == 2:
        d = rows - cols - dy + t // 2
        mask = (d >= 0) & (d < t)
    elif label == 3:
        side = cfg.block_side + dt
        top, left = c + dy - side // 2, c + dx - side // 2
        mask = (rows >= top) & (rows < top + side) & (cols >= left) & (cols < left + side)
    else:
        raise InputError(f"unknown class {label}")
    return mask.astype(np.float64)


def jitter_family(label, cfg=GeneratorConfig()):
    """Every mask the generator can draw for ``label``."""
    pj, tj = cfg.position_jitter, cfg.thickness_jitter
    masks = {}
    for dy in range(-pj, pj + 1):
        for dx in range(-pj, pj + 1):
            for dt in range(-tj, tj + 1):
                m = content_mask(label, dy, dx, dt, cfg)
                masks[m.tobytes()] = m
    return list(masks.values())


def render(mask, style, rng, cfg=GeneratorConfig(), contrast=1.0):
    offset = np.asarray(style.offset)[:, None, None]
    gain = np.asarray(style.gain)[:, None, None]
    img = offset + contrast * gain * mask[None]
    img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate(rng, n_per_domain_class, cfg=GeneratorConfig()):
    """``J * K * n`` images; each (domain, class) cell draws from its own child stream."""
    if n_per_domain_class < 1:
        raise InputError("n_per_domain_class must be >= 1")
    J, K = cfg.n_domains, cfg.n_classes
    streams = rng.spawn(J * K)
    pj, tj = cfg.position_jitter, cfg.thickness_jitter
    ids, labels, domains, pixels = [], [], [], []
    for d in range(J):
        for k in range(K):
            cell = streams[d * K + k]
            for _ in range(n_per_domain_class):
                dy, dx = cell.integers(-pj, pj + 1, size=2)
                dt = cell.integers(-tj, tj + 1)
                contrast = cell.uniform(cfg.contrast_min, 1.0)
                pixels.append(render(content_mask(k, dy, dx, dt, cfg), cfg.domains[d], cell, cfg,
                                     contrast))
                ids.append(len(ids))
                labels.append(k)
                domains.append(d)
    return Dataset(np.array(ids, dtype=np.int64), np.array(labels, dtype=np.int64),
                   np.array(domains, dtype=np.int64), np.stack(pixels))


@dataclass
class SplitSpec:
    train_domains: tuple
    calib_domains: tuple
    target_domain: int
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        self.train_domains = tuple(sorted(int(d) for d in self.train_domains))
        self.calib_domains = tuple(sorted(int(d) for d in self.calib_domains))
        self.target_domain = int(self.target_domain)
        if self.target_domain in self.train_domains + self.calib_domains:
            raise ConfigError("target domain must not be a train or calibration domain")
        if not self.train_domains or not self.calib_domains:
            raise ConfigError("train and calibration domains must be non-empty")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        shared = set(self.train_domains) & set(self.calib_domains)
        if shared and self.train_domains != self.calib_domains:
            raise ConfigError("train and calibration domains must be equal or disjoint")

    @property
    def shared_sources(self):
        return self.train_domains == self.calib_domains

    @classmethod
    def leave_out(cls, target, n_domains=4, train_fraction=0.9, seed=0):
        sources = tuple(d for d in range(n_domains) if d != target)
        return cls(sources, sources, target, train_fraction, seed)


def split(data, spec):
    """Return ``(train, calib, target)`` datasets for ``spec``.

    With shared source domains, each domain is permuted with a seeded
    generator and its first ``round(train_fraction * n)`` samples go to
    training. With disjoint roles, whole domains are assigned.
    """
    known = set(np.unique(data.domains).tolist())
    for d in spec.train_domains + spec.calib_domains + (spec.target_domain,):
        if d not in known:
            raise ConfigError(f"domain {d} not present in the data")
    target = data.subset(data.domains == spec.target_domain)
    if spec.shared_sources:
        rng = make_rng(spec.seed)
        train_idx, calib_idx = [], []
        for d in spec.train_domains:
            idx = np.flatnonzero(data.domains == d)
            idx = idx[rng.permutation(len(idx))]
            cut = int(round(spec.train_fraction * len(idx)))
            train_idx.append(idx[:cut])
            calib_idx.append(idx[cut:])
        train = data.subset(np.sort(np.concatenate(train_idx)))
        calib = data.subset(np.sort(np.concatenate(calib_idx)))
    else:
        train = data.subset(np.isin(data.domains, spec.train_domains))
        calib = data.subset(np.isin(data.domains, spec.calib_domains))
    for name, part in (("train", train), ("calibration", calib), ("target", target)):
        if len(part) == 0:
            raise ConfigError(f"{name} split is empty")
    return train, calib, target


# --- on-disk format ---------------------------------------------------------

def save_dataset(data, out_dir, cfg, seed, n_per_domain_class):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "images.jsonl"), "w") as fh:
        for im in data.images():
            fh.write(json.dumps({"id": im.id, "domain": im.domain, "label": im.label,
                                 "pixels": im.pixels.ravel().tolist()}) + "\n")
    manifest = {"seed": seed, "n_per_domain_class": n_per_domain_class,
                "image_shape": [3, cfg.size, cfg.size], "generator": cfg.to_dict(),
                "count": len(data)}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_dataset(path):
    """Load a directory written by ``save_dataset`` (or a bare images.jsonl)."""
    if os.path.isdir(path):
        with open(os.path.join(path, "manifest.json")) as fh:
            shape = tuple(json.load(fh)["image_shape"])
        path = os.path.join(path, "images.jsonl")
    else:
        shape = (3, 16, 16)
    images = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                px = np.asarray(rec["pixels"], dtype=np.float64).reshape(shape)
                images.append(LabeledImage(int(rec["id"]), int(rec["label"]), int(rec["domain"]), px))
            except (ValueError, KeyError, TypeError) as exc:
                raise ConfigError(f"{path}:{n}: malformed image record ({exc})") from exc
    return Dataset.from_images(images)
