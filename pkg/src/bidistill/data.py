"""Samples, synthetic data, manifest I/O, stratified splits and missingness masks."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtri

from .numcore import ConfigError, RngStream

CLINICAL_FIELDS = ("age", "tumor_size", "er", "pr", "her2")
CONTINUOUS = (0, 1)
MANIFEST_COLUMNS = ("sample_id", "label", "split", "clinical_present", *CLINICAL_FIELDS, "features_path")
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    sample_id: str
    label: int
    bag: np.ndarray | None
    clinical: np.ndarray | None
    image_present: bool = True
    clinical_present: bool = True
    split: str = ""
    standardized: bool = False

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"{self.sample_id}: label must be 0 or 1, got {self.label!r}")
        if self.image_present and (self.bag is None or len(self.bag) == 0):
            raise DataError(f"{self.sample_id}: patch bag must be non-empty")
        if self.clinical_present and self.clinical is None:
            raise DataError(f"{self.sample_id}: clinical flagged present but no record")

    @property
    def complete(self) -> bool:
        return self.image_present and self.clinical_present


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    n: int = 600
    t_min: int = 8
    t_max: int = 32
    d_w: int = 32
    d_c: int = 5
    image_strength: float = 1.5
    clinical_strength: float = 0.9
    signal_fraction: float = 0.3
    noise: float = 1.0
    balance: float = 0.4
    seed: int = 0

    def validate(self):
        if self.d_c != len(CLINICAL_FIELDS):
            raise ConfigError(f"d_c must equal the number of clinical fields ({len(CLINICAL_FIELDS)})")
        if self.image_strength < 0 or self.clinical_strength < 0 or self.noise < 0:
            raise ConfigError("signal strengths and noise must be non-negative")
        if not 1 <= self.t_min <= self.t_max:
            raise ConfigError("need 1 <= t_min <= t_max")
        if not 0 < self.balance < 1 or not 0 <= self.signal_fraction <= 1:
            raise ConfigError("balance must lie in (0, 1) and signal_fraction in [0, 1]")
        if self.n < 1 or self.d_w < 1:
            raise ConfigError("n and d_w must be positive")
        return self


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def signal_direction(cfg: SynthConfig) -> np.ndarray:
    u = RngStream(cfg.seed, "synth/direction").normal(size=cfg.d_w)
    return u / np.linalg.norm(u)


def synth_generate(cfg: SynthConfig) -> list[Sample]:
    """Generate bags and raw clinical records that carry independent label signal.

    Positive bags get ``image_strength`` along a fixed unit direction in a
    ``signal_fraction`` of their patches; the clinical channel shifts tumour
    size, age and the marker probabilities by ``clinical_strength``.
    Conditional on the label the two channels are independent.
    """
    cfg.validate()
    root = RngStream(cfg.seed, "synth")
    labels_rng = root.substream("labels")
    img_rng = root.substream("image")
    cli_rng = root.substream("clinical")
    u = signal_direction(cfg)
    width = len(str(cfg.n - 1))
    out = []
    for i in range(cfg.n):
        y = int(labels_rng.random() < cfg.balance)
        t = int(img_rng.integers(cfg.t_min, cfg.t_max + 1))
        bag = img_rng.normal(0.0, cfg.noise, size=(t, cfg.d_w))
        n_sig = max(1, int(round(cfg.signal_fraction * t)))
        hits = img_rng.permutation(t)[:n_sig]
        if y == 1:
            bag[hits] += cfg.image_strength * u
        shift = cfg.clinical_strength * (2 * y - 1)
        z = cli_rng.normal(size=5)
        age = 55.0 + 10.0 * (z[0] - 0.5 * shift)
        size = max(0.1, 2.5 + 1.0 * (z[1] + shift))
        er = float(z[2] < _norm_q(_sigmoid(0.8 - 0.5 * shift)))
        pr = float(z[3] < _norm_q(_sigmoid(0.3 - 0.5 * shift)))
        her2 = float(z[4] < _norm_q(_sigmoid(-1.0 + 0.5 * shift)))
        out.append(Sample(f"s{i:0{width}d}", y, bag, np.array([age, size, er, pr, her2])))
    return out


def _norm_q(p):
    # standard normal quantile; turns a probability into a threshold on z
    return float(ndtri(p))


# ---------------------------------------------------------------------------
# splitting and standardization


def split_dataset(samples, fractions=(0.64, 0.16, 0.2), seed=0):
    """Stratified train/val/test split: test first, then val out of the remainder."""
    f_train, f_val, f_test = fractions
    if min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    val_of_rest = f_val / (f_train + f_val) if f_train + f_val > 0 else 0.0
    rng = RngStream(seed, "split")
    parts = {s: [] for s in SPLITS}
    for cls in (0, 1):
        idx = [i for i, s in enumerate(samples) if s.label == cls]
        if not idx:
            continue
        perm = [idx[j] for j in rng.substream(f"class{cls}").permutation(len(idx))]
        n_test = _round_half_up(f_test * len(idx))
        n_val = _round_half_up(val_of_rest * (len(idx) - n_test))
        parts["test"] += perm[:n_test]
        parts["val"] += perm[n_test:n_test + n_val]
        parts["train"] += perm[n_test + n_val:]
    for name, fr in zip(SPLITS, fractions):
        if fr > 0:
            for cls in (0, 1):
                if any(s.label == cls for s in samples) and not any(samples[i].label == cls for i in parts[name]):
                    raise DataError(f"split {name!r} received no samples of class {cls}")
    return tuple([replace(samples[i], split=name) for i in sorted(parts[name])] for name in SPLITS)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class Standardizer:
    """Mean/std of the continuous clinical fields, fit on training samples only."""

    mean: list = field(default_factory=lambda: [0.0, 0.0])
    std: list = field(default_factory=lambda: [1.0, 1.0])

    @classmethod
    def fit(cls, train):
        rows = np.array([s.clinical[list(CONTINUOUS)] for s in train if s.clinical_present and s.clinical is not None])
        if not len(rows):
            raise DataError("cannot fit standardization without clinical records")
        if any(s.standardized for s in train):
            raise DataError("standardization statistics must come from raw training records")
        std = rows.std(axis=0)
        std[std == 0] = 1.0
        return cls(rows.mean(axis=0).tolist(), std.tolist())

    def apply(self, samples):
        out = []
        for s in samples:
            if s.standardized:
                raise DataError(f"{s.sample_id}: clinical record already standardized")
            c = s.clinical
            if c is not None:
                c = c.copy()
                for j, k in enumerate(CONTINUOUS):
                    c[k] = (c[k] - self.mean[j]) / self.std[j]
            out.append(replace(s, clinical=c, standardized=True))
        return out

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}


# ---------------------------------------------------------------------------
# missingness


def missing_order(n: int, seed: int) -> np.ndarray:
    return RngStream(seed, "mask").permutation(n)


def mask_count(rate: float, n: int) -> int:
    return _round_half_up(rate * n)


def apply_missingness(samples, rate: float, role: str = "clinical", seed: int = 0):
    """Flag the designated modality absent in exactly round(rate * n) samples.

    The masked set is a prefix of one seeded permutation, so for a fixed seed
    the masked sets are nested in ``rate``.  Only presence flags change; the
    arrays are shared with the input samples.
    """
    if role not in ("clinical", "image"):
        raise ConfigError(f"role must be 'clinical' or 'image', got {role!r}")
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"missing rate must lie in [0, 1], got {rate}")
    n = len(samples)
    chosen = set(missing_order(n, seed)[:mask_count(rate, n)].tolist())
    key = "clinical_present" if role == "clinical" else "image_present"
    return [replace(s, **{key: False}) if i in chosen else s for i, s in enumerate(samples)]


def unmask(samples):
    return [replace(s, image_present=s.bag is not None, clinical_present=s.clinical is not None) for s in samples]


# ---------------------------------------------------------------------------
# manifest I/O


def _fmt(x: float) -> str:
    return repr(float(x))


def write_features(path, bag):
    bag = np.asarray(bag, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{bag.shape[0]} {bag.shape[1]}\n")
        for row in bag:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def read_features(path) -> np.ndarray:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as e:
        raise DataError(f"cannot read feature file {path}: {e}") from e
    try:
        t, d = (int(v) for v in lines[0].split())
    except ValueError:
        raise DataError(f"{path}: first line must be 't d', got {lines[0]!r}") from None
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != t:
        raise DataError(f"{path}: header says {t} patches, found {len(rows)}")
    out = np.empty((t, d))
    for i, ln in enumerate(rows):
        vals = ln.split()
        if len(vals) != d:
            raise DataError(f"{path}: line {i + 2} has {len(vals)} values, header says {d}")
        try:
            out[i] = [float(v) for v in vals]
        except ValueError:
            raise DataError(f"{path}: line {i + 2} is not numeric") from None
    if t < 1:
        raise DataError(f"{path}: bag must contain at least one patch")
    return out


def write_dataset(directory, samples):
    """Write manifest.csv plus one feature file per sample under features/."""
    os.makedirs(os.path.join(directory, "features"), exist_ok=True)
    with open(os.path.join(directory, "manifest.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for s in samples:
            rel = f"features/{s.sample_id}.txt"
            write_features(os.path.join(directory, rel), s.bag)
            cli = [_fmt(v) for v in s.clinical] if s.clinical_present else [""] * len(CLINICAL_FIELDS)
            w.writerow([s.sample_id, s.label, s.split, int(s.clinical_present), *cli, rel])
    return os.path.join(directory, "manifest.csv")


def load_manifest(path) -> list[Sample]:
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.csv")
    base = os.path.dirname(os.path.abspath(path))
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as e:
        raise DataError(f"cannot open manifest {path}: {e}") from e
    samples = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise DataError(f"{path}: line 1: header must be {','.join(MANIFEST_COLUMNS)}")
        d_w = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise DataError(f"{path}: line {lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
            rec = dict(zip(MANIFEST_COLUMNS, row))
            try:
                label = int(rec["label"])
                present = int(rec["clinical_present"])
                if present not in (0, 1) or label not in (0, 1):
                    raise ValueError
                clinical = np.array([float(rec[f]) for f in CLINICAL_FIELDS]) if present else None
            except ValueError:
                raise DataError(f"{path}: line {lineno}: malformed label, presence flag or clinical value") from None
            if rec["split"] not in SPLITS + ("",):
                raise DataError(f"{path}: line {lineno}: unknown split {rec['split']!r}")
            bag = read_features(os.path.join(base, rec["features_path"]))
            if d_w is None:
                d_w = bag.shape[1]
            elif bag.shape[1] != d_w:
                raise DataError(f"{path}: line {lineno}: patch dimension {bag.shape[1]} differs from {d_w}")
            samples.append(Sample(rec["sample_id"], label, bag, clinical, True, bool(present), rec["split"]))
    return samples


def by_split(samples):
    return tuple([s for s in samples if s.split == name] for name in SPLITS)
