"""Tabular data: loading, splitting, group-label noise and stratified batches."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ParseError, SchemaError

log = logging.getLogger(__name__)

LABELS = (1, -1)


@dataclass
class Schema:
    """Column descriptor for a delimited file.

    ``features=None`` means every column except the label and group columns.
    ``positive`` may be one token or a list of tokens mapped to ``+1``.
    ``groups`` fixes the order of group values (mapped to ``1..m``); by
    default the sorted distinct values are used.
    """

    label: str
    positive: str | list[str]
    group: str
    features: list[str] | None = None
    categorical: list[str] = field(default_factory=list)
    groups: list[str] | None = None
    include_group_feature: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise SchemaError(f"unknown schema fields: {sorted(extra)}")
        for req in ("label", "positive", "group"):
            if req not in d:
                raise SchemaError(f"schema needs field {req!r}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "positive": self.positive,
            "group": self.group,
            "features": self.features,
            "categorical": list(self.categorical),
            "groups": self.groups,
            "include_group_feature": self.include_group_feature,
        }


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    noisy_groups: np.ndarray
    num_groups: int
    clean_groups: np.ndarray | None = None
    feature_names: list[str] | None = None
    numeric_mask: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.noisy_groups = np.asarray(self.noisy_groups, dtype=np.int64)
        n = self.labels.size
        if self.features.ndim != 2 or self.features.shape[0] != n or self.noisy_groups.size != n:
            raise SchemaError("features, labels and groups must have the same number of rows")
        if not np.isin(self.labels, LABELS).all():
            raise SchemaError("labels must be +1 or -1")
        self._check_groups(self.noisy_groups)
        if self.clean_groups is not None:
            self.clean_groups = np.asarray(self.clean_groups, dtype=np.int64)
            if self.clean_groups.size != n:
                raise SchemaError("clean_groups length differs from the number of rows")
            self._check_groups(self.clean_groups)
        if self.numeric_mask is None:
            self.numeric_mask = np.ones(self.features.shape[1], dtype=bool)

    def _check_groups(self, g: np.ndarray) -> None:
        if g.size and (g.min() < 1 or g.max() > self.num_groups):
            raise SchemaError(f"group labels must lie in 1..{self.num_groups}")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def eval_groups(self) -> np.ndarray:
        """Clean groups when known, otherwise the observed ones."""
        return self.clean_groups if self.clean_groups is not None else self.noisy_groups

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.features[idx],
            self.labels[idx],
            self.noisy_groups[idx],
            self.num_groups,
            None if self.clean_groups is None else self.clean_groups[idx],
            self.feature_names,
            self.numeric_mask,
        )

    def strata(self) -> dict[tuple[int, int], np.ndarray]:
        """Row indices per (noisy group, label), ordered ``(1,+1), (1,-1), (2,+1), ...``."""
        return {
            (z, y): np.flatnonzero((self.noisy_groups == z) & (self.labels == y))
            for z in range(1, self.num_groups + 1)
            for y in LABELS
        }


def load_tabular(path, schema: Schema, standardize: bool = True) -> Dataset:
    """Read a comma-separated file with a header row.

    Categorical features are one-hot encoded (sorted category order);
    numeric features are z-scored over the file's own rows unless
    ``standardize=False`` (use ``fit_standardizer`` on a training split then).
    """
    path = Path(path)
    df = pd.read_csv(path, dtype=str, skipinitialspace=True, keep_default_na=False)
    df.columns = [c.strip() for c in df.columns]
    feats = schema.features
    if feats is None:
        feats = [c for c in df.columns if c not in (schema.label, schema.group)]
        if schema.include_group_feature:
            feats.append(schema.group)
    missing = [c for c in [schema.label, schema.group, *feats, *schema.categorical] if c not in df.columns]
    if missing:
        raise SchemaError(f"{path.name}: missing columns {missing}")

    tokens = [schema.positive] if isinstance(schema.positive, str) else list(schema.positive)
    labels = np.where(df[schema.label].str.strip().isin(tokens), 1, -1)

    raw_groups = df[schema.group].str.strip()
    order = schema.groups if schema.groups is not None else sorted(raw_groups.unique())
    mapping = {str(v): i + 1 for i, v in enumerate(order)}
    unknown = set(raw_groups) - set(mapping)
    if unknown:
        raise SchemaError(f"{path.name}: group values {sorted(unknown)} not listed in schema.groups")
    groups = raw_groups.map(mapping).to_numpy()

    blocks, names, numeric = [], [], []
    categorical = set(schema.categorical)
    for col in feats:
        values = df[col].str.strip()
        if col in categorical:
            cats = sorted(values.unique())
            onehot = (values.to_numpy()[:, None] == np.asarray(cats)[None, :]).astype(np.float64)
            blocks.append(onehot)
            names.extend(f"{col}={c}" for c in cats)
            numeric.extend([False] * len(cats))
        else:
            parsed = pd.to_numeric(values, errors="coerce")
            bad = np.flatnonzero(parsed.isna().to_numpy())
            if bad.size:
                i = int(bad[0])
                # +2: one header line, 1-based rows
                raise ParseError(f"column {col!r}: non-numeric value {values.iloc[i]!r}", row=i + 2)
            blocks.append(parsed.to_numpy(dtype=np.float64)[:, None])
            names.append(col)
            numeric.append(True)
    x = np.hstack(blocks) if blocks else np.zeros((len(df), 0))
    ds = Dataset(x, labels, groups, len(order), groups.copy(), names, np.asarray(numeric))
    if standardize:
        apply_standardizer(ds, fit_standardizer(ds))
    return ds


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    mask: np.ndarray


def fit_standardizer(ds: Dataset) -> Standardizer:
    """Mean / population std of the numeric columns; constant columns keep scale 1."""
    x = ds.features
    mean = np.where(ds.numeric_mask, x.mean(axis=0), 0.0)
    std = x.std(axis=0)
    scale = np.where(ds.numeric_mask & (std > 0), std, 1.0)
    return Standardizer(mean, scale, ds.numeric_mask.copy())


def apply_standardizer(ds: Dataset, st: Standardizer) -> Dataset:
    ds.features = (ds.features - st.mean) / st.scale
    return ds


def split(ds: Dataset, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffled train/val/test partition.

    Validation and test sizes are ``floor(ratio * n)``; the rounding
    remainder goes to train.
    """
    n = len(ds)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or np.any(r <= 0) or not math.isclose(r.sum(), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    n_val = math.floor(r[1] * n + 1e-9)
    n_test = math.floor(r[2] * n + 1e-9)
    n_train = n - n_val - n_test
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.split(perm, [n_train, n_train + n_val])
    return tuple(ds.subset(np.sort(p)) for p in parts)


def inject_group_noise(ds: Dataset, rho: float, seed: int) -> Dataset:
    """Flip ``floor(rho * n)`` uniformly chosen rows to a uniformly chosen other group.

    Flips start from the clean groups, which are kept. Returns a new dataset.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"noise level must lie in [0, 1], got {rho}")
    m = ds.num_groups
    if rho > 0 and m < 2:
        raise ValueError("cannot flip group labels with fewer than two groups")
    clean = ds.clean_groups if ds.clean_groups is not None else ds.noisy_groups
    n = len(ds)
    k = math.floor(rho * n + 1e-9)
    rng = np.random.default_rng(seed)
    rows = rng.choice(n, size=k, replace=False)
    offsets = rng.integers(1, m, size=k) if k else np.zeros(0, dtype=np.int64)
    noisy = clean.copy()
    noisy[rows] = (clean[rows] - 1 + offsets) % m + 1
    out = ds.subset(np.arange(n))
    out.clean_groups = clean.copy()
    out.noisy_groups = noisy
    return out


@dataclass
class Batch:
    strata: dict[tuple[int, int], np.ndarray]
    labels: np.ndarray
    groups: np.ndarray
    warnings: list[str] = field(default_factory=list)

    @property
    def indices(self) -> np.ndarray:
        return np.concatenate(list(self.strata.values())) if self.strata else np.zeros(0, np.int64)

    @property
    def pos_idx(self) -> np.ndarray:
        return np.concatenate([v for (z, y), v in self.strata.items() if y == 1] or [np.zeros(0, np.int64)])

    @property
    def neg_idx(self) -> np.ndarray:
        return np.concatenate([v for (z, y), v in self.strata.items() if y == -1] or [np.zeros(0, np.int64)])

    @property
    def pos_groups(self) -> np.ndarray:
        return self.groups[self.pos_idx]

    @property
    def neg_groups(self) -> np.ndarray:
        return self.groups[self.neg_idx]

    def group_counts(self, num_groups: int) -> tuple[np.ndarray, np.ndarray]:
        pos = np.array([self.strata.get((z, 1), np.zeros(0)).size for z in range(1, num_groups + 1)])
        neg = np.array([self.strata.get((z, -1), np.zeros(0)).size for z in range(1, num_groups + 1)])
        return pos, neg

    def __len__(self) -> int:
        return sum(v.size for v in self.strata.values())


def stratified_sample(ds: Dataset, b: int, rng: np.random.Generator) -> Batch:
    """Draw ``ceil(b * |S_zy| / n)`` rows without replacement from every
    (noisy group, label) stratum.

    Each stratum's draw is returned sorted, so drawing the whole dataset
    always yields the same row order.
    """
    n = len(ds)
    strata = ds.strata()
    nonempty = sum(1 for v in strata.values() if v.size)
    if b < nonempty:
        raise ValueError(f"batch size {b} is smaller than the {nonempty} non-empty strata")
    out, notes = {}, []
    for key, rows in strata.items():
        if rows.size == 0:
            notes.append(f"stratum group={key[0]} label={key[1]:+d} is empty")
            out[key] = rows
            continue
        k = min(-(-b * rows.size // n), rows.size)
        out[key] = np.sort(rng.choice(rows, size=k, replace=False))
    for msg in notes:
        log.debug("stratified_sample: %s", msg)
    return Batch(out, ds.labels, ds.noisy_groups, notes)


def make_synthetic(n: int = 2000, gap: float = 1.0, group_ratio: float = 0.5,
                   pos_rate: float | tuple[float, float] = 0.3, d: int = 6, seed: int = 0) -> Dataset:
    """Two-group Gaussian mixture with a built-in group-level AUC gap.

    Positives are shifted by ``+1`` along the first ``d // 2`` features. In
    group 1 the class separation is scaled down by ``1 - gap / 2`` and group 2
    negatives are pushed down by ``gap / 2``, so ``gap = 0`` gives identical
    groups and larger values widen the group AUC spread. The group label is
    also carried in the last feature, so the model can treat groups differently.
    ``pos_rate`` may be a per-group pair; unequal base rates make the group
    feature predictive and open inter-group gaps even when ``gap = 0``.
    """
    rng = np.random.default_rng(seed)
    groups = np.where(rng.random(n) < group_ratio, 1, 2)
    rates = np.broadcast_to(np.asarray(pos_rate, dtype=float), (2,))
    labels = np.where(rng.random(n) < rates[groups - 1], 1, -1)
    x = rng.normal(size=(n, d))
    k = max(1, (d - 1) // 2)
    sep = np.where(groups == 1, 1.0 - gap / 2.0, 1.0)
    x[:, :k] += ((labels == 1) * sep)[:, None]
    x[:, :k] -= ((labels == -1) & (groups == 2))[:, None] * (gap / 2.0)
    x[:, -1] = np.where(groups == 1, -1.0, 1.0) + 0.1 * rng.normal(size=n)
    names = [f"x{i}" for i in range(d)]
    return Dataset(x, labels, groups, 2, groups.copy(), names)
