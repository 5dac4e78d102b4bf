"""Dataset ingestion, holdout splits, synthetic biased data and on-disk bundles.

Bundle layout (a directory)::

    manifest.json        format/version, name, counts, attribute list, sha256
    train.tsv            user<TAB>item, contiguous indices
    validation.tsv
    test.tsv
    user_ids.tsv         index<TAB>original_id
    item_ids.tsv
    attr_<name>.tsv      index<TAB>label   (side recorded in the manifest)
    ground_truth.npz     synthetic data only: relevance, exposure, popularity
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .metrics import AttributeTable

BUNDLE_FORMAT = "graphdebias-bundle"
BUNDLE_VERSION = 1

# Column blocks of the one-hot feature matrices in the public Coat release
# (user_item_features/{user,item}_features.ascii).
COAT_USER_BLOCKS = {"gender": (0, 2), "age": (2, 8), "location": (8, 11), "fashioninterest": (11, 14)}
COAT_ITEM_BLOCKS = {"gender": (0, 2), "jackettype": (2, 18), "color": (18, 31), "onfrontpage": (31, 33)}


class DataError(ValueError):
    pass


def _pairs(x) -> np.ndarray:
    return np.asarray(x, dtype=np.int64).reshape(-1, 2)


@dataclass
class Dataset:
    n_users: int
    n_items: int
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    attributes: dict[str, AttributeTable] = field(default_factory=dict)
    user_ids: Optional[np.ndarray] = None
    item_ids: Optional[np.ndarray] = None
    name: str = "dataset"
    ground_truth: Optional[dict[str, np.ndarray]] = None

    def __post_init__(self):
        self.train, self.validation, self.test = map(_pairs, (self.train, self.validation, self.test))
        if self.user_ids is None:
            self.user_ids = np.arange(self.n_users)
        if self.item_ids is None:
            self.item_ids = np.arange(self.n_items)
        for split in (self.train, self.validation, self.test):
            if split.size and (split.min() < 0 or split[:, 0].max() >= self.n_users
                               or split[:, 1].max() >= self.n_items):
                raise DataError("interaction index out of bounds")

    def matrix(self, split: str) -> np.ndarray:
        y = np.zeros((self.n_users, self.n_items), dtype=bool)
        pairs = getattr(self, split)
        y[pairs[:, 0], pairs[:, 1]] = True
        return y

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.n_users},{self.n_items}".encode())
        for split in (self.train, self.validation, self.test):
            h.update(np.ascontiguousarray(split, dtype="<i8").tobytes())
            h.update(b"|")
        for name in sorted(self.attributes):
            table = self.attributes[name]
            h.update(f"{name}:{table.side}".encode())
            h.update(np.ascontiguousarray(table.labels, dtype="<i8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Raw readers. These return positive pairs in ORIGINAL id space.

def load_tsv(path: str | Path, rating_threshold: float = 4) -> list[tuple[int, int]]:
    """Read ``user<TAB>item<TAB>rating`` rows, keeping ratings >= threshold."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) < 3:
                raise DataError(f"{path}:{lineno}: expected user, item, rating")
            try:
                user, item, rating = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if user < 0 or item < 0:
                raise DataError(f"{path}:{lineno}: negative id")
            if rating >= rating_threshold:
                out.append((user, item))
    return out


def load_rating_matrix(path: str | Path, rating_threshold: float = 4) -> tuple[list[tuple[int, int]], tuple[int, int]]:
    """Dense whitespace-separated rating matrix (0 = unrated) to positive pairs and its shape."""
    try:
        mat = np.loadtxt(path, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    users, items = np.nonzero(mat >= rating_threshold)
    return list(zip(users.tolist(), items.tolist())), mat.shape


def _onehot_labels(feats: np.ndarray, lo: int, hi: int) -> np.ndarray:
    block = feats[:, lo:hi]
    labels = block.argmax(axis=1).astype(np.int64)
    labels[block.sum(axis=1) != 1] = -1
    return labels


# ---------------------------------------------------------------------------

def assemble(train_raw, test_raw, validation_raw=None, *, name: str = "dataset",
             raw_user_attrs: Optional[dict[str, dict[int, int]]] = None,
             raw_item_attrs: Optional[dict[str, dict[int, int]]] = None) -> Dataset:
    """Remap original ids seen in any split to contiguous indices and build a Dataset."""
    splits = [_pairs(train_raw), _pairs(validation_raw if validation_raw is not None else []), _pairs(test_raw)]
    if splits[0].size == 0:
        raise DataError("empty training set")
    allp = np.concatenate(splits)
    user_ids = np.unique(allp[:, 0])
    item_ids = np.unique(allp[:, 1])
    mapped = []
    for s in splits:
        s = np.unique(s, axis=0) if s.size else s
        mapped.append(np.stack([np.searchsorted(user_ids, s[:, 0]), np.searchsorted(item_ids, s[:, 1])], axis=1)
                      if s.size else s)
    attributes = {}
    for side, raw, ids in (("user", raw_user_attrs, user_ids), ("item", raw_item_attrs, item_ids)):
        for attr, mapping in (raw or {}).items():
            labels = np.array([mapping.get(int(x), -1) for x in ids], dtype=np.int64)
            attributes[f"{side}_{attr}"] = AttributeTable(f"{side}_{attr}", side, labels)
    return Dataset(len(user_ids), len(item_ids), mapped[0], mapped[1], mapped[2], attributes,
                   user_ids, item_ids, name)


def load_coat(directory: str | Path, rating_threshold: float = 4) -> Dataset:
    """Coat: ``train.ascii``/``test.ascii`` rating matrices plus optional one-hot features."""
    d = Path(directory)
    train, shape = load_rating_matrix(d / "train.ascii", rating_threshold)
    test, _ = load_rating_matrix(d / "test.ascii", rating_threshold)
    user_attrs, item_attrs = {}, {}
    feat_dir = d / "user_item_features"
    if (feat_dir / "user_features.ascii").exists():
        uf = np.loadtxt(feat_dir / "user_features.ascii", ndmin=2)
        for attr, (lo, hi) in COAT_USER_BLOCKS.items():
            user_attrs[attr] = dict(enumerate(_onehot_labels(uf, lo, hi).tolist()))
    if (feat_dir / "item_features.ascii").exists():
        itf = np.loadtxt(feat_dir / "item_features.ascii", ndmin=2)
        for attr, (lo, hi) in COAT_ITEM_BLOCKS.items():
            item_attrs[attr] = dict(enumerate(_onehot_labels(itf, lo, hi).tolist()))
    return assemble(train, test, name="coat", raw_user_attrs=user_attrs, raw_item_attrs=item_attrs)


def load_triples(directory: str | Path, rating_threshold: float = 4) -> Dataset:
    """Directory with ``train.tsv``/``test.tsv`` (and optional ``validation.tsv``) rating triples."""
    d = Path(directory)
    val = load_tsv(d / "validation.tsv", rating_threshold) if (d / "validation.tsv").exists() else None
    return assemble(load_tsv(d / "train.tsv", rating_threshold), load_tsv(d / "test.tsv", rating_threshold),
                    val, name=d.name)


def split_holdout(pairs, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-user stratified holdout of ``round(fraction * n_u)`` items, never a user's last one."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    pairs = _pairs(pairs)
    rng = np.random.default_rng(seed)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    held = np.zeros(len(pairs), dtype=bool)
    users, starts, counts = np.unique(pairs[:, 0], return_index=True, return_counts=True)
    for start, n in zip(starts, counts):
        n_hold = min(int(np.floor(fraction * n + 0.5)), n - 1)
        if n_hold > 0:
            held[start + rng.choice(n, size=n_hold, replace=False)] = True
    return pairs[~held], pairs[held]


def with_validation(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Carve a validation split out of train if the dataset has none."""
    if len(ds.validation):
        return ds
    train, val = split_holdout(ds.train, fraction, seed)
    return Dataset(ds.n_users, ds.n_items, train, val, ds.test, ds.attributes,
                   ds.user_ids, ds.item_ids, ds.name, ds.ground_truth)


# ---------------------------------------------------------------------------
# Synthetic data with known ground truth.

@dataclass
class SyntheticSpec:
    n_users: int = 600
    n_items: int = 400
    latent_dim: int = 8
    popularity_exponent: float = 1.0
    popularity_skew: float = 1.0
    noise_rate: float = 0.05
    conformity: float = 0.0
    relevance_rate: float = 0.15
    train_exposures: int = 60
    test_exposures: int = 30
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.noise_rate <= 1 or not 0 < self.relevance_rate < 1 or \
                not 0 <= self.noise_rate + self.conformity <= 1 or self.conformity < 0:
            raise ValueError("rates must be valid probabilities")
        if self.train_exposures + self.test_exposures > self.n_items:
            raise ValueError("more exposures per user than items")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Latent-factor preferences observed through popularity-skewed exposure.

    Each item has a latent popularity ``1/rank^skew`` (random rank order,
    independent of preference). Training exposures are drawn per user with
    probability proportional to ``popularity^exponent``; exposed items become
    positives when relevant, or otherwise with probability
    ``noise_rate + conformity * popularity / max(popularity)`` (herd clicks).
    Test exposures are uniform over the user's unexposed items and reveal
    relevance only (missing-at-random).
    """
    rng = np.random.default_rng(spec.seed)
    u = rng.normal(size=(spec.n_users, spec.latent_dim))
    v = rng.normal(size=(spec.n_items, spec.latent_dim))
    affinity = u @ v.T
    cut = np.quantile(affinity, 1.0 - spec.relevance_rate, axis=1, keepdims=True)
    relevance = affinity >= cut
    popularity = 1.0 / (rng.permutation(spec.n_items) + 1.0) ** spec.popularity_skew
    weights = popularity ** spec.popularity_exponent
    p_expose = weights / weights.sum()
    p_noise = spec.noise_rate + spec.conformity * popularity / popularity.max()

    exposure = np.zeros_like(relevance)
    train, test = [], []
    for user in range(spec.n_users):
        seen = rng.choice(spec.n_items, size=spec.train_exposures, replace=False, p=p_expose)
        exposure[user, seen] = True
        clicks = relevance[user, seen] | (rng.random(seen.size) < p_noise[seen])
        train.extend((user, int(i)) for i in np.sort(seen[clicks]))
        rest = np.flatnonzero(~exposure[user])
        shown = rng.choice(rest, size=spec.test_exposures, replace=False)
        test.extend((user, int(i)) for i in np.sort(shown[relevance[user, shown]]))

    pop_rank = np.argsort(np.argsort(popularity, kind="stable"), kind="stable")
    attributes = {
        "user_group": AttributeTable("user_group", "user", (u[:, 0] > 0).astype(np.int64)),
        "item_group": AttributeTable("item_group", "item", (v[:, 0] > 0).astype(np.int64)),
        "item_popularity": AttributeTable("item_popularity", "item", (4 * pop_rank) // spec.n_items),
    }
    return Dataset(spec.n_users, spec.n_items, train, [], test, attributes, name="synthetic",
                   ground_truth={"relevance": relevance, "exposure": exposure, "popularity": popularity})


# ---------------------------------------------------------------------------
# Bundles.

def _write_pairs(path: Path, pairs: np.ndarray) -> None:
    path.write_text("".join(f"{a}\t{b}\n" for a, b in pairs))


def _read_pairs(path: Path) -> np.ndarray:
    text = path.read_text().strip()
    if not text:
        return np.empty((0, 2), dtype=np.int64)
    return np.array([line.split("\t") for line in text.splitlines()], dtype=np.int64)


def save_bundle(ds: Dataset, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for split in ("train", "validation", "test"):
        _write_pairs(d / f"{split}.tsv", getattr(ds, split))
    _write_pairs(d / "user_ids.tsv", np.stack([np.arange(ds.n_users), ds.user_ids], axis=1))
    _write_pairs(d / "item_ids.tsv", np.stack([np.arange(ds.n_items), ds.item_ids], axis=1))
    for name, table in ds.attributes.items():
        _write_pairs(d / f"attr_{name}.tsv", np.stack([np.arange(len(table.labels)), table.labels], axis=1))
    if ds.ground_truth is not None:
        with open(d / "ground_truth.npz", "wb") as fh:
            np.savez(fh, **ds.ground_truth)
    manifest = {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "name": ds.name,
        "n_users": ds.n_users,
        "n_items": ds.n_items,
        "counts": {s: int(len(getattr(ds, s))) for s in ("train", "validation", "test")},
        "attributes": {name: t.side for name, t in ds.attributes.items()},
        "sha256": ds.content_hash(),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_bundle(directory: str | Path) -> Dataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format") != BUNDLE_FORMAT:
        raise DataError(f"{d}: not a dataset bundle")
    if manifest.get("version") != BUNDLE_VERSION:
        raise DataError(f"{d}: unsupported bundle version {manifest.get('version')}")
    attributes = {}
    for name, side in manifest["attributes"].items():
        labels = _read_pairs(d / f"attr_{name}.tsv")[:, 1]
        attributes[name] = AttributeTable(name, side, labels)
    gt = None
    if (d / "ground_truth.npz").exists():
        with np.load(d / "ground_truth.npz") as z:
            gt = {k: z[k] for k in z.files}
    ds = Dataset(manifest["n_users"], manifest["n_items"], _read_pairs(d / "train.tsv"),
                 _read_pairs(d / "validation.tsv"), _read_pairs(d / "test.tsv"), attributes,
                 _read_pairs(d / "user_ids.tsv")[:, 1], _read_pairs(d / "item_ids.tsv")[:, 1],
                 manifest["name"], gt)
    if ds.content_hash() != manifest["sha256"]:
        raise DataError(f"{d}: content hash mismatch")
    return ds


def load_dataset(path: str | Path, rating_threshold: float = 4) -> Dataset:
    """Detect the on-disk format: bundle, Coat release, or TSV triples."""
    d = Path(path)
    if (d / "manifest.json").exists():
        return load_bundle(d)
    if (d / "train.ascii").exists():
        return load_coat(d, rating_threshold)
    if (d / "train.tsv").exists():
        return load_triples(d, rating_threshold)
    raise DataError(f"{d}: no recognizable dataset (bundle, Coat, or TSV triples)")
