"""Multi-domain embedding datasets: synthetic generation, file I/O, stratified batches."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import DTYPE, make_rng

BINARY_MAGIC = b"UTOK"
BINARY_VERSION = 1


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ItemRecord:
    domain_id: int
    item_id: str
    embedding: np.ndarray


class Dataset:
    """Items from K domains with dense domain ids ``0..K-1``.

    ``domain_labels[k]`` is the original label of dense domain ``k`` as read
    from disk (identity for generated data).
    """

    def __init__(self, X, domains, item_ids=None, domain_labels=None):
        X = np.ascontiguousarray(X, dtype=DTYPE)
        domains = np.asarray(domains, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise DataFormatError("dataset needs a non-empty (n, d) embedding matrix")
        if domains.shape != (X.shape[0],):
            raise DataFormatError("one domain id per item is required")
        if not np.all(np.isfinite(X)):
            raise DataFormatError("embeddings must be finite")
        if item_ids is None:
            item_ids = [str(i) for i in range(X.shape[0])]
        item_ids = [str(s) for s in item_ids]
        if len(item_ids) != X.shape[0]:
            raise DataFormatError("one item_id per item is required")
        K = int(domains.max()) + 1 if domains.size else 0
        if domains.min() < 0 or len(np.unique(domains)) != K:
            raise DataFormatError("domain ids must be dense 0..K-1 with every domain non-empty")
        if domain_labels is None:
            domain_labels = list(range(K))
        if len(domain_labels) != K:
            raise DataFormatError("domain_labels must have one entry per domain")
        seen = set()
        for dom, iid in zip(domains.tolist(), item_ids):
            if (dom, iid) in seen:
                raise DataFormatError(f"duplicate item_id {iid!r} in domain {domain_labels[dom]}")
            seen.add((dom, iid))
        self.X = X
        self.domains = domains
        self.item_ids = item_ids
        self.domain_labels = [int(v) for v in domain_labels]

    @property
    def n_items(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def K(self):
        return len(self.domain_labels)

    def domain_counts(self):
        return np.bincount(self.domains, minlength=self.K)

    def domain_indices(self, k):
        return np.flatnonzero(self.domains == k)

    def records(self):
        for i in range(self.n_items):
            yield ItemRecord(int(self.domains[i]), self.item_ids[i], self.X[i])

    def __len__(self):
        return self.n_items

    def __repr__(self):
        return f"Dataset(n={self.n_items}, d={self.d}, K={self.K})"


def _unit_rows(X):
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.where(norms > 0.0, norms, 1.0)


def gen_synthetic(K, items_per_domain, d, separation=4.0, intra_std=0.3, seed=0, n_clusters=8,
                  cluster_spread=None):
    """Unit-norm embeddings drawn from a per-domain Gaussian mixture.

    Domain means sit on a sphere of radius ``separation``. Each domain has
    ``n_clusters`` sub-cluster centres offset from its mean by vectors of
    norm about ``cluster_spread`` (default ``separation / 4``); items add
    isotropic noise whose expected norm is about ``intra_std``.
    """
    if K < 1 or items_per_domain < 1 or d < 2 or n_clusters < 1:
        raise ValueError("need K >= 1, items_per_domain >= 1, d >= 2, n_clusters >= 1")
    if separation < 0 or intra_std < 0:
        raise ValueError("separation and intra_std must be non-negative")
    if cluster_spread is None:
        cluster_spread = separation / 4.0
    rng = make_rng(seed)
    scale = 1.0 / np.sqrt(d)
    blocks = []
    for _ in range(K):
        u = rng.standard_normal(d)
        mean = separation * u / np.linalg.norm(u)
        centres = mean + cluster_spread * scale * rng.standard_normal((n_clusters, d))
        assign = rng.integers(0, n_clusters, size=items_per_domain)
        noise = intra_std * scale * rng.standard_normal((items_per_domain, d))
        blocks.append(centres[assign] + noise)
    X = _unit_rows(np.vstack(blocks))
    domains = np.repeat(np.arange(K), items_per_domain)
    ids = [f"d{k}-{i}" for k in range(K) for i in range(items_per_domain)]
    return Dataset(X, domains, ids)


def _dense_labels(raw):
    labels = sorted(set(raw))
    index = {lab: i for i, lab in enumerate(labels)}
    return labels, np.array([index[r] for r in raw], dtype=np.int64)


def load_jsonl(path):
    raw_domains, ids, rows = [], [], []
    d = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                dom = obj["domain"]
                iid = obj["item_id"]
                emb = obj["embedding"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataFormatError(f"line {lineno}: malformed record ({exc})") from None
            if isinstance(dom, bool) or not isinstance(dom, int):
                raise DataFormatError(f"line {lineno}: domain must be an integer")
            if not isinstance(emb, list) or not emb:
                raise DataFormatError(f"line {lineno}: embedding must be a non-empty list")
            if d is None:
                d = len(emb)
            elif len(emb) != d:
                raise DataFormatError(f"line {lineno}: embedding length {len(emb)} != {d}")
            raw_domains.append(dom)
            ids.append(str(iid))
            rows.append(emb)
    if not rows:
        raise DataFormatError(f"{path}: no records")
    labels, domains = _dense_labels(raw_domains)
    try:
        X = np.array(rows, dtype=DTYPE)
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: non-numeric embedding values ({exc})") from None
    return Dataset(X, domains, ids, labels)


def save_jsonl(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(dataset.n_items):
            rec = {
                "domain": dataset.domain_labels[dataset.domains[i]],
                "item_id": dataset.item_ids[i],
                # float repr round-trips exactly
                "embedding": dataset.X[i].tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def save_binary(dataset, path):
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<IIIQ", BINARY_VERSION, dataset.K, dataset.d, dataset.n_items))
        for i in range(dataset.n_items):
            iid = dataset.item_ids[i].encode("utf-8")
            if len(iid) > 0xFFFF:
                raise DataFormatError(f"item_id too long for binary format: {dataset.item_ids[i][:32]!r}...")
            fh.write(struct.pack("<IH", dataset.domain_labels[dataset.domains[i]], len(iid)))
            fh.write(iid)
            fh.write(dataset.X[i].astype("<f8").tobytes())


def load_binary(path):
    data = Path(path).read_bytes()
    if data[:4] != BINARY_MAGIC:
        raise DataFormatError(f"{path}: bad magic")
    version, K, d, count = struct.unpack_from("<IIIQ", data, 4)
    if version != BINARY_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if count == 0:
        raise DataFormatError(f"{path}: no records")
    pos = 4 + struct.calcsize("<IIIQ")
    raw_domains, ids = [], []
    X = np.empty((count, d), dtype=DTYPE)
    try:
        for i in range(count):
            dom, n = struct.unpack_from("<IH", data, pos)
            pos += 6
            ids.append(data[pos:pos + n].decode("utf-8"))
            pos += n
            X[i] = np.frombuffer(data, dtype="<f8", count=d, offset=pos)
            pos += 8 * d
            raw_domains.append(dom)
    except (struct.error, ValueError) as exc:
        raise DataFormatError(f"{path}: truncated at record {i}") from exc
    labels, domains = _dense_labels(raw_domains)
    if len(labels) != K:
        raise DataFormatError(f"{path}: header says K={K}, records use {len(labels)} domains")
    return Dataset(X, domains, ids, labels)


def load_dataset(path):
    """Dispatch on content: binary files start with the magic bytes."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    return load_binary(path) if head == BINARY_MAGIC else load_jsonl(path)


@dataclass
class Batch:
    indices: np.ndarray          # rows of the parent dataset
    X: np.ndarray
    domains: np.ndarray
    per_domain_index: dict       # domain -> positions within the batch


def allocate_counts(sizes, batch_size, min_per_domain):
    """Per-domain slot counts: ``min_per_domain`` each, rest by largest remainder on sizes."""
    sizes = np.asarray(sizes, dtype=np.int64)
    K = len(sizes)
    if batch_size < K * min_per_domain:
        raise ValueError(f"batch_size {batch_size} < K*min_per_domain = {K * min_per_domain}")
    if batch_size > sizes.sum():
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {sizes.sum()}")
    if np.any(sizes < min_per_domain):
        raise ValueError("a domain has fewer items than min_per_domain")
    counts = np.full(K, min_per_domain, dtype=np.int64)
    remaining = batch_size - counts.sum()
    while remaining > 0:
        room = sizes - counts
        share = sizes * remaining / sizes.sum()
        base = np.minimum(np.floor(share).astype(np.int64), room)
        counts += base
        remaining -= base.sum()
        if remaining == 0:
            break
        frac = np.where(sizes - counts > 0, share - np.floor(share), -1.0)
        # largest remainders first, ties to the lower domain index
        for k in np.argsort(-frac, kind="stable")[:remaining]:
            if counts[k] < sizes[k]:
                counts[k] += 1
                remaining -= 1
    return counts


def sample_batch(dataset, batch_size, min_per_domain, rng):
    counts = allocate_counts(dataset.domain_counts(), batch_size, min_per_domain)
    picks = []
    for k, c in enumerate(counts):
        pool = dataset.domain_indices(k)
        picks.append(rng.choice(pool, size=int(c), replace=False))
    idx = np.concatenate(picks)
    doms = dataset.domains[idx]
    per_domain = {k: np.flatnonzero(doms == k) for k in range(dataset.K) if counts[k] > 0}
    return Batch(idx, dataset.X[idx], doms, per_domain)
