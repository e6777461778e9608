"""Dataset ingestion: IDX parsing, binary digit pairs, splits, synthetic blobs.

Inputs normalize into [0, 1]^d with labels in {-1, +1}; every dataset carries
a content hash so split disjointness and manifest provenance can be enforced
by value, not by trust.
"""

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .rng import stream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    x: np.ndarray          # (m, d) in [0, 1]
    y: np.ndarray          # (m,) in {-1, +1}
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int8)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ContractError("dataset arrays must be (m, d) and (m,)")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ContractError("inputs must lie in [0, 1]")
        if x.shape[0] and not np.all(np.isin(y, (-1, 1))):
            raise ContractError("labels must be -1 or +1")

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.x, dtype="<f8").tobytes())
        h.update(self.y.tobytes())
        return h.hexdigest()

    def example_hashes(self):
        out = []
        for i in range(len(self)):
            h = hashlib.sha256()
            h.update(np.ascontiguousarray(self.x[i], dtype="<f8").tobytes())
            h.update(bytes([int(self.y[i]) % 256]))
            out.append(h.digest())
        return out

    def subset(self, idx, split=None):
        meta = dict(self.meta)
        if split:
            meta["split"] = split
        return LabeledDataset(self.x[idx], self.y[idx], meta)


def assert_disjoint(a: LabeledDataset, b: LabeledDataset, names=("a", "b")):
    inter = set(a.example_hashes()) & set(b.example_hashes())
    if inter:
        raise ContractError(
            f"datasets {names[0]} and {names[1]} share {len(inter)} examples; "
            "certificate validity requires disjoint splits")


# ---------------------------------------------------------------------------
# IDX (big-endian) image/label files.

def parse_idx(image_bytes: bytes, label_bytes: bytes):
    """Decode an IDX image/label pair into (images (m, rows*cols) in [0,1],
    labels (m,) uint8)."""
    if len(image_bytes) < 16:
        raise ContractError("image file truncated before header (offset 0)")
    magic, count, rows, cols = struct.unpack(">IIII", image_bytes[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise ContractError(f"bad image magic 0x{magic:08x} at offset 0")
    expected = 16 + count * rows * cols
    if len(image_bytes) != expected:
        raise ContractError(
            f"image payload is {len(image_bytes)} bytes, expected {expected} "
            f"(truncation at offset {min(len(image_bytes), expected)})")
    if len(label_bytes) < 8:
        raise ContractError("label file truncated before header (offset 0)")
    lmagic, lcount = struct.unpack(">II", label_bytes[:8])
    if lmagic != IDX_LABEL_MAGIC:
        raise ContractError(f"bad label magic 0x{lmagic:08x} at offset 0")
    if len(label_bytes) != 8 + lcount:
        raise ContractError(f"label payload mismatch at offset {len(label_bytes)}")
    if lcount != count:
        raise ContractError(f"image count {count} != label count {lcount}")
    pixels = np.frombuffer(image_bytes, dtype=np.uint8, offset=16)
    images = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(label_bytes, dtype=np.uint8, offset=8).copy()
    return images, labels


def make_pair(images, labels, digit_a: int, digit_b: int,
              source="idx") -> LabeledDataset:
    """Binary task digit_a -> +1, digit_b -> -1, file order preserved."""
    if digit_a == digit_b:
        raise ContractError("pair digits must differ")
    keep = np.isin(labels, (digit_a, digit_b))
    x = images[keep]
    y = np.where(labels[keep] == digit_a, 1, -1).astype(np.int8)
    return LabeledDataset(x, y, {"source": source, "pair": f"{digit_a}vs{digit_b}"})


def split_three(train: LabeledDataset, test: LabeledDataset, sizes, seed: int):
    """(prior set, posterior set, test set) with recorded hashes.

    The two training splits are a seeded shuffle of the train partition; the
    test subset is the first `sizes[2]` items in file order so it never
    depends on the seed.
    """
    n_prior, n_post, n_test = (int(s) for s in sizes)
    if n_prior + n_post > len(train):
        raise ContractError(
            f"requested {n_prior}+{n_post} training examples, only {len(train)} available")
    if n_test > len(test):
        raise ContractError(f"requested {n_test} test examples, only {len(test)} available")
    order = stream(seed, "split-order").permutation(len(train))
    s_post = train.subset(np.sort(order[:n_post]), split="posterior")
    s_prior = train.subset(np.sort(order[n_post:n_post + n_prior]), split="prior")
    t = test.subset(np.arange(n_test), split="test")
    assert_disjoint(s_prior, s_post, ("prior", "posterior"))
    return s_prior, s_post, t


def synth_2d(m: int, margin=0.3, noise=0.05, seed=0) -> LabeledDataset:
    """Two Gaussian blobs on the diagonal of [0, 1]^2, exactly class-balanced.

    With small noise the task is linearly separable; the optimal linear
    separator's risk is the Gaussian overlap Phi(-margin*sqrt(2)/(2*noise)).
    """
    if m < 2:
        raise ContractError("need at least two examples")
    rng = stream(seed, "synth2d")
    n_pos = m // 2 + (m % 2)
    y = np.concatenate([np.ones(n_pos, dtype=np.int8),
                        -np.ones(m - n_pos, dtype=np.int8)])
    centers = np.where(y[:, None] > 0, 0.5 + margin / 2.0, 0.5 - margin / 2.0)
    x = np.clip(centers + noise * rng.standard_normal((m, 2)), 0.0, 1.0)
    perm = rng.permutation(m)
    return LabeledDataset(x[perm], y[perm],
                          {"source": "synth2d", "margin": margin, "noise": noise,
                           "seed": seed})


# ---------------------------------------------------------------------------
# Content-addressed cache.

def save_dataset(ds: LabeledDataset, cache_dir) -> str:
    import json
    import os
    os.makedirs(cache_dir, exist_ok=True)
    digest = ds.content_hash()
    path = os.path.join(cache_dir, f"{digest}.npz")
    if not os.path.exists(path):
        np.savez(path, x=ds.x, y=ds.y,
                 meta=json.dumps(ds.meta, sort_keys=True, default=str))
    return path


def load_dataset(path, expect_hash=None) -> LabeledDataset:
    import json
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"])) if "meta" in z.files else {}
        ds = LabeledDataset(z["x"], z["y"], meta)
    if expect_hash and ds.content_hash() != expect_hash:
        raise ContractError(f"dataset at {path} does not match recorded hash")
    return ds
