"""Image loading, dataset sampling, cover/secret pool splitting and batching.

Images travel as float32 arrays of shape (batch, height, width, channels)
with values in [0, 1] (byte value / 255).
"""
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IMAGE_SIZE = 64
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    path: Path
    label: str
    relpath: str


@dataclass
class DatasetSplit:
    """Cover pool plus k secret pools.

    In the default ``disjoint`` mode all pools are disjoint. In ``shared``
    mode every secret pool is the same list of records (the pools are still
    shuffled independently by the batch iterator).
    """

    cover_pool: list
    secret_pools: list
    mode: str = "disjoint"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_arrays(cls, cover, secrets):
        """In-memory split from (n, H, W, 3) arrays; records get ``mem/<pool>/<i>`` names."""
        arrays = [np.asarray(cover, np.float32)] + [np.asarray(s, np.float32) for s in secrets]
        if len({len(a) for a in arrays}) != 1:
            raise DatasetError("all pools must have the same length")
        pools = [[ImageRecord(None, "", f"mem/{p}/{i}") for i in range(len(a))]
                 for p, a in enumerate(arrays)]
        split = cls(pools[0], pools[1:])
        split._cache.update(enumerate(arrays))
        return split

    @property
    def k(self):
        return len(self.secret_pools)

    def __len__(self):
        return len(self.cover_pool)

    def pools(self):
        return [self.cover_pool, *self.secret_pools]

    def pool_array(self, index):
        """Stacked (n, 64, 64, 3) float32 array for pool ``index`` (0 = cover)."""
        if index not in self._cache:
            recs = self.pools()[index]
            if recs:
                self._cache[index] = np.concatenate([load_image(r.path) for r in recs])
            else:
                self._cache[index] = np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 3), np.float32)
        return self._cache[index]

    def write_manifest(self, path):
        """One ``pool_index<TAB>relative_path`` line per record."""
        lines = [f"{i}\t{rec.relpath}" for i, pool in enumerate(self.pools()) for rec in pool]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


@dataclass
class StegoBatch:
    cover: torch.Tensor
    secrets: list

    def __post_init__(self):
        shape = tuple(self.cover.shape)
        for s in self.secrets:
            if tuple(s.shape) != shape:
                raise ValueError(f"secret shape {tuple(s.shape)} != cover shape {shape}")

    @property
    def k(self):
        return len(self.secrets)

    def __len__(self):
        return self.cover.shape[0]

    def to(self, dtype=None, device=None):
        return StegoBatch(
            self.cover.to(device=device, dtype=dtype),
            [s.to(device=device, dtype=dtype) for s in self.secrets],
        )


def resize_bilinear(images, size):
    """Bilinear resize of an NHWC float array (half-pixel centres, no antialiasing)."""
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float64)).permute(0, 3, 1, 2)
    y = F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=False)
    return y.permute(0, 2, 3, 1).numpy()


def to_float(pixels):
    """uint8 HWC or NHWC pixels -> float32 NHWC in [0, 1]."""
    arr = np.asarray(pixels, dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 3 else arr


def load_image(path, size=IMAGE_SIZE):
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if img.mode != "RGB":
        warnings.warn(f"{path}: converting mode {img.mode} to RGB", stacklevel=2)
        img = img.convert("RGB")
    arr = to_float(np.asarray(img))
    if arr.shape[1:3] != (size, size):
        arr = resize_bilinear(arr, (size, size)).astype(np.float32)
    return arr


def list_classes(root):
    root = Path(root)
    classes = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_EXTENSIONS)
        if files:
            classes[d.name] = files
    return classes


def build_dataset(root, n_images, seed=0):
    """Seeded sample of ``n_images`` records from ``<root>/<class>/*``.

    Classes get equal quotas when ``n_images`` divides evenly; otherwise the
    remainder goes to randomly chosen classes. Classes that run short pass
    their quota on to classes with images to spare.
    """
    if n_images < 0:
        raise DatasetError("n_images must be non-negative")
    if n_images == 0:
        return []
    root = Path(root)
    classes = list_classes(root)
    available = sum(len(v) for v in classes.values())
    if available < n_images:
        raise DatasetError(
            f"requested {n_images} images but only {available} found under {root} "
            f"(short by {n_images - available})"
        )
    rng = random.Random(seed)
    names = list(classes)
    quota = dict.fromkeys(names, n_images // len(names))
    for name in rng.sample(names, n_images % len(names)):
        quota[name] += 1
    # redistribute quota from classes that cannot fill it
    deficit = 0
    for name in names:
        over = quota[name] - len(classes[name])
        if over > 0:
            quota[name] -= over
            deficit += over
    while deficit:
        spare = [n for n in names if quota[n] < len(classes[n])]
        name = rng.choice(spare)
        quota[name] += 1
        deficit -= 1

    records = []
    for name in names:
        for f in rng.sample(classes[name], quota[name]):
            records.append(ImageRecord(f, name, f.relative_to(root).as_posix()))
    rng.shuffle(records)
    return records


def split_dataset(records, k, mode="disjoint"):
    """Partition records into a cover pool and k secret pools, in list order.

    ``disjoint``: k+1 equal pools, remainder dropped.
    ``shared``: first half is one secret pool reused by all k decoders,
    second half is the cover pool.
    """
    if k < 1:
        raise DatasetError("k must be >= 1")
    records = list(records)
    if mode == "disjoint":
        if len(records) < k + 1:
            raise DatasetError(f"need at least {k + 1} records for k={k}, got {len(records)}")
        n = len(records) // (k + 1)
        pools = [records[i * n:(i + 1) * n] for i in range(k + 1)]
        return DatasetSplit(pools[0], pools[1:], mode)
    if mode == "shared":
        if len(records) < 2:
            raise DatasetError(f"need at least 2 records for a shared split, got {len(records)}")
        n = len(records) // 2
        secrets = records[:n]
        return DatasetSplit(records[n:2 * n], [secrets] * k, mode)
    raise DatasetError(f"unknown split mode {mode!r}")


class BatchIterator:
    """Aligned cover/secret batches over a DatasetSplit.

    Each call to :meth:`epoch` yields one pass. With ``shuffle`` every pool is
    permuted independently by a generator seeded from ``(seed, epoch)``, so a
    given epoch's batches can be reproduced without replaying earlier epochs.
    """

    def __init__(self, split, batch_size, seed=0, shuffle=True, dtype=torch.float32):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.split = split
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.dtype = dtype
        self._next_epoch = 0

    def __len__(self):
        n = len(self.split)
        return -(-n // self.batch_size)

    def order(self, epoch):
        n = len(self.split)
        npools = self.split.k + 1
        if not self.shuffle:
            return [np.arange(n)] * npools
        rng = np.random.default_rng([self.seed, epoch])
        return [rng.permutation(n) for _ in range(npools)]

    def epoch(self, epoch=None):
        if epoch is None:
            epoch = self._next_epoch
        self._next_epoch = epoch + 1
        n = len(self.split)
        if n == 0:
            return
        arrays = [self.split.pool_array(i) for i in range(self.split.k + 1)]
        orders = self.order(epoch)
        for start in range(0, n, self.batch_size):
            parts = [
                torch.from_numpy(arr[idx[start:start + self.batch_size]]).to(self.dtype)
                for arr, idx in zip(arrays, orders)
            ]
            yield StegoBatch(parts[0], parts[1:])

    def __iter__(self):
        return self.epoch()


def batch_iterator(split, batch_size, seed=0, shuffle=True, epochs=1):
    """Generator over ``epochs`` consecutive passes of a BatchIterator."""
    it = BatchIterator(split, batch_size, seed=seed, shuffle=shuffle)
    for e in range(epochs):
        yield from it.epoch(e)
