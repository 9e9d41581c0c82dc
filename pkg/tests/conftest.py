import numpy as np

from layerlab.data import Dataset, SplitConfig, split_dataset
from layerlab.pipeline import ImagePipeline, run_pipeline


def blob_dataset(n=128, hw=8, gap=(60, 196), seed=0):
    """Linearly separable two-class set: class 0 dark, class 1 bright."""
    rng = np.random.default_rng(seed)
    lo, hi = gap
    labels = np.tile([0, 1], n // 2).astype(np.int64)
    images = np.empty((n, 1, hw, hw), dtype=np.uint8)
    dark = rng.integers(0, lo, size=(n, 1, hw, hw))
    bright = rng.integers(hi, 256, size=(n, 1, hw, hw))
    images[:] = np.where(labels[:, None, None, None] == 0, dark, bright).astype(np.uint8)
    return Dataset(images, labels, 1, "blob", ["dark", "bright"], role="subset")


def blob_splits(n=128, hw=8, seed=0, cfg=None):
    d = blob_dataset(n=n, hw=hw, seed=seed)
    cfg = cfg or SplitConfig()
    train, val, test = split_dataset(d, cfg)
    pipe = ImagePipeline(("scale01",))
    return tuple(run_pipeline(part, pipe) for part in (train, val, test))
