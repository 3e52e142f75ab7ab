"""Shared configurations and fixtures-as-functions for the test suite."""

import numpy as np

from denseswin.config import run_config_from_dict
from denseswin.data import DatasetManifest, Entry

# per-class image counts of the public leaf-disease dataset and its published split
TABLE_COUNTS = [7322, 6695, 7018, 6330, 3814]
TABLE_TRAIN, TABLE_TEST = 25441, 5738

# Published five-class matrix, rows are predicted class, columns are target class.
PUBLISHED_BY_OUTPUT = np.array(
    [
        [1444, 8, 6, 2, 5],
        [10, 1318, 8, 2, 3],
        [5, 7, 1383, 1, 5],
        [3, 2, 2, 1254, 4],
        [2, 4, 5, 7, 746],
    ]
)
PRINTED_PRECISION = [98.6, 98.3, 98.7, 99.1, 97.6]  # row margins
PRINTED_RECALL = [98.6, 98.4, 98.5, 99.1, 97.8]  # column margins
TABLE_ACCURACY = 98.51


def manifest_from_counts(counts):
    entries = [Entry(f"c{c}/{i}.ppm", c) for c, n in enumerate(counts) for i in range(n)]
    return DatasetManifest(entries)


TINY_MODEL = {
    "image_size": 32,
    "dense": {"stem_channels": 8, "growth_rate": 4, "block_layers": [2, 2]},
    "swin": {"embed_dim": 8, "depths": [2, 2], "heads": [1, 2], "window": 4},
    "fusion": {"grid": 2, "fused_channels": 16},
}


def tiny_config(out_dir, epochs=2, seed=0, **train):
    raw = {
        "model": TINY_MODEL,
        "data": {"synthetic_per_class": 4, "test_fraction": 0.25, "seed": seed},
        "train": {"epochs": epochs, "batch_size": 8, "checkpoint_every": 1, "out_dir": str(out_dir), **train},
    }
    return run_config_from_dict(raw)
