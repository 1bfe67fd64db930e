"""Perceptual hashing and the three dedup filters.

The 64-bit hash summarizes the low-frequency structure of an image:
re-encoding or brightening a picture leaves the hash intact, while a
genuinely different picture lands far away in Hamming distance.
"""

import numpy as np

from mmforge import (dedup_exact, hamming, loss_percentile_filter,
                     near_dup_filter, phash64)
from mmforge.corpus import (DataCategory, ImageRef, SubType, make_record)

rng = np.random.RandomState(7)

# a synthetic "photo": smooth gradients plus mild noise (values <= 245)
base = np.clip(
    np.add.outer(np.linspace(40, 200, 64), np.linspace(0, 40, 64))
    + rng.randint(0, 10, size=(64, 64)),
    0, 245).astype(np.float64)

brighter = base + 10.0           # uniform exposure bump, no clipping
shuffled = rng.permutation(base.ravel()).reshape(base.shape)  # different image

h_base = phash64(base)
h_bright = phash64(brighter)
h_other = phash64(shuffled)

print(f"hash(base)      = {h_base.hex}")
print(f"hash(base + 10) = {h_bright.hex}   distance {hamming(h_base, h_bright)}")
print(f"hash(shuffled)  = {h_other.hex}   distance {hamming(h_base, h_other)}")
print()


def record(n, image_id):
    image = ImageRef(image_id=image_id, uri=f"images/{n}.png",
                     width=64, height=64, format="PNG")
    return make_record(image=image, turns=[(f"What is shown ({n})?", "A scene.")],
                       source="demo", category=DataCategory.COMPREHENSIVE,
                       subtype=SubType.GENERAL_INSTRUCTION)


# exact dedup drops byte-identical records (same image, text, source)
a = record(0, "a" * 32)
b = record(1, "b" * 32)
kept, stats = dedup_exact([a, b, a])
print(f"exact dedup: kept {stats.kept} of {stats.seen}")

# near-dup filtering works on the hashes: the brightened copy is caught
records = [record(0, "a" * 32), record(1, "b" * 32), record(2, "c" * 32)]
hashes = {"a" * 32: h_base, "b" * 32: h_bright, "c" * 32: h_other}
kept, stats = near_dup_filter(records, hashes, threshold=4)
print(f"near-dup at threshold 4: kept {stats.kept} of {stats.seen} "
      f"(dropped the brightened twin)")

# loss filtering drops the top tail of a reference model's per-sample loss
pool = [record(i, f"{i:032x}") for i in range(20)]
losses = {rec.record_id: 1.0 + 0.1 * i for i, rec in enumerate(pool)}
kept, stats = loss_percentile_filter(pool, losses, fraction=0.10)
print(f"loss filter at 10%: kept {stats.kept} of {stats.seen} "
      f"(dropped the {stats.dropped} noisiest)")
