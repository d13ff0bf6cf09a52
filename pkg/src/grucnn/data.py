"""Dataset ingestion and noisy image-sequence synthesis.

Two corpora feed the models: CIFAR-10 in its binary batch format, and a
procedurally generated 10-class toyset for desk-scale experiments.  Both
are globally normalized (one scalar mean and std over every pixel of the
corpus).  A sequence is built by repeating one image T times, jittering
each frame independently by up to 3 pixels per axis (vacated pixels take
their nearest neighbor's value), adding white Gaussian noise of variance
1/snr — SNR is the signal-power to noise-power ratio, and the normalized
corpus has unit pixel variance — and finally standardizing the whole
sequence to mean 0, std 1.

Generation is a pure function of (image, T, snr, seed).  Per-item
generators are derived from a base seed and the item's index, so a batch
generated serially equals one generated in parallel, and any epoch's data
can be re-derived without replaying earlier epochs.
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np

from .tensor import get_default_dtype

N_CLASSES = 10
JITTER_MAX = 3

# training SNR sets: default regime and the low-SNR regime
DEFAULT_SNR_SET = (64.0, 16.0, 4.0, 1.0, 1 / 2, 1 / 4, 1 / 8)
LOW_SNR_SET = (16.0, 4.0, 1.0, 1 / 2, 1 / 4, 1 / 8, 1 / 16, 1 / 32)

_TOYSET_MAGIC = b"TOYS"
_TOYSET_VERSION = 1


class DataFormatError(ValueError):
    """Raised when an on-disk dataset file violates its documented layout."""


@dataclasses.dataclass
class LabeledImage:
    pixels: np.ndarray  # [3, H, W]
    label: int


@dataclasses.dataclass
class ImageSequenceBatch:
    """A batch of generated sequences plus the labels/SNRs that made them."""

    frames: np.ndarray  # [batch, T, 3, H, W]
    labels: np.ndarray  # [batch]
    snrs: np.ndarray    # [batch]
    rng_seed: int | None = None


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------

def load_cifar10(path):
    """Parse a CIFAR-10 binary batch: 3073-byte records of label + RGB planes.

    Pixels come back as reals in [0, 255]; normalization is a separate,
    corpus-wide step (:func:`preprocess_corpus`).
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 3073 != 0:
        offset = (raw.size // 3073) * 3073
        raise DataFormatError(
            f"{path}: truncated record at byte offset {offset} "
            f"(file holds {raw.size} bytes, not a multiple of 3073)"
        )
    records = raw.reshape(-1, 3073)
    labels = records[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DataFormatError(
            f"{path}: label byte {labels[bad[0]]} > 9 at byte offset {bad[0] * 3073}"
        )
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64)
    return [LabeledImage(p, int(l)) for p, l in zip(pixels, labels)]


def preprocess_corpus(images):
    """Center and scale a corpus by its single global pixel mean and std.

    Returns (normalized images, (mean, std)).
    """
    if not images:
        raise ValueError("empty corpus")
    stacked = np.concatenate([im.pixels.ravel() for im in images])
    mean = stacked.mean()
    std = stacked.std()
    if std == 0:
        raise ValueError("zero-variance corpus cannot be normalized")
    out = [LabeledImage((im.pixels - mean) / std, im.label) for im in images]
    return out, (float(mean), float(std))


def _stripe_mask(coord, period, phase, thickness):
    return (coord + phase) % period < thickness


def _toy_pattern(label, size, rng):
    """Binary foreground mask for one class at a random position/phase."""
    ii, jj = np.mgrid[0:size, 0:size]
    if label in (0, 1, 2, 3):
        period = int(rng.integers(3, 6))
        phase = int(rng.integers(period))
        coord = {0: ii, 1: jj, 2: ii + jj, 3: ii - jj}[label]
        return _stripe_mask(coord, period, phase, (period + 1) // 2)
    if label == 4:  # filled disk
        r = rng.uniform(size / 6, size / 4)
        ci = rng.uniform(r, size - 1 - r)
        cj = rng.uniform(r, size - 1 - r)
        return (ii - ci) ** 2 + (jj - cj) ** 2 <= r ** 2
    if label == 5:  # ring
        r = rng.uniform(size / 4, size / 3)
        ci = rng.uniform(r, size - 1 - r)
        cj = rng.uniform(r, size - 1 - r)
        d2 = (ii - ci) ** 2 + (jj - cj) ** 2
        return (d2 <= r ** 2) & (d2 > (r - 2.0) ** 2)
    if label == 6:  # plus sign spanning the canvas
        ci = rng.uniform(size / 4, 3 * size / 4)
        cj = rng.uniform(size / 4, 3 * size / 4)
        return (np.abs(ii - ci) < 1.5) | (np.abs(jj - cj) < 1.5)
    if label == 7:  # X of two diagonals
        ci = rng.uniform(size / 4, 3 * size / 4)
        cj = rng.uniform(size / 4, 3 * size / 4)
        return (np.abs((ii - ci) - (jj - cj)) <= 1.0) | (np.abs((ii - ci) + (jj - cj)) <= 1.0)
    if label == 8:  # checkerboard
        cell = int(rng.integers(2, 5))
        pi = int(rng.integers(cell))
        pj = int(rng.integers(cell))
        return (((ii + pi) // cell) + ((jj + pj) // cell)) % 2 == 0
    # label 9: square outline
    half = rng.uniform(size / 4, 3 * size / 8)
    ci = rng.uniform(half, size - 1 - half)
    cj = rng.uniform(half, size - 1 - half)
    cheb = np.maximum(np.abs(ii - ci), np.abs(jj - cj))
    return (cheb <= half) & (cheb > half - 2.0)


def synth_toyset(n_per_class, image_size=16, rng=None):
    """Ten shape/texture classes with randomized position and phase.

    Classes: horizontal/vertical/two-diagonal stripes, disk, ring, plus,
    X, checkerboard, square outline.  Color carries no class information
    (independent random per-channel gains), so the pattern must be read.
    """
    if image_size < 8:
        raise ValueError(f"image_size must be >= 8, got {image_size}")
    rng = rng if rng is not None else np.random.default_rng()
    images = []
    for label in range(N_CLASSES):
        for _ in range(n_per_class):
            mask = _toy_pattern(label, image_size, rng)
            amplitude = rng.uniform(0.7, 1.0)
            background = rng.uniform(0.0, 0.15, size=(image_size, image_size))
            gains = rng.uniform(0.6, 1.4, size=3)
            plane = background + amplitude * mask
            pixels = plane[None, :, :] * gains[:, None, None]
            images.append(LabeledImage(pixels.astype(np.float64), label))
    return images


def save_toyset(path, images):
    """Write a toyset archive: magic, version, image size, count, records.

    Each record is one label byte followed by 3*size*size float32
    little-endian pixels.
    """
    size = images[0].pixels.shape[1]
    with open(path, "wb") as f:
        f.write(_TOYSET_MAGIC)
        f.write(struct.pack("<III", _TOYSET_VERSION, size, len(images)))
        for im in images:
            if im.pixels.shape != (3, size, size):
                raise ValueError(f"inconsistent image shape {im.pixels.shape}")
            f.write(struct.pack("<B", im.label))
            f.write(im.pixels.astype("<f4").tobytes())


def load_toyset(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _TOYSET_MAGIC:
        raise DataFormatError(f"{path}: bad magic {blob[:4]!r} at byte offset 0")
    if len(blob) < 16:
        raise DataFormatError(f"{path}: truncated header at byte offset {len(blob)}")
    version, size, count = struct.unpack("<III", blob[4:16])
    if version != _TOYSET_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    record = 1 + 3 * size * size * 4
    expected = 16 + count * record
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: truncated record at byte offset {min(len(blob), expected)} "
            f"(expected {expected} bytes, found {len(blob)})"
        )
    images = []
    for i in range(count):
        off = 16 + i * record
        label = blob[off]
        if label > 9:
            raise DataFormatError(f"{path}: label byte {label} > 9 at byte offset {off}")
        pixels = np.frombuffer(blob, dtype="<f4", count=3 * size * size, offset=off + 1)
        images.append(LabeledImage(pixels.reshape(3, size, size).astype(np.float64), int(label)))
    return images


# ---------------------------------------------------------------------------
# sequence synthesis
# ---------------------------------------------------------------------------

def jitter_frame(pixels, dx, dy):
    """Translate by (dx right, dy down); vacated pixels replicate the edge."""
    if abs(dx) > JITTER_MAX or abs(dy) > JITTER_MAX:
        raise ValueError(f"jitter offset ({dx}, {dy}) outside +/-{JITTER_MAX}")
    _, H, W = pixels.shape
    rows = np.clip(np.arange(H) - dy, 0, H - 1)
    cols = np.clip(np.arange(W) - dx, 0, W - 1)
    return pixels[:, rows[:, None], cols[None, :]]


def sequence_rng(base_seed, *key):
    """Generator for one item, derived from a base seed and an index path."""
    ss = np.random.SeedSequence(int(base_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)


def make_sequence(pixels, T, snr, rng, return_parts=False):
    """T jittered, noise-corrupted frames of one image, standardized jointly.

    Draw order is fixed (all offsets, then all noise), so a sequence is a
    pure function of the generator's starting state.  ``return_parts``
    additionally yields (clean jittered frames, noise, offsets) before
    normalization, for diagnostics.
    """
    if T < 1:
        raise ValueError(f"sequence length must be >= 1, got {T}")
    snr = float(snr)
    if snr <= 0:
        raise ValueError(f"snr must be positive, got {snr}")
    offsets = rng.integers(-JITTER_MAX, JITTER_MAX + 1, size=(T, 2))
    clean = np.stack([jitter_frame(pixels, int(dx), int(dy)) for dx, dy in offsets])
    noise = rng.normal(0.0, np.sqrt(1.0 / snr), size=clean.shape)
    seq = clean + noise
    seq = (seq - seq.mean()) / seq.std()
    if return_parts:
        return seq, clean, noise, offsets
    return seq


def make_training_batch(corpus, snr_set, batch=64, T=26, rng=None):
    """Sample ``batch`` images with replacement; one uniform SNR per item."""
    if not snr_set:
        raise ValueError("snr_set is empty")
    rng = rng if rng is not None else np.random.default_rng()
    snr_set = [float(s) for s in snr_set]
    idx = rng.integers(0, len(corpus), size=batch)
    snr_idx = rng.integers(0, len(snr_set), size=batch)
    item_seeds = rng.integers(0, 2 ** 63, size=batch)
    frames, labels, snrs = [], [], []
    for i, c, s in zip(idx, snr_idx, item_seeds):
        im = corpus[i]
        frames.append(make_sequence(im.pixels, T, snr_set[c], np.random.default_rng(int(s))))
        labels.append(im.label)
        snrs.append(snr_set[c])
    dtype = get_default_dtype()
    return ImageSequenceBatch(np.stack(frames).astype(dtype), np.asarray(labels),
                              np.asarray(snrs, dtype=np.float64))


def epoch_batches(corpus, snr_set, batch, T, base_seed, epoch):
    """Yield one epoch of batches: every corpus image seeds exactly one sequence.

    Item order is a seeded permutation; each item's SNR and noise come
    from a generator keyed by (base_seed, epoch, image index), so the
    data is identical however the epoch is split into batches, and any
    epoch can be regenerated in isolation (checkpoint resume).
    """
    if not snr_set:
        raise ValueError("snr_set is empty")
    snr_set = [float(s) for s in snr_set]
    n = len(corpus)
    order = sequence_rng(base_seed, epoch, 2 ** 20).permutation(n)
    dtype = get_default_dtype()
    for start in range(0, n, batch):
        chunk = order[start:start + batch]
        if chunk.size < 2:
            break  # a trailing single item cannot batch-normalize
        frames, labels, snrs = [], [], []
        for image_index in chunk:
            rng = sequence_rng(base_seed, epoch, image_index)
            snr = snr_set[int(rng.integers(0, len(snr_set)))]
            im = corpus[image_index]
            frames.append(make_sequence(im.pixels, T, snr, rng))
            labels.append(im.label)
            snrs.append(snr)
        yield ImageSequenceBatch(np.stack(frames).astype(dtype), np.asarray(labels),
                                 np.asarray(snrs, dtype=np.float64), rng_seed=base_seed)
