"""Labeled slices: synthetic ellipse phantoms, file ingestion and subject-level splits.

Manifest format (plain text, one record per line)::

    <image-path> <label-path> <subject-id> [train|test]

Blank lines and lines starting with ``#`` are ignored. Paths are relative to
the manifest's root directory. Images are 16-bit grayscale PGM/PNG, labels are
8-bit PGM/PNG holding class indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from jointmri.errors import ConfigError, DataError

INTENSITY_RANGE = (0.15, 0.95)
NOISE_SIGMA = 0.01
NORMALIZE_PERCENTILE = 99.9
MAX16 = 65535


@dataclass
class LabeledSlice:
    image: np.ndarray  # float64 (H, W) in [0, 1]
    labels: np.ndarray  # uint8 (H, W) class indices
    subject_id: str = "subject"
    slice_index: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.image.shape != self.labels.shape or self.image.ndim != 2:
            raise DataError(
                f"{self.subject_id}/{self.slice_index}: image {self.image.shape} and labels "
                f"{self.labels.shape} must be matching 2D arrays"
            )
        if not np.isfinite(self.image).all() or self.image.min() < 0 or self.image.max() > 1:
            raise DataError(f"{self.subject_id}/{self.slice_index}: image must be finite in [0, 1]")

    @property
    def shape(self):
        return self.image.shape


@dataclass
class DatasetSplit:
    train: list
    test: list
    class_count: int
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        if not self.class_names:
            self.class_names = default_class_names(self.class_count)
        overlap = {s.subject_id for s in self.train} & {s.subject_id for s in self.test}
        if overlap:
            raise DataError(f"subjects in both train and test: {sorted(overlap)}")


def default_class_names(C: int) -> list:
    return ["background"] + [f"tissue{k}" for k in range(1, C)]


# ---------------------------------------------------------------------------
# phantoms


def tissue_levels(C: int) -> np.ndarray:
    """Mean intensity per class; background is 0.

    Levels are spread evenly over ``INTENSITY_RANGE`` and interleaved from both
    ends so nested tissues differ clearly in brightness.
    """
    m = C - 1
    levels = np.linspace(*INTENSITY_RANGE, m) if m > 1 else np.array([INTENSITY_RANGE[1]])
    order = []
    lo, hi = 0, m - 1
    while lo <= hi:
        order.append(hi)
        if lo != hi:
            order.append(lo)
        lo, hi = lo + 1, hi - 1
    return np.concatenate([[0.0], levels[order]])


def _ellipse(xx, yy, cx, cy, a, b, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _draw_labels(rng, H, W, C):
    yy, xx = np.mgrid[-1 : 1 : H * 1j, -1 : 1 : W * 1j]
    labels = np.zeros((H, W), dtype=np.uint8)
    cx, cy = rng.uniform(-0.05, 0.05, 2)
    a, b = rng.uniform(0.75, 0.9), rng.uniform(0.62, 0.8)
    tilt = rng.uniform(-0.3, 0.3)
    labels[_ellipse(xx, yy, cx, cy, a, b, tilt)] = 1
    if C > 2:
        shrink = rng.uniform(0.72, 0.85)
        labels[_ellipse(xx, yy, cx, cy, a * shrink, b * shrink, tilt)] = 2
        inner_a, inner_b = a * shrink, b * shrink
        for k in range(3, C):
            # center uniformly inside the inner ellipse, pulled toward its middle
            r = 0.6 * math.sqrt(rng.uniform())
            phi = rng.uniform(0, 2 * math.pi)
            ex = cx + r * inner_a * math.cos(phi)
            ey = cy + r * inner_b * math.sin(phi)
            sa, sb = rng.uniform(0.08, 0.24, 2)
            labels[_ellipse(xx, yy, ex, ey, sa, sb, rng.uniform(0, math.pi))] = k
    return labels, xx, yy


def generate_phantom(
    H: int = 64,
    W: int = 64,
    C: int = 8,
    seed: int = 0,
    subject_id: str = "phantom",
    slice_index: int = 0,
    min_pixels: int = 4,
) -> LabeledSlice:
    """Random nested/overlapping ellipse phantom with ``C - 1`` tissues over background.

    Later tissues are drawn on top. Each tissue gets its class intensity with a
    small random offset, a gentle smooth multiplicative field and Gaussian
    noise. The image is normalized the same way :func:`ingest_slices` does and
    quantized to 16 bits, so writing and re-ingesting it is lossless.
    """
    if C < 2:
        raise ConfigError(f"need at least 2 classes (background + 1 tissue), got {C}")
    if C > 256:
        raise ConfigError("labels are stored as 8-bit indices; C must be <= 256")
    rng = np.random.default_rng(seed)
    for _ in range(50):
        labels, xx, yy = _draw_labels(rng, H, W, C)
        counts = np.bincount(labels.ravel(), minlength=C)
        if (counts >= min_pixels).all():
            break
    # with a tiny grid some classes may stay hidden; the last draw is kept
    levels = tissue_levels(C) + np.concatenate([[0.0], rng.uniform(-0.02, 0.02, C - 1)])
    image = levels[labels]
    fx, fy, px, py = rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5), *rng.uniform(0, 2 * math.pi, 2)
    field_ = 1.0 + 0.05 * np.sin(math.pi * fx * xx + px) * np.sin(math.pi * fy * yy + py)
    image = image * field_ + rng.normal(0.0, NOISE_SIGMA, (H, W))
    image = quantize16(normalize_intensity(np.clip(image, 0.0, None)))
    return LabeledSlice(image, labels, subject_id, slice_index)


def phantom_dataset(
    n_subjects: int,
    slices_per_subject: int,
    H: int = 64,
    W: int = 64,
    C: int = 8,
    seed: int = 0,
) -> list:
    """Phantoms grouped into subjects ``subj01``, ``subj02``, ... with per-slice seeds."""
    seeds = np.random.SeedSequence(seed).spawn(n_subjects * slices_per_subject)
    out = []
    for s in range(n_subjects):
        for k in range(slices_per_subject):
            ss = seeds[s * slices_per_subject + k]
            out.append(
                generate_phantom(H, W, C, int(ss.generate_state(1)[0]), f"subj{s + 1:02d}", k)
            )
    return out


# ---------------------------------------------------------------------------
# normalization


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Divide by the 99.9th percentile (an actual pixel value) and clip to [0, 1].

    The percentile uses the ``higher`` order statistic, so re-normalizing an
    already normalized image is an exact no-op. A zero percentile is replaced by 1.
    """
    image = np.asarray(image, dtype=np.float64)
    q = float(np.percentile(image, NORMALIZE_PERCENTILE, method="higher"))
    if q <= 0:
        q = 1.0
    return np.clip(image / q, 0.0, 1.0)


def quantize16(image: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(image) * MAX16) / MAX16


def center_crop_or_pad(a: np.ndarray, H: int, W: int) -> np.ndarray:
    """Center crop larger axes and zero-pad smaller ones."""
    out = np.zeros((H, W), dtype=a.dtype)
    h, w = a.shape
    sh, sw = max(0, (h - H) // 2), max(0, (w - W) // 2)
    dh, dw = max(0, (H - h) // 2), max(0, (W - w) // 2)
    ch, cw = min(h, H), min(w, W)
    out[dh : dh + ch, dw : dw + cw] = a[sh : sh + ch, sw : sw + cw]
    return out


# ---------------------------------------------------------------------------
# image files


def write_pnm(path, array: np.ndarray, maxval: int) -> None:
    """Binary PGM (P5); 16-bit samples are big-endian as the format requires."""
    array = np.asarray(array)
    H, W = array.shape
    dtype = ">u2" if maxval > 255 else np.uint8
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n{maxval}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def _read_pgm(path: Path) -> tuple[np.ndarray, int]:
    data = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise DataError(f"{path}: only binary PGM (P5) is supported")
    W, H, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else np.uint8
    count = H * W
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return arr.reshape(H, W).astype(np.int64), maxval


def read_image(path) -> tuple[np.ndarray, int]:
    """Read a grayscale PGM or PNG; returns the integer pixels and the format's max value."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    if path.suffix.lower() == ".pgm":
        return _read_pgm(path)
    from PIL import Image

    with Image.open(path) as img:
        if img.mode in ("L", "P"):
            maxval = 255
        elif img.mode in ("I", "I;16", "I;16B", "I;16L"):
            maxval = MAX16
        else:
            raise DataError(f"{path}: unsupported image mode {img.mode}")
        return np.array(img).astype(np.int64), maxval


def read_pnm(path) -> np.ndarray:
    return read_image(path)[0]


def write_slice(sl: LabeledSlice, directory, stem: str) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img_path = directory / f"{stem}_image.pgm"
    lab_path = directory / f"{stem}_labels.pgm"
    write_pnm(img_path, np.round(sl.image * MAX16).astype(np.int64), MAX16)
    write_pnm(lab_path, sl.labels, 255)
    return img_path, lab_path


def write_dataset(slices, root, test_subjects=()) -> Path:
    """Write slices and a manifest; returns the manifest path."""
    root = Path(root)
    lines = []
    for sl in slices:
        stem = f"{sl.subject_id}_{sl.slice_index:04d}"
        img, lab = write_slice(sl, root / sl.subject_id, stem)
        tag = " test" if sl.subject_id in test_subjects else (" train" if test_subjects else "")
        lines.append(
            f"{img.relative_to(root).as_posix()} {lab.relative_to(root).as_posix()} {sl.subject_id}{tag}"
        )
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def parse_manifest(manifest) -> list:
    manifest = Path(manifest)
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    records = []
    for lineno, raw in enumerate(manifest.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (3, 4) or (len(parts) == 4 and parts[3] not in ("train", "test")):
            raise DataError(
                f"{manifest}:{lineno}: expected '<image> <labels> <subject> [train|test]', got {line!r}"
            )
        records.append((lineno, *parts[:3], parts[3] if len(parts) == 4 else None))
    if not records:
        raise DataError(f"{manifest}: no records")
    return records


def ingest_slices(
    root_path,
    manifest=None,
    class_count: int = 8,
    size: tuple = (64, 64),
    test_subjects=None,
    class_names=None,
) -> DatasetSplit:
    """Load, validate, normalize and split the slices listed in a manifest.

    Subjects go to the test split when listed in ``test_subjects`` or tagged
    ``test`` in the manifest; a subject marked for both splits is an error.
    """
    root = Path(root_path)
    manifest = Path(manifest) if manifest is not None else root / "manifest.txt"
    if not manifest.is_absolute() and not manifest.exists():
        manifest = root / manifest
    records = parse_manifest(manifest)
    tags: dict[str, set] = {}
    for lineno, _, _, subject, tag in records:
        if tag is not None:
            tags.setdefault(subject, set()).add(tag)
    for subject in test_subjects or ():
        tags.setdefault(subject, set()).add("test")
    for subject, seen in tags.items():
        if seen == {"train", "test"}:
            raise DataError(f"subject {subject!r} is assigned to both train and test")
    test_set = {s for s, seen in tags.items() if "test" in seen}
    if not test_set:
        raise DataError(f"{manifest}: no test subjects given")

    H, W = size
    counters: dict[str, int] = {}
    train, test = [], []
    for lineno, img_rel, lab_rel, subject, _ in records:
        where = f"{manifest}:{lineno}"
        img_path, lab_path = root / img_rel, root / lab_rel
        for p in (img_path, lab_path):
            if not p.exists():
                raise DataError(f"{where}: missing file {p}")
        raw, maxval = read_image(img_path)
        labels = read_pnm(lab_path)
        if raw.shape != labels.shape:
            raise DataError(f"{where}: image {raw.shape} and labels {labels.shape} differ in shape")
        if labels.min() < 0 or labels.max() >= class_count:
            raise DataError(
                f"{where}: label value {int(labels.max())} outside [0, {class_count}) in {lab_path}"
            )
        image = normalize_intensity(raw / maxval)
        image = center_crop_or_pad(image, H, W)
        labels = center_crop_or_pad(labels.astype(np.uint8), H, W)
        idx = counters.get(subject, 0)
        counters[subject] = idx + 1
        sl = LabeledSlice(image, labels, subject, idx)
        (test if subject in test_set else train).append(sl)
    if not train:
        raise DataError(f"{manifest}: every subject is in the test split")
    return DatasetSplit(train, test, class_count, class_names or default_class_names(class_count))


def make_split(slices, test_fraction: float, seed: int, class_count: int = 8) -> DatasetSplit:
    """Random subject-level split; at least one subject lands on each side."""
    if not (0.0 < test_fraction < 1.0):
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    subjects = sorted({s.subject_id for s in slices})
    if len(subjects) < 2:
        raise ConfigError("need at least two distinct subjects to split")
    n_test = min(len(subjects) - 1, max(1, int(round(test_fraction * len(subjects)))))
    rng = np.random.default_rng(seed)
    test_ids = set(rng.choice(subjects, size=n_test, replace=False).tolist())
    train = [s for s in slices if s.subject_id not in test_ids]
    test = [s for s in slices if s.subject_id in test_ids]
    return DatasetSplit(train, test, class_count)


def carve_validation(train: list, fraction: float, seed: int) -> tuple[list, list]:
    """Hold out ``fraction`` of training slices (slice level) for monitoring."""
    if fraction <= 0:
        return list(train), []
    n_val = max(1, int(round(fraction * len(train))))
    order = np.random.default_rng(seed).permutation(len(train))
    val_idx = set(order[:n_val].tolist())
    return (
        [s for i, s in enumerate(train) if i not in val_idx],
        [s for i, s in enumerate(train) if i in val_idx],
    )
