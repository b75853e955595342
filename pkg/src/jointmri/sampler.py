"""Trainable probabilistic k-space sampling pattern and fixed baseline masks.

The learned pattern is a single parameter matrix shared by the whole dataset.
A forward pass goes through three layers:

* probability layer: ``sigmoid(slope_prob * weights)``
* scaling layer: rescales the probabilities so their mean equals the rate
* Monte-Carlo layer: ``sigmoid(slope_threshold * (p - u))`` with ``u ~ U[0, 1)``

After training, :func:`booleanize` keeps the ``round(rate * N)`` most probable
locations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from jointmri.errors import ConfigError, ContractError, DataError

SLOPE_PROB = 5.0
SLOPE_THRESHOLD = 200.0
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))  # ~137.5 deg, applied mod pi for lines
CENTER_BLOCK = 4

# keeps the inverse sigmoid finite for draws at exactly 0
_EPS = 1e-12


def num_samples(rate: float, size: int) -> int:
    """Number of sampled locations ``n = round(rate * N)``."""
    return int(round(rate * size))


def _check_rate(rate: float) -> None:
    if not (0.0 < rate <= 1.0):
        raise ConfigError(f"sampling rate must lie in (0, 1], got {rate}")


class ProbabilisticMask(nn.Module):
    """Unconstrained pre-sigmoid weights plus the fixed slopes and target rate."""

    def __init__(
        self,
        weights: torch.Tensor,
        rate: float,
        slope_prob: float = SLOPE_PROB,
        slope_threshold: float = SLOPE_THRESHOLD,
    ):
        super().__init__()
        _check_rate(rate)
        if slope_prob <= 0 or slope_threshold <= 0:
            raise ConfigError("sigmoid slopes must be positive")
        self.weights = nn.Parameter(weights)
        self.rate = float(rate)
        self.slope_prob = float(slope_prob)
        self.slope_threshold = float(slope_threshold)

    @property
    def shape(self):
        return tuple(self.weights.shape)

    def probabilities(self) -> torch.Tensor:
        return probability_layer(self)

    def scaled(self) -> torch.Tensor:
        return scaling_layer(probability_layer(self), self.rate)

    def forward(self, noise_seed=None, generator=None) -> torch.Tensor:
        """Relaxed mask draw. Pass ``noise_seed`` or a ``generator``."""
        return monte_carlo_layer(
            self.scaled(), noise_seed, slope_threshold=self.slope_threshold, generator=generator
        )

    def extra_repr(self) -> str:
        return f"shape={self.shape}, rate={self.rate}, slope_prob={self.slope_prob}, slope_threshold={self.slope_threshold}"


def init_uniform(
    H: int,
    W: int,
    rate: float,
    seed: int,
    slope_prob: float = SLOPE_PROB,
    slope_threshold: float = SLOPE_THRESHOLD,
    dtype=torch.float64,
) -> ProbabilisticMask:
    """Draw ``v ~ U[0, 1)`` and store weights so the probability layer returns ``v``."""
    _check_rate(rate)
    if H < 4 or W < 4:
        raise ConfigError(f"mask must be at least 4x4, got {H}x{W}")
    v = np.random.default_rng(seed).random((H, W))
    v = np.clip(v, _EPS, 1.0 - _EPS)
    weights = np.log(v / (1.0 - v)) / slope_prob
    return ProbabilisticMask(
        torch.tensor(weights, dtype=dtype), rate, slope_prob, slope_threshold
    )


def probability_layer(pm: ProbabilisticMask) -> torch.Tensor:
    return torch.sigmoid(pm.slope_prob * pm.weights)


def scaling_layer(p: torch.Tensor, rate: float) -> torch.Tensor:
    """Rescale ``p`` so its mean equals ``rate`` while staying inside [0, 1].

    With ``mu = mean(p)``: if ``mu >= rate`` the values are multiplied by
    ``rate / mu``, otherwise the complements ``1 - p`` are multiplied by
    ``(1 - rate) / (1 - mu)``. Both maps are monotone increasing in ``p``.
    """
    p = torch.as_tensor(p)
    mu = p.mean()
    mu_value = float(mu.detach())
    if mu_value <= 0.0 or mu_value >= 1.0:
        raise ContractError(f"degenerate probability mean {mu_value}; cannot rescale")
    if mu_value >= rate:
        return p * (rate / mu)
    return 1.0 - (1.0 - p) * ((1.0 - rate) / (1.0 - mu))


def draw_uniform(shape, noise_seed=None, generator=None, dtype=torch.float64) -> torch.Tensor:
    if generator is None:
        if noise_seed is None:
            raise ContractError("monte_carlo_layer needs a noise_seed or generator")
        generator = torch.Generator().manual_seed(int(noise_seed))
    return torch.rand(shape, generator=generator, dtype=dtype)


def monte_carlo_layer(
    p_scaled: torch.Tensor,
    noise_seed=None,
    slope_threshold: float = SLOPE_THRESHOLD,
    generator=None,
    u: torch.Tensor | None = None,
) -> torch.Tensor:
    """Soft Bernoulli draw ``sigmoid(slope * (p - u))``.

    ``u`` is sampled from ``noise_seed`` (or ``generator``) unless given
    explicitly; it is treated as a constant for differentiation.
    """
    if u is None:
        u = draw_uniform(p_scaled.shape, noise_seed, generator, dtype=p_scaled.dtype)
    return torch.sigmoid(slope_threshold * (p_scaled - u))


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Immutable 0/1 sampling pattern with exactly ``ones_count`` ones."""

    pattern: np.ndarray
    rate: float
    seed: int | None = None
    kind: str = "learned"

    def __post_init__(self):
        raw = np.asarray(self.pattern)
        if raw.ndim != 2:
            raise ContractError("binary mask must be 2D")
        if not np.isin(raw, (0, 1)).all():
            raise ContractError("binary mask entries must be 0 or 1")
        pattern = np.array(raw, dtype=np.uint8, copy=True)
        pattern.setflags(write=False)
        object.__setattr__(self, "pattern", pattern)

    @property
    def ones_count(self) -> int:
        return int(self.pattern.sum())

    @property
    def shape(self):
        return self.pattern.shape

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.pattern, dtype=dtype)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.rate == other.rate and np.array_equal(self.pattern, other.pattern)

    def __hash__(self):
        return hash((self.rate, self.pattern.tobytes()))


def top_n_mask(scores, n: int) -> np.ndarray:
    """0/1 array marking the ``n`` largest scores; ties go to the smaller row-major index."""
    scores = np.asarray(scores, dtype=np.float64)
    if n <= 0:
        raise ConfigError("number of sampled locations must be positive")
    if n > scores.size:
        raise ConfigError(f"cannot select {n} of {scores.size} locations")
    order = np.argsort(-scores.ravel(), kind="stable")
    out = np.zeros(scores.size, dtype=np.uint8)
    out[order[:n]] = 1
    return out.reshape(scores.shape)


def booleanize(pm: ProbabilisticMask) -> BinaryMask:
    """Binary pattern from the top-n scaled probabilities (no Monte-Carlo noise)."""
    with torch.no_grad():
        scores = pm.scaled().detach().cpu().numpy()
    n = num_samples(pm.rate, scores.size)
    return BinaryMask(top_n_mask(scores, n), pm.rate)


def _center_block(H: int, W: int) -> tuple[slice, slice]:
    h0, w0 = H // 2 - CENTER_BLOCK // 2, W // 2 - CENTER_BLOCK // 2
    return slice(h0, h0 + CENTER_BLOCK), slice(w0, w0 + CENTER_BLOCK)


def radial_mask(H: int, W: int, rate: float, seed: int = 0) -> np.ndarray:
    """Lines through the center at golden-angle increments, trimmed to exactly n pixels.

    A pixel belongs to a line when its center lies within half a pixel of it.
    Surplus pixels are removed farthest-from-center first.
    """
    _check_rate(rate)
    N = H * W
    n = num_samples(rate, N)
    if n <= 0:
        raise ConfigError(f"rate {rate} selects no samples on a {H}x{W} grid")
    yy, xx = np.mgrid[0:H, 0:W]
    dy, dx = yy - H // 2, xx - W // 2
    marked = np.zeros((H, W), dtype=bool)
    if n == N:
        marked[:] = True
    angle = (seed * GOLDEN_ANGLE) % math.pi
    lines = 0
    while marked.sum() < n:
        dist = np.abs(-dy * math.sin(angle) + dx * math.cos(angle))
        marked |= dist <= 0.5 + 1e-9
        angle = (angle + GOLDEN_ANGLE) % math.pi
        lines += 1
        if lines > 100 * max(H, W):
            # pathological: fill remaining by distance so n is always reachable
            marked |= True
    surplus = int(marked.sum()) - n
    if surplus > 0:
        radius = np.hypot(dy, dx).ravel()
        idx = np.flatnonzero(marked.ravel())
        # farthest first; among equal radii the larger index goes first
        order = np.lexsort((-idx, -radius[idx]))
        flat = marked.ravel().copy()
        flat[idx[order[:surplus]]] = False
        marked = flat.reshape(H, W)
    return marked.astype(np.uint8)


def random_mask(H: int, W: int, rate: float, seed: int = 0) -> np.ndarray:
    """Fully sampled 4x4 center block plus uniformly random positions, n in total."""
    _check_rate(rate)
    n = num_samples(rate, H * W)
    block = CENTER_BLOCK * CENTER_BLOCK
    if n < block:
        raise ConfigError(
            f"rate {rate} gives n={n} samples, fewer than the {block}-pixel center block"
        )
    pattern = np.zeros((H, W), dtype=np.uint8)
    pattern[_center_block(H, W)] = 1
    free = np.flatnonzero(pattern.ravel() == 0)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(free, size=n - block, replace=False)
    pattern.ravel()[chosen] = 1
    return pattern


def fixed_mask(kind: str, H: int, W: int, rate: float, seed: int = 0) -> BinaryMask:
    if kind == "radial":
        pattern = radial_mask(H, W, rate, seed)
    elif kind == "random":
        pattern = random_mask(H, W, rate, seed)
    else:
        raise ConfigError(f"unknown fixed mask kind {kind!r}; expected 'radial' or 'random'")
    return BinaryMask(pattern, rate, seed=seed, kind=kind)


# ---------------------------------------------------------------------------
# export


def write_pgm8(path, array: np.ndarray) -> None:
    """Write an 8-bit binary (P5) PGM."""
    array = np.asarray(array)
    if array.ndim != 2:
        raise ContractError("PGM export expects a 2D array")
    H, W = array.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(array, dtype=np.uint8).tobytes())


def export_mask(mask: BinaryMask, path) -> tuple[Path, Path]:
    """Write ``<path>`` as PGM (0 unsampled, 255 sampled) plus a ``.txt`` sidecar."""
    path = Path(path)
    write_pgm8(path, mask.pattern * 255)
    sidecar = path.with_suffix(".txt")
    H, W = mask.shape
    sidecar.write_text(
        f"H {H}\nW {W}\nrate {mask.rate!r}\nones_count {mask.ones_count}\n"
        f"seed {mask.seed if mask.seed is not None else 'none'}\nkind {mask.kind}\n"
    )
    return path, sidecar


def load_mask(path) -> BinaryMask:
    """Read a mask written by :func:`export_mask`, validating the sidecar."""
    from jointmri.data import read_pnm

    path = Path(path)
    pixels = read_pnm(path)
    if not np.isin(pixels, (0, 255)).all():
        raise DataError(f"{path}: mask PGM must contain only 0 and 255")
    pattern = (pixels == 255).astype(np.uint8)
    meta = {}
    sidecar = path.with_suffix(".txt")
    if sidecar.exists():
        for line in sidecar.read_text().splitlines():
            if line.strip():
                key, _, value = line.partition(" ")
                meta[key] = value.strip()
    rate = float(meta.get("rate", pattern.mean()))
    seed = meta.get("seed", "none")
    mask = BinaryMask(
        pattern,
        rate,
        seed=None if seed == "none" else int(seed),
        kind=meta.get("kind", "learned"),
    )
    if "ones_count" in meta and int(meta["ones_count"]) != mask.ones_count:
        raise DataError(f"{path}: sidecar ones_count disagrees with pixel data")
    return mask
