"""End-to-end sampling -> reconstruction -> segmentation training and evaluation.

Modes
-----
``semunet``
    Learn the sampling pattern, the reconstruction network and the
    segmentation network jointly on ``L1 + lam * CE``; Booleanize the pattern
    and fine-tune both networks with the binary mask.
``baseline-fixed``
    Fixed radial or random pattern; both networks trained on the hybrid loss.
``loupe``
    Learn the pattern with the reconstruction loss only, Booleanize, fine-tune
    the reconstruction network.
``loupe-seg``
    ``loupe`` followed by training the segmentation network alone on the frozen
    reconstructions.

Stages move strictly ``joint -> finetune -> test``.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch

from jointmri import fourier, sampler
from jointmri.backbone import EncoderDecoder, EncoderDecoderConfig
from jointmri.errors import ConfigError, ContractError, DimensionError, NumericalError
from jointmri.metrics import combine, cross_entropy_loss, dice, l1_loss, psnr, ssim
from jointmri.report import MetricsReport

log = logging.getLogger(__name__)

MODES = ("semunet", "baseline-fixed", "loupe", "loupe-seg")
MASK_KINDS = ("learned", "radial", "random")
STAGES = ("joint", "finetune", "test")


@dataclass
class TrainConfig:
    mode: str = "semunet"
    mask: str = "learned"
    rate: float = 0.10
    lam: float = 0.1
    learning_rate: float = 1e-4
    batch_size: int = 12
    joint_epochs: int = 600
    finetune_epochs: int = 500
    seg_epochs: int | None = None  # loupe-seg only; defaults to joint + finetune
    seed: int = 0
    image_size: int = 64
    class_count: int = 8
    recon_base: int = 32
    recon_depth: int = 4
    seg_base: int = 32
    seg_depth: int = 4
    recon_input: str = "complex"
    finetune_mask: str = "binary"
    slope_prob: float = sampler.SLOPE_PROB
    slope_threshold: float = sampler.SLOPE_THRESHOLD
    val_fraction: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mask not in MASK_KINDS:
            raise ConfigError(f"unknown mask {self.mask!r}; expected one of {MASK_KINDS}")
        if self.mode == "baseline-fixed" and self.mask == "learned":
            raise ConfigError("baseline-fixed mode needs --mask radial or random")
        if self.mode != "baseline-fixed" and self.mask != "learned":
            raise ConfigError(f"mode {self.mode} learns its mask; use --mask learned")
        if not (0.0 < self.rate <= 1.0):
            raise ConfigError(f"rate must lie in (0, 1], got {self.rate}")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.mode in ("loupe", "loupe-seg") and self.lam != 0:
            raise ConfigError(f"lambda is fixed to 0 in {self.mode} mode, got {self.lam}")
        if min(self.joint_epochs, self.finetune_epochs) < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.seg_epochs is not None and self.seg_epochs < 0:
            raise ConfigError("seg_epochs must be non-negative")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("batch_size and learning_rate must be positive")
        if self.recon_input not in ("complex", "magnitude"):
            raise ConfigError("recon_input must be 'complex' or 'magnitude'")
        if self.finetune_mask not in ("binary", "relaxed"):
            raise ConfigError("finetune_mask must be 'binary' or 'relaxed'")
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        for depth in (self.recon_depth, self.seg_depth):
            if depth < 1 or self.image_size % 2**depth:
                raise ConfigError(
                    f"image_size {self.image_size} must be divisible by 2**depth (depth={depth})"
                )
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigError("val_fraction must lie in [0, 1)")

    @property
    def method_name(self) -> str:
        return f"baseline-{self.mask}" if self.mode == "baseline-fixed" else self.mode

    @property
    def total_seg_epochs(self) -> int:
        if self.seg_epochs is None:
            return self.joint_epochs + self.finetune_epochs
        return self.seg_epochs

    def recon_config(self) -> EncoderDecoderConfig:
        return EncoderDecoderConfig(
            2 if self.recon_input == "complex" else 1, 1, self.recon_base, self.recon_depth,
            derive_seed(self.seed, "recon"),
        )

    def seg_config(self) -> EncoderDecoderConfig:
        return EncoderDecoderConfig(
            1, self.class_count, self.seg_base, self.seg_depth, derive_seed(self.seed, "seg")
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    # full-scale schedule
    "paper": dict(learning_rate=1e-4, batch_size=12, joint_epochs=600, finetune_epochs=500,
                  recon_base=32, recon_depth=4, seg_base=32, seg_depth=4),
    # 64x64 phantoms on a single CPU core
    "desk": dict(learning_rate=1e-3, batch_size=12, joint_epochs=50, finetune_epochs=30,
                 recon_base=4, recon_depth=3, seg_base=8, seg_depth=1),
    # smoke tests
    "test": dict(learning_rate=1e-3, batch_size=4, joint_epochs=2, finetune_epochs=1,
                 recon_base=4, recon_depth=2, seg_base=4, seg_depth=2),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})


_SEED_STREAMS = {"init": 0, "recon": 1, "seg": 2, "noise": 3, "data": 4, "mask": 5, "val": 6}


def derive_seed(seed: int, stream: str, *extra: int) -> int:
    """Independent 32-bit seed for a named random stream."""
    ss = np.random.SeedSequence([int(seed), _SEED_STREAMS[stream], *map(int, extra)])
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# state


@dataclass
class PipelineState:
    config: TrainConfig
    recon: EncoderDecoder
    seg: EncoderDecoder
    prob_mask: sampler.ProbabilisticMask | None = None
    binary_mask: sampler.BinaryMask | None = None
    optimizer: torch.optim.Optimizer | None = None
    seg_optimizer: torch.optim.Optimizer | None = None
    epoch: int = 0
    step: int = 0
    stage: str = "joint"
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)  # free-form, e.g. data source for evaluation

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"unknown stage {self.stage!r}")
        if self.stage != "joint" and self.binary_mask is None:
            raise ContractError(f"stage {self.stage} requires a binary mask")

    @property
    def learns_mask(self) -> bool:
        return self.binary_mask is None

    def set_stage(self, stage: str) -> None:
        order = STAGES.index
        if order(stage) < order(self.stage):
            raise ContractError(f"cannot move from stage {self.stage} back to {stage}")
        if stage != "joint" and self.binary_mask is None:
            raise ContractError(f"stage {stage} requires a binary mask")
        self.stage = stage

    def modules(self) -> dict:
        return {"recon": self.recon, "seg": self.seg}


def init_state(config: TrainConfig) -> PipelineState:
    """Randomly initialized networks and sampler for ``config``."""
    recon = EncoderDecoder(config.recon_config()).to(memory_format=torch.channels_last)
    seg = EncoderDecoder(config.seg_config()).to(memory_format=torch.channels_last)
    H = config.image_size
    prob_mask = binary = None
    if config.mode == "baseline-fixed":
        binary = sampler.fixed_mask(config.mask, H, H, config.rate, derive_seed(config.seed, "mask"))
    else:
        prob_mask = sampler.init_uniform(
            H, H, config.rate, derive_seed(config.seed, "init"),
            config.slope_prob, config.slope_threshold,
        )
    params = list(recon.parameters()) + list(seg.parameters())
    if prob_mask is not None:
        params = [prob_mask.weights] + params
    optimizer = torch.optim.Adam(params, lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    return PipelineState(config, recon, seg, prob_mask, binary, optimizer)


# ---------------------------------------------------------------------------
# forward pass


def stack_batch(slices) -> tuple[torch.Tensor, torch.Tensor]:
    """``(B, 1, H, W)`` float32 images and ``(B, H, W)`` int64 labels."""
    images = torch.from_numpy(np.stack([s.image for s in slices])).float().unsqueeze(1)
    labels = torch.from_numpy(np.stack([s.labels for s in slices]).astype(np.int64))
    return images, labels


def _as_batch(batch):
    if isinstance(batch, tuple):
        return batch
    return stack_batch(batch)


def noise_seed_for(config: TrainConfig, step: int) -> int:
    return derive_seed(config.seed, "noise", step)


def current_mask(state: PipelineState, noise_seed=None) -> torch.Tensor:
    """Mask applied in the forward pass for the current stage."""
    cfg = state.config
    if state.binary_mask is not None:
        if state.stage == "finetune" and cfg.finetune_mask == "relaxed" and state.prob_mask is not None:
            with torch.no_grad():
                return state.prob_mask(noise_seed=noise_seed).float()
        return state.binary_mask.tensor()
    if noise_seed is None:
        raise ContractError("a relaxed mask needs a noise seed")
    return state.prob_mask(noise_seed=noise_seed).float()


def acquire(images: torch.Tensor, mask: torch.Tensor) -> fourier.ComplexGrid:
    """Zero-filled reconstruction of masked k-space for a ``(B, 1, H, W)`` batch."""
    x = fourier.ComplexGrid.from_real(images[:, 0])
    return fourier.zero_filled_recon(fourier.undersample(x, mask))


def network_input(zf: fourier.ComplexGrid, recon_input: str) -> torch.Tensor:
    if recon_input == "complex":
        t = zf.channels()
    else:
        t = zf.abs().unsqueeze(1)
    return t.contiguous(memory_format=torch.channels_last)


def forward_train(state: PipelineState, batch, noise_seed=None, mask: torch.Tensor | None = None,
                  lam: float | None = None, run_seg: bool = True):
    """Full chain for one batch: mask -> undersample -> zero-fill -> recon -> seg.

    Returns ``(recon, seg_logits, LossBreakdown)``. When ``run_seg`` is false
    the segmentation network is skipped, ``seg_logits`` is ``None`` and the
    seg term is 0.
    """
    cfg = state.config
    lam = cfg.lam if lam is None else lam
    images, labels = _as_batch(batch)
    if images.shape[-1] != cfg.image_size or images.shape[-2] != cfg.image_size:
        raise DimensionError(
            f"batch images {tuple(images.shape[-2:])} do not match image_size {cfg.image_size}"
        )
    if mask is None:
        mask = current_mask(state, noise_seed)
    zf = acquire(images, mask)
    recon = state.recon(network_input(zf, cfg.recon_input))
    recon_loss = l1_loss(recon, images)
    if run_seg:
        logits = state.seg(recon)
        seg_loss = cross_entropy_loss(logits, labels)
    else:
        logits = None
        seg_loss = torch.zeros((), dtype=recon_loss.dtype)
    return recon, logits, combine(recon_loss, seg_loss, lam)


# ---------------------------------------------------------------------------
# training


def _epoch_batches(n: int, batch_size: int, seed: int):
    order = np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _set_trainable(state: PipelineState, sampler_on: bool, recon_on: bool, seg_on: bool) -> None:
    if state.prob_mask is not None:
        state.prob_mask.weights.requires_grad_(sampler_on)
    for net, on in ((state.recon, recon_on), (state.seg, seg_on)):
        for p in net.parameters():
            p.requires_grad_(on)
        net.train(on)


def _mask_stats(state: PipelineState) -> dict:
    if state.prob_mask is None:
        return {}
    with torch.no_grad():
        p = state.prob_mask.probabilities()
        s = state.prob_mask.scaled()
    return {
        "prob_mean": float(p.mean()), "prob_min": float(p.min()), "prob_max": float(p.max()),
        "scaled_mean": float(s.mean()), "scaled_min": float(s.min()), "scaled_max": float(s.max()),
        "weights_finite": bool(torch.isfinite(state.prob_mask.weights).all()),
    }


def mask_mean(state: PipelineState) -> float:
    """Scaled-probability mean while the mask is learned, binary fill fraction after."""
    if state.binary_mask is not None:
        return float(state.binary_mask.pattern.mean())
    with torch.no_grad():
        return float(state.prob_mask.scaled().mean())


def _train_epochs(state: PipelineState, images, labels, epochs: int, *, sampler_on: bool,
                  recon_on: bool, seg_on: bool, lam: float, stage_tag: int,
                  optimizer: torch.optim.Optimizer, label: str | None = None) -> None:
    cfg = state.config
    _set_trainable(state, sampler_on, recon_on, seg_on)
    run_seg = seg_on or lam > 0
    n = images.shape[0]
    for _ in range(epochs):
        sums = np.zeros(3)
        count = 0
        for idx in _epoch_batches(n, cfg.batch_size, derive_seed(cfg.seed, "data", stage_tag, state.epoch)):
            idx_t = torch.from_numpy(idx)
            batch = (images[idx_t], labels[idx_t])
            noise = noise_seed_for(cfg, state.step)
            if recon_on or sampler_on:
                _, _, loss = forward_train(state, batch, noise, lam=lam, run_seg=run_seg)
            else:
                loss = _seg_only_loss(state, batch, reconstructed=True)
            if not torch.isfinite(loss.total):
                raise NumericalError(
                    f"non-finite loss at epoch {state.epoch}, step {state.step}: "
                    f"{loss.as_floats()}; mask stats {_mask_stats(state)}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.total.backward()
            optimizer.step()
            state.step += 1
            b = len(idx)
            f = loss.as_floats()
            sums += b * np.array([f["recon"], f["seg"], f["total"]])
            count += b
        state.epoch += 1
        recon_l, seg_l, total_l = sums / max(count, 1)
        row = {
            "epoch": state.epoch, "stage": label or state.stage, "recon": recon_l, "seg": seg_l,
            "total": total_l, "mask_mean": mask_mean(state),
        }
        state.history.append(row)
        log.info("epoch %d [%s] recon %.5f seg %.5f total %.5f mask_mean %.6f",
                 state.epoch, row["stage"], recon_l, seg_l, total_l, row["mask_mean"])
    optimizer.zero_grad(set_to_none=True)
    _set_trainable(state, False, False, False)


def _frozen_reconstructions(state: PipelineState, images: torch.Tensor, batch_size: int = 32):
    """ReconNet outputs for the binary mask, computed without gradient."""
    with torch.no_grad():
        mask = state.binary_mask.tensor()
        return torch.cat([
            state.recon(network_input(acquire(images[i : i + batch_size], mask), state.config.recon_input))
            for i in range(0, images.shape[0], batch_size)
        ])


def _seg_only_loss(state: PipelineState, batch, reconstructed: bool = False):
    """Segmentation loss on frozen reconstructions (loupe-seg second phase).

    With ``reconstructed`` the batch already holds ReconNet outputs.
    """
    images, labels = batch
    recon = images if reconstructed else _frozen_reconstructions(state, images)
    seg_loss = cross_entropy_loss(state.seg(recon.contiguous(memory_format=torch.channels_last)), labels)
    return combine(torch.zeros((), dtype=seg_loss.dtype), seg_loss, 1.0)


def _training_tensors(state: PipelineState, data) -> tuple[torch.Tensor, torch.Tensor]:
    if isinstance(data, tuple):
        return data
    if not data:
        raise ConfigError("no training slices")
    return stack_batch(data)


def _joint_flags(state: PipelineState, train_seg: bool | None) -> tuple[float, bool]:
    cfg = state.config
    if cfg.mode in ("loupe", "loupe-seg"):
        return 0.0, False
    return cfg.lam, (True if train_seg is None else train_seg)


def train_joint(state_or_config, data, train_seg: bool | None = None) -> PipelineState:
    """Joint stage: sampler (if learned), reconstruction and segmentation updated together.

    ``train_seg=False`` leaves the segmentation network out of the update; with
    ``lam == 0`` that is exactly the reconstruction-only objective.
    """
    state = state_or_config if isinstance(state_or_config, PipelineState) else init_state(state_or_config)
    if state.stage != "joint":
        raise ContractError(f"train_joint needs stage 'joint', got {state.stage!r}")
    images, labels = _training_tensors(state, data)
    lam, seg_on = _joint_flags(state, train_seg)
    _train_epochs(state, images, labels, state.config.joint_epochs,
                  sampler_on=state.learns_mask, recon_on=True, seg_on=seg_on, lam=lam,
                  stage_tag=0, optimizer=state.optimizer)
    return state


def freeze_and_finetune(state: PipelineState, data, train_seg: bool | None = None) -> PipelineState:
    """Booleanize the learned pattern (if any) and fine-tune the networks with it."""
    if state.stage != "joint":
        raise ContractError(f"freeze_and_finetune needs a completed joint stage, got {state.stage!r}")
    if state.binary_mask is None:
        state.binary_mask = sampler.booleanize(state.prob_mask)
    state.set_stage("finetune")
    images, labels = _training_tensors(state, data)
    lam, seg_on = _joint_flags(state, train_seg)
    _train_epochs(state, images, labels, state.config.finetune_epochs,
                  sampler_on=False, recon_on=True, seg_on=seg_on, lam=lam,
                  stage_tag=1, optimizer=state.optimizer)
    return state


def train_segmenter(state: PipelineState, data, epochs: int | None = None) -> PipelineState:
    """Train only the segmentation network on reconstructions from the frozen pipeline."""
    if state.binary_mask is None:
        raise ContractError("segmenter training needs a binary mask")
    if state.seg_optimizer is None:
        state.seg_optimizer = torch.optim.Adam(
            state.seg.parameters(), lr=state.config.learning_rate, betas=(0.9, 0.999), eps=1e-8
        )
    images, labels = _training_tensors(state, data)
    state.recon.eval()
    # ReconNet and mask are frozen, so its outputs are fixed: compute them once
    recons = _frozen_reconstructions(state, images)
    epochs = state.config.total_seg_epochs if epochs is None else epochs
    _train_epochs(state, recons, labels, epochs, sampler_on=False, recon_on=False, seg_on=True,
                  lam=1.0, stage_tag=2, optimizer=state.seg_optimizer, label="segmenter")
    return state


def finish(state: PipelineState) -> PipelineState:
    state.set_stage("test")
    return state


def run_baseline(mode: str, config: TrainConfig, data, loupe_state: PipelineState | None = None) -> PipelineState:
    """Train one of the comparison pipelines.

    ``loupe-seg`` may start from an existing test-ready ``loupe`` state, which
    is deep-copied so the original is untouched.
    """
    if mode not in ("baseline-fixed", "loupe", "loupe-seg"):
        raise ConfigError(f"run_baseline does not handle mode {mode!r}")
    if config.mode != mode:
        config = replace(config, mode=mode)
    if mode == "loupe-seg" and loupe_state is not None:
        state = copy.deepcopy(loupe_state)
        state.config = config
    else:
        state = train_joint(config, data)
        state = freeze_and_finetune(state, data)
        if mode != "loupe-seg":
            return finish(state)
    state = train_segmenter(state, data)
    return finish(state)


def train(config: TrainConfig, data) -> PipelineState:
    """Run the complete schedule for ``config.mode``; returns a test-ready state."""
    if config.mode == "semunet":
        state = train_joint(config, data)
        return finish(freeze_and_finetune(state, data))
    return run_baseline(config.mode, config, data)


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def _run_networks(state: PipelineState, images: torch.Tensor, bypass: bool, batch_size: int):
    state.recon.eval()
    state.seg.eval()
    mask = state.binary_mask.tensor()
    recons, preds = [], []
    for start in range(0, images.shape[0], batch_size):
        x = images[start : start + batch_size]
        if bypass:
            r = x
        else:
            r = state.recon(network_input(acquire(x, mask), state.config.recon_input))
        logits = state.seg(r.contiguous(memory_format=torch.channels_last))
        recons.append(r[:, 0])
        preds.append(logits.argmax(dim=1))
    return torch.cat(recons), torch.cat(preds)


def predict(state: PipelineState, images: torch.Tensor, bypass: bool = False, batch_size: int = 32):
    """Reconstructions ``(B, H, W)`` and argmax label maps ``(B, H, W)``."""
    if state.stage != "test":
        raise ContractError(f"evaluation needs a test-ready state, got stage {state.stage!r}")
    if state.binary_mask is None:
        raise ContractError("evaluation needs a binary mask")
    return _run_networks(state, images, bypass, batch_size)


def evaluate(state: PipelineState, slices, bypass: bool = False, method: str | None = None) -> MetricsReport:
    """Per-slice PSNR / SSIM of the reconstruction and Dice of the segmentation.

    Reconstructions are clipped to [0, 1] before scoring. ``bypass`` feeds the
    ground-truth images straight into the segmentation network, giving the
    sentinel PSNR and an upper-bound Dice row.
    """
    cfg = state.config
    images, labels = stack_batch(slices)
    recons, preds = predict(state, images, bypass=bypass)
    rows = []
    C = cfg.class_count
    for sl, r, pred in zip(slices, recons.numpy().astype(np.float64), preds.numpy()):
        r = np.clip(r, 0.0, 1.0)
        d = dice(pred, sl.labels, C)
        rows.append({
            "subject": sl.subject_id,
            "slice": sl.slice_index,
            "psnr": psnr(r, sl.image, 1.0),
            "ssim": 100.0 * ssim(r, sl.image, 1.0),
            "dsc": 100.0 * d.mean,
            **{f"dsc_{c}": 100.0 * d.per_class[c] for c in range(C)},
        })
    name = method or cfg.method_name
    if bypass:
        name += "+bypass"
    return MetricsReport(name, cfg.rate, cfg.seed, rows, C, config_hash(cfg))


def config_hash(config: TrainConfig) -> str:
    import hashlib
    import json

    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_FORMAT = "jointmri.pipeline/1"


def save_state(state: PipelineState, path) -> None:
    blob = {
        "format": CHECKPOINT_FORMAT,
        "config": state.config.to_dict(),
        "stage": state.stage,
        "epoch": state.epoch,
        "step": state.step,
        "recon": {"config": asdict(state.recon.config), "state_dict": state.recon.state_dict()},
        "seg": {"config": asdict(state.seg.config), "state_dict": state.seg.state_dict()},
        "prob_mask": None if state.prob_mask is None else {
            "weights": state.prob_mask.weights.detach().clone(),
            "rate": state.prob_mask.rate,
            "slope_prob": state.prob_mask.slope_prob,
            "slope_threshold": state.prob_mask.slope_threshold,
        },
        "binary_mask": None if state.binary_mask is None else {
            "pattern": torch.from_numpy(np.array(state.binary_mask.pattern)),
            "rate": state.binary_mask.rate,
            "seed": state.binary_mask.seed,
            "kind": state.binary_mask.kind,
        },
        "optimizer": state.optimizer.state_dict() if state.optimizer is not None else None,
        "seg_optimizer": state.seg_optimizer.state_dict() if state.seg_optimizer is not None else None,
        "history": state.history,
        "meta": state.meta,
    }
    torch.save(blob, path)


def load_state(path) -> PipelineState:
    from jointmri.errors import DataError

    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise DataError(f"missing checkpoint {path}") from None
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a pipeline checkpoint")
    config = TrainConfig.from_dict(blob["config"])
    state = init_state(config)
    state.recon.load_state_dict(blob["recon"]["state_dict"])
    state.seg.load_state_dict(blob["seg"]["state_dict"])
    if blob["prob_mask"] is not None:
        with torch.no_grad():
            state.prob_mask.weights.copy_(blob["prob_mask"]["weights"])
    bm = blob["binary_mask"]
    state.binary_mask = None if bm is None else sampler.BinaryMask(
        bm["pattern"].numpy(), bm["rate"], seed=bm["seed"], kind=bm["kind"]
    )
    if blob["optimizer"] is not None:
        state.optimizer.load_state_dict(blob["optimizer"])
    if blob["seg_optimizer"] is not None:
        state.seg_optimizer = torch.optim.Adam(state.seg.parameters(), lr=config.learning_rate)
        state.seg_optimizer.load_state_dict(blob["seg_optimizer"])
    state.epoch, state.step = blob["epoch"], blob["step"]
    state.stage = blob["stage"]
    state.history = list(blob["history"])
    state.meta = dict(blob.get("meta") or {})
    _set_trainable(state, False, False, False)
    return state


def validation_psnr(state: PipelineState, slices) -> float:
    """Mean PSNR on ``slices`` with the current binary mask, at any stage after Booleanization."""
    if state.binary_mask is None:
        raise ContractError("validation needs a binary mask")
    if not slices:
        return math.nan
    images, _ = stack_batch(slices)
    recons, _ = _run_networks(state, images, False, 32)
    return float(np.mean([
        psnr(np.clip(r, 0, 1), sl.image) for r, sl in zip(recons.numpy().astype(np.float64), slices)
    ]))
