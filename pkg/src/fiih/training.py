"""Training loop, learning-rate schedule and robustness evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import quality
from .channel import (
    AttackSpec,
    Neighborhood,
    attack_jpeg_differentiable,
    detect_mask,
    field_fill,
    fill_holes,
)
from .channel import apply_attack as _apply_attack
from .inn import CouplingStack
from .numerics import serialize
from .numerics.optim import AdamState, adam_step
from .numerics.tensor import NumericsError, Tensor, backward, clip, straight_through
from .pipeline import HideMode, combine, dequantize, encode, extract, hide, reveal, reveal_tensor

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


class TrainingError(NumericsError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 130
    batch_size: int = 8
    lr0: float = 1e-4
    lr_halving_period: int = 30
    blocks: int = 16
    image_size: int = 224
    weights: quality.LossWeights = field(default_factory=quality.LossWeights)
    channel_curriculum: list[AttackSpec] = field(default_factory=list)
    dropout_ramp: tuple[float, float] | None = None
    seed: int = 0
    mode: str = "subtract"
    # subnet geometry and coupling nonlinearity
    n_layers: int = 5
    growth: int = 32
    clamp_k: float = 2.0
    sigma_variant: str = "centered"
    dtype: str = "float64"
    # round the stego image to 8 bits (straight-through) inside the training step
    quantize_stego: bool = True
    fill_neighborhood: str = "nine"
    fill_passes: int = 3
    invertibility_check_every: int = 10

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = quality.LossWeights(**self.weights)
        self.channel_curriculum = [
            a if isinstance(a, AttackSpec) else AttackSpec.from_dict(a) for a in self.channel_curriculum
        ]
        if self.dropout_ramp is not None:
            lo, hi = self.dropout_ramp
            self.dropout_ramp = (float(lo), float(hi))
        for name in ("batch_size", "lr_halving_period", "image_size"):
            if getattr(self, name) <= 0:
                raise TrainingError(f"config value {name} must be positive")
        if self.epochs < 0 or self.blocks < 0:
            raise TrainingError("epochs and blocks must be non-negative")
        if self.lr0 <= 0:
            raise TrainingError("lr0 must be positive")
        if self.batch_size % 2:
            raise TrainingError(f"batch_size must be even (half covers, half secrets), got {self.batch_size}")
        if self.image_size % 2:
            raise TrainingError("image_size must be even")
        if self.dtype not in DTYPES:
            raise TrainingError(f"dtype must be one of {sorted(DTYPES)}")
        HideMode.parse(self.mode)
        Neighborhood.parse(self.fill_neighborhood)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise TrainingError(f"unknown config key {key!r}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> TrainConfig:
        path = Path(path)
        text = path.read_text()
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        d["channel_curriculum"] = [a.to_dict() for a in self.channel_curriculum]
        if self.dropout_ramp is not None:
            d["dropout_ramp"] = list(self.dropout_ramp)
        return d

    def new_stack(self) -> CouplingStack:
        return CouplingStack.init(
            self.blocks,
            seed=self.seed,
            clamp_k=self.clamp_k,
            sigma_variant=self.sigma_variant,
            n_layers=self.n_layers,
            growth=self.growth,
            dtype=DTYPES[self.dtype],
        )


def learning_rate(config: TrainConfig, epoch: int) -> float:
    return config.lr0 * 0.5 ** (epoch // config.lr_halving_period)


def attack_for_epoch(config: TrainConfig, epoch: int) -> AttackSpec | None:
    """The channel attack active during ``epoch``, or ``None`` for a clean channel.

    ``dropout_ramp`` interpolates the ratio linearly over the run; otherwise the
    curriculum list is spread evenly across the epochs in order.
    """
    if config.dropout_ramp is not None:
        lo, hi = config.dropout_ramp
        frac = epoch / (config.epochs - 1) if config.epochs > 1 else 0.0
        return AttackSpec.dropout(lo + (hi - lo) * frac)
    if not config.channel_curriculum:
        return None
    stage = epoch * len(config.channel_curriculum) // max(config.epochs, 1)
    return config.channel_curriculum[min(stage, len(config.channel_curriculum) - 1)]


@dataclass
class DatasetSplit:
    images: list[np.ndarray]

    @classmethod
    def from_dir(cls, directory: str | Path, size: int | None = None) -> DatasetSplit:
        from .imageio import read_png

        paths = sorted(Path(directory).glob("*.png"))
        return cls([center_crop(read_png(p), size) if size else read_png(p) for p in paths])

    def __len__(self) -> int:
        return len(self.images)

    def cropped(self, size: int) -> DatasetSplit:
        return DatasetSplit([center_crop(im, size) for im in self.images])

    def pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Consecutive images as (secret, cover) pairs."""
        return [(self.images[i], self.images[i + 1]) for i in range(0, len(self.images) - 1, 2)]


def center_crop(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[-2:]
    if h < size or w < size:
        raise TrainingError(f"image {h}x{w} smaller than crop size {size}")
    top, left = (h - size) // 2, (w - size) // 2
    return image[..., top : top + size, left : left + size]


def synthetic_images(n: int, size: int = 64, seed: int = 0) -> DatasetSplit:
    """Smooth random colour fields: low-frequency sinusoids over a gradient, in [0.1, 0.9]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    images = []
    for _ in range(n):
        img = np.empty((3, size, size))
        for c in range(3):
            field_ = rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy
            for _ in range(4):
                fy, fx = rng.uniform(0.5, 3.0, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                field_ = field_ + rng.uniform(0.2, 0.6) * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
            field_ = (field_ - field_.min()) / (np.ptp(field_) + 1e-12)
            img[c] = 0.1 + 0.8 * field_
        images.append(np.rint(img * 255) / 255)
    return DatasetSplit(images)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    psnr_stego: float
    psnr_recovery: float
    attack: str = "clean"
    invertibility_error: float | None = None


LOG_COLUMNS = ("epoch", "lr", "L_total", "psnr_stego", "psnr_recovery")


def log_to_csv(log_rows: Sequence[EpochLog]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row in log_rows:
        writer.writerow([row.epoch, repr(row.lr), repr(row.loss), repr(row.psnr_stego), repr(row.psnr_recovery)])
    return buf.getvalue()


def _quantize_st(t: Tensor) -> Tensor:
    return straight_through(t, lambda a: np.rint(np.clip(a, 0.0, 1.0) * 255.0) / 255.0)


def train_step(
    stack: CouplingStack,
    secret: np.ndarray,
    cover: np.ndarray,
    config: TrainConfig,
    attack: AttackSpec | None,
    rng: np.random.Generator,
) -> tuple[Tensor, float, float]:
    """Build the loss for one batch of (secret, cover) pairs. Returns loss and PSNRs."""
    mode = HideMode.parse(config.mode)
    secret_t = Tensor(secret)
    encoded = encode(secret_t, stack)
    stego = combine(Tensor(cover), encoded, mode)
    sent = _quantize_st(stego) if config.quantize_stego else stego

    if attack is None:
        residual = _residual(sent, cover, mode)
    elif attack.kind == "gaussian":
        noise = rng.standard_normal(cover.shape).astype(cover.dtype) * (attack.sigma / 255.0)
        received = clip(sent + noise, 0.0, 1.0)
        residual = _residual(received, cover, mode)
    elif attack.kind == "jpeg":
        received = attack_jpeg_differentiable(sent, attack.qf)
        residual = _residual(received, cover, mode)
    else:
        n, _, h, w = cover.shape
        masks = np.ones((n, 1, h * w), dtype=cover.dtype)
        n_drop = int(np.floor(attack.ratio * h * w + 0.5))
        for i in range(n):
            masks[i, 0, rng.permutation(h * w)[:n_drop]] = 0.0
        masks = masks.reshape(n, 1, h, w)
        received = sent * masks
        kept = cover * masks
        raw = (Tensor(kept) - received) if mode is HideMode.SUBTRACT else (received - Tensor(kept))
        residual, _ = fill_holes(raw, masks, config.fill_neighborhood, config.fill_passes)

    recovery = reveal_tensor(residual, stack)
    loss = quality.total_loss(Tensor(cover), stego, secret_t, recovery, config.weights)
    return loss, quality.psnr(sent.data, cover), quality.psnr(recovery.data, secret)


def _residual(received: Tensor, cover: np.ndarray, mode: HideMode) -> Tensor:
    return Tensor(cover) - received if mode is HideMode.SUBTRACT else received - Tensor(cover)


def invertibility_error(stack: CouplingStack, image: np.ndarray) -> float:
    """Max abs error of float-mode hide/extract/reveal at float64."""
    st64 = stack.astype(np.float64)
    cover = np.full_like(image, 0.5)
    res = hide(image, cover, st64, HideMode.SUBTRACT)
    back = reveal(extract(res.stego, cover, HideMode.SUBTRACT), st64)
    return float(np.abs(back - image).max())


@dataclass
class TrainState:
    stack: CouplingStack
    adam: AdamState
    epoch: int = 0
    log: list[EpochLog] = field(default_factory=list)

    def save(self, path: str | Path, config: TrainConfig) -> None:
        arrays, meta = self.stack.to_arrays()
        for i, (m, v) in enumerate(zip(self.adam.m, self.adam.v)):
            arrays[f"adam.m.{i:04d}"] = m
            arrays[f"adam.v.{i:04d}"] = v
        meta = {
            **meta,
            "checkpoint": {
                "epoch": self.epoch,
                "adam_step": self.adam.step,
                "config": config.to_dict(),
                "log": [asdict(r) for r in self.log],
            },
        }
        serialize.save(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> tuple[TrainState, dict]:
        arrays, meta = serialize.load(path)
        if "checkpoint" not in meta:
            raise TrainingError(f"{path} is a model file, not a training checkpoint")
        stack = CouplingStack.from_arrays(arrays, meta)
        params = stack.parameters()
        ck = meta["checkpoint"]
        adam = AdamState(
            step=ck["adam_step"],
            m=[arrays[f"adam.m.{i:04d}"].copy() for i in range(len(params))],
            v=[arrays[f"adam.v.{i:04d}"].copy() for i in range(len(params))],
        )
        state = cls(stack, adam, ck["epoch"], [EpochLog(**r) for r in ck["log"]])
        return state, ck["config"]


def train(
    config: TrainConfig,
    data: DatasetSplit,
    stack: CouplingStack | None = None,
    state: TrainState | None = None,
    checkpoint: str | Path | None = None,
    stop_after: int | None = None,
) -> TrainState:
    """Optimise the stack against the weighted hiding/revealing loss.

    Batches draw ``batch_size`` images per step; the first half act as covers
    and the second half as secrets. Shuffling and attack noise for epoch ``e``
    come from a generator seeded with ``(seed, e)``, so a resumed run repeats an
    uninterrupted one exactly.
    """
    if len(data) < config.batch_size:
        raise TrainingError(f"dataset has {len(data)} images, fewer than one batch of {config.batch_size}")
    dtype = DTYPES[config.dtype]
    if state is None:
        stack = stack if stack is not None else config.new_stack()
        stack = stack.astype(dtype) if stack.dtype != dtype else stack
        state = TrainState(stack, AdamState.for_params(stack.parameters()))
    images = np.stack([center_crop(im, config.image_size) for im in data.images]).astype(dtype)
    params = state.stack.parameters()
    half = config.batch_size // 2
    last = config.epochs if stop_after is None else min(config.epochs, stop_after)

    while state.epoch < last:
        epoch = state.epoch
        rng = np.random.default_rng([config.seed, epoch])
        lr = learning_rate(config, epoch)
        attack = attack_for_epoch(config, epoch)
        order = rng.permutation(len(images))
        losses, ps, pr = [], [], []
        for start in range(0, len(order) - config.batch_size + 1, config.batch_size):
            batch = images[order[start : start + config.batch_size]]
            cover, secret = batch[:half], batch[half:]
            for p in params:
                p.zero_grad()
            loss, psnr_s, psnr_r = train_step(state.stack, secret, cover, config, attack, rng)
            backward(loss)
            adam_step(params, [p.grad for p in params], state.adam, lr)
            losses.append(float(loss.data))
            ps.append(psnr_s)
            pr.append(psnr_r)
        row = EpochLog(
            epoch=epoch,
            lr=lr,
            loss=float(np.mean(losses)),
            psnr_stego=float(np.mean(ps)),
            psnr_recovery=float(np.mean([min(v, 999.0) for v in pr])),
            attack=attack.to_json() if attack else "clean",
        )
        if config.invertibility_check_every and (epoch + 1) % config.invertibility_check_every == 0:
            err = invertibility_error(state.stack, images[0].astype(np.float64))
            row.invertibility_error = err
            if not err < 1e-6:
                raise TrainingError(f"float-mode invertibility lost at epoch {epoch}: max error {err:.3g}")
        state.log.append(row)
        state.epoch += 1
        log.info(
            "epoch %d lr %.3g loss %.5f stego %.2f dB recovery %.2f dB",
            epoch, lr, row.loss, row.psnr_stego, row.psnr_recovery,
        )
        if checkpoint is not None:
            state.save(checkpoint, config)
    return state


# evaluation


@dataclass
class EvalRow:
    attack: str
    level: float | None
    stego: quality.MetricReport
    recovery: quality.MetricReport

    CSV_COLUMNS = ("attack", "level", "psnr_stego", "ssim_stego", "psnr_recovery", "ssim_recovery")

    def csv_row(self) -> list[str]:
        def num(v):
            return "inf" if math.isinf(v) else repr(v)

        return [
            self.attack,
            "" if self.level is None else repr(self.level),
            num(self.stego.psnr_db),
            repr(self.stego.ssim),
            num(self.recovery.psnr_db),
            repr(self.recovery.ssim),
        ]


def eval_to_csv(rows: Sequence[EvalRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EvalRow.CSV_COLUMNS)
    for row in rows:
        writer.writerow(row.csv_row())
    return buf.getvalue()


def _mean_report(reports: list[quality.MetricReport]) -> quality.MetricReport:
    return quality.MetricReport(
        psnr_db=float(np.mean([r.psnr_db for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        mse=float(np.mean([r.mse for r in reports])),
    )


def evaluate(
    stack: CouplingStack,
    data: DatasetSplit | Sequence[tuple[np.ndarray, np.ndarray]],
    attacks: Sequence[AttackSpec] = (),
    mode=HideMode.SUBTRACT,
    float_mode: bool = False,
    fill: str | Neighborhood | None = Neighborhood.NINE,
    fill_passes: int = 3,
    seed: int = 0,
) -> list[EvalRow]:
    """Clean row plus one row per attack, metrics averaged over (secret, cover) pairs.

    Quantized mode sends 8-bit stego images (floor-lifted to 1/255 when any
    dropout attack is evaluated). The stego metrics compare the cover with the
    received stego image after the attack, restored by field filling for
    dropout when ``fill`` is set. Every pair uses the same noise seed at every
    attack level.
    """
    mode = HideMode.parse(mode)
    pairs = data.pairs() if isinstance(data, DatasetSplit) else list(data)
    if not pairs:
        raise TrainingError("evaluation needs at least one (secret, cover) pair")
    st64 = stack.astype(np.float64) if stack.dtype != np.float64 else stack
    floor = 1 if any(a.kind == "dropout" for a in attacks) else 0
    hidden = []
    for secret, cover in pairs:
        res = hide(secret, cover, st64, mode, floor=floor)
        sent = res.stego if float_mode else dequantize(res.stego_quantized)
        hidden.append((secret, cover, sent))

    rows = []
    for attack in [None, *attacks]:
        s_reports, r_reports = [], []
        for idx, (secret, cover, sent) in enumerate(hidden):
            pair_seed = [seed, idx]
            if attack is None:
                received = sent
                residual = extract(received, cover, mode)
            elif attack.kind == "dropout":
                received, _ = _apply_attack(sent, attack, seed=pair_seed)
                if fill is None:
                    residual = extract(received, cover, mode)
                else:
                    # the receiver re-derives the mask from the zeros it sees
                    filled = field_fill(received, cover, detect_mask(received), fill, fill_passes, mode)
                    residual = filled.encoded
                    received = combine(cover, residual, mode)
            else:
                received = _apply_attack(sent, attack, seed=pair_seed)
                residual = extract(received, cover, mode)
            recovery = reveal(residual, st64)
            s_reports.append(quality.report(received, cover))
            r_reports.append(quality.report(recovery, secret))
        rows.append(
            EvalRow(
                attack="clean" if attack is None else attack.kind,
                level=None if attack is None else float(attack.level),
                stego=_mean_report(s_reports),
                recovery=_mean_report(r_reports),
            )
        )
    return rows
