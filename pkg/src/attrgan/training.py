"""Adversarial optimization loop: schedule, update ratio, checkpoints, logging.

An "iteration" counts discriminator updates; the generator is updated once
after every `n_critic` of them, on a fresh batch. Both players use Adam with
a shared warm/linear-decay learning-rate schedule.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from itertools import zip_longest
from pathlib import Path

import torch

from .data import AttributeSchema, BatchScheduler, SparselyGroupedDataset
from .losses import LossWeights, NonFiniteLossError, d_total, g_total
from .models import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
)

METRIC_COLUMNS = (
    "iteration",
    "lr",
    "l_d",
    "l_adv_d",
    "l_cls_d",
    "l_g",
    "l_adv_g",
    "l_cls_g",
    "l_rec",
)


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries a diagnostic snapshot."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupted, or incompatible checkpoint."""


class SchemaMismatchError(CheckpointError):
    """Checkpoint schema differs from the expected one."""


@dataclass(frozen=True)
class TrainingConfig:
    schema: AttributeSchema
    image_size: int = 32
    n_channels: int = 3
    batch_size: int = 8
    lr_initial: float = 1e-4
    warm_iterations: int = 10000
    decay_iterations: int = 10000
    n_critic: int = 5
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    max_iterations: int | None = None  # default: warm + decay
    checkpoint_every: int = 1000
    log_every: int = 50
    base_width: int = 64
    n_residual_blocks: int = 6
    disc_depth: int | None = None
    residual_mode: str = "adapted"
    balanced_batches: bool = False
    rec_multi_value: bool = False

    def __post_init__(self):
        for name in ("batch_size", "warm_iterations", "decay_iterations", "n_critic",
                     "checkpoint_every", "log_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_initial < 0:
            raise ValueError("lr_initial must be >= 0")

    @property
    def total_iterations(self) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return self.warm_iterations + self.decay_iterations

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            image_size=self.image_size,
            schema=self.schema,
            n_channels=self.n_channels,
            base_width=self.base_width,
            n_residual_blocks=self.n_residual_blocks,
            residual_mode=self.residual_mode,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            image_size=self.image_size,
            schema=self.schema,
            n_channels=self.n_channels,
            base_width=self.base_width,
            depth=self.disc_depth,
        )

    def to_dict(self) -> dict:
        d = {
            k: getattr(self, k)
            for k in self.__dataclass_fields__
            if k not in ("schema", "weights")
        }
        d["schema"] = self.schema.to_dict()
        d["alpha"] = self.weights.alpha
        d["lam"] = self.weights.lam
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        schema = AttributeSchema.from_dict(d.pop("schema"))
        weights = LossWeights(alpha=d.pop("alpha", 10.0), lam=d.pop("lam", 10.0))
        return cls(schema=schema, weights=weights, **d)


def lr_at(iteration: int, config: TrainingConfig) -> float:
    """Constant for the warm phase, then linear decay to zero."""
    warm, decay = config.warm_iterations, config.decay_iterations
    if iteration < warm:
        return config.lr_initial
    if iteration < warm + decay:
        return config.lr_initial * (1.0 - (iteration - warm) / decay)
    return 0.0


@dataclass
class TrainState:
    config: TrainingConfig
    gen: Generator
    disc: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    scheduler: BatchScheduler | None
    iteration: int = 0
    history: list[dict] = field(default_factory=list)
    _last_g_parts: dict = field(
        default_factory=lambda: {"l_g": float("nan"), "adv_g": float("nan"),
                                 "cls_g": float("nan"), "rec": float("nan")}
    )


def init_state(config: TrainingConfig, dataset: SparselyGroupedDataset) -> TrainState:
    if dataset.image_size != config.image_size:
        raise ValueError(
            f"dataset images are {dataset.image_size}px but config expects "
            f"{config.image_size}px"
        )
    torch.manual_seed(config.seed)
    gen = Generator(config.generator_config())
    disc = Discriminator(config.discriminator_config())
    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_initial, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_initial, betas=betas)
    scheduler = BatchScheduler(
        dataset, config.batch_size, config.seed, config.balanced_batches
    )
    return TrainState(config, gen, disc, opt_g, opt_d, scheduler)


def _gp_seed(config: TrainingConfig, iteration: int) -> int:
    # decorrelated per-step stream; heads offset it further by +i
    return (config.seed * 1000003 + iteration * 8191 + 12289) % (2**31)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def train_step(state: TrainState, config: TrainingConfig) -> TrainState:
    """One discriminator update, plus a generator update every n_critic calls."""
    lr = lr_at(state.iteration, config)
    batch = state.scheduler.next_batch()
    try:
        loss_d, d_parts = d_total(
            state.disc, state.gen, batch, config.weights, _gp_seed(config, state.iteration)
        )
        if not torch.isfinite(loss_d):
            raise NonFiniteLossError(f"discriminator loss is non-finite: {d_parts}")
    except NonFiniteLossError as exc:
        raise TrainingDiverged(
            f"iteration {state.iteration}, {batch.kind} batch, D step: {exc}"
        ) from exc
    _set_lr(state.opt_d, lr)
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt_d.step()
    row = {"iteration": state.iteration, "lr": lr, "l_d": float(loss_d.detach()), **d_parts}
    state.iteration += 1

    if state.iteration % config.n_critic == 0:
        g_batch = state.scheduler.next_batch()
        try:
            loss_g, g_parts = g_total(
                state.disc, state.gen, g_batch, config.weights, config.rec_multi_value
            )
            if not torch.isfinite(loss_g):
                raise NonFiniteLossError("generator loss is non-finite")
        except NonFiniteLossError as exc:
            raise TrainingDiverged(
                f"iteration {state.iteration - 1}, {g_batch.kind} batch, G step: {exc}"
            ) from exc
        _set_lr(state.opt_g, lr)
        state.opt_g.zero_grad(set_to_none=True)
        state.opt_d.zero_grad(set_to_none=True)  # drop spillover D grads
        loss_g.backward()
        state.opt_g.step()
        state._last_g_parts = {"l_g": float(loss_g.detach()), **g_parts}

    row.update(state._last_g_parts)
    state.history.append(row)
    return state


def _metric_row(row: dict) -> list:
    return [
        row["iteration"],
        f"{row['lr']:.8g}",
        f"{row['l_d']:.6g}",
        f"{row['adv_d']:.6g}",
        f"{row['cls_d']:.6g}",
        f"{row['l_g']:.6g}",
        f"{row['adv_g']:.6g}",
        f"{row['cls_g']:.6g}",
        f"{row['rec']:.6g}",
    ]


def train_loop(
    config: TrainingConfig,
    dataset: SparselyGroupedDataset,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    progress: bool = False,
) -> TrainState:
    """Run the configured schedule, checkpointing and logging metrics.

    Writes `metrics.csv` (one row every log_every iterations) and
    `ckpt_{iteration}/` directories under `out_dir`; the final checkpoint is
    always written at exit.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        state = load_checkpoint(resume_from, dataset=dataset)
        if state.config != config:
            raise CheckpointError("resume checkpoint was trained with a different config")
    else:
        state = init_state(config, dataset)
    metrics_path = out_dir / "metrics.csv"
    mode = "a" if (resume_from is not None and metrics_path.exists()) else "w"
    with open(metrics_path, mode, newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(METRIC_COLUMNS)
        while state.iteration < config.total_iterations:
            train_step(state, config)
            it = state.iteration
            if it % config.log_every == 0:
                writer.writerow(_metric_row(state.history[-1]))
                fh.flush()
            if progress and it % max(1, config.total_iterations // 20) == 0:
                print(f"  iteration {it}/{config.total_iterations}", flush=True)
            if it % config.checkpoint_every == 0 and it < config.total_iterations:
                save_checkpoint(state, out_dir / f"ckpt_{it}")
    save_checkpoint(state, out_dir / f"ckpt_{state.iteration}")
    return state


# -- checkpoint I/O -----------------------------------------------------------


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Write `weights.pt` plus a human-readable `meta` sidecar; returns `path`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    payload = {
        "gen": state.gen.state_dict(),
        "disc": state.disc.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "scheduler": state.scheduler.state_dict() if state.scheduler else None,
        "torch_rng": torch.get_rng_state(),
        "iteration": state.iteration,
    }
    weights_path = path / "weights.pt"
    torch.save(payload, weights_path)
    digest = hashlib.sha256(weights_path.read_bytes()).hexdigest()
    meta = {
        "schema": state.config.schema.to_dict(),
        "config": state.config.to_dict(),
        "iteration": state.iteration,
        "seed": state.config.seed,
        "weights_sha256": digest,
    }
    (path / "meta").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return path


def load_checkpoint(
    path: str | Path,
    dataset: SparselyGroupedDataset | None = None,
    expected_schema: AttributeSchema | None = None,
) -> TrainState:
    """Restore a TrainState; verifies integrity and schema compatibility."""
    path = Path(path)
    meta_path, weights_path = path / "meta", path / "weights.pt"
    if not meta_path.is_file() or not weights_path.is_file():
        raise CheckpointError(f"{path} is not a checkpoint directory")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    digest = hashlib.sha256(weights_path.read_bytes()).hexdigest()
    if digest != meta["weights_sha256"]:
        raise CheckpointError(
            f"integrity check failed for {weights_path}: checksum mismatch"
        )
    schema = AttributeSchema.from_dict(meta["schema"])
    if expected_schema is not None and schema != expected_schema:
        for have, want in zip_longest(schema.attributes, expected_schema.attributes):
            if have != want:
                raise SchemaMismatchError(
                    f"checkpoint attribute {have} does not match expected {want}"
                )
    config = TrainingConfig.from_dict(meta["config"])
    payload = torch.load(weights_path, weights_only=False)
    gen = Generator(config.generator_config())
    disc = Discriminator(config.discriminator_config())
    gen.load_state_dict(payload["gen"])
    disc.load_state_dict(payload["disc"])
    betas = (config.adam_beta1, config.adam_beta2)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_initial, betas=betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_initial, betas=betas)
    opt_g.load_state_dict(payload["opt_g"])
    opt_d.load_state_dict(payload["opt_d"])
    scheduler = None
    if dataset is not None:
        scheduler = BatchScheduler(
            dataset, config.batch_size, config.seed, config.balanced_batches
        )
        if payload["scheduler"] is not None:
            scheduler.load_state_dict(payload["scheduler"])
    torch.set_rng_state(payload["torch_rng"])
    return TrainState(
        config, gen, disc, opt_g, opt_d, scheduler, iteration=payload["iteration"]
    )
