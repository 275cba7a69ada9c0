"""Objective terms for both players.

Sign conventions: every function returns a value the caller MINIMIZES.

Discriminator step (per batch, all heads i over all attributes):
    d_total = sum_i E[D(fake_i)] - n_heads * E[D(real)] + lambda * sum_i gp_i
              (+ softmax classification loss on the batch's attribute, grouped
               batches only)
Generator step:
    g_total = sum_heads CE(D_cls(fake_head), head value)
              - sum_heads E[D(fake_head)]
              + alpha * sum_attributes rec(attribute)

The reconstruction term re-translates each first-pass output and asks it to
match the *opposite* first-pass output under a mean L1 (cross-output cycle
consistency); it needs no labels, so it applies to grouped and mixed batches
alike.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import Batch
from .models import Discriminator, Generator, GeneratorOutputs


class NonFiniteLossError(RuntimeError):
    """A loss input or intermediate is NaN/Inf."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0  # reconstruction weight
    lam: float = 10.0  # gradient penalty weight

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("loss weights must be non-negative")


def _check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteLossError(f"non-finite {what}")
    return t


def d_cls_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batch-mean negative log softmax probability of the true group value."""
    _check_finite(logits, "classification logits")
    return F.cross_entropy(logits, labels)


def g_cls_loss(logits_of_fake: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Same functional form as d_cls_loss, evaluated on generated images."""
    return d_cls_loss(logits_of_fake, target)


def _critic_batch_means(critic_map: torch.Tensor) -> torch.Tensor:
    """Per-sample spatial mean of a patch critic map."""
    return critic_map.mean(dim=tuple(range(1, critic_map.dim())))


def gradient_penalty(
    d: Discriminator,
    x_real: torch.Tensor,
    x_fake: torch.Tensor,
    seed: int,
) -> torch.Tensor:
    """Mean (|grad| - 1)^2 at per-sample interpolates of one (real, fake) pair.

    One t ~ U[0,1] per sample, deterministic in `seed`; the caller applies
    the lambda weight.
    """
    (penalty,) = gradient_penalties(d, x_real, [x_fake], seed)
    return penalty


def gradient_penalties(
    d: Discriminator,
    x_real: torch.Tensor,
    x_fakes: list[torch.Tensor],
    seed: int,
) -> list[torch.Tensor]:
    """One penalty per fake head, all interpolates scored in a single pass.

    Head i draws its interpolation variables from seed + i, so the result
    matches per-head `gradient_penalty` calls.
    """
    if x_real.shape != x_fakes[0].shape:
        raise ValueError(
            f"real/fake shape mismatch: {tuple(x_real.shape)} vs {tuple(x_fakes[0].shape)}"
        )
    b = x_real.shape[0]
    ts = []
    for i in range(len(x_fakes)):
        g = torch.Generator().manual_seed(int(seed) + i)
        ts.append(torch.rand(b, 1, 1, 1, generator=g))
    t = torch.cat(ts, dim=0)
    real = x_real.detach().repeat(len(x_fakes), 1, 1, 1)
    fake = torch.cat([f.detach() for f in x_fakes], dim=0)
    x_hat = (t * real + (1.0 - t) * fake).requires_grad_(True)
    critic, _ = d(x_hat)
    grad = torch.autograd.grad(
        outputs=_critic_batch_means(critic).sum(),
        inputs=x_hat,
        create_graph=True,
    )[0]
    _check_finite(grad, "gradient-penalty gradient")
    norms = grad.flatten(1).norm(2, dim=1)
    sq = (norms - 1.0) ** 2
    return [sq[i * b : (i + 1) * b].mean() for i in range(len(x_fakes))]


def adv_loss_d(
    critic_real: torch.Tensor,
    critic_fakes: list[torch.Tensor],
    penalties: list[torch.Tensor],
    lam: float,
) -> torch.Tensor:
    """Critic loss for the D step; each fake head pairs with the real batch."""
    if len(critic_fakes) != len(penalties):
        raise ValueError(
            f"{len(critic_fakes)} fake heads but {len(penalties)} penalties"
        )
    real_mean = _check_finite(critic_real, "real critic map").mean()
    loss = -len(critic_fakes) * real_mean
    for fake, pen in zip(critic_fakes, penalties):
        loss = loss + _check_finite(fake, "fake critic map").mean() + lam * pen
    return loss


def adv_loss_g(critic_fakes: list[torch.Tensor]) -> torch.Tensor:
    """G maximizes the critic score of every output head."""
    loss = torch.zeros(())
    for fake in critic_fakes:
        loss = loss - _check_finite(fake, "fake critic map").mean()
    return loss


def _cross_rec_terms(
    gen: Generator,
    first: GeneratorOutputs,
    attribute: int,
    multi_value: bool = False,
) -> torch.Tensor:
    """Cross-output L1 terms for one attribute, given the first-pass outputs."""
    m = gen.config.schema.cardinalities[attribute]
    if m != 2 and not multi_value:
        raise ValueError(
            f"reconstruction loss is defined for two groups; attribute has {m} "
            "(pass multi_value=True for the all-ordered-pairs generalization)"
        )
    outs = first.for_attribute(attribute)
    b = outs[0].shape[0]
    second = gen(torch.cat(outs, dim=0))
    loss = torch.zeros(())
    for a in range(m):
        for c in range(m):
            if a == c:
                continue
            retranslated = second.select(attribute, c)[a * b : (a + 1) * b]
            loss = loss + (retranslated - outs[c]).abs().mean()
    return loss


def rec_loss(
    gen: Generator, x: torch.Tensor, attribute: int, multi_value: bool = False
) -> torch.Tensor:
    """Translate, re-translate, and match each result to the opposite first pass."""
    return _cross_rec_terms(gen, gen(x), attribute, multi_value)


def d_total(
    disc: Discriminator,
    gen: Generator,
    batch: Batch,
    weights: LossWeights,
    seed: int,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Full discriminator objective for one batch.

    Mixed batches contribute only the critic term, so classification heads
    receive exactly zero gradient from them.
    """
    with torch.no_grad():
        fakes = gen(batch.images)
    critic_real, logits_real = disc(batch.images)
    critic_fake_all, _ = disc(fakes.stacked())
    critic_fakes = list(critic_fake_all.chunk(len(fakes), dim=0))
    penalties = gradient_penalties(disc, batch.images, fakes.flat, seed)
    adv = adv_loss_d(critic_real, critic_fakes, penalties, weights.lam)
    parts = {
        "adv_d": float(adv.detach()),
        "gp": float(sum(p.detach() for p in penalties)),
        "cls_d": 0.0,
    }
    loss = adv
    if batch.kind == "grouped":
        cls = d_cls_loss(logits_real[batch.attribute], batch.labels)
        parts["cls_d"] = float(cls.detach())
        loss = loss + cls
    return loss, parts


def g_total(
    disc: Discriminator,
    gen: Generator,
    batch: Batch,
    weights: LossWeights,
    rec_multi_value: bool = False,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Full generator objective: classification + critic + reconstruction.

    Every head is pushed toward its own group value, so no data labels are
    consumed; the term set is identical for grouped and mixed batches.
    """
    schema = gen.config.schema
    fakes = gen(batch.images)
    b = batch.images.shape[0]
    critic_fake_all, logits_fake_all = disc(fakes.stacked())
    critic_fakes = list(critic_fake_all.chunk(len(fakes), dim=0))
    adv = adv_loss_g(critic_fakes)

    cls = torch.zeros(())
    for j in range(schema.n_attributes):
        for v in range(schema.cardinalities[j]):
            head = schema.head_offset(j, v)
            logits = logits_fake_all[j][head * b : (head + 1) * b]
            target = torch.full((b,), v, dtype=torch.long)
            cls = cls + g_cls_loss(logits, target)

    rec = torch.zeros(())
    for j in range(schema.n_attributes):
        rec = rec + _cross_rec_terms(gen, fakes, j, rec_multi_value)

    loss = cls + adv + weights.alpha * rec
    parts = {
        "adv_g": float(adv.detach()),
        "cls_g": float(cls.detach()),
        "rec": float(rec.detach()),
    }
    return loss, parts
