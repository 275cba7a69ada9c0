"""Desk-scale experiment harness: canned corpus, cached trainings, protocols.

Trained runs are cached under a directory keyed by a hash of the training
config and dataset, so repeated evaluations (and the acceptance suite)
reuse finished runs instead of retraining. Sweep and ablation trainings can
fan out over worker processes; every worker writes to a disjoint run
directory and derives its seed from the base seed.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .data import (
    AttributeSchema,
    SparselyGroupedDataset,
    balance_unbalanced,
    sparsify,
    subsample_group_labels,
)
from .evaluation import (
    EvalReport,
    disc_real_accuracy,
    evaluate_translations,
)
from .training import TrainingConfig, TrainState, load_checkpoint, train_loop
from .synth import SynthParams, synth_generate

DESK_SCHEMA = AttributeSchema.from_dict({"color": 2, "stripe": 2})
DESK_IMAGE_SIZE = 32
DESK_TRAIN = 4000
DESK_TEST = 500
DESK_CORPUS_SEED = 7


def desk_corpus(
    schema: AttributeSchema = DESK_SCHEMA,
    image_size: int = DESK_IMAGE_SIZE,
    train_count: int = DESK_TRAIN,
    test_count: int = DESK_TEST,
    seed: int = DESK_CORPUS_SEED,
) -> tuple[SparselyGroupedDataset, SparselyGroupedDataset]:
    """Fully labelled train/test splits of the synthetic corpus."""
    params = SynthParams(
        image_size=image_size,
        count=train_count + test_count,
        seed=seed,
        schema=schema,
        stratified=True,
    )
    full = synth_generate(params)
    rng = np.random.default_rng([seed, 523])
    order = rng.permutation(len(full))
    return full.subset(order[:train_count]), full.subset(order[train_count:])


def desk_training_config(
    schema: AttributeSchema = DESK_SCHEMA, seed: int = 0, **overrides
) -> TrainingConfig:
    """Desk-scale schedule: 3000 warm + 2000 decay iterations at 32px."""
    base = dict(
        schema=schema,
        image_size=DESK_IMAGE_SIZE,
        warm_iterations=3000,
        decay_iterations=2000,
        checkpoint_every=1000,
        log_every=50,
        seed=seed,
    )
    base.update(overrides)
    return TrainingConfig(**base)


def _dataset_fingerprint(dataset: SparselyGroupedDataset) -> str:
    h = hashlib.sha256()
    h.update(dataset.images.tobytes())
    h.update(dataset.labels.tobytes())
    h.update(json.dumps(dataset.schema.to_dict()).encode())
    return h.hexdigest()


def run_key(config: TrainingConfig, dataset: SparselyGroupedDataset) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True) + _dataset_fingerprint(dataset)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train_cached(
    config: TrainingConfig,
    dataset: SparselyGroupedDataset,
    cache_dir: str | Path,
    tag: str = "run",
    progress: bool = False,
) -> TrainState:
    """Train under `cache_dir/tag-<key>`, or load the finished run if present."""
    cache_dir = Path(cache_dir)
    run_dir = cache_dir / f"{tag}-{run_key(config, dataset)}"
    final = run_dir / f"ckpt_{config.total_iterations}"
    if (final / "meta").is_file():
        return load_checkpoint(final, dataset=dataset)
    if progress:
        print(f"training {tag} -> {run_dir}", flush=True)
    return train_loop(config, dataset, run_dir, progress=progress)


def _train_remote(args) -> str:
    """Worker entry: train one cached run with a constrained thread count."""
    config_dict, images, labels, schema_dict, cache_dir, tag, threads = args
    torch.set_num_threads(threads)
    schema = AttributeSchema.from_dict(schema_dict)
    dataset = SparselyGroupedDataset(schema, images, labels)
    config = TrainingConfig.from_dict(config_dict)
    state = train_cached(config, dataset, cache_dir, tag)
    del state
    return tag

def train_many_cached(
    jobs: list[tuple[TrainingConfig, SparselyGroupedDataset, str]],
    cache_dir: str | Path,
    workers: int = 1,
    progress: bool = False,
) -> None:
    """Ensure every (config, dataset, tag) job has a finished cached run."""
    pending = [
        (cfg, ds, tag)
        for cfg, ds, tag in jobs
        if not (Path(cache_dir) / f"{tag}-{run_key(cfg, ds)}" /
                f"ckpt_{cfg.total_iterations}" / "meta").is_file()
    ]
    if not pending:
        return
    if workers <= 1 or len(pending) == 1:
        for cfg, ds, tag in pending:
            train_cached(cfg, ds, cache_dir, tag, progress=progress)
        return
    threads = max(1, (os.cpu_count() or 1) // workers)
    args = [
        (cfg.to_dict(), ds.images, ds.labels, ds.schema.to_dict(), str(cache_dir), tag, threads)
        for cfg, ds, tag in pending
    ]
    import multiprocessing as mp

    ctx = mp.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        for tag in pool.map(_train_remote, args):
            if progress:
                print(f"finished {tag}", flush=True)


# -- protocols -----------------------------------------------------------------


def sparse_condition(
    train_ds: SparselyGroupedDataset, per_group: int | None, seed: int = 0
) -> SparselyGroupedDataset:
    """Grouped pools of `per_group` per value (None = keep everything labelled)."""
    if per_group is None:
        return train_ds
    return sparsify(train_ds, per_group, seed)


def translation_experiment(
    train_ds: SparselyGroupedDataset,
    test_ds: SparselyGroupedDataset,
    config: TrainingConfig,
    cache_dir: str | Path,
    per_group: int | None = 500,
    tag: str | None = None,
) -> tuple[EvalReport, TrainState]:
    """Train on the sparsified condition and report oracle translation scores."""
    condition = sparse_condition(train_ds, per_group, config.seed)
    tag = tag or f"pg{per_group if per_group is not None else 'all'}"
    state = train_cached(config, condition, cache_dir, tag)
    report = evaluate_translations(
        state.gen,
        test_ds,
        metadata={
            "condition": f"per_group={per_group if per_group is not None else 'all'}",
            "iterations": state.iteration,
            "seed": config.seed,
        },
    )
    return report, state


def run_unbalanced_sweep(
    train_ds: SparselyGroupedDataset,
    test_ds: SparselyGroupedDataset,
    attribute: int,
    mi_sizes: list[int],
    config: TrainingConfig,
    cache_dir: str | Path,
    mi_value: int | None = None,
    workers: int = 1,
) -> list[dict]:
    """Minority-group sweep on one attribute, trained single-attribute.

    For each size s: the minority grouped pool is subsampled to s labels,
    the majority pool is undersampled to match (freed examples join the
    mixed pool), and a fresh single-attribute model is trained. Reports both
    translation directions and the discriminator's classification accuracy
    on real minority-group test images.
    """
    train_j = train_ds.select_attributes([attribute])
    test_j = test_ds.select_attributes([attribute])
    sizes = {v: ids.size for v, ids in train_j.grouped_index(0).items()}
    if mi_value is None:
        mi_value = min(sizes, key=lambda v: (sizes[v], v))
    ma_value = min((v for v in sizes if v != mi_value), key=lambda v: (-sizes[v], v))
    name = train_ds.schema.names[attribute]

    jobs = []
    conditions = []
    for idx, s in enumerate(mi_sizes):
        ds_s = subsample_group_labels(train_j, 0, mi_value, s, config.seed + idx)
        ds_s = balance_unbalanced(ds_s, 0, seed=config.seed + idx)
        cfg_s = replace(config, schema=train_j.schema, seed=config.seed + idx)
        conditions.append((s, ds_s, cfg_s))
        jobs.append((cfg_s, ds_s, f"mi{s}-{name}"))
    train_many_cached(jobs, cache_dir, workers=workers)

    results = []
    for s, ds_s, cfg_s in conditions:
        state = train_cached(cfg_s, ds_s, cache_dir, f"mi{s}-{name}")
        report = evaluate_translations(state.gen, test_j, metadata={
            "attribute": name, "mi_size": s, "mi_value": mi_value,
        })
        matrix = report.rows[0].direction_matrix
        results.append(
            {
                "attribute": name,
                "mi_size": s,
                "mi_value": mi_value,
                "ma_value": ma_value,
                "grouped_pool": {
                    v: int(ids.size) for v, ids in ds_s.grouped_index(0).items()
                },
                "mi_to_ma": float(matrix[mi_value, ma_value]),
                "ma_to_mi": float(matrix[ma_value, mi_value]),
                "targeted": report.rows[0].targeted,
                "background": report.rows[0].background,
                "d_real_mi_accuracy": disc_real_accuracy(
                    state.disc, test_j, 0, value=mi_value
                ),
            }
        )
    return results


RESIDUAL_VARIANTS = ("adapted", "original", "none")


def run_ablation(
    train_ds: SparselyGroupedDataset,
    test_ds: SparselyGroupedDataset,
    config: TrainingConfig,
    cache_dir: str | Path,
    per_group: int | None = 500,
    variants: tuple[str, ...] = RESIDUAL_VARIANTS,
    workers: int = 1,
) -> dict[str, EvalReport]:
    """Train one model per residual-learning variant, identically otherwise."""
    condition = sparse_condition(train_ds, per_group, config.seed)
    tag_pg = f"pg{per_group if per_group is not None else 'all'}"
    configs = {v: replace(config, residual_mode=v) for v in variants}
    jobs = [
        (cfg, condition, tag_pg if v == "adapted" else f"{tag_pg}-{v}")
        for v, cfg in configs.items()
    ]
    train_many_cached(jobs, cache_dir, workers=workers)
    out = {}
    for v, cfg in configs.items():
        tag = tag_pg if v == "adapted" else f"{tag_pg}-{v}"
        state = train_cached(cfg, condition, cache_dir, tag)
        out[v] = evaluate_translations(
            state.gen, test_ds, metadata={"variant": v, "condition": tag_pg}
        )
    return out
