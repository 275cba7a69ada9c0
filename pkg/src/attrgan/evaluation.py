"""Quantitative evaluation: accuracy matrices, background similarity, sweeps.

Two evaluators are available: the closed-form synthetic oracle (exact on
rendered data, used for all acceptance thresholds) and a small learned
convolutional classifier trained on real labelled data (the protocol's
stand-in for a large evaluation network). Reported accuracies are
percentages in [0, 100]; background similarity is in [0, 1] (x100 for table
parity).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import (
    AttributeSchema,
    DataError,
    SparselyGroupedDataset,
    to_uint8,
    to_unit_tensor,
)
from .models import Generator
from .ssim import background_similarity
from .synth import default_renderers, oracle_classify_array

# Published large-scale evaluation-classifier accuracies on real face data
# (gender / smile / hair color), attached as report footnotes when
# evaluating manifest-loaded corpora.
REAL_DATA_EVALUATOR_REFERENCE = {"gender": 99.00, "smile": 90.22, "hair_color": 99.53}


def oracle_classify(
    image: np.ndarray | torch.Tensor,
    schema: AttributeSchema,
    renderers: tuple[str, ...] | None = None,
) -> np.ndarray:
    """Rule-based labels for one image: (H,W,C) in [-1,1] or uint8, or CHW tensor."""
    if isinstance(image, torch.Tensor):
        image = image.detach().permute(1, 2, 0).numpy()
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 127.5 - 1.0
    return oracle_classify_array(image, schema, renderers)


def oracle_classify_batch(
    images: torch.Tensor, schema: AttributeSchema, renderers: tuple[str, ...] | None = None
) -> np.ndarray:
    """(b, n_attributes) labels for a float NCHW batch in [-1,1]."""
    arr = images.detach().permute(0, 2, 3, 1).numpy()
    return np.stack([oracle_classify_array(a, schema, renderers) for a in arr])


class EvalClassifier(nn.Module):
    """4-block strided conv net with one softmax head per attribute."""

    def __init__(self, schema: AttributeSchema, image_size: int, n_channels: int = 3):
        super().__init__()
        widths = (32, 64, 128, 128)
        layers: list[nn.Module] = []
        in_ch = n_channels
        for w in widths:
            layers += [nn.Conv2d(in_ch, w, 4, 2, 1), nn.ReLU(inplace=True)]
            in_ch = w
        self.trunk = nn.Sequential(*layers)
        feat = in_ch * (image_size // 16) ** 2
        self.heads = nn.ModuleList(nn.Linear(feat, m) for m in schema.cardinalities)
        self.schema = schema

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        t = self.trunk(x).flatten(1)
        return [head(t) for head in self.heads]

    def predict(self, images: torch.Tensor, batch_size: int = 128) -> np.ndarray:
        """(b, n_attributes) argmax labels."""
        self.eval()
        out = []
        with torch.no_grad():
            for i in range(0, images.shape[0], batch_size):
                logits = self(images[i : i + batch_size])
                out.append(torch.stack([l.argmax(1) for l in logits], dim=1))
        return torch.cat(out).numpy().astype(np.int16)


def train_eval_classifier(
    dataset: SparselyGroupedDataset,
    seed: int = 0,
    steps: int = 2000,
    batch_size: int = 32,
    lr: float = 1e-3,
    holdout_fraction: float = 0.1,
) -> tuple[EvalClassifier, dict[str, float]]:
    """Train the evaluation classifier on fully labelled real data.

    Returns the classifier and per-attribute held-out accuracy (percent).
    """
    if not dataset.fully_labelled():
        raise DataError("evaluation classifier needs fully labelled training data")
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 311])
    order = rng.permutation(len(dataset))
    n_hold = max(1, int(len(dataset) * holdout_fraction))
    hold_ids, train_ids = order[:n_hold], order[n_hold:]
    clf = EvalClassifier(dataset.schema, dataset.image_size)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    labels = dataset.labels.astype(np.int64)
    for step in range(steps):
        ids = rng.choice(train_ids, size=batch_size, replace=False)
        x = to_unit_tensor(dataset.images[ids])
        logits = clf(x)
        loss = sum(
            nn.functional.cross_entropy(l, torch.from_numpy(labels[ids, j]))
            for j, l in enumerate(logits)
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
    preds = clf.predict(to_unit_tensor(dataset.images[hold_ids]))
    accuracy = {
        name: float((preds[:, j] == labels[hold_ids, j]).mean() * 100.0)
        for j, name in enumerate(dataset.schema.names)
    }
    return clf, accuracy


# -- translation protocol ------------------------------------------------------


@dataclass
class EvalRow:
    """Scores for translating one attribute across a test set."""

    translated: str
    targeted: float  # % predictions matching the translation target
    untargeted: dict[str, float]  # per other attribute, % original value kept
    background: float  # corner similarity in [0,1]
    direction_matrix: np.ndarray | None = None  # (m, m) source->target accuracy %


@dataclass
class EvalReport:
    schema: AttributeSchema
    rows: list[EvalRow]
    metadata: dict = field(default_factory=dict)

    def row(self, attribute: str) -> EvalRow:
        for r in self.rows:
            if r.translated == attribute:
                return r
        raise KeyError(attribute)

    def to_csv(self, path: str | Path) -> Path:
        """Table layout: one row per translated attribute, one accuracy column
        per measured attribute, background x100 in the last column."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            for key, value in sorted(self.metadata.items()):
                fh.write(f"# {key}: {value}\n")
            writer = csv.writer(fh)
            writer.writerow(["translated", *self.schema.names, "background"])
            for r in self.rows:
                cells = [
                    f"{r.targeted:.2f}" if name == r.translated
                    else f"{r.untargeted[name]:.2f}"
                    for name in self.schema.names
                ]
                writer.writerow([r.translated, *cells, f"{round(r.background * 100)}"])
        return path


def _translate_batched(
    gen: Generator, images: torch.Tensor, attribute: int, target: int, batch_size: int = 64
) -> torch.Tensor:
    gen.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch_size):
            outs.append(gen(images[i : i + batch_size]).select(attribute, target))
    return torch.cat(outs)


def translation_accuracy(
    gen: Generator,
    classify,
    dataset: SparselyGroupedDataset,
    attribute: int,
    with_background: bool = True,
) -> EvalRow:
    """Translate every test image to each value of `attribute` and score it.

    `classify` maps a float NCHW batch to (b, n_attributes) labels. Targeted
    accuracy counts predictions equal to the translation target; untargeted
    accuracy counts attribute k != j predictions equal to the input's true
    value; background is the mean top-left corner similarity.
    """
    schema = dataset.schema
    images = to_unit_tensor(dataset.images)
    true = dataset.labels
    if (true == -1).any():
        raise DataError("translation accuracy needs fully labelled test data")
    m = schema.cardinalities[attribute]
    targeted_hits, total = 0, 0
    untargeted_hits = {k: 0 for k in range(schema.n_attributes) if k != attribute}
    sims = []
    x_arr = images.permute(0, 2, 3, 1).numpy()
    direction = np.zeros((m, m)), np.zeros((m, m))  # hits, counts
    for target in range(m):
        translated = _translate_batched(gen, images, attribute, target)
        preds = classify(translated)
        hits = preds[:, attribute] == target
        targeted_hits += int(hits.sum())
        total += len(preds)
        for src in range(m):
            src_ids = true[:, attribute] == src
            direction[0][src, target] += int(hits[src_ids].sum())
            direction[1][src, target] += int(src_ids.sum())
        for k in untargeted_hits:
            untargeted_hits[k] += int((preds[:, k] == true[:, k]).sum())
        if with_background:
            t_arr = translated.permute(0, 2, 3, 1).numpy()
            sims.extend(
                background_similarity(x_arr[i], t_arr[i]) for i in range(len(t_arr))
            )
    with np.errstate(invalid="ignore"):
        matrix = 100.0 * direction[0] / np.maximum(direction[1], 1)
    return EvalRow(
        translated=schema.names[attribute],
        targeted=100.0 * targeted_hits / total,
        untargeted={
            schema.names[k]: 100.0 * h / total for k, h in untargeted_hits.items()
        },
        background=float(np.mean(sims)) if sims else float("nan"),
        direction_matrix=matrix,
    )


def evaluate_translations(
    gen: Generator,
    dataset: SparselyGroupedDataset,
    classify=None,
    metadata: dict | None = None,
) -> EvalReport:
    """Full report: one row per schema attribute (oracle evaluator by default)."""
    schema = dataset.schema
    if classify is None:
        renderers = default_renderers(schema)
        classify = lambda batch: oracle_classify_batch(batch, schema, renderers)
    rows = [
        translation_accuracy(gen, classify, dataset, j)
        for j in range(schema.n_attributes)
    ]
    return EvalReport(schema, rows, metadata or {})


def disc_real_accuracy(
    disc, dataset: SparselyGroupedDataset, attribute: int, value: int | None = None
) -> float:
    """Percent of real images whose classification head picks the true label.

    With `value` set, only images of that group are scored (the minority-
    group diagnostic for unbalanced training).
    """
    ids = np.arange(len(dataset))
    true = dataset.labels[:, attribute]
    if value is not None:
        ids = np.flatnonzero(true == value)
    if ids.size == 0:
        raise DataError("no examples to score")
    disc.eval()
    hits = 0
    with torch.no_grad():
        for i in range(0, ids.size, 128):
            chunk = ids[i : i + 128]
            _, logits = disc(to_unit_tensor(dataset.images[chunk]))
            hits += int((logits[attribute].argmax(1).numpy() == true[chunk]).sum())
    return 100.0 * hits / ids.size
