"""Deterministic synthetic attribute-image corpus.

Each attribute is rendered by a rule whose inverse is a closed-form pixel
statistic, so a rule-based oracle recovers every label exactly. Layout at
size s (all regions scale with s):

* ``disc_hue``: a centred disc whose dominant channel encodes the value
  (0 = red, 1 = blue, 2 = green). The disc always covers the central
  s/8-square (the oracle's probe) and never reaches the 10x10 top-left
  corner, which evaluation treats as attribute-neutral background.
* ``h_stripes``: value 1 paints horizontal stripes on rows >= ceil(s/3);
  the probe is the bottom-left row strip, which the disc cannot touch.
* ``v_stripes``: value 1 paints vertical stripes on columns >= ceil(2s/3);
  the probe sits in the top-right corner above the horizontal-stripe zone.

Unrelated per-image content (background tint, disc centre/radius jitter,
disc shade jitter) is what translation must preserve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AttributeSchema, DataError, SparselyGroupedDataset, check_image_size

_STREAM_LABELS = 17
_STREAM_RENDER = 71

STRIPE_AMPLITUDE = 0.12  # in [0,1] pixel units
STRIPE_THRESHOLD = 0.08  # oracle cut on mean |neighbour diff| in [-1,1] units
PROBE_ROWS = 4

_DISC_SHADES = {
    0: (0.75, 0.28, 0.22),  # red-dominant
    1: (0.22, 0.28, 0.75),  # blue-dominant
    2: (0.22, 0.70, 0.28),  # green-dominant
}


def _stripe_height(size: int) -> int:
    return max(1, size // 16)


def _stripe_mask(size: int, horizontal: bool) -> tuple[slice, np.ndarray]:
    """(region slice along the striped axis, +/-1 sign per line within it)."""
    start = int(np.ceil(size / 3)) if horizontal else int(np.ceil(2 * size / 3))
    lines = np.arange(start, size)
    signs = np.where((lines // _stripe_height(size)) % 2 == 0, 1.0, -1.0)
    return slice(start, size), signs


def _render_disc_hue(canvas: np.ndarray, value: int, rng: np.random.Generator) -> None:
    s = canvas.shape[0]
    cy, cx = s / 2 + rng.uniform(-s / 32, s / 32, size=2)
    radius = rng.uniform(0.15, 0.21) * s
    shade = np.clip(np.asarray(_DISC_SHADES[value]) + rng.uniform(-0.04, 0.04, 3), 0, 1)
    yy, xx = np.mgrid[0:s, 0:s]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    canvas[mask] = shade


def _classify_disc_hue(image: np.ndarray, cardinality: int) -> int:
    s = image.shape[0]
    half = s // 16
    probe = image[s // 2 - half : s // 2 + half, s // 2 - half : s // 2 + half]
    means = probe.reshape(-1, 3).mean(axis=0)
    scores = [means[0], means[2], means[1]][:cardinality]  # R, B, G order
    return int(np.argmax(scores))


def _render_h_stripes(canvas: np.ndarray, value: int, rng: np.random.Generator) -> None:
    if value == 0:
        return
    rows, signs = _stripe_mask(canvas.shape[0], horizontal=True)
    canvas[rows] = np.clip(canvas[rows] + signs[:, None, None] * STRIPE_AMPLITUDE, 0, 1)


def _classify_h_stripes(image: np.ndarray, cardinality: int) -> int:
    s = image.shape[0]
    probe = image[s - PROBE_ROWS :, : int(np.ceil(s / 3))]
    stat = np.abs(np.diff(probe, axis=0)).mean()
    return int(stat > STRIPE_THRESHOLD)


def _render_v_stripes(canvas: np.ndarray, value: int, rng: np.random.Generator) -> None:
    if value == 0:
        return
    cols, signs = _stripe_mask(canvas.shape[0], horizontal=False)
    canvas[:, cols] = np.clip(
        canvas[:, cols] + signs[None, :, None] * STRIPE_AMPLITUDE, 0, 1
    )


def _classify_v_stripes(image: np.ndarray, cardinality: int) -> int:
    s = image.shape[0]
    probe = image[: int(np.ceil(s / 3)), s - PROBE_ROWS :]
    stat = np.abs(np.diff(probe, axis=1)).mean()
    return int(stat > STRIPE_THRESHOLD)


@dataclass(frozen=True)
class Renderer:
    name: str
    render: callable
    classify: callable  # (image in [-1,1], cardinality) -> value
    max_cardinality: int


RENDERERS = {
    "disc_hue": Renderer("disc_hue", _render_disc_hue, _classify_disc_hue, 3),
    "h_stripes": Renderer("h_stripes", _render_h_stripes, _classify_h_stripes, 2),
    "v_stripes": Renderer("v_stripes", _render_v_stripes, _classify_v_stripes, 2),
}

DEFAULT_RENDERER_ORDER = ("disc_hue", "h_stripes", "v_stripes")


def default_renderers(schema: AttributeSchema) -> tuple[str, ...]:
    if schema.n_attributes > len(DEFAULT_RENDERER_ORDER):
        raise DataError(
            f"only {len(DEFAULT_RENDERER_ORDER)} built-in renderers; "
            f"schema has {schema.n_attributes} attributes"
        )
    return DEFAULT_RENDERER_ORDER[: schema.n_attributes]


@dataclass(frozen=True)
class SynthParams:
    """Full recipe for a synthetic corpus; (seed, params) fixes every byte."""

    image_size: int
    count: int
    seed: int
    schema: AttributeSchema
    marginals: tuple[tuple[float, ...], ...] | None = None  # per attribute; None = uniform
    stratified: bool = False
    renderers: tuple[str, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        check_image_size(self.image_size)
        if self.count < 0:
            raise DataError(f"count must be >= 0, got {self.count}")
        if self.renderers is None:
            object.__setattr__(self, "renderers", default_renderers(self.schema))
        if len(self.renderers) != self.schema.n_attributes:
            raise DataError("one renderer per attribute required")
        for (name, m), rname in zip(self.schema.attributes, self.renderers):
            renderer = RENDERERS.get(rname)
            if renderer is None:
                raise DataError(f"unknown renderer {rname!r}")
            if m > renderer.max_cardinality:
                raise DataError(
                    f"renderer {rname!r} supports up to {renderer.max_cardinality} "
                    f"values; attribute {name!r} has {m}"
                )
        if self.marginals is not None:
            if len(self.marginals) != self.schema.n_attributes:
                raise DataError("one marginal per attribute required")
            for (name, m), p in zip(self.schema.attributes, self.marginals):
                if len(p) != m or any(q < 0 for q in p) or abs(sum(p) - 1.0) > 1e-9:
                    raise DataError(f"marginal for {name!r} must be a {m}-way distribution")


def _draw_labels(params: SynthParams) -> np.ndarray:
    """Per-attribute values: iid from the marginal, or exact counts if stratified."""
    schema = params.schema
    labels = np.zeros((params.count, schema.n_attributes), dtype=np.int16)
    for j, m in enumerate(schema.cardinalities):
        p = (
            np.full(m, 1.0 / m)
            if params.marginals is None
            else np.asarray(params.marginals[j], dtype=float)
        )
        rng = np.random.default_rng([params.seed, _STREAM_LABELS, j])
        if params.stratified:
            counts = np.floor(p * params.count).astype(int)
            remainder = params.count - counts.sum()
            if remainder:
                order = np.argsort(-(p * params.count - counts), kind="stable")
                counts[order[:remainder]] += 1
            column = np.repeat(np.arange(m, dtype=np.int16), counts)
            labels[:, j] = column[rng.permutation(params.count)]
        else:
            labels[:, j] = rng.choice(m, size=params.count, p=p).astype(np.int16)
    return labels


def render_example(
    params: SynthParams, index: int, values: np.ndarray
) -> np.ndarray:
    """Render one example as (H,W,3) uint8; deterministic in (seed, index)."""
    s = params.image_size
    rng = np.random.default_rng([params.seed, _STREAM_RENDER, index])
    base = rng.uniform(0.55, 0.80)
    tint = rng.uniform(-0.06, 0.06, size=3)
    canvas = np.clip(np.full((s, s, 3), base) + tint, 0, 1)
    # stripes are background: paint them before the disc
    for j in reversed(range(params.schema.n_attributes)):
        RENDERERS[params.renderers[j]].render(canvas, int(values[j]), rng)
    return np.round(canvas * 255.0).astype(np.uint8)


def synth_generate(params: SynthParams) -> SparselyGroupedDataset:
    """Generate the fully labelled corpus described by `params`."""
    labels = _draw_labels(params)
    images = np.zeros(
        (params.count, params.image_size, params.image_size, 3), dtype=np.uint8
    )
    for i in range(params.count):
        images[i] = render_example(params, i, labels[i])
    return SparselyGroupedDataset(params.schema, images, labels)


def oracle_classify_array(
    image: np.ndarray, schema: AttributeSchema, renderers: tuple[str, ...] | None = None
) -> np.ndarray:
    """Closed-form labels for one (H,W,3) image with values in [-1,1]."""
    if renderers is None:
        renderers = default_renderers(schema)
    return np.array(
        [
            RENDERERS[r].classify(image, m)
            for r, m in zip(renderers, schema.cardinalities)
        ],
        dtype=np.int16,
    )
