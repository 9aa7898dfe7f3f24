"""Deterministic synthetic ad-log generator.

Images are procedural color fields with an optional high-contrast
rectangular "typography" block; attribute effects, a dominant-color
effect, and a text-saliency effect (optionally scaled by one attribute,
an image-aux interaction) shift a known ground-truth CTR. Click
outcomes are Bernoulli draws from that truth, sharded by record index
with counter-based seeding, so any chunking yields identical output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .color import PALETTE_NAMES, DEFAULT_PALETTE
from .objectives import sprc
from .pipeline import (AuxSchema, CategoricalAttribute, EmbeddingStore,
                       ImpressionRecord, TextEmbeddingAttribute, _group_key)


class GenConfigError(Exception):
    pass


@dataclass(frozen=True)
class AttributeDef:
    """A planted categorical attribute: per-level additive CTR shifts."""

    name: str
    levels: tuple
    effects: tuple
    ordinal: bool = False

    def validate(self):
        if len(self.levels) != len(self.effects):
            raise GenConfigError(f"{self.name}: {len(self.levels)} levels but "
                                 f"{len(self.effects)} effects")


def default_attributes():
    return (
        AttributeDef("age", ("1", "2", "3", "4", "5"),
                     (0.0, 0.02, 0.04, 0.06, 0.08), ordinal=True),
        AttributeDef("time", ("dawn", "morning", "day", "night"),
                     (0.02, 0.03, 0.0, -0.02), ordinal=True),
        AttributeDef("category", ("casual", "hardcore", "puzzle"),
                     (0.0, 0.01, -0.01)),
    )


@dataclass(frozen=True)
class GenConfig:
    n_images: int = 100
    n_records: int = 100_000
    seed: int = 0
    image_size: int = 32
    base_ctr: float = 0.2
    attributes: tuple = field(default_factory=default_attributes)
    color_effect: float = 0.04          # spread of per-palette-color shifts
    saliency_weight: float = 0.06       # CTR shift when the text block shows
    interaction_attribute: str | None = "category"
    interaction_multipliers: tuple = (0.0, 1.0, 2.0)
    text_block_prob: float = 0.6
    combos_per_image: int = 3
    include_title: bool = False
    title_dim: int = 16

    def color_shift(self, palette_index):
        # deterministic spread over the ten palette colors in [-1, 1] * effect
        return self.color_effect * (2.0 * palette_index / 9.0 - 1.0)

    def validate(self):
        for attr in self.attributes:
            attr.validate()
        if self.interaction_attribute is not None:
            match = [a for a in self.attributes if a.name == self.interaction_attribute]
            if not match:
                raise GenConfigError(f"interaction attribute "
                                     f"{self.interaction_attribute!r} not defined")
            if len(self.interaction_multipliers) != len(match[0].levels):
                raise GenConfigError("interaction multipliers must match the "
                                     "attribute's level count")
        lo = self.base_ctr + sum(min(a.effects) for a in self.attributes) \
            - self.color_effect
        hi = self.base_ctr + sum(max(a.effects) for a in self.attributes) \
            + self.color_effect
        sal_hi = self.saliency_weight * (max(self.interaction_multipliers)
                                         if self.interaction_attribute else 1.0)
        sal_lo = min(0.0, self.saliency_weight * (min(self.interaction_multipliers)
                                                  if self.interaction_attribute else 1.0))
        if lo + sal_lo <= 0.0 or hi + sal_hi >= 1.0:
            raise GenConfigError(f"effect spec pushes CTR to [{lo + sal_lo:.4f}, "
                                 f"{hi + sal_hi:.4f}], outside (0, 1)")

    def to_dict(self):
        return {
            "n_images": self.n_images, "n_records": self.n_records,
            "seed": self.seed, "image_size": self.image_size,
            "base_ctr": self.base_ctr,
            "attributes": [{"name": a.name, "levels": list(a.levels),
                            "effects": list(a.effects), "ordinal": a.ordinal}
                           for a in self.attributes],
            "color_effect": self.color_effect,
            "saliency_weight": self.saliency_weight,
            "interaction_attribute": self.interaction_attribute,
            "interaction_multipliers": list(self.interaction_multipliers),
            "text_block_prob": self.text_block_prob,
            "combos_per_image": self.combos_per_image,
            "include_title": self.include_title, "title_dim": self.title_dim,
        }


@dataclass
class GroundTruth:
    """Planted truth: CTR per unique exposure plus per-image text masks."""

    true_ctr: dict
    masks: dict
    config: dict

    def ctr_of(self, instance):
        return self.true_ctr[_group_key(instance.image_id, instance.attributes)]

    def save(self, path):
        doc = {"config": self.config,
               "true_ctr": [{"image_id": k[0], "attributes": dict(k[1]), "ctr": v}
                            for k, v in self.true_ctr.items()],
               "masks": {img: mask.astype(int).tolist()
                         for img, mask in self.masks.items()}}
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        true_ctr = {(e["image_id"], tuple(sorted((str(k), str(v))
                                                 for k, v in e["attributes"].items()))): e["ctr"]
                    for e in doc["true_ctr"]}
        masks = {img: np.asarray(m, dtype=bool) for img, m in doc["masks"].items()}
        return cls(true_ctr, masks, doc["config"])


@dataclass
class SynthData:
    records: list
    images: dict
    truth: GroundTruth
    schema: AuxSchema
    store: EmbeddingStore | None


def _render_image(rng, size, palette_index, with_block):
    """Smooth color field around a palette color, plus an optional
    high-contrast speckled rectangle standing in for typography."""
    base = DEFAULT_PALETTE[palette_index]
    img = np.clip(base[:, None, None]
                  + 0.08 * (rng.random((3, size, size)) - 0.5)
                  + 0.05 * np.linspace(-1, 1, size)[None, None, :], 0.0, 1.0)
    mask = np.zeros((size, size), dtype=bool)
    if with_block:
        bh = int(rng.integers(size // 5, size // 3 + 1))
        bw = int(rng.integers(size // 3, (2 * size) // 3 + 1))
        top = int(rng.integers(0, size - bh + 1))
        left = int(rng.integers(0, size - bw + 1))
        fill = 0.95 if base.mean() < 0.5 else 0.05
        block = np.full((3, bh, bw), fill)
        speckle = rng.random((bh, bw)) < 0.35
        block[:, speckle] = 1.0 - fill
        img[:, top:top + bh, left:left + bw] = block
        mask[top:top + bh, left:left + bw] = True
    return img, mask


def build_schema(config):
    attrs = [CategoricalAttribute(a.name, a.levels) for a in config.attributes]
    attrs.append(CategoricalAttribute("dominant_color", PALETTE_NAMES))
    if config.include_title:
        attrs.append(TextEmbeddingAttribute("title", config.title_dim))
    return AuxSchema(attrs)


def _pseudo_embedding(text, dim, seed):
    # stable across processes (builtin str hash is salted)
    digest = int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "big")
    rng = np.random.default_rng([seed, 13, digest])
    return rng.standard_normal(dim) * 0.1


def generate(config):
    """Produce (records, images, truth) plus the matching schema and store."""
    config.validate()
    imul = dict(zip(
        next(a.levels for a in config.attributes
             if a.name == config.interaction_attribute),
        config.interaction_multipliers)) if config.interaction_attribute else None

    images, masks, combos, true_ctr = {}, {}, {}, {}
    store = EmbeddingStore(config.title_dim) if config.include_title else None
    for i in range(config.n_images):
        rng = np.random.default_rng([config.seed, 3, i])
        image_id = f"img{i:05d}"
        palette_index = int(rng.integers(len(PALETTE_NAMES)))
        with_block = bool(rng.random() < config.text_block_prob)
        images[image_id], masks[image_id] = _render_image(
            rng, config.image_size, palette_index, with_block)
        title = f"ad {i} spark {i % 17}"
        if store is not None:
            store.add(title, _pseudo_embedding(title, config.title_dim, config.seed))
        seen = set()
        image_combos = []
        while len(image_combos) < config.combos_per_image:
            attrs = {a.name: a.levels[int(rng.integers(len(a.levels)))]
                     for a in config.attributes}
            attrs["dominant_color"] = PALETTE_NAMES[palette_index]
            if store is not None:
                attrs["title"] = title
            key = tuple(sorted(attrs.items()))
            if key in seen:
                continue
            seen.add(key)
            ctr = config.base_ctr + config.color_shift(palette_index)
            for a in config.attributes:
                ctr += a.effects[a.levels.index(attrs[a.name])]
            if with_block:
                mult = imul[attrs[config.interaction_attribute]] if imul else 1.0
                ctr += config.saliency_weight * mult
            image_combos.append(attrs)
            true_ctr[_group_key(image_id, attrs)] = ctr
        combos[image_id] = image_combos

    image_ids = sorted(images)
    records = []
    for j in range(config.n_records):
        rng = np.random.default_rng([config.seed, 5, j])
        image_id = image_ids[int(rng.integers(len(image_ids)))]
        attrs = combos[image_id][int(rng.integers(config.combos_per_image))]
        ctr = true_ctr[_group_key(image_id, attrs)]
        records.append(ImpressionRecord(image_id, dict(attrs),
                                        bool(rng.random() < ctr)))

    truth = GroundTruth(true_ctr, masks, config.to_dict())
    return SynthData(records, images, truth, build_schema(config), store)


def oracle_eval(truth, instances):
    """Rank correlation of planted CTR against empirical CTR: the ceiling any
    model can reach on these instances, up to sampling noise."""
    true = np.array([truth.ctr_of(inst) for inst in instances])
    emp = np.array([inst.y for inst in instances])
    return sprc(true, emp)


def downsample_mask(mask, grid):
    """Fraction of text-region pixels per cell of a grid x grid attention map."""
    size = mask.shape[0]
    cells = mask.reshape(grid, size // grid, grid, size // grid)
    return cells.mean(axis=(1, 3))


def attention_overlap(attn_rows, masks, top_frac=0.1):
    """(median overlap of top-attention positions with the mask, baseline).

    For each row, the top `top_frac` positions by attention weight are
    checked against mask coverage; the uniform baseline is the mask's own
    area fraction. Rows with empty masks are skipped."""
    overlaps, baselines = [], []
    for attn, mask in zip(attn_rows, masks):
        p = attn.size
        grid = int(round(np.sqrt(p)))
        frac = downsample_mask(mask, grid).reshape(-1)
        covered = frac > 0
        if not covered.any():
            continue
        k = max(1, int(round(top_frac * p)))
        top = np.argsort(attn)[::-1][:k]
        overlaps.append(covered[top].mean())
        baselines.append(covered.mean())
    if not overlaps:
        raise GenConfigError("no masked samples to score")
    return float(np.median(overlaps)), float(np.mean(baselines))
