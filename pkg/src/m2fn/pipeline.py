"""Raw click logs to model-ready instances.

Covers CTR aggregation with impression thresholds, rare-level merging,
auxiliary one-hot/embedding encoding, the embedding store file format,
and log-normal CTR bucketization. Dominant-color extraction lives in
`color.py`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .objectives import ScoreDistribution

CTR_FLOOR = 1e-6


class PipelineError(Exception):
    pass


class SchemaError(PipelineError):
    pass


class StoreError(PipelineError):
    pass


@dataclass
class ImpressionRecord:
    """One ad-exposure event."""

    image_id: str
    attributes: dict
    clicked: bool


@dataclass
class AggregatedInstance:
    """One unique (image, attribute tuple) exposure with its CTR target."""

    image_id: str
    attributes: dict
    y: float
    w: int
    clicks: int


def _coerce_record(obj):
    """Validate one raw entry; returns ImpressionRecord or raises ValueError."""
    if isinstance(obj, ImpressionRecord):
        if not isinstance(obj.image_id, str) or not isinstance(obj.attributes, dict) \
                or not isinstance(obj.clicked, bool):
            raise ValueError("bad field types")
        return obj
    if not isinstance(obj, dict):
        raise ValueError("not a record object")
    try:
        image_id = obj["image_id"]
        attributes = obj["attributes"]
        clicked = obj["clicked"]
    except KeyError as exc:
        raise ValueError(f"missing field {exc}") from None
    if not isinstance(image_id, str):
        raise ValueError("image_id must be a string")
    if not isinstance(attributes, dict):
        raise ValueError("attributes must be a mapping")
    if not isinstance(clicked, bool):
        raise ValueError("clicked must be a boolean")
    return ImpressionRecord(image_id, attributes, clicked)


def _group_key(image_id, attributes):
    return (image_id, tuple(sorted((str(k), str(v)) for k, v in attributes.items())))


def aggregate(records, min_impressions, rejects=None):
    """Group exposures by (image, full attribute tuple) into CTR instances.

    y = clicks / impressions per group; groups below `min_impressions` are
    dropped. Malformed entries are skipped; when a `rejects` list is given,
    (1-based index, reason) pairs are appended so a caller can report line
    numbers. Output order is sorted by group key.
    """
    if min_impressions < 1:
        raise PipelineError(f"min_impressions must be positive, got {min_impressions}")
    groups = {}
    for lineno, obj in enumerate(records, start=1):
        try:
            rec = _coerce_record(obj)
        except ValueError as exc:
            if rejects is not None:
                rejects.append((lineno, str(exc)))
            continue
        key = _group_key(rec.image_id, rec.attributes)
        slot = groups.get(key)
        if slot is None:
            groups[key] = [1, int(rec.clicked), dict(rec.attributes)]
        else:
            slot[0] += 1
            slot[1] += int(rec.clicked)
    out = []
    for key in sorted(groups):
        w, clicks, attrs = groups[key]
        if w < min_impressions:
            continue
        out.append(AggregatedInstance(image_id=key[0], attributes=attrs,
                                      y=clicks / w, w=w, clicks=clicks))
    return out


def read_jsonl(path):
    """Yield parsed JSON objects per line; unparseable lines yield the raw
    string so `aggregate` can count them as rejects at the right line."""
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                yield line


def write_jsonl(path, objects):
    with open(path, "w") as fh:
        for obj in objects:
            fh.write(json.dumps(obj) + "\n")


def read_csv_records(path):
    """CSV reader with a declared header: image_id, clicked, then one column
    per attribute. clicked accepts 0/1/true/false."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if "image_id" not in cols or "clicked" not in cols:
            raise PipelineError("csv header must declare image_id and clicked columns")
        attr_cols = [c for c in cols if c not in ("image_id", "clicked")]
        for row in reader:
            raw = str(row["clicked"]).strip().lower()
            if raw in ("1", "true"):
                clicked = True
            elif raw in ("0", "false"):
                clicked = False
            else:
                yield row  # malformed; aggregate rejects it
                continue
            yield ImpressionRecord(row["image_id"],
                                   {c: row[c] for c in attr_cols}, clicked)


def instances_to_jsonl(instances, path):
    write_jsonl(path, ({"image_id": i.image_id, "attributes": i.attributes,
                        "y": i.y, "w": i.w, "clicks": i.clicks} for i in instances))


def instances_from_jsonl(path):
    out = []
    for obj in read_jsonl(path):
        out.append(AggregatedInstance(obj["image_id"], obj["attributes"],
                                      obj["y"], obj["w"], obj["clicks"]))
    return out


# ---------------------------------------------------------------------------
# rare-level merging

def natural_level_order(levels):
    """Sort levels numerically when possible, else lexicographically."""
    def key(lv):
        try:
            return (0, float(lv), "")
        except ValueError:
            return (1, 0.0, lv)
    return sorted(levels, key=key)


def merge_rare_levels(instances, attribute, impression_threshold=50000, ordinal=False):
    """Fold levels with too few impressions into their closest level.

    Ordinal attributes (age, time, month, weekday) absorb into the adjacent
    level with the larger impression total; nominal attributes absorb into
    the level with the nearest mean CTR. Repeats until every surviving level
    clears the threshold or one level remains; merged groups re-aggregate.
    """
    instances = list(instances)
    while True:
        totals, clicks = {}, {}
        for inst in instances:
            lv = inst.attributes[attribute]
            totals[lv] = totals.get(lv, 0) + inst.w
            clicks[lv] = clicks.get(lv, 0) + inst.clicks
        levels = natural_level_order(totals)
        if len(levels) <= 1:
            return instances
        rare = [lv for lv in levels if totals[lv] < impression_threshold]
        if not rare:
            return instances
        victim = min(rare, key=lambda lv: (totals[lv], levels.index(lv)))
        vidx = levels.index(victim)
        if ordinal:
            neighbors = [lv for lv in (levels[vidx - 1] if vidx > 0 else None,
                                       levels[vidx + 1] if vidx + 1 < len(levels) else None)
                         if lv is not None]
            target = max(neighbors, key=lambda lv: totals[lv])
        else:
            vctr = clicks[victim] / totals[victim]
            others = [lv for lv in levels if lv != victim]
            target = min(others, key=lambda lv: (abs(clicks[lv] / totals[lv] - vctr),
                                                 levels.index(lv)))
        merged = {}
        for inst in instances:
            attrs = dict(inst.attributes)
            if attrs[attribute] == victim:
                attrs[attribute] = target
            key = _group_key(inst.image_id, attrs)
            slot = merged.get(key)
            if slot is None:
                merged[key] = [inst.w, inst.clicks, attrs, inst.image_id]
            else:
                slot[0] += inst.w
                slot[1] += inst.clicks
        instances = [AggregatedInstance(img, attrs, c / w, w, c)
                     for key in sorted(merged)
                     for w, c, attrs, img in [merged[key]]]


# ---------------------------------------------------------------------------
# auxiliary schema and encoding

@dataclass
class CategoricalAttribute:
    name: str
    levels: tuple

    def __post_init__(self):
        self.levels = tuple(str(lv) for lv in self.levels)
        if len(set(self.levels)) != len(self.levels):
            raise SchemaError(f"{self.name}: duplicate levels")

    @property
    def dim(self):
        return len(self.levels)


@dataclass
class TextEmbeddingAttribute:
    name: str
    dim: int


@dataclass
class AuxSchema:
    """Ordered attribute layout defining the encoded aux vector."""

    attributes: list = field(default_factory=list)

    @property
    def dim_aux(self):
        return sum(a.dim for a in self.attributes)

    def categorical(self):
        return [a for a in self.attributes if isinstance(a, CategoricalAttribute)]

    def to_dict(self):
        out = []
        for a in self.attributes:
            if isinstance(a, CategoricalAttribute):
                out.append({"kind": "categorical", "name": a.name, "levels": list(a.levels)})
            else:
                out.append({"kind": "text", "name": a.name, "dim": a.dim})
        return {"attributes": out}

    @classmethod
    def from_dict(cls, doc):
        attrs = []
        for a in doc["attributes"]:
            if a["kind"] == "categorical":
                attrs.append(CategoricalAttribute(a["name"], tuple(a["levels"])))
            elif a["kind"] == "text":
                attrs.append(TextEmbeddingAttribute(a["name"], int(a["dim"])))
            else:
                raise SchemaError(f"unknown attribute kind {a['kind']!r}")
        return cls(attrs)


# Default ad-log schema: nine categorical attributes plus three 768-dim text
# slots (title, description, ocr). The categorical level counts are a repo
# convention chosen so the encoded width is 2383 with 2304 linguistic dims.
def default_realad_schema():
    def lv(prefix, n):
        return tuple(f"{prefix}{i}" for i in range(n))

    return AuxSchema([
        CategoricalAttribute("gender", ("female", "male")),
        CategoricalAttribute("age", lv("age", 8)),
        CategoricalAttribute("month", tuple(str(m) for m in range(1, 13))),
        CategoricalAttribute("weekday", ("mon", "tue", "wed", "thu", "fri", "sat", "sun")),
        CategoricalAttribute("time", lv("t", 8)),
        CategoricalAttribute("position", lv("pos", 6)),
        CategoricalAttribute("category2", lv("c2_", 8)),
        CategoricalAttribute("category3", lv("c3_", 18)),
        CategoricalAttribute("dominant_color", ("black", "white", "red", "orange", "yellow",
                                                "green", "cyan", "blue", "purple", "gray")),
        TextEmbeddingAttribute("title", 768),
        TextEmbeddingAttribute("description", 768),
        TextEmbeddingAttribute("ocr", 768),
    ])


class EmbeddingStore:
    """Fixed-dimension text -> vector lookups, persisted as one .npy per
    entry plus an index file with checksums."""

    def __init__(self, dim, allow_missing=False):
        self.dim = int(dim)
        self.allow_missing = allow_missing
        self._vectors = {}

    def __len__(self):
        return len(self._vectors)

    def add(self, text, vector):
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise StoreError(f"vector for {text!r} has shape {vector.shape}, "
                             f"store dim is {self.dim}")
        self._vectors[text] = vector

    def get(self, text):
        vec = self._vectors.get(text)
        if vec is None:
            if self.allow_missing:
                return np.zeros(self.dim, dtype=np.float64)
            raise StoreError(f"no embedding stored for text {text!r}")
        return vec

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        entries = {}
        for text, vec in self._vectors.items():
            h = hashlib.sha256(text.encode()).hexdigest()
            fname = f"{h}.npy"
            fpath = os.path.join(directory, fname)
            np.save(fpath, vec)
            with open(fpath, "rb") as fh:
                digest = hashlib.sha256(fh.read()).hexdigest()
            entries[h] = {"file": fname, "sha256": digest, "text": text}
        with open(os.path.join(directory, "index.json"), "w") as fh:
            json.dump({"dim": self.dim, "entries": entries}, fh)

    @classmethod
    def load(cls, directory, allow_missing=False):
        with open(os.path.join(directory, "index.json")) as fh:
            index = json.load(fh)
        store = cls(index["dim"], allow_missing=allow_missing)
        for h, entry in index["entries"].items():
            fpath = os.path.join(directory, entry["file"])
            with open(fpath, "rb") as fh:
                digest = hashlib.sha256(fh.read()).hexdigest()
            if digest != entry["sha256"]:
                raise StoreError(f"checksum mismatch for {entry['file']}")
            vec = np.load(fpath)
            if vec.shape != (store.dim,):
                raise StoreError(f"{entry['file']}: shape {vec.shape} != ({store.dim},)")
            store.add(entry["text"], vec)
        return store


def encode_aux(instance, schema, store=None):
    """Concatenate one-hot categorical blocks and embedding slots in schema order."""
    parts = []
    for attr in schema.attributes:
        if isinstance(attr, CategoricalAttribute):
            value = instance.attributes.get(attr.name)
            if value is None:
                raise SchemaError(f"instance missing attribute {attr.name!r}")
            block = np.zeros(attr.dim, dtype=np.float64)
            try:
                block[attr.levels.index(str(value))] = 1.0
            except ValueError:
                raise SchemaError(f"unknown level {value!r} for attribute {attr.name!r}") from None
            parts.append(block)
        else:
            if store is None:
                raise StoreError(f"schema has text attribute {attr.name!r} but no store given")
            text = instance.attributes.get(attr.name)
            if text is None:
                raise SchemaError(f"instance missing attribute {attr.name!r}")
            vec = store.get(str(text))
            if vec.shape != (attr.dim,):
                raise StoreError(f"{attr.name}: store dim {vec.shape} != ({attr.dim},)")
            parts.append(vec)
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.float64)


def encode_batch(instances, schema, store=None):
    return np.stack([encode_aux(inst, schema, store) for inst in instances])


# ---------------------------------------------------------------------------
# log-normal CTR bucketization

def ctr_bucket_edges(buckets=10):
    """Geometric bucket edges spanning the CTR range [1e-6, 1]."""
    return np.logspace(math.log10(CTR_FLOOR), 0.0, buckets + 1)


def ctr_bucket_values(buckets=10):
    edges = ctr_bucket_edges(buckets)
    return np.sqrt(edges[:-1] * edges[1:])


def ctr_to_distribution(y, w, buckets=10, shape_coef=1.0):
    """Spread a scalar CTR into a 10-bucket distribution via a log-normal.

    Median is y (floor-clamped at 1e-6), shape is shape_coef / sqrt(w), so
    heavier-impression instances concentrate. Mass is integrated over the
    geometric bucket grid and renormalized. Note the grid is coarse (each
    bucket spans ~4x), so the discretized mean quantizes toward the
    representative value of the bucket holding y once w is large.
    """
    if w < 1:
        raise PipelineError(f"impression count must be >= 1, got {w}")
    y_c = min(max(float(y), CTR_FLOOR), 1.0)
    mu = math.log(y_c)
    sigma = shape_coef / math.sqrt(w)
    edges = ctr_bucket_edges(buckets)
    z = (np.log(edges) - mu) / sigma
    cdf = ndtr(z)
    masses = np.diff(cdf)
    total = masses.sum()
    if total <= 0:
        raise PipelineError("log-normal mass vanished on the bucket grid")
    return ScoreDistribution(masses / total, ctr_bucket_values(buckets))
