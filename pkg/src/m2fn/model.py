"""Full network assembly with togglable fusion modules, plus training,
evaluation, and the 8-row ablation grid.

Structure: conv1 -> (conditional BN if `low` else BN) -> relu -> remaining
conv stages -> (spatial attention if `att` else global average pool) ->
(high-level fusion if `high`, else concat aux onto the head's hidden
activation if `aux`, else nothing) -> head MLP -> scalar or 10-bucket
softmax.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .fusion import CbnBlock, HighFusionBlock, SpatialAttentionBlock
from .objectives import (MetricReport, ScoreDistribution, emd_loss_tensor,
                         evaluate, kld_loss, weighted_mse)
from .pipeline import ctr_to_distribution, encode_batch
from .tensor import NumericError

DIST_BUCKETS = 10


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class StageSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pool: bool = True


# Desk-scale default: 4 stages, 64x64 input trains on a CPU in minutes.
DEFAULT_BACKBONE = (StageSpec(16), StageSpec(32), StageSpec(64),
                    StageSpec(64, pool=False))


@dataclass(frozen=True)
class Toggles:
    aux: bool = False
    low: bool = False
    att: bool = False
    high: bool = False

    def validate(self):
        if (self.low or self.att or self.high) and not self.aux:
            raise ConfigError("low/att/high toggles require aux")

    @property
    def label(self):
        return "".join("O" if t else "x"
                       for t in (self.aux, self.low, self.att, self.high))

    @classmethod
    def from_string(cls, text):
        """Parse 'aux,low,att,high' style toggle lists ('' or 'none' = all off)."""
        text = (text or "").strip().lower()
        names = set() if text in ("", "none") else {p.strip() for p in text.split(",")}
        unknown = names - {"aux", "low", "att", "high"}
        if unknown:
            raise ConfigError(f"unknown toggles: {sorted(unknown)}")
        return cls(aux="aux" in names, low="low" in names,
                   att="att" in names, high="high" in names)


# Ablation grid rows, image-only first, everything on last.
TABLE4_ROWS = (
    Toggles(False, False, False, False),
    Toggles(True, False, False, False),
    Toggles(True, True, False, False),
    Toggles(True, False, True, False),
    Toggles(True, False, False, True),
    Toggles(True, True, True, False),
    Toggles(True, True, False, True),
    Toggles(True, True, True, True),
)


@dataclass(frozen=True)
class ModelConfig:
    backbone: tuple = DEFAULT_BACKBONE
    cbn_hidden: int = 64
    attn_hidden: int = 512
    high_dim: int = 512
    toggles: Toggles = Toggles()
    head: str = "scalar"
    dim_aux: int = 0
    in_channels: int = 3
    seed: int = 0
    dtype: str = "float64"

    def validate(self):
        self.toggles.validate()
        if self.head not in ("scalar", "distribution"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.toggles.aux and self.dim_aux < 1:
            raise ConfigError("aux toggle requires dim_aux >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        if not self.backbone:
            raise ConfigError("backbone needs at least one stage")
        for w in (self.cbn_hidden, self.attn_hidden, self.high_dim):
            if w < 1:
                raise ConfigError("hidden widths must be positive")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def out_dim(self):
        return 1 if self.head == "scalar" else DIST_BUCKETS

    def to_dict(self):
        return {
            "backbone": [{"out_channels": s.out_channels, "kernel": s.kernel,
                          "stride": s.stride, "pool": s.pool} for s in self.backbone],
            "cbn_hidden": self.cbn_hidden, "attn_hidden": self.attn_hidden,
            "high_dim": self.high_dim,
            "toggles": {"aux": self.toggles.aux, "low": self.toggles.low,
                        "att": self.toggles.att, "high": self.toggles.high},
            "head": self.head, "dim_aux": self.dim_aux,
            "in_channels": self.in_channels, "seed": self.seed, "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            backbone=tuple(StageSpec(**s) for s in doc["backbone"]),
            cbn_hidden=doc["cbn_hidden"], attn_hidden=doc["attn_hidden"],
            high_dim=doc["high_dim"], toggles=Toggles(**doc["toggles"]),
            head=doc["head"], dim_aux=doc["dim_aux"],
            in_channels=doc["in_channels"], seed=doc["seed"], dtype=doc["dtype"])


@dataclass
class Prediction:
    """Batch prediction: scalar scores or 10-bucket rows summing to 1."""

    kind: str
    scores: np.ndarray | None = None
    dist: np.ndarray | None = None
    bucket_values: np.ndarray | None = None


class M2FN:
    """The fusion network. Parameters live under stable dot paths
    (conv1.*, cbn.*/bn1.*, attn.*, high.*, head.*) for checkpoints."""

    def __init__(self, config):
        config.validate()
        self.config = config
        t = config.toggles
        dtype = config.np_dtype
        rng = np.random.default_rng([config.seed, 2024])
        self.convs = []
        self.norms = []
        cin = config.in_channels
        for i, stage in enumerate(config.backbone):
            self.convs.append(nn.Conv2d(rng, cin, stage.out_channels,
                                        kernel=stage.kernel, stride=stage.stride,
                                        dtype=dtype, use_bias=False))
            if i == 0 and t.low:
                self.norms.append(CbnBlock(rng, stage.out_channels, config.dim_aux,
                                           config.cbn_hidden, dtype=dtype))
            else:
                self.norms.append(nn.BatchNorm(stage.out_channels, dtype=dtype))
            cin = stage.out_channels
        self.visual_dim = cin
        self.attn = (SpatialAttentionBlock(rng, cin, config.dim_aux,
                                           config.attn_hidden, dtype=dtype)
                     if t.att else None)
        self.high = (HighFusionBlock(rng, cin, config.dim_aux, config.high_dim,
                                     dtype=dtype)
                     if t.high else None)
        head_in = config.high_dim if t.high else cin
        concat_dim = config.dim_aux if (t.aux and not t.high) else 0
        self.head_fc1 = nn.Dense(rng, head_in, config.high_dim, dtype=dtype)
        self.head_fc2 = nn.Dense(rng, config.high_dim + concat_dim,
                                 config.out_dim, dtype=dtype)

    # -- forward ----------------------------------------------------------

    def _as_input(self, arr, name, ndim):
        if isinstance(arr, T.Tensor) and arr.dtype == self.config.np_dtype:
            t = arr  # keep the caller's tensor so gradients can reach it
        else:
            data = np.asarray(getattr(arr, "data", arr), dtype=self.config.np_dtype)
            t = T.tensor(data)
        if t.ndim != ndim:
            raise ConfigError(f"{name}: expected {ndim}-D input, got shape {t.shape}")
        return t

    def forward(self, images, aux=None, training=True):
        """Returns (output tensor, attention tensor or None).

        Scalar head gives [N]; distribution head gives [N, 10] softmax rows.
        `aux` may be None or zero-width whenever the aux toggle is off.
        """
        cfg = self.config
        t = cfg.toggles
        x = self._as_input(images, "images", 4)
        n = x.shape[0]
        if t.aux:
            if aux is None:
                raise ConfigError("aux toggle is on but no aux input given")
            aux_t = self._as_input(aux, "aux", 2)
            if aux_t.shape != (n, cfg.dim_aux):
                raise ConfigError(f"aux: expected shape ({n}, {cfg.dim_aux}), "
                                  f"got {aux_t.shape}")
        else:
            aux_t = None
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms), start=1):
            x = self._layer(f"conv{i}", conv, x)
            if isinstance(norm, CbnBlock):
                x = self._layer("cbn", norm, x, aux_t, training)
            else:
                x = self._layer(f"bn{i}", norm, x, training)
            x = T.relu(x)
            if cfg.backbone[i - 1].pool:
                x = self._layer(f"pool{i}", T.max_pool2d, x, 2)
        attn = None
        if t.att:
            pooled, attn = self._layer("attn", self.attn, x, aux_t)
        else:
            pooled = T.reduce_mean(x, axis=(2, 3))
        if t.high:
            z = self._layer("high", self.high, pooled, aux_t)
        else:
            z = pooled
        h = T.relu(self._layer("head.fc1", self.head_fc1, z))
        if t.aux and not t.high:
            h = T.concat([h, aux_t], axis=1)
        out = self._layer("head.fc2", self.head_fc2, h)
        if cfg.head == "scalar":
            return T.reshape(out, (n,)), attn
        return T.softmax_lastdim(out), attn

    @staticmethod
    def _layer(name, fn, *args):
        try:
            return fn(*args)
        except NumericError as exc:
            raise NumericError(f"layer {name}: {exc}") from None

    def predict(self, images, aux=None, bucket_values=None):
        out, _ = self.forward(images, aux, training=False)
        if self.config.head == "scalar":
            return Prediction(kind="scalar", scores=out.data.copy())
        return Prediction(kind="distribution", dist=out.data.copy(),
                          bucket_values=bucket_values)

    # -- state ------------------------------------------------------------

    def _tree(self):
        tree = {}
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms), start=1):
            tree[f"conv{i}"] = conv
            tree["cbn" if isinstance(norm, CbnBlock) else f"bn{i}"] = norm
        if self.attn is not None:
            tree["attn"] = self.attn
        if self.high is not None:
            tree["high"] = self.high
        tree["head.fc1"] = self.head_fc1
        tree["head.fc2"] = self.head_fc2
        return tree

    def parameters(self):
        return nn.flatten_tree({name: block.parameters()
                                for name, block in self._tree().items()})

    def buffers(self):
        return nn.flatten_tree({name: block.buffers()
                                for name, block in self._tree().items()})

    def save(self, path, meta=None):
        meta = dict(meta or {})
        meta.setdefault("config", self.config.to_dict())
        save_checkpoint(path, self.parameters(), self.buffers(), meta=meta)

    def load_state(self, tensors):
        params = self.parameters()
        buffers = self.buffers()
        expected = set(params) | set(buffers)
        got = set(tensors)
        if expected != got:
            missing, extra = sorted(expected - got), sorted(got - expected)
            raise CheckpointError(f"state mismatch; missing={missing}, unexpected={extra}")
        for name, p in params.items():
            if tensors[name].shape != p.shape:
                raise CheckpointError(f"{name}: shape {tensors[name].shape} != {p.shape}")
            p.data = tensors[name].astype(self.config.np_dtype)
        for name, b in buffers.items():
            b[...] = tensors[name].astype(self.config.np_dtype)

    def load(self, path):
        tensors, meta = load_checkpoint(path)
        self.load_state(tensors)
        return meta


def build_model(config):
    """Deterministic construction: same config and seed, same parameters."""
    return M2FN(config)


def forward(model, images, aux=None, mode="train"):
    return model.forward(images, aux, training=(mode == "train"))


# ---------------------------------------------------------------------------
# datasets

@dataclass
class ModelDataset:
    """Model-ready batch source: unique images plus per-instance rows."""

    images: np.ndarray
    image_index: np.ndarray
    aux: np.ndarray
    y: np.ndarray
    w: np.ndarray
    dist_targets: np.ndarray | None = None
    bucket_values: np.ndarray | None = None

    @property
    def n(self):
        return len(self.y)

    def subset(self, idx):
        return ModelDataset(
            images=self.images, image_index=self.image_index[idx],
            aux=self.aux[idx], y=self.y[idx], w=self.w[idx],
            dist_targets=None if self.dist_targets is None else self.dist_targets[idx],
            bucket_values=self.bucket_values)

    def batch_images(self, idx):
        return self.images[self.image_index[idx]]


def assemble_dataset(instances, images_by_id, schema, store=None,
                     head="scalar", shape_coef=1.0):
    """Encode aggregated instances against a schema into a ModelDataset.

    Distribution heads get per-instance log-normal bucket targets."""
    if not instances:
        raise ConfigError("no instances to assemble")
    ids = sorted(images_by_id)
    id_index = {img: i for i, img in enumerate(ids)}
    images = np.stack([np.asarray(images_by_id[i], dtype=np.float64) for i in ids])
    image_index = np.array([id_index[inst.image_id] for inst in instances])
    aux = encode_batch(instances, schema, store)
    y = np.array([inst.y for inst in instances], dtype=np.float64)
    w = np.array([inst.w for inst in instances], dtype=np.float64)
    dist_targets = bucket_values = None
    if head == "distribution":
        dists = [ctr_to_distribution(inst.y, inst.w, shape_coef=shape_coef)
                 for inst in instances]
        dist_targets = np.stack([d.buckets for d in dists])
        bucket_values = dists[0].bucket_values
    return ModelDataset(images, image_index, aux, y, w, dist_targets, bucket_values)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainReport:
    loss_kind: str
    seed: int
    epochs: list = field(default_factory=list)
    final_metrics: dict | None = None

    def to_jsonl_records(self):
        rows = [{"epoch": e["epoch"], "loss": e["loss"], **(e.get("metrics") or {})}
                for e in self.epochs]
        if self.final_metrics is not None:
            rows.append({"final": True, **self.final_metrics})
        return rows


def _make_loss(model, out, idx, dataset, loss_kind, weights):
    if loss_kind == "wmse":
        return weighted_mse(out, dataset.y[idx], weights[idx])
    target = dataset.dist_targets[idx]
    if loss_kind == "kld":
        return kld_loss(target, out)
    return emd_loss_tensor(target, out)


def train(model, dataset, loss_kind="wmse", epochs=100, batch_size=128,
          optimizer_spec=None, seed=0, eval_dataset=None, weight_scale="mean"):
    """SGD training loop; deterministic given the seed.

    The impression weights feed the loss scaled by 1/mean(w) by default
    (a constant rescaling of the objective that keeps learning rates
    comparable across datasets; pass weight_scale='none' for the raw sum).
    Remainder batches of size 1 are dropped (train-mode BN needs 2+ rows).
    """
    if dataset.n < 1:
        raise ConfigError("empty dataset")
    if loss_kind not in ("wmse", "kld", "emd"):
        raise ConfigError(f"unknown loss {loss_kind!r}")
    if (loss_kind == "wmse") != (model.config.head == "scalar"):
        raise ConfigError(f"loss {loss_kind!r} incompatible with {model.config.head!r} head")
    if loss_kind in ("kld", "emd") and dataset.dist_targets is None:
        raise ConfigError(f"loss {loss_kind!r} needs distribution targets in the dataset")
    spec = {"lr": 1e-3, "momentum": 0.9}
    spec.update(optimizer_spec or {})
    opt = nn.SGD(model.parameters(), **spec)
    weights = dataset.w / dataset.w.mean() if weight_scale == "mean" else dataset.w
    rng = np.random.default_rng([seed, 404])
    report = TrainReport(loss_kind=loss_kind, seed=seed)
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(dataset.n)
        total, seen = 0.0, 0
        for lo in range(0, dataset.n, batch_size):
            idx = perm[lo:lo + batch_size]
            if len(idx) < 2:
                continue
            out, _ = model.forward(dataset.batch_images(idx), dataset.aux[idx],
                                   training=True)
            loss = _make_loss(model, out, idx, dataset, loss_kind, weights)
            loss.backward()
            opt.step()
            opt.zero_grad()
            total += loss.item() * len(idx)
            seen += len(idx)
        entry = {"epoch": epoch, "loss": total / max(seen, 1)}
        if eval_dataset is not None:
            entry["metrics"] = evaluate_model(model, eval_dataset).to_dict()
        report.epochs.append(entry)
    final_on = eval_dataset if eval_dataset is not None else dataset
    report.final_metrics = evaluate_model(model, final_on).to_dict()
    return report


def _predict_rows(model, dataset, batch_size=256):
    outs = []
    for lo in range(0, dataset.n, batch_size):
        idx = np.arange(lo, min(lo + batch_size, dataset.n))
        out, _ = model.forward(dataset.batch_images(idx), dataset.aux[idx],
                               training=False)
        outs.append(out.data.copy())
    return np.concatenate(outs, axis=0)


def evaluate_model(model, dataset, batch_size=256):
    """MetricReport of the model against the dataset's targets."""
    preds = _predict_rows(model, dataset, batch_size)
    if model.config.head == "scalar":
        return evaluate(preds, dataset.y)
    values = dataset.bucket_values
    pred_dists = [ScoreDistribution(row / row.sum(), values) for row in preds]
    true_dists = [ScoreDistribution(row, values) for row in dataset.dist_targets]
    return evaluate(pred_dists, true_dists)


# ---------------------------------------------------------------------------
# ablation grid

def split_dataset(dataset, eval_fraction=0.2, seed=0):
    rng = np.random.default_rng([seed, 55])
    perm = rng.permutation(dataset.n)
    n_eval = max(1, int(round(dataset.n * eval_fraction)))
    return dataset.subset(perm[n_eval:]), dataset.subset(perm[:n_eval])


def _ablate_cell(args):
    (config, train_set, eval_set, loss_kind, epochs, batch_size,
     optimizer_spec, seed) = args
    model = build_model(config)
    train(model, train_set, loss_kind=loss_kind, epochs=epochs,
          batch_size=batch_size, optimizer_spec=optimizer_spec, seed=seed)
    report = evaluate_model(model, eval_set)
    return {"label": config.toggles.label,
            "aux": config.toggles.aux, "low": config.toggles.low,
            "att": config.toggles.att, "high": config.toggles.high,
            "sprc": report.sprc_mean, "lcc": report.lcc_mean}


def worker_count(n_tasks):
    """Workers for grid cells, capped by the M2FN_THREADS env var."""
    cap = os.environ.get("M2FN_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_tasks))


def ablate_grid(base_config, dataset, rows=TABLE4_ROWS, loss_kind="wmse",
                epochs=20, batch_size=128, optimizer_spec=None, seed=0,
                eval_fraction=0.2):
    """Train/evaluate one model per toggle row under shared seeds.

    All rows share the data split, the parameter seed (from base_config),
    and the shuffling seed, so row differences isolate the toggles."""
    train_set, eval_set = split_dataset(dataset, eval_fraction, seed)
    tasks = [(replace(base_config, toggles=row), train_set, eval_set,
              loss_kind, epochs, batch_size, optimizer_spec, seed)
             for row in rows]
    workers = worker_count(len(tasks))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_ablate_cell, tasks))
    return [_ablate_cell(t) for t in tasks]
