"""Command-line entry point.

Subcommands: datagen, aggregate, stats, train, eval, ablate, gradcheck.
Options resolve as flags > config file ([section] per subcommand in a
flat INI) > builtin defaults. Every run writes a manifest next to its
outputs recording the resolved options, versions, and input/output
digests; re-running from a manifest reproduces the digests exactly.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import platform
import sys

import numpy as np

from . import __version__, checks
from .model import (ConfigError, ModelConfig, StageSpec, Toggles, ablate_grid,
                    assemble_dataset, build_model, evaluate_model, split_dataset,
                    train)
from .pipeline import (AuxSchema, EmbeddingStore, PipelineError, aggregate,
                       instances_from_jsonl, instances_to_jsonl, read_jsonl,
                       write_jsonl)
from .stats import ctr_bars, select_attributes
from .synth import AttributeDef, GenConfig, GroundTruth, generate

PRESETS = {
    "ava-like": {"cbn_hidden": 64, "attn_hidden": 512, "high_dim": 512,
                 "min_impressions": 100},
    "realad-100": {"cbn_hidden": 256, "attn_hidden": 512, "high_dim": 1024,
                   "min_impressions": 100},
    "realad-500": {"cbn_hidden": 256, "attn_hidden": 512, "high_dim": 1024,
                   "min_impressions": 500},
}

DEFAULTS = {
    "datagen": {"seed": 0, "records": 100000, "images": 100, "image_size": 32,
                "base_ctr": 0.2, "combos_per_image": 3, "saliency": 0.06,
                "text_block_prob": 0.6, "include_title": False},
    "aggregate": {"min_impressions": 100},
    "stats": {"alpha": 0.05, "min_impressions": 1},
    "train": {"seed": 0, "loss": "wmse", "toggles": "aux,low,att,high",
              "epochs": 20, "batch_size": 128, "lr": 1e-3, "momentum": 0.9,
              "min_impressions": 100, "dtype": "float32",
              "eval_fraction": 0.2, "backbone_channels": "16,32,64,64",
              "backbone_pools": "1,1,0,0",
              "cbn_hidden": 32, "attn_hidden": 64, "high_dim": 64},
    "eval": {"min_impressions": 100},
    "ablate": {"seed": 0, "loss": "wmse", "epochs": 12, "batch_size": 128,
               "lr": 1e-3, "momentum": 0.9, "min_impressions": 100,
               "dtype": "float32", "eval_fraction": 0.2,
               "backbone_channels": "16,32,64,64", "backbone_pools": "1,1,0,0",
               "cbn_hidden": 32, "attn_hidden": 64, "high_dim": 64},
    "gradcheck": {},
}


class CliError(Exception):
    pass


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_tree(root, skip=("manifest.json",)):
    digests = {}
    for dirpath, _, files in os.walk(root):
        for name in sorted(files):
            rel = os.path.relpath(os.path.join(dirpath, name), root)
            if rel in skip:
                continue
            digests[rel] = _sha256(os.path.join(dirpath, name))
    return digests


def write_manifest(out_dir, command, options, inputs=(), extra=None):
    manifest = {
        "command": command,
        "options": options,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "inputs": {p: _sha256(p) for p in inputs if os.path.exists(p)},
        "outputs": _digest_tree(out_dir),
    }
    if extra:
        manifest["stats"] = extra
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def rerun_argv(manifest, out_dir):
    """Rebuild the argv that reproduces a manifest, pointing at out_dir."""
    argv = [manifest["command"]]
    options = dict(manifest["options"])
    options.pop("preset_name", None)  # preset already expanded into options
    options["out"] = out_dir
    for key, value in options.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            if value:
                argv.append(flag)
        elif value is not None:
            argv.extend([flag, str(value)])
    return argv


# ---------------------------------------------------------------------------
# option plumbing

def _add_common(p):
    p.add_argument("--config", help="INI config file; flags win over it")
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="m2fn")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic ad log")
    _add_common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--records", type=int)
    p.add_argument("--images", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--base-ctr", type=float)
    p.add_argument("--combos-per-image", type=int)
    p.add_argument("--saliency", type=float)
    p.add_argument("--text-block-prob", type=float)
    p.add_argument("--include-title", action="store_true", default=None)

    p = sub.add_parser("aggregate", help="aggregate a raw log into CTR instances")
    _add_common(p)
    p.add_argument("--records", required=True, help="records.jsonl path")
    p.add_argument("--min-impressions", type=int)
    p.add_argument("--preset", choices=sorted(PRESETS))

    p = sub.add_parser("stats", help="attribute selection statistics")
    _add_common(p)
    p.add_argument("--records", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--min-impressions", type=int)

    for name in ("train", "ablate"):
        p = sub.add_parser(name, help=f"{name} on a datagen directory")
        _add_common(p)
        p.add_argument("--data", required=True, help="datagen output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--loss", choices=("wmse", "kld", "emd"))
        if name == "train":
            p.add_argument("--toggles", help="comma list from aux,low,att,high")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--min-impressions", type=int)
        p.add_argument("--dtype", choices=("float32", "float64"))
        p.add_argument("--eval-fraction", type=float)
        p.add_argument("--backbone-channels")
        p.add_argument("--backbone-pools")
        p.add_argument("--cbn-hidden", type=int)
        p.add_argument("--attn-hidden", type=int)
        p.add_argument("--high-dim", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--min-impressions", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_common(p)

    return parser


def resolve_options(args):
    """flags > config file section > builtin defaults."""
    command = args.command
    options = dict(DEFAULTS.get(command, {}))
    if getattr(args, "config", None):
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise CliError(f"cannot read config file {args.config}")
        for section in ("common", command):
            if cp.has_section(section):
                for key, raw in cp.items(section):
                    options[key.replace("-", "_")] = _coerce(raw)
    skip = {"command", "config"}
    for key, value in vars(args).items():
        if key in skip or value is None:
            continue
        options[key] = value
    preset = options.pop("preset", None)
    if preset:
        for key, value in PRESETS[preset].items():
            options[key] = value
        options["preset_name"] = preset
    return options


def _coerce(raw):
    low = raw.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


# ---------------------------------------------------------------------------
# subcommand runners

def cmd_datagen(opts):
    out = opts["out"]
    os.makedirs(out, exist_ok=True)
    config = GenConfig(
        n_images=opts["images"], n_records=opts["records"], seed=opts["seed"],
        image_size=opts["image_size"], base_ctr=opts["base_ctr"],
        combos_per_image=opts["combos_per_image"],
        saliency_weight=opts["saliency"],
        text_block_prob=opts["text_block_prob"],
        include_title=opts["include_title"])
    data = generate(config)
    write_jsonl(os.path.join(out, "records.jsonl"),
                ({"image_id": r.image_id, "attributes": r.attributes,
                  "clicked": r.clicked} for r in data.records))
    ids = sorted(data.images)
    np.save(os.path.join(out, "images.npy"),
            np.stack([data.images[i] for i in ids]))
    with open(os.path.join(out, "image_ids.json"), "w") as fh:
        json.dump(ids, fh)
    data.truth.save(os.path.join(out, "truth.json"))
    with open(os.path.join(out, "schema.json"), "w") as fh:
        json.dump(data.schema.to_dict(), fh)
    with open(os.path.join(out, "gen_config.json"), "w") as fh:
        json.dump(config.to_dict(), fh)
    if data.store is not None:
        data.store.save(os.path.join(out, "store"))
    write_manifest(out, "datagen", opts,
                   extra={"n_records": len(data.records), "n_images": len(ids)})
    return 0


def cmd_aggregate(opts):
    out = opts["out"]
    os.makedirs(out, exist_ok=True)
    rejects = []
    instances = aggregate(read_jsonl(opts["records"]),
                          min_impressions=opts["min_impressions"], rejects=rejects)
    instances_to_jsonl(instances, os.path.join(out, "instances.jsonl"))
    write_manifest(out, "aggregate", opts, inputs=[opts["records"]],
                   extra={"instances": len(instances), "rejects": len(rejects)})
    return 0


def cmd_stats(opts):
    out = opts["out"]
    os.makedirs(out, exist_ok=True)
    records = [obj for obj in read_jsonl(opts["records"]) if isinstance(obj, dict)]
    from .pipeline import ImpressionRecord
    recs = [ImpressionRecord(r["image_id"], r["attributes"], r["clicked"])
            for r in records]
    with open(opts["schema"]) as fh:
        schema = AuxSchema.from_dict(json.load(fh))
    report = select_attributes(recs, schema, alpha=opts["alpha"],
                               min_impressions=opts["min_impressions"])
    doc = report.to_dict()
    doc["bars"] = {a.name: [{"level": lv, "ctr": ctr, "count": cnt}
                            for lv, ctr, cnt in ctr_bars(recs, a.name)]
                   for a in schema.categorical()}
    with open(os.path.join(out, "selection.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
    lines = [f"attribute selection (alpha={report.alpha}); methodology reproduction",
             f"{'attribute':<16}{'anova_F':>12}{'anova_p':>12}{'logit_p':>12}  selected"]
    for t in report.tests:
        fa = f"{t.anova.f:.4f}" if t.anova else "-"
        pa = f"{t.anova.p:.4g}" if t.anova else "-"
        pl = f"{t.logit_p:.4g}" if t.logit_p is not None else "-"
        lines.append(f"{t.attribute:<16}{fa:>12}{pa:>12}{pl:>12}  "
                     f"{'yes' if t.selected else 'no'}")
    with open(os.path.join(out, "selection.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    write_manifest(out, "stats", opts, inputs=[opts["records"], opts["schema"]],
                   extra={"selected": report.selected()})
    return 0


def _load_data_dir(data_dir, min_impressions):
    with open(os.path.join(data_dir, "image_ids.json")) as fh:
        ids = json.load(fh)
    arr = np.load(os.path.join(data_dir, "images.npy"))
    images = dict(zip(ids, arr))
    with open(os.path.join(data_dir, "schema.json")) as fh:
        schema = AuxSchema.from_dict(json.load(fh))
    store_dir = os.path.join(data_dir, "store")
    store = EmbeddingStore.load(store_dir) if os.path.isdir(store_dir) else None
    instances = aggregate(read_jsonl(os.path.join(data_dir, "records.jsonl")),
                          min_impressions=min_impressions)
    if not instances:
        raise CliError(f"no instances at min_impressions={min_impressions}")
    return images, schema, store, instances


def _model_config(opts, schema, head):
    channels = [int(c) for c in str(opts["backbone_channels"]).split(",")]
    pools = [bool(int(p)) for p in str(opts["backbone_pools"]).split(",")]
    if len(channels) != len(pools):
        raise CliError("backbone-channels and backbone-pools lengths differ")
    backbone = tuple(StageSpec(c, pool=p) for c, p in zip(channels, pools))
    return ModelConfig(
        backbone=backbone, cbn_hidden=opts["cbn_hidden"],
        attn_hidden=opts["attn_hidden"], high_dim=opts["high_dim"],
        toggles=Toggles.from_string(opts.get("toggles", "aux,low,att,high")),
        head=head, dim_aux=schema.dim_aux, seed=opts["seed"],
        dtype=opts["dtype"])


def cmd_train(opts):
    out = opts["out"]
    os.makedirs(out, exist_ok=True)
    images, schema, store, instances = _load_data_dir(opts["data"],
                                                      opts["min_impressions"])
    head = "scalar" if opts["loss"] == "wmse" else "distribution"
    dataset = assemble_dataset(instances, images, schema, store, head=head)
    config = _model_config(opts, schema, head)
    model = build_model(config)
    train_set, eval_set = split_dataset(dataset, opts["eval_fraction"], opts["seed"])
    report = train(model, train_set, loss_kind=opts["loss"], epochs=opts["epochs"],
                   batch_size=opts["batch_size"],
                   optimizer_spec={"lr": opts["lr"], "momentum": opts["momentum"]},
                   seed=opts["seed"], eval_dataset=eval_set)
    model.save(os.path.join(out, "checkpoint.json"))
    write_jsonl(os.path.join(out, "report.jsonl"), report.to_jsonl_records())
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(report.final_metrics, fh, indent=2)
    write_manifest(out, "train", opts,
                   inputs=[os.path.join(opts["data"], "records.jsonl")],
                   extra={"final_metrics": report.final_metrics})
    return 0


def cmd_eval(opts):
    out = opts["out"]
    os.makedirs(out, exist_ok=True)
    from .checkpoint import load_checkpoint
    tensors, meta = load_checkpoint(opts["checkpoint"])
    config = ModelConfig.from_dict(meta["config"])
    model = build_model(config)
    model.load_state(tensors)
    images, schema, store, instances = _load_data_dir(opts["data"],
                                                      opts["min_impressions"])
    dataset = assemble_dataset(instances, images, schema, store, head=config.head)
    metrics = evaluate_model(model, dataset).to_dict()
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2)
    write_manifest(out, "eval", opts,
                   inputs=[opts["checkpoint"],
                           os.path.join(opts["data"], "records.jsonl")],
                   extra={"metrics": metrics})
    return 0


def cmd_ablate(opts):
    out = opts["out"]
    os.makedirs(out, exist_ok=True)
    images, schema, store, instances = _load_data_dir(opts["data"],
                                                      opts["min_impressions"])
    head = "scalar" if opts["loss"] == "wmse" else "distribution"
    dataset = assemble_dataset(instances, images, schema, store, head=head)
    base = _model_config({**opts, "toggles": "none"}, schema, head)
    rows = ablate_grid(base, dataset, loss_kind=opts["loss"], epochs=opts["epochs"],
                       batch_size=opts["batch_size"],
                       optimizer_spec={"lr": opts["lr"], "momentum": opts["momentum"]},
                       seed=opts["seed"], eval_fraction=opts["eval_fraction"])
    write_jsonl(os.path.join(out, "ablation.jsonl"), rows)
    header = f"{'Aux':<5}{'Low':<5}{'Att':<5}{'High':<6}{'SPRC':>8}{'LCC':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{'O' if r['aux'] else 'x':<5}{'O' if r['low'] else 'x':<5}"
                     f"{'O' if r['att'] else 'x':<5}{'O' if r['high'] else 'x':<6}"
                     f"{r['sprc']:>8.3f}{r['lcc']:>8.3f}")
    with open(os.path.join(out, "ablation.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    write_manifest(out, "ablate", opts,
                   inputs=[os.path.join(opts["data"], "records.jsonl")],
                   extra={"rows": len(rows)})
    return 0


def cmd_gradcheck(opts):
    out = opts["out"]
    os.makedirs(out, exist_ok=True)
    results = checks.gradient_suite()
    with open(os.path.join(out, "gradcheck.json"), "w") as fh:
        json.dump({"tolerance": checks.TOLERANCE, "results": results}, fh, indent=2)
    worst = max(r["error"] for r in results)
    for r in results:
        status = "ok" if r["ok"] else "FAIL"
        print(f"{r['name']:<24}{r['error']:.3e}  {status}")
    write_manifest(out, "gradcheck", opts, extra={"worst": worst})
    if worst >= checks.TOLERANCE:
        print(f"gradcheck FAILED: worst error {worst:.3e}", file=sys.stderr)
        return 1
    print(f"gradcheck passed: worst error {worst:.3e}")
    return 0


RUNNERS = {
    "datagen": cmd_datagen,
    "aggregate": cmd_aggregate,
    "stats": cmd_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def run(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        opts = resolve_options(args)
        return RUNNERS[args.command](opts)
    except (CliError, ConfigError, PipelineError, FileNotFoundError, KeyError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
