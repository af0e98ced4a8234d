"""``ctn`` command line: pretrain, finetune, eval, relevance, occlude, gendata, gradcheck.

Every option may also come from a JSON file given with ``--config``; flags
given on the command line win.  Exit status is 0 on success, 1 on numeric
or runtime failure and 2 on usage, configuration or data errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    activation_map,
    filter_relevance,
    occlusion_sensitivity,
    overlay_start,
    plot_description,
    write_plot_description,
    write_relevance_report,
)
from .checkpoint import file_hash, load_checkpoint, save_checkpoint
from .data import (
    Dataset,
    ManifestEntry,
    gen_cbf,
    gen_mixed_scale,
    gen_two_patterns,
    load_manifest_datasets,
    load_ucr_file,
    merge,
    train_test_split,
    write_manifest,
    read_manifest,
    write_ucr_file,
)
from .errors import CtnError, NumericError
from .layers import TYPE1, TYPE2
from .model import DEFAULT_LENGTHS, ArchConfig, build_ctn, new_head
from .optim import finite_diff_check
from .train import FinetuneConfig, PretrainConfig, ValidationTask, evaluate, finetune_target, pretrain

log = logging.getLogger("convtimenet")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(CtnError, ValueError):
    pass


def _int_list(s):
    return [int(v) for v in str(s).split(",")] if not isinstance(s, list) else [int(v) for v in s]


def _str_list(s):
    return str(s).split(",") if not isinstance(s, list) else [str(v) for v in s]


def _bool(s):
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes", "on"):
        return True
    if str(s).lower() in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {s!r}")


def _opt_float(s):
    return None if s is None or str(s).lower() == "none" else float(s)


# Option tables: name -> (converter, default, help).  Names double as JSON keys.
COMMON = {
    "precision": (str, "float64", "computation precision: float32 or float64"),
    "threads": (int, None, "BLAS thread count (default: library default)"),
    "seed": (int, 0, "RNG seed"),
}
ARCH = {
    "lengths": (_int_list, list(DEFAULT_LENGTHS), "comma-separated filter lengths"),
    "filters_per_length": (int, 33, "filters per length in every block"),
    "block_types": (_str_list, [TYPE1, TYPE2, TYPE1, TYPE2], "comma-separated block types (type1/type2)"),
}
PRETRAIN = {
    "manifest": (str, None, "dataset manifest (TSV: name, path, split, role)"),
    "out": (str, "run", "output directory"),
    "max_train_epochs": (int, 200, "pretraining epochs"),
    "n": (int, 5, "batches per source dataset per epoch"),
    "b": (int, 16, "batch size"),
    "lr": (float, 0.002, "pretraining learning rate"),
    "max_val_epochs": (int, 50, "fine-tuning epochs per validation task"),
    "val_lr": (float, 0.002, "validation fine-tuning learning rate"),
    "val_batch_size": (int, 16, "validation fine-tuning batch size"),
    "val_train_fraction": (float, 0.75, "fraction of a validation train split used for fine-tuning"),
    "validate_every": (int, 1, "validate every k epochs"),
    "replace": (_bool, True, "sample batches with replacement"),
    "max_grad_norm": (_opt_float, None, "optional global gradient clip"),
    "source_splits": (str, "train+test", "source data used: 'train' or 'train+test'"),
    "save_every_epoch": (_bool, True, "write a checkpoint for every epoch"),
}
FINETUNE = {
    "checkpoint": (str, None, "pretrained checkpoint (omit with --scratch)"),
    "scratch": (_bool, False, "train a freshly initialized network instead"),
    "manifest": (str, None, "manifest with a target dataset"),
    "target": (str, None, "target dataset name (default: the only target in the manifest)"),
    "train": (str, None, "target training file (alternative to a manifest)"),
    "test": (str, None, "target test file"),
    "out": (str, "finetune", "output directory"),
    "iterations": (int, 12000, "fine-tuning iterations"),
    "lr": (float, 2e-4, "learning rate"),
    "batch_size": (int, 16, "batch size"),
    "freeze_depth": (int, 0, "number of leading blocks whose conv arrays stay fixed"),
    "smoothing_window": (int, 50, "window of the smoothed loss used for model selection"),
    "stop_loss": (_opt_float, None, "stop once the smoothed training loss reaches this value"),
    "replace": (_bool, True, "sample batches with replacement"),
    "max_grad_norm": (_opt_float, None, "optional global gradient clip"),
    "repeats": (int, 1, "independent repeats (seeds seed, seed+1, ...)"),
}
EVAL = {
    "checkpoint": (str, None, "checkpoint file"),
    "data": (str, None, "UCR-format data file"),
    "head": (str, None, "head name (default: the only head)"),
}
RELEVANCE = {
    "checkpoint": (str, None, "checkpoint file"),
    "data": (str, None, "UCR-format data file"),
    "out": (str, "relevance.tsv", "report path"),
    "top": (int, 3, "filters described in the plot file"),
    "sample": (int, 0, "series whose activation maps go to the plot file"),
    "plot": (str, None, "optional JSON plot description path"),
}
OCCLUDE = {
    "checkpoint": (str, None, "checkpoint file"),
    "data": (str, None, "UCR-format data file"),
    "head": (str, None, "head name (default: the only head)"),
    "out": (str, "occlusion.tsv", "report path"),
    "samples": (_int_list, None, "comma-separated sample indices (default: all)"),
    "window_fraction": (float, 0.1, "occluding window as a fraction of T"),
    "stride": (int, 1, "window stride"),
    "plot": (str, None, "optional JSON plot description of the first sample"),
}
GENDATA = {
    "generator": (str, "two-patterns", "two-patterns, mixed-scale or cbf"),
    "name": (str, None, "dataset name (default: generator name)"),
    "num_train": (int, 400, "training series"),
    "num_test": (int, 400, "test series"),
    "length": (int, 128, "series length T"),
    "noise": (float, 0.3, "noise standard deviation (two-patterns, mixed-scale)"),
    "short_fraction": (float, 0.05, "short pattern width / T (mixed-scale)"),
    "long_fraction": (float, 0.4, "long pattern width / T (mixed-scale)"),
    "out": (str, "data", "output directory"),
    "role": (str, None, "if set, append the files to <out>/manifest.tsv with this role"),
}
GRADCHECK = {
    "lengths": (_int_list, [2, 4], "comma-separated filter lengths"),
    "filters_per_length": (int, 2, "filters per length"),
    "block_types": (_str_list, [TYPE1, TYPE2], "comma-separated block types"),
    "num_classes": (int, 3, "classes K"),
    "length": (int, 16, "series length T"),
    "batch_size": (int, 2, "batch size"),
    "freeze_depth": (int, 0, "frozen leading blocks"),
    "step_size": (float, 1e-6, "central-difference step"),
    "tolerance": (float, 1e-4, "maximum relative error"),
}

COMMANDS = {
    "pretrain": ({**COMMON, **ARCH, **PRETRAIN}, "multi-head pretraining with validation by fine-tuning"),
    "finetune": ({**COMMON, **ARCH, **FINETUNE}, "adapt a checkpoint (or a fresh network) to a target dataset"),
    "eval": ({**COMMON, **EVAL}, "print the error rate of a checkpoint on a data file"),
    "relevance": ({**COMMON, **RELEVANCE}, "rank first-layer filters by relevance"),
    "occlude": ({**COMMON, **OCCLUDE}, "occlusion sensitivity traces"),
    "gendata": ({"seed": COMMON["seed"], **GENDATA}, "write a synthetic dataset in UCR format"),
    "gradcheck": ({"seed": COMMON["seed"], "threads": COMMON["threads"], **GRADCHECK}, "finite-difference gradient check (float64)"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (table, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="JSON file with option values (flags override)")
        for key, (_, default, h) in table.items():
            # None marks "not given" so config-file values can fill in
            sp.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=f"{h} [default: {default}]")
    return p


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the JSON config file and flags, converting each value."""
    table = COMMANDS[command][0]
    file_cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except ValueError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(file_cfg, dict):
            raise UsageError(f"{path}: top level must be an object")
        unknown = sorted(set(file_cfg) - set(table))
        if unknown:
            raise UsageError(f"{path}: unknown keys {unknown}")
    cfg = {}
    for key, (conv, default, _) in table.items():
        raw = getattr(args, key)
        if raw is None:
            raw = file_cfg.get(key, default)
        try:
            cfg[key] = raw if raw is None else conv(raw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {key}: {raw!r} ({exc})") from None
    if "precision" in cfg and cfg["precision"] not in ("float32", "float64"):
        raise UsageError(f"precision must be float32 or float64, got {cfg['precision']!r}")
    return cfg


def _need(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _arch(cfg) -> ArchConfig:
    return ArchConfig(lengths=tuple(cfg["lengths"]), filters_per_length=cfg["filters_per_length"], block_types=tuple(cfg["block_types"]))


def _dtype(cfg):
    return np.float32 if cfg.get("precision") == "float32" else np.float64


def _pick(cfg, table_cls):
    names = {f.name for f in fields(table_cls)}
    return table_cls(**{k: v for k, v in cfg.items() if k in names})


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_tsv(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _run_header(command, cfg, data_files) -> dict:
    return {
        "command": command,
        "version": __version__,
        "seed": cfg.get("seed"),
        "config": cfg,
        "data_hashes": {str(p): _sha(p) for p in sorted(set(map(str, data_files)))},
    }


def _write_run_json(out: Path, header: dict, **extra) -> None:
    (out / "run.json").write_text(json.dumps({**header, **extra}, indent=1, sort_keys=True) + "\n")


def _manifest_files(path) -> list[Path]:
    return [e.path for e in read_manifest(path)]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


# -- commands ----------------------------------------------------------------


def cmd_pretrain(cfg) -> int:
    _need(cfg, "manifest")
    if cfg["source_splits"] not in ("train", "train+test"):
        raise UsageError("source_splits must be 'train' or 'train+test'")
    data = load_manifest_datasets(cfg["manifest"])
    sources = []
    for name, splits in sorted(data.get("source", {}).items()):
        if "train" not in splits:
            raise UsageError(f"source dataset {name} has no train split")
        ds = splits["train"]
        if cfg["source_splits"] == "train+test" and "test" in splits:
            ds = merge(ds, splits["test"])
        sources.append(ds)
    validation = []
    for name, splits in sorted(data.get("validation", {}).items()):
        if set(splits) != {"train", "test"}:
            raise UsageError(f"validation dataset {name} needs both train and test splits")
        validation.append(ValidationTask(name, splits["train"], splits["test"]))
    if not sources or not validation:
        raise UsageError("the manifest must list at least one source and one validation dataset")

    files = _manifest_files(cfg["manifest"])
    out = Path(cfg["out"])
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    header = _run_header("pretrain", cfg, files)
    source_hash = hashlib.sha256("".join(header["data_hashes"][str(p)] for p in sorted(map(str, files))).encode()).hexdigest()
    label_values = {d.name: d.label_values for d in sources}

    model = build_ctn(_arch(cfg), rng=np.random.default_rng([cfg["seed"], 9]), dtype=_dtype(cfg))
    config = _pick(cfg, PretrainConfig)

    def on_epoch_end(record, model, heads):
        if not cfg["save_every_epoch"] and record.validation_loss is None:
            return
        name = f"epoch_{record.epoch:04d}.ctn"
        prov = {"epoch": record.epoch, "source_hash": source_hash, "validation_loss": record.validation_loss, "label_values": label_values}
        save_checkpoint(ckdir / name, model, heads, seed=cfg["seed"], provenance=prov)
        record.checkpoint = name

    result = pretrain(sources, validation, model, config, on_epoch_end=on_epoch_end)
    best = next(r for r in result.records if r.epoch == result.best_epoch)
    shutil.copyfile(ckdir / best.checkpoint, out / "best.ctn")
    (out / "best.json").write_text(json.dumps({"epoch": best.epoch, "checkpoint": f"checkpoints/{best.checkpoint}", "validation_loss": best.validation_loss}, sort_keys=True) + "\n")

    src_names = [d.name for d in sources]
    val_names = [t.name for t in validation]
    rows = [
        [r.epoch, _fmt(r.validation_loss), int(r.diverged), r.checkpoint or "", int(r.epoch == result.best_epoch)]
        + [_fmt(r.train_losses.get(n)) for n in src_names]
        + [_fmt(r.dataset_losses.get(n)) for n in val_names]
        for r in result.records
    ]
    _write_tsv(
        out / "epochs.tsv",
        ["epoch", "validation_loss", "diverged", "checkpoint", "best"] + [f"train_loss.{n}" for n in src_names] + [f"val_loss.{n}" for n in val_names],
        rows,
    )
    _write_tsv(out / "trace.tsv", ["epoch", "iteration", "dataset", "loss"], [[e, i, d, repr(l)] for e, i, d, l in result.trace])
    diverged = any(r.diverged for r in result.records)
    _write_run_json(out, header, best_epoch=result.best_epoch, best_sha256=file_hash(out / "best.ctn"), diverged=diverged)
    print(f"best epoch {result.best_epoch} validation loss {best.validation_loss!r} -> {out / 'best.ctn'}")
    if diverged:
        print("training diverged; results cover the epochs before divergence", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _target_data(cfg):
    if cfg.get("train"):
        train = load_ucr_file(cfg["train"], name=cfg.get("target") or Path(cfg["train"]).stem)
        test = load_ucr_file(cfg["test"], label_values=train.label_values, name=train.name, split="test") if cfg.get("test") else None
        return train, test, [cfg["train"]] + ([cfg["test"]] if cfg.get("test") else [])
    _need(cfg, "manifest")
    data = load_manifest_datasets(cfg["manifest"])
    targets = data.get("target", {})
    name = cfg.get("target")
    if name is None:
        if len(targets) != 1:
            raise UsageError(f"--target is required (manifest lists {sorted(targets) or 'no'} targets)")
        name = next(iter(targets))
    if name not in targets or "train" not in targets[name]:
        raise UsageError(f"target {name!r} with a train split not found in {cfg['manifest']}")
    return targets[name]["train"], targets[name].get("test"), _manifest_files(cfg["manifest"])


def cmd_finetune(cfg) -> int:
    train, test, files = _target_data(cfg)
    if cfg["scratch"]:
        base = build_ctn(_arch(cfg), rng=np.random.default_rng([cfg["seed"], 9]), dtype=_dtype(cfg))
        source = "scratch"
    else:
        _need(cfg, "checkpoint")
        base = load_checkpoint(cfg["checkpoint"], dtype=_dtype(cfg)).model
        source = str(cfg["checkpoint"])
        files = files + [cfg["checkpoint"]]
    if cfg["repeats"] < 1:
        raise UsageError("repeats must be >= 1")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    header = _run_header("finetune", cfg, files)
    base_conv = {k: base.params()[k].copy() for k in _conv_names(base, cfg["freeze_depth"])}

    report, trace_rows = [], []
    for r in range(cfg["repeats"]):
        config = _pick({**cfg, "seed": cfg["seed"] + r}, FinetuneConfig)
        res = finetune_target(base, train, config)
        unchanged = all(np.array_equal(res.model.params()[k], a) for k, a in base_conv.items())
        err = evaluate(res.model, res.head, test) if test is not None else None
        name = f"finetuned_{r:02d}.ctn" if cfg["repeats"] > 1 else "finetuned.ctn"
        prov = {"base": source, "target": train.name, "best_iteration": res.best_iteration, "label_values": {train.name: train.label_values}}
        save_checkpoint(out / name, res.model, {train.name: res.head}, seed=config.seed, provenance=prov)
        report.append([r, config.seed, res.best_iteration, _fmt(err), cfg["freeze_depth"], int(unchanged), name])
        trace_rows += [[r, i, repr(float(l))] for i, l in enumerate(res.trace)]
        if cfg["freeze_depth"]:
            frozen = f"conv arrays of the first {cfg['freeze_depth']} blocks {'unchanged' if unchanged else 'CHANGED'}"
        else:
            frozen = "no blocks frozen"
        print(f"repeat {r}: best iteration {res.best_iteration}, test error {_fmt(err) or 'n/a'}; {frozen}")
        if cfg["freeze_depth"] and not unchanged:
            raise NumericError("frozen conv arrays changed during fine-tuning")
    _write_tsv(out / "report.tsv", ["repeat", "seed", "best_iteration", "test_error", "freeze_depth", "frozen_conv_unchanged", "checkpoint"], report)
    _write_tsv(out / "trace.tsv", ["repeat", "iteration", "loss"], trace_rows)
    _write_run_json(out, header)
    return EXIT_OK


def _conv_names(model, depth):
    m = model.copy()
    m.freeze(depth)
    return sorted(m.frozen_names())


def _head(ck, name):
    if name is None:
        if len(ck.heads) != 1:
            raise UsageError(f"--head is required; checkpoint has heads {sorted(ck.heads)}")
        name = next(iter(ck.heads))
    if name not in ck.heads:
        raise UsageError(f"no head {name!r} in checkpoint (has {sorted(ck.heads)})")
    return name, ck.heads[name]


def _labelled_data(cfg, ck, head_name):
    labels = ck.provenance.get("label_values", {}).get(head_name)
    return load_ucr_file(cfg["data"], label_values=labels, name=Path(cfg["data"]).stem, split="test")


def cmd_eval(cfg) -> int:
    _need(cfg, "checkpoint", "data")
    ck = load_checkpoint(cfg["checkpoint"], dtype=_dtype(cfg))
    name, head = _head(ck, cfg["head"])
    ds = _labelled_data(cfg, ck, name)
    if ds.num_classes > head.num_classes:
        raise UsageError(f"data has {ds.num_classes} classes, head {name} predicts {head.num_classes}")
    print(repr(evaluate(ck.model, head, ds)))
    return EXIT_OK


def cmd_relevance(cfg) -> int:
    _need(cfg, "checkpoint", "data")
    ck = load_checkpoint(cfg["checkpoint"], dtype=_dtype(cfg))
    ds = load_ucr_file(cfg["data"], name=Path(cfg["data"]).stem)
    report = filter_relevance(ck.model, ds)
    write_relevance_report(report, cfg["out"])
    if cfg["plot"]:
        x = ds.values[cfg["sample"]]
        filt = []
        for e in report.top(cfg["top"]):
            a, am = activation_map(ck.model, e.index, x)
            filt.append((e.index, e.weights, overlay_start(ck.model, e.index, am), a))
        write_plot_description(plot_description(x, None, filt), cfg["plot"])
    for rank, e in enumerate(report.top(cfg["top"])):
        print(f"{rank}\tfilter {e.index}\tlength {e.length}\trelevance {e.relevance!r}")
    return EXIT_OK


def cmd_occlude(cfg) -> int:
    _need(cfg, "checkpoint", "data")
    ck = load_checkpoint(cfg["checkpoint"], dtype=_dtype(cfg))
    name, head = _head(ck, cfg["head"])
    ds = _labelled_data(cfg, ck, name)
    idx = cfg["samples"] if cfg["samples"] is not None else list(range(len(ds)))
    rows, first = [], None
    for i in idx:
        if not 0 <= i < len(ds):
            raise UsageError(f"sample index {i} out of range [0, {len(ds)})")
        tr = occlusion_sensitivity(ck.model, head, ds.values[i], cfg["window_fraction"], cfg["stride"])
        first = first or (i, tr)
        for t, p, s in zip(tr.positions, tr.occluded_probabilities, tr.sensitivities):
            rows.append([i, int(ds.labels[i]), tr.predicted_class, repr(tr.base_probability), tr.window, int(t), repr(float(p)), repr(float(s))])
        print(f"sample {i}: class {tr.predicted_class}, most sensitive window starts at {tr.most_sensitive}")
    _write_tsv(cfg["out"], ["sample", "label", "predicted_class", "base_probability", "window", "position", "occluded_probability", "sensitivity"], rows)
    if cfg["plot"]:
        i, tr = first
        write_plot_description(plot_description(ds.values[i], tr), cfg["plot"])
    return EXIT_OK


GENERATORS = ("two-patterns", "mixed-scale", "cbf")


def generate(cfg) -> Dataset:
    total = cfg["num_train"] + cfg["num_test"]
    rng = np.random.default_rng(cfg["seed"])
    name = cfg["name"] or cfg["generator"].replace("-", "_")
    g = cfg["generator"]
    if g == "two-patterns":
        return gen_two_patterns(total, cfg["length"], cfg["noise"], rng, name=name)
    if g == "mixed-scale":
        return gen_mixed_scale(total, cfg["length"], cfg["noise"], rng, cfg["short_fraction"], cfg["long_fraction"], name=name)
    if g == "cbf":
        return gen_cbf(total, cfg["length"], rng, name=name)
    raise UsageError(f"unknown generator {g!r}; choose from {', '.join(GENERATORS)}")


def cmd_gendata(cfg) -> int:
    if cfg["num_train"] < 1 or cfg["num_test"] < 0:
        raise UsageError("need num_train >= 1 and num_test >= 0")
    ds = generate(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    train, test = train_test_split(ds, cfg["num_train"])
    paths = {"train": out / f"{ds.name}_TRAIN.tsv"}
    write_ucr_file(train, paths["train"])
    if len(test):
        paths["test"] = out / f"{ds.name}_TEST.tsv"
        write_ucr_file(test, paths["test"])
    if "segments" in ds.meta:
        seg = ds.meta["segments"]
        _write_tsv(out / f"{ds.name}_SEGMENTS.tsv", ["index", "split", "pattern", "start", "end"],
                   [[i, "train" if i < cfg["num_train"] else "test", j, int(a), int(b)] for i in range(len(ds)) for j, (a, b) in enumerate(seg[i])])
    if cfg["role"]:
        mpath = out / "manifest.tsv"
        entries = [e for e in read_manifest(mpath) if e.name != ds.name] if mpath.is_file() else []
        for split, p in paths.items():
            entries.append(ManifestEntry(ds.name, p.resolve(), split, cfg["role"]))
        write_manifest(entries, mpath)
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    arch = ArchConfig(lengths=tuple(cfg["lengths"]), filters_per_length=cfg["filters_per_length"], block_types=tuple(cfg["block_types"]))
    rng = np.random.default_rng(cfg["seed"])
    model = build_ctn(arch, rng=rng, dtype=np.float64)
    model.freeze(cfg["freeze_depth"])
    head = new_head("check", cfg["num_classes"], model.embedding_dim, rng, np.float64)
    x = rng.standard_normal((cfg["batch_size"], cfg["length"]))
    y = rng.integers(0, cfg["num_classes"], size=cfg["batch_size"])
    report = finite_diff_check(model, head, x, y, cfg["step_size"], cfg["tolerance"])
    print("group\tmax_rel_error\tstatus")
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_RUNTIME


HANDLERS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "relevance": cmd_relevance,
    "occlude": cmd_occlude,
    "gendata": cmd_gendata,
    "gradcheck": cmd_gradcheck,
}


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    """Entry point; returns the exit status instead of raising."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        with _thread_limit(cfg.get("threads")):
            return HANDLERS[args.command](cfg)
    except NumericError as exc:
        print(f"ctn {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CtnError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"ctn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, MemoryError, OSError) as exc:
        print(f"ctn {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
