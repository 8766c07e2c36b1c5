"""Command-line entry point: ``ildcnn <command> [--config FILE] [-s KEY=VALUE ...]``.

Commands::

    synthesize   write the synthetic 5-class patch store
    extract      cut labeled patches from a raw scan directory
    train        split, augment, train and evaluate one network
    tune         compare the 3/4/5-block variants under both losses
    crossval     k-fold train/evaluate cycles with pooled and mean scores
    evaluate     score a checkpoint on a patch store
    predict      classify individual patch files
    config       print the resolved configuration (or the key reference)

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, metrics, model, optim
from .config import RunConfig, schema_text
from .errors import ConfigError, DataError, NumericError

log = logging.getLogger("ildcnn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# locations only; they do not change what a run computes
PATH_KEYS = ("data", "dataset_dir", "out", "checkpoint")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# -- shared pipeline steps -------------------------------------------------


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_store(cfg: RunConfig) -> data.PatchDataset:
    if not cfg.data:
        raise ConfigError("no patch store given (set data=DIR)")
    ds = data.load_dataset(cfg.data)
    if len(ds) == 0:
        raise DataError(f"patch store {cfg.data} is empty")
    return ds


def _originals(ds: data.PatchDataset) -> data.PatchDataset:
    """One sample per source, preferring the un-augmented one."""
    seen, keep = set(), []
    order = sorted(range(len(ds)), key=lambda i: ds.provenance[i].transform != data.ORIGINAL)
    for i in order:
        key = ds.provenance[i].source_key
        if key not in seen:
            seen.add(key)
            keep.append(i)
    return ds.subset(sorted(keep))


def _holdout_sources(ds: data.PatchDataset, fraction: float, seed: int):
    """Stratified ``(train, validation)`` split at source granularity."""
    if fraction == 0:
        raise ConfigError("validation_fraction must be positive for training")
    keys = [p.source_key for p in ds.provenance]
    first: dict = {}
    for i, key in enumerate(keys):
        first.setdefault(key, i)
    order = sorted(first, key=repr)
    labels = ds.labels[[first[k] for k in order]]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    _, held = optim.holdout_indices(labels, fraction, rng)
    held_keys = {order[i] for i in held}
    val_idx = [i for i, k in enumerate(keys) if k in held_keys]
    train_idx = [i for i, k in enumerate(keys) if k not in held_keys]
    return ds.subset(train_idx), _originals(ds.subset(val_idx))


def _augment(cfg: RunConfig, ds: data.PatchDataset) -> data.PatchDataset:
    if not cfg.augment:
        return ds
    return data.expand_training_set(
        ds,
        transforms=cfg.transforms,
        factor=cfg.augment_factor,
        seed=cfg.seed,
        keep_originals=cfg.keep_originals,
        ranges=cfg.augment_ranges(),
        interpolation=cfg.interpolation,
    )


def _train(cfg: RunConfig, spec, train_ds: data.PatchDataset, loss=None):
    """Carve validation sources, augment the rest, build and fit one network."""
    tc = cfg.training(loss)
    fit_ds, val_ds = _holdout_sources(train_ds, tc.validation_fraction, cfg.seed)
    fit_ds = _augment(cfg, fit_ds)
    log.info("training on %d samples, validating on %d", len(fit_ds), len(val_ds))
    net = model.build(spec, seed=cfg.seed)
    net, records = optim.fit(net, fit_ds, val_ds, tc)
    settings = {k: v for k, v in cfg.raw.items() if k not in PATH_KEYS}
    net.metadata = dict(net.metadata, config_hash=model.config_hash(settings), loss=tc.loss)
    return net, records


def _confusion(net, ds: data.PatchDataset) -> metrics.ConfusionMatrix:
    pred = net.predict(ds.images) if len(ds) else np.zeros(0, dtype=np.int64)
    return metrics.confusion(ds.labels, pred, net.spec.num_classes, data.CLASS_NAMES)


def _write_report(out: Path, stem: str, rep: dict) -> str:
    text = metrics.format_report(rep)
    (out / f"{stem}.json").write_text(metrics.dumps(rep))
    (out / f"{stem}.txt").write_text(text)
    return text


def _counts_line(counts) -> str:
    return "  ".join(f"{n}={c}" for n, c in zip(data.CLASS_NAMES, counts))


# -- commands --------------------------------------------------------------


def cmd_synthesize(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    ds = data.synthesize_dataset(cfg.n_per_class, cfg.seed)
    data.save_dataset(ds, out)
    print(f"{len(ds)} patches -> {out}  ({_counts_line(ds.class_counts())})")
    return EXIT_OK


def cmd_extract(cfg: RunConfig) -> int:
    if not cfg.dataset_dir:
        raise ConfigError("no dataset directory given (set dataset_dir=DIR)")
    windows = cfg.hu_window_spec()
    patches = []
    for slice_, anns in data.iter_scan_directory(cfg.dataset_dir):
        img = data.hu_window(slice_, windows)
        patches += data.extract_patches(img, anns, cfg.patch_size, cfg.coverage, slice_.scan_id, slice_.slice_id)
    ds = data.PatchDataset.from_patches(patches) if patches else data.PatchDataset.empty()
    out = _out_dir(cfg)
    data.save_dataset(ds, out)
    print(f"{len(ds)} patches -> {out}")
    for name, title, c in zip(data.CLASS_NAMES, data.CLASS_TITLES, ds.class_counts()):
        print(f"  {name:<3}{title:<14}{c:>7}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    spec = cfg.architecture()
    cfg.training()  # fail on bad training keys before loading data
    ds = _load_store(cfg)
    out = _out_dir(cfg)
    train_ds, test_ds = data.stratified_split(ds, cfg.test_per_class, cfg.seed, spec.num_classes)
    net, records = _train(cfg, spec, train_ds)
    model.save(net, out / "model.ckpt")
    optim.write_curves(records, out / "curves.csv")
    (out / "config.txt").write_text(cfg.dump())
    rep = metrics.report_dict(_confusion(net, test_ds), "held-out test split", data.CLASS_TITLES)
    print(_write_report(out, "report", rep), end="")
    return EXIT_OK


def cmd_tune(cfg: RunConfig) -> int:
    base = cfg.architecture()
    ds = _load_store(cfg)
    out = _out_dir(cfg)
    train_ds, test_ds = data.stratified_split(ds, cfg.test_per_class, cfg.seed, base.num_classes)
    rows = []
    for loss in cfg.tune_losses:
        cfg.training(loss)  # validate before spending time on training
    for blocks in cfg.tune_blocks:
        if blocks not in model.TUNING_FILTERS:
            raise ConfigError(f"no filter set for {blocks} blocks; choose from {sorted(model.TUNING_FILTERS)}")
        filters = model.TUNING_FILTERS[blocks]
        spec = model.variant_spec(filters, base)
        for loss in cfg.tune_losses:
            log.info("tune: %d blocks %s, %s", blocks, filters, loss)
            net, _ = _train(cfg, spec, train_ds, loss)
            cm = _confusion(net, test_ds)
            s = metrics.summarize(metrics.class_metrics(cm), cm)
            rows.append(
                {
                    "blocks": blocks,
                    "filters": list(filters),
                    "loss": loss,
                    "accuracy": s["micro_accuracy"],
                    "f_avg": s["f_avg"],
                    "confusion_matrix": cm.counts.tolist(),
                }
            )
    (out / "tune.json").write_text(metrics.dumps({"rows": rows, "test_size": len(test_ds)}))
    text = format_tune(rows)
    (out / "tune.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def format_tune(rows: list[dict]) -> str:
    header = f"{'Blocks':<8}{'Filters':<24}{'Loss':<28}{'Accuracy %':>11}{'F_avg %':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        filters = "(" + ",".join(map(str, r["filters"])) + ")"
        lines.append(
            f"{r['blocks']:<8}{filters:<24}{r['loss']:<28}{100 * r['accuracy']:>11.2f}{100 * r['f_avg']:>9.2f}"
        )
    return "\n".join(lines) + "\n"


def cmd_crossval(cfg: RunConfig) -> int:
    spec = cfg.architecture()
    cfg.training()  # fail on bad training keys before loading data
    ds = _load_store(cfg)
    out = _out_dir(cfg)
    folds = data.kfold(ds, cfg.k, cfg.stratified, cfg.seed)
    cms = []
    texts = []
    for f in range(cfg.k):
        log.info("fold %d/%d", f + 1, cfg.k)
        test_ds = _originals(ds.subset(folds.test_indices(f)))
        net, records = _train(cfg, spec, ds.subset(folds.train_indices(f)))
        optim.write_curves(records, out / f"fold_{f + 1}_curves.csv")
        cm = _confusion(net, test_ds)
        cms.append(cm)
        rep = metrics.report_dict(cm, f"fold {f + 1} of {cfg.k}", data.CLASS_TITLES)
        texts.append(_write_report(out, f"fold_{f + 1}", rep))
    agg = metrics.aggregate_folds(cms)
    pooled = metrics.report_dict(agg.pooled, f"{cfg.k}-fold pooled", data.CLASS_TITLES)
    summary = {
        "k": cfg.k,
        "fold_sizes": folds.sizes(),
        "fold_confusion_matrices": [cm.counts.tolist() for cm in cms],
        "fold_summaries": agg.fold_summaries,
        "mean_summary": agg.mean_summary,
        "pooled": pooled,
    }
    (out / "crossval.json").write_text(metrics.dumps(summary))
    text = "\n".join(texts) + "\n" + metrics.format_report(pooled) + "\n" + format_mean(agg.mean_summary, cfg.k)
    (out / "crossval.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def format_mean(summary: dict, k: int) -> str:
    parts = [f"{name} {100 * summary[name]:.2f} %" for name in ("accuracy", "recall", "precision", "f_avg")]
    return f"mean over {k} folds: " + "   ".join(parts) + "\n"


def cmd_evaluate(cfg: RunConfig) -> int:
    net = _load_checkpoint(cfg)
    ds = _load_store(cfg)
    out = _out_dir(cfg)
    rep = metrics.report_dict(_confusion(net, ds), f"evaluation of {Path(cfg.data).name}", data.CLASS_TITLES)
    print(_write_report(out, "evaluation", rep), end="")
    return EXIT_OK


def _load_checkpoint(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ConfigError("no checkpoint given (set checkpoint=FILE)")
    path = Path(cfg.checkpoint)
    if not path.is_file():
        raise DataError(f"checkpoint {path} not found")
    return model.load(path)


def read_patch_file(path, shape=(data.PATCH_SIZE, data.PATCH_SIZE, 3)) -> np.ndarray:
    """A single patch from ``.npy`` (float values in [0, 1]) or an 8-bit RGB ``.png``."""
    path = Path(path)
    try:
        if path.suffix == ".npy":
            arr = np.load(path, allow_pickle=False).astype(np.float64)
        elif path.suffix == ".png":
            from PIL import Image

            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        else:
            raise DataError(f"unsupported patch file type {path.suffix!r}")
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read patch: {e}") from None
    if arr.shape == (1,) + tuple(shape):
        arr = arr[0]
    if arr.shape != tuple(shape):
        raise DataError(f"patch has shape {arr.shape}, expected {tuple(shape)}")
    if not np.isfinite(arr).all():
        raise DataError("patch holds non-finite values")
    return arr


def cmd_predict(cfg: RunConfig, files) -> int:
    net = _load_checkpoint(cfg)
    if not files:
        raise ConfigError("no patch files given")
    status = EXIT_OK
    for name in files:
        try:
            patch = read_patch_file(name, net.spec.input_shape)
        except DataError as e:
            print(f"{name}: error: {e}", file=sys.stderr)
            status = EXIT_DATA
            continue
        probs = net.forward(patch[None].astype(net.dtype), "infer")[0]
        k = int(np.argmax(probs))
        print(f"{name}\t{data.CLASS_NAMES[k]}\t" + ",".join(f"{p:.3f}" for p in probs))
    return status


def cmd_config(cfg: RunConfig, keys: bool) -> int:
    print(schema_text() if keys else cfg.dump(), end="")
    return EXIT_OK


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="key = value configuration file")
    common.add_argument(
        "-s", "--set", action="append", default=[], metavar="KEY=VALUE", help="override one configuration key"
    )
    common.add_argument("-q", "--quiet", action="store_true", help="suppress progress logging")

    p = _Parser(prog="ildcnn", description="Lung CT patch classification with a small CNN.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "synthesize": "write the synthetic 5-class patch store to out",
        "extract": "cut labeled patches from dataset_dir into the patch store out",
        "train": "train on data, write model.ckpt, curves.csv and report.* to out",
        "tune": "compare block counts and losses, write tune.* to out",
        "crossval": "k-fold cross-validation on data, write fold_* and crossval.* to out",
        "evaluate": "score checkpoint on data, write evaluation.* to out",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    pr = sub.add_parser("predict", parents=[common], help="classify patch files (.npy or .png)")
    pr.add_argument("files", nargs="*", help="patch files")
    pc = sub.add_parser("config", parents=[common], help="print the resolved configuration")
    pc.add_argument("--keys", action="store_true", help="list every key with its default and meaning")
    return p


COMMANDS = {
    "synthesize": cmd_synthesize,
    "extract": cmd_extract,
    "train": cmd_train,
    "tune": cmd_tune,
    "crossval": cmd_crossval,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = RunConfig.load(args.config, args.set)
        if args.command == "predict":
            return cmd_predict(cfg, args.files)
        if args.command == "config":
            return cmd_config(cfg, args.keys)
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"ildcnn: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"ildcnn: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as e:
        print(f"ildcnn: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
