"""Command-line entry point.

Every subcommand reads an optional experiment config (YAML or JSON), applies
``--seed`` on top of it, writes ``config.resolved.json`` into its output
directory and leaves its inputs untouched.

Exit status: 0 success, 1 stage failure, 2 usage error, 3 config error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import classify, contrastive, evalharness as eh, structgae
from .augment import AugmentConfig
from .features import FEATURE_NAMES, normalize_minmax, write_feature_table
from .synthgen import GeneratorSpec, generate_dataset
from .txdata import Dataset, LabelFormatError, TransactionFormatError

log = logging.getLogger("txgraphcl")

OUT_ENV = "TXGRAPHCL_OUT"
EXIT_STAGE, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config (YAML or JSON)")
    p.add_argument("--seed", type=int, help="top-level seed; overrides the config file")
    p.add_argument("--out", type=Path, help=f"output directory (default: ${OUT_ENV}/<subcommand>)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path,
                   help="dataset directory with transactions.jsonl and labels.csv "
                        "(default: the config's data section)")
    p.add_argument("--platform", help="platform tag for --data")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="txgraphcl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    _add_common(p)
    p.add_argument("--per-class", type=int, help="accounts per class (default config: 30)")
    p.add_argument("--classes", help="comma-separated class names (labels or 'Normal')")
    p.add_argument("--camouflage", type=float)
    p.add_argument("--platform")

    p = sub.add_parser("ingest", help="validate transaction and label files into a dataset directory")
    _add_common(p)
    p.add_argument("--transactions", type=Path, required=True)
    p.add_argument("--labels", type=Path)
    p.add_argument("--platform", default="btc")
    p.add_argument("--skip-invalid", action="store_true",
                   help="skip malformed transaction lines instead of failing")

    p = sub.add_parser("featurize", help="attribute table of every labeled account")
    _add_common(p)
    _add_data(p)

    p = sub.add_parser("gae", help="train the graph autoencoder and export structural embeddings")
    _add_common(p)
    _add_data(p)

    p = sub.add_parser("pretrain", help="contrastive pre-training of the encoder")
    _add_common(p)
    _add_data(p)
    p.add_argument("--gae", type=Path, help="reuse a trained autoencoder checkpoint")

    p = sub.add_parser("finetune", help="train the classifier head and predict the test split")
    _add_common(p)
    _add_data(p)
    p.add_argument("--gae", type=Path, help="reuse a trained autoencoder checkpoint")
    p.add_argument("--encoder", type=Path, help="pre-trained encoder checkpoint "
                                                "(default: a freshly initialized encoder)")

    p = sub.add_parser("evaluate", help="run the full pipeline and write a report directory")
    _add_common(p)
    _add_data(p)

    p = sub.add_parser("distance", help="class-by-class representation distance matrix")
    _add_common(p)
    _add_data(p)
    p.add_argument("--gae", type=Path, help="reuse a trained autoencoder checkpoint")

    p = sub.add_parser("report", help="summarize one or more report directories")
    _add_common(p)
    p.add_argument("runs", nargs="+", type=Path, help="directories holding report.json")
    return parser


# ---------------------------------------------------------------- helpers

def _resolve(args) -> dict:
    try:
        cfg = eh.load_config(args.config) if args.config else eh.ExperimentConfig()
        if args.seed is not None:
            log.info("seed: %d (flag overrides %d)", args.seed, cfg.seed)
            cfg.seed = args.seed
        data_dir = getattr(args, "data", None)
        if data_dir is not None:
            cfg.data = eh.DataConfig(path=str(data_dir.resolve()),
                                     platform=getattr(args, "platform", None))
        resolved = eh.resolve_config(cfg)
    except eh.ConfigError as err:
        raise CliError(EXIT_CONFIG, "ConfigError", str(err)) from err
    if args.verbose:
        for key, value in resolved.items():
            log.info("config %s = %s", key, json.dumps(value, sort_keys=True))
    return resolved


def _out_dir(args) -> Path:
    if args.out is not None:
        out = args.out
    else:
        out = Path(os.environ.get(OUT_ENV, "txgraphcl-runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, resolved: dict) -> None:
    (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _stage(name: str, resolved: dict, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (eh.StageError, CliError):
        raise
    except Exception as err:  # noqa: BLE001
        raise eh.StageError(name, eh.config_hash(resolved), err) from err


def _dataset(resolved: dict) -> Dataset:
    return _stage("data", resolved, eh.load_data, resolved["data"])


def _view(resolved, ds, gae_path=None) -> eh.StructuralView:
    model = structgae.load_gae(gae_path) if gae_path else None
    return _stage("gae", resolved, eh.structural_view, ds, ds.labeled_addresses(),
                  resolved["hops"], structgae.GaeConfig(**resolved["gae"]), model)


def _enc_cfg(resolved) -> contrastive.EncoderConfig:
    return contrastive.EncoderConfig(**resolved["encoder"])


# ---------------------------------------------------------------- subcommands

def cmd_synth(args, resolved, out):
    synth = dict(resolved["data"].get("synth") or {})
    if not synth:
        raise CliError(EXIT_CONFIG, "ConfigError", "synth needs a synth data section, not a path")
    if args.per_class is not None or args.classes is not None:
        classes = (args.classes.split(",") if args.classes else list(synth["counts"]))
        per = args.per_class if args.per_class is not None else max(synth["counts"].values())
        synth["counts"] = {c.strip(): per for c in classes}
    if args.camouflage is not None:
        synth["camouflage"] = args.camouflage
    if args.platform is not None:
        synth["platform"] = args.platform
    try:
        spec = GeneratorSpec.from_dict(synth)
    except (TypeError, ValueError) as err:
        raise CliError(EXIT_CONFIG, "ConfigError", f"invalid synth settings: {err}") from err
    resolved["data"] = {"synth": synth}
    ds = _stage("synth", resolved, generate_dataset, spec)
    ds.write(out)
    print(f"wrote {len(ds.transactions)} transactions, {len(ds.labels)} labels to {out}")


def cmd_ingest(args, resolved, out):
    def load():
        return Dataset.from_files(args.transactions, args.labels, args.platform,
                                  strict=not args.skip_invalid)
    try:
        ds = load()
    except (TransactionFormatError, LabelFormatError, ValueError, OSError) as err:
        raise eh.StageError("ingest", eh.config_hash(resolved), err) from err
    ds.write(out)
    summary = {"platform": ds.platform, "n_transactions": len(ds.transactions),
               "n_addresses": len(ds.addresses), "n_labeled": len(ds.labels)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    resolved["data"] = {"path": str(out.resolve()), "platform": ds.platform}
    print(f"ingested {len(ds.transactions)} transactions, {len(ds.labels)} labels into {out}")


def cmd_featurize(args, resolved, out):
    ds = _dataset(resolved)
    view = _stage("featurize", resolved, eh.structural_view, ds, ds.labeled_addresses(),
                  resolved["hops"], structgae.GaeConfig(**{**resolved["gae"], "epochs": 0}))
    write_feature_table(out / "features.csv", view.addresses, view.attributes)
    normed, stats = normalize_minmax(view.attributes)
    write_feature_table(out / "features_normalized.csv", view.addresses, normed)
    stats.save(out / "minmax.json")
    print(f"featurized {len(view.addresses)} accounts x {len(FEATURE_NAMES)} attributes")


def cmd_gae(args, resolved, out):
    ds = _dataset(resolved)
    view = _view(resolved, ds)
    (out / "checkpoints").mkdir(exist_ok=True)
    structgae.save_gae(view.model, out / "checkpoints" / "gae.npz")
    structgae.write_loss_curve(out / "gae_loss.csv", view.losses)
    _write_matrix(out / "structure.csv", view.addresses, view.Z, "z")
    print(f"embedded {len(view.addresses)} accounts; final loss {view.losses[-1]:.6g}"
          if view.losses else f"embedded {len(view.addresses)} accounts")


def cmd_pretrain(args, resolved, out):
    ds = _dataset(resolved)
    view = _view(resolved, ds, args.gae)
    use_structure = resolved["ablation"] != "no_fusion"
    stats = normalize_minmax(view.attributes)[1]
    res = _stage("pretrain", resolved, contrastive.pretrain, eh.pretrain_samples(view, use_structure),
                 stats, AugmentConfig(**resolved["augment"]), _enc_cfg(resolved),
                 contrastive.ContrastiveConfig(**resolved["contrastive"]))
    (out / "checkpoints").mkdir(exist_ok=True)
    contrastive.save_checkpoint(out / "checkpoints" / "encoder.npz", res.encoder, res.head,
                                eh.config_hash(resolved))
    if args.gae is None:
        structgae.save_gae(view.model, out / "checkpoints" / "gae.npz")
    contrastive.write_training_log(out / "pretrain.csv", res.log)
    last = res.log[-1] if res.log else {}
    print("pretrained encoder" + (f"; final loss {last['loss']:.6g}" if last else ""))


def cmd_finetune(args, resolved, out):
    ds = _dataset(resolved)
    task = resolved["task"]
    use_structure = resolved["ablation"] != "no_fusion"
    spec = eh.SplitSpec(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in resolved["split"].items()})
    split = _stage("split", resolved, eh.make_split, ds, spec, task)
    view = _view(resolved, ds, args.gae)
    if args.encoder:
        encoder, _, _ = contrastive.load_checkpoint(args.encoder)
    else:
        encoder, _ = contrastive.build_encoder(_enc_cfg(resolved))
    classes = eh.class_names(task, list(ds.labels.values()))
    row = {a: i for i, a in enumerate(view.addresses)}
    tr = [row[a] for a in split.train]
    te = [row[a] for a in split.test]
    stats = normalize_minmax(view.attributes[tr])[1]
    X = eh.fused_matrix(view, stats, use_structure=use_structure)
    clf = _stage("finetune", resolved, classify.finetune, encoder, X[tr],
                 eh.class_indices(ds, split.train, classes, task), classes,
                 classify.FinetuneConfig(**resolved["finetune"]))
    y_test = eh.class_indices(ds, split.test, classes, task)
    y_pred, scores = classify.predict(clf, X[te])
    report = classify.metrics(y_test, y_pred, classes, "binary" if task == "binary" else "macro")
    classify.write_predictions(out / "predictions.csv", split.test, y_test, y_pred, scores, classes)
    classify.write_metrics(out / "metrics.json", report)
    print(f"P={report.avg_precision:.4f} R={report.avg_recall:.4f} F1={report.avg_f1:.4f}")


def cmd_evaluate(args, resolved, out):
    report = eh.run_pipeline(resolved)
    eh.write_report(out, report)
    m = report.metrics
    print(f"P={m['precision']:.4f} R={m['recall']:.4f} F1={m['f1']:.4f}  report: {out / 'report.json'}")


def cmd_distance(args, resolved, out):
    ds = _dataset(resolved)
    view = _view(resolved, ds, args.gae)
    use_structure = resolved["ablation"] != "no_fusion"
    stats = normalize_minmax(view.attributes)[1]
    X = eh.fused_matrix(view, stats, use_structure=use_structure)
    groups_of = [eh.class_of(ds.labels[a], "multiclass") for a in view.addresses]
    order = eh.class_names("multiclass", list(ds.labels.values()))
    dcfg = resolved["distance"]
    sampled = eh.sample_groups(X, groups_of, order, dcfg["per_class"], dcfg["seed"])
    dm = _stage("distance", resolved, eh.representation_distance, sampled, dcfg["normalize"])
    eh.write_distances(out / "distances.csv", dm)
    print(f"distance matrix over {len(dm.groups)} groups written to {out / 'distances.csv'}")


def cmd_report(args, resolved, out):
    rows = []
    for run in args.runs:
        path = run / "report.json" if run.is_dir() else run
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise eh.StageError("report", eh.config_hash(resolved), err) from err
        m = data["metrics"]
        rows.append([str(run), data["config"]["ablation"] or "full", data["split"]["protocol"],
                     data["metrics"]["averaging"], m["precision"], m["recall"], m["f1"],
                     data["config_hash"][:12]])
    header = ["run", "variant", "protocol", "averaging", "precision", "recall", "f1", "config"]
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    widths = [max(len(header[i]), *(len(_fmt(r[i])) for r in rows)) for i in range(len(header))]
    print("  ".join(h.ljust(wd) for h, wd in zip(header, widths)))
    for r in rows:
        print("  ".join(_fmt(v).ljust(wd) for v, wd in zip(r, widths)))


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _write_matrix(path: Path, addresses, M: np.ndarray, prefix: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["address", *[f"{prefix}{i}" for i in range(M.shape[1])]])
        for a, row in zip(addresses, M):
            w.writerow([a, *[repr(float(v)) for v in row]])


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "featurize": cmd_featurize, "gae": cmd_gae,
    "pretrain": cmd_pretrain, "finetune": cmd_finetune, "evaluate": cmd_evaluate,
    "distance": cmd_distance, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        resolved = _resolve(args)
        out = _out_dir(args)
        COMMANDS[args.command](args, resolved, out)
        _snapshot(out, resolved)
    except CliError as err:
        print(f"error={err.kind} {err}", file=sys.stderr)
        return err.code
    except eh.ConfigError as err:
        print(f"error=ConfigError {err}", file=sys.stderr)
        return EXIT_CONFIG
    except eh.StageError as err:
        print(f"error=StageError stage={err.stage} config={err.config_hash[:12]} "
              f"{type(err.cause).__name__}: {err.cause}".replace("\n", " "), file=sys.stderr)
        return EXIT_STAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
