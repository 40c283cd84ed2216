"""``faithlab`` command line: gen, train, unlearn, eval and sweep.

Every subcommand accepts ``--config FILE`` plus one flag per configuration
key (``--neuron_ratio 0.1``); flags override the file.  Exit codes:

0  success
2  configuration error (unknown key, bad value)
3  memorization training did not reach its target
4  numeric abort during unlearning
5  missing or malformed input files
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .evalkit import classify_superficial, emit_report, evaluate, write_score_table
from .microlm import ModelConfig, ModelError, load_checkpoint, save_checkpoint
from .runconfig import KEYS, ConfigError, RunConfig, dump_config, load_config, versions
from .training import ConvergenceError, train_memorization
from .unlearn import NumericAbort, unlearn_run
from .worldgen import DatasetFormatError, WorldGenError, audit_dataset, generate_dataset, read_dataset, write_dataset, write_vocab

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_NUMERIC, EXIT_DATA = 0, 2, 3, 4, 5

log = logging.getLogger("faithlab")


class DataError(RuntimeError):
    pass


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, **extra):
    """Record ``command`` in ``out_dir/manifest.json``; entries of other commands are kept."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    runs = {}
    if path.exists():
        try:
            runs = json.loads(path.read_text(encoding="utf-8")).get("runs", {})
        except (ValueError, AttributeError):
            runs = {}
    entry = {"config": cfg.to_dict(), "seeds": cfg.seeds, "versions": versions(),
             "created": time.strftime("%Y-%m-%dT%H:%M:%S"), **extra}
    runs[command] = entry
    path.write_text(json.dumps({"last": command, "runs": runs}, indent=2, sort_keys=True, default=str) + "\n",
                    encoding="utf-8")
    (out_dir / f"config_{command}.txt").write_text(dump_config(cfg), encoding="utf-8")
    return entry


def _load_dataset(cfg):
    path = cfg.path("dataset", "dataset.jsonl")
    if not path.exists():
        raise DataError(f"dataset not found: {path} (run `faithlab gen` first)")
    try:
        return read_dataset(path), path
    except DatasetFormatError as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_model(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path} (run `faithlab train` first)")
    try:
        return load_checkpoint(path)[0]
    except (ModelError, KeyError, ValueError, OSError) as exc:
        raise DataError(f"{path}: {exc}") from None


# -- subcommands -----------------------------------------------------------------
def cmd_gen(cfg: RunConfig):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    wk = cfg.world_kwargs()
    try:
        ds = generate_dataset(**wk)
    except WorldGenError as exc:
        raise ConfigError(str(exc)) from None
    write_dataset(ds.clusters, ds.splits, out / "dataset.jsonl", vocab=ds.vocab, seed=ds.seed, params=ds.params)
    write_vocab(ds.vocab, out / "vocab.json")
    (out / "splits.json").write_text(json.dumps(ds.splits.to_record(), sort_keys=True) + "\n", encoding="utf-8")
    counts = ds.counts()
    failures = audit_dataset(ds)
    write_manifest(out, "gen", cfg, counts=counts, audit_failures=len(failures))
    print(f"clusters={counts['clusters']} base={counts['base']} paraphrased={counts['paraphrased']} "
          f"multihop={counts['multihop']} same_answer={counts['same_answer']} vocab={len(ds.vocab)}")
    print(f"splits: forget={len(ds.splits.forget)} retain={len(ds.splits.retain)} test={len(ds.splits.test)}")
    return EXIT_OK


def cmd_train(cfg: RunConfig):
    ds, ds_path = _load_dataset(cfg)
    out = Path(cfg.out_dir)
    model = _load_model(cfg.resume) if cfg.resume else None
    mcfg = ModelConfig(vocab_size=len(ds.vocab), d_model=cfg.d_model, n_layers=cfg.n_layers, n_heads=cfg.n_heads,
                       d_ffn=cfg.d_ffn, max_seq_len=cfg.max_seq_len, seed=cfg.seeds["model"], dtype=cfg.dtype)
    t0 = time.time()
    try:
        model, summary = train_memorization(
            ds, model, model_config=mcfg, target=cfg.train_target, max_epochs=cfg.train_epochs, lr=cfg.train_lr,
            batch_size=cfg.train_batch_size, extra_epochs=cfg.train_extra_epochs, seed=cfg.seeds["model"],
            raise_on_failure=True)
    except ConvergenceError as exc:
        s = exc.summary
        write_manifest(out, "train", cfg, dataset=str(ds_path), converged=False, epochs=s.epochs,
                       base_accuracy=s.base_accuracy, corpus_accuracy=s.corpus_accuracy, trace=s.trace)
        print(f"error: {exc}", file=sys.stderr)
        for ep, b, c in s.trace[-5:]:
            print(f"  epoch {ep}: base={b:.2f} corpus={c:.2f}", file=sys.stderr)
        return EXIT_CONVERGENCE
    ckpt = cfg.path("checkpoint", "model.npz")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt, {"seeds": cfg.seeds, "base_accuracy": summary.base_accuracy})
    write_manifest(out, "train", cfg, dataset=str(ds_path), checkpoint=str(ckpt), converged=True,
                   epochs=summary.epochs, step=model.step, base_accuracy=summary.base_accuracy,
                   corpus_accuracy=summary.corpus_accuracy, seconds=round(time.time() - t0, 2))
    print(f"memorized: base={summary.base_accuracy:.2f}% corpus={summary.corpus_accuracy:.2f}% "
          f"epochs={summary.epochs} step={model.step} -> {ckpt}")
    return EXIT_OK


def _unlearn_once(cfg, ds, model, out: Path, ucfg, tag="report"):
    m2, history = unlearn_run(model, ds, ucfg, checkpoint_dir=out / "checkpoints")
    after = evaluate(m2, ds)
    before = evaluate(model, ds)
    verdicts = classify_superficial(before.memorization, after.memorization, ds.clusters, ds.splits.forget, ds.vocab)
    emit_report(after, verdicts, out / f"{tag}.jsonl", method=ucfg.method, baseline=before)
    history.write(out / f"{tag}_history.jsonl")
    return m2, history, after, verdicts


def cmd_unlearn(cfg: RunConfig):
    ds, ds_path = _load_dataset(cfg)
    ckpt = cfg.path("checkpoint", "model.npz")
    model = _load_model(ckpt)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ucfg = cfg.unlearn_config()
    try:
        m2, history, rep, verdicts = _unlearn_once(cfg, ds, model, out, ucfg)
    except NumericAbort as exc:
        write_manifest(out, "unlearn", cfg, aborted=True, snapshot=exc.snapshot)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(m2, out / "unlearned.npz", {"method": ucfg.method, "epochs": len(history)})
    write_manifest(out, "unlearn", cfg, dataset=str(ds_path), checkpoint=str(ckpt), lr=ucfg.learning_rate,
                   epochs=len(history), early_stopped=history.early_stopped)
    n_sup = sum(v.is_superficial for v in verdicts)
    print(f"{ucfg.method}: epochs={len(history)} stopped={history.early_stopped} UA={rep.ua:.2f} "
          f"UA_ext={rep.ua_ext:.2f} TA={rep.ta:.2f} SA={rep.sa:.2f} MA={rep.ma:.2f} Score={rep.score:.2f} "
          f"superficial={n_sup}/{len(verdicts)}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig):
    ds, ds_path = _load_dataset(cfg)
    ckpt = cfg.path("checkpoint", "model.npz")
    model = _load_model(ckpt)
    out = Path(cfg.out_dir)
    rep = evaluate(model, ds)
    verdicts, base = [], None
    if cfg.baseline_checkpoint:
        base = evaluate(_load_model(cfg.baseline_checkpoint), ds)
        verdicts = classify_superficial(base.memorization, rep.memorization, ds.clusters, ds.splits.forget, ds.vocab)
    emit_report(rep, verdicts, out / "eval.jsonl", method=Path(ckpt).stem, baseline=base)
    write_manifest(out, "eval", cfg, dataset=str(ds_path), checkpoint=str(ckpt))
    print(f"UA={rep.ua:.2f} UA_ext={rep.ua_ext:.2f} TA={rep.ta:.2f} SA={rep.sa:.2f} MA_f={rep.ma_f:.2f} "
          f"MA_t={rep.ma_t:.2f} MA={rep.ma:.2f} Score={rep.score:.2f}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig):
    ds, ds_path = _load_dataset(cfg)
    ckpt = cfg.path("checkpoint", "model.npz")
    model = _load_model(ckpt)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    key = cfg.sweep_key
    if key == "seed":
        raise ConfigError("sweep_key cannot be the root seed")
    if key not in cfg.unlearn_config().to_dict():
        raise ConfigError(f"sweep_key {key!r} is not an unlearning key")
    rows, records = [], []
    for raw in cfg.sweep_values:
        probe = RunConfig(dict(cfg.values, **{key: raw}))
        ucfg = probe.unlearn_config()
        tag = f"{key}_{raw}"
        try:
            _, history, rep, verdicts = _unlearn_once(probe, ds, model, out / tag, ucfg, "report")
        except NumericAbort as exc:
            print(f"error: {key}={raw}: {exc}", file=sys.stderr)
            write_manifest(out, "sweep", cfg, aborted_at=raw, snapshot=exc.snapshot)
            return EXIT_NUMERIC
        rows.append(rep.row(f"{ucfg.method}[{key}={raw}]"))
        records.append({"key": key, "value": ucfg.to_dict()[key], "epochs": len(history), "early_stopped": history.early_stopped,
                        "superficial": sum(v.is_superficial for v in verdicts), **rep.row(ucfg.method)})
        print(f"{key}={raw}: epochs={len(history)} stopped={history.early_stopped} Score={rep.score:.2f}")
    write_score_table(rows, out / "sweep.csv")
    with open(out / "sweep.jsonl", "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    write_manifest(out, "sweep", cfg, dataset=str(ds_path), checkpoint=str(ckpt))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "unlearn": cmd_unlearn, "eval": cmd_eval, "sweep": cmd_sweep}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    common.add_argument("-v", "--verbose", action="store_true")
    keys = common.add_argument_group("configuration keys")
    for k in KEYS:
        keys.add_argument(f"--{k.name}", dest=f"key_{k.name}", default=None, metavar="VALUE",
                          help=f"{k.help} (default: {k.default})" if k.help else f"default: {k.default}")
    parser = argparse.ArgumentParser(prog="faithlab", description="Faithful unlearning laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"gen": "synthesize a world and write the dataset", "train": "memorization-train the micro LM",
             "unlearn": "unlearn the forget split and write reports", "eval": "score a checkpoint",
             "sweep": "unlearn once per value of sweep_key"}
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {k.name: getattr(args, f"key_{k.name}") for k in KEYS if getattr(args, f"key_{k.name}") is not None}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
