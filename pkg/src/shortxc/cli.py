"""Command-line entry point.

Every subcommand reads one JSON run config (``--config``) plus ``--set
key=value`` overrides and works inside the config's ``output_dir``::

    cache/       vocabulary, encoded splits, TF-IDF, manifest.json
    tree.bin     label clusters (plus variant), tree.json summary
    model.ckpt   checkpoint, progress.csv
    metrics.txt  predictions.txt  ablation_<kind>.json

Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
``SHORTXC_THREADS`` caps BLAS threads; ``SHORTXC_DETERMINISTIC`` (0/1)
overrides the config's determinism flag (deterministic runs use one thread).
"""
import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import __version__, evaluator, ingest, toy
from .config import PRESETS, RunConfig, parse_override
from .errors import ConfigError, ParseError
from .label_tree import LabelTree, build_hlt, pifa
from .model import Model
from .tensor import blob
from .trainer import Trainer

log = logging.getLogger("shortxc")

CACHE_VERSION = 1


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    """Paths of the artifacts under one output directory."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.cache = self.root / "cache"
        self.manifest = self.cache / "manifest.json"
        self.tree = self.root / "tree.bin"
        self.tree_summary = self.root / "tree.json"
        self.checkpoint = self.root / "model.ckpt"
        self.progress = self.root / "progress.csv"
        self.metrics = self.root / "metrics.txt"
        self.predictions = self.root / "predictions.txt"

    def ablation(self, kind):
        return self.root / f"ablation_{kind}.json"


# ---- cache -------------------------------------------------------------------------------


def _cache_echo(cfg):
    return {"seq_len": cfg.seq_len, "version": CACHE_VERSION}


def _save_split(ws, name, ds, features=None):
    files = {
        f"{name}.ids.npy": ds.ids.astype(np.int32),
        f"{name}.lengths.npy": ds.lengths.astype(np.int32),
    }
    Y = ds.label_matrix()
    files[f"{name}.labels.indptr.npy"] = Y.indptr.astype(np.int64)
    files[f"{name}.labels.indices.npy"] = Y.indices.astype(np.int64)
    if features is not None:
        files[f"{name}.tfidf.indptr.npy"] = features.indptr.astype(np.int64)
        files[f"{name}.tfidf.indices.npy"] = features.indices.astype(np.int64)
        files[f"{name}.tfidf.data.npy"] = features.data.astype(np.float64)
    for fname, arr in files.items():
        np.save(ws.cache / fname, arr, allow_pickle=False)
    return list(files)


def cmd_preprocess(cfg, args):
    cfg.require("train_text", "train_labels")
    ws = Workspace(cfg)
    ws.cache.mkdir(parents=True, exist_ok=True)
    train = ingest.load_dataset(cfg.train_text, cfg.train_labels, seq_len=cfg.seq_len, require_labels=True)
    vocab = train.vocab
    vocab.save(ws.cache / "vocab.txt")
    names = ["vocab.txt"] + _save_split(ws, "train", train, ingest.tfidf(train, vocab))
    stats = {"train": {"instances": len(train), "labels": train.num_labels}, "vocab_size": len(vocab)}
    if cfg.test_text is not None:
        cfg.require("test_labels")
        test = ingest.load_dataset(cfg.test_text, cfg.test_labels, vocab=vocab, seq_len=cfg.seq_len)
        if test.num_labels != train.num_labels:
            raise ConfigError(f"test split declares {test.num_labels} labels, train {train.num_labels}")
        names += _save_split(ws, "test", test)
        stats["test"] = {"instances": len(test), "labels": test.num_labels}
    manifest = {
        "config": _cache_echo(cfg),
        "num_labels": train.num_labels,
        "stats": stats,
        "files": {n: _sha256(ws.cache / n) for n in sorted(names)},
    }
    _dump_json(ws.manifest, manifest)
    print(f"cache: {ws.cache}")
    print(f"labels: {train.num_labels}")
    print(f"train instances: {len(train)}")
    print(f"vocabulary: {len(vocab)}")
    if "test" in stats:
        print(f"test instances: {stats['test']['instances']}")
    return 0


def _manifest(ws):
    if not ws.manifest.exists():
        raise ConfigError(f"no preprocessed cache at {ws.cache}; run 'shortxc preprocess' first")
    m = json.loads(ws.manifest.read_text(encoding="utf-8"))
    if m["config"] != _cache_echo(ws.cfg):
        raise ConfigError(f"cache was built with {m['config']}, config asks for {_cache_echo(ws.cfg)}")
    return m


def _verify(ws, manifest, names):
    for n in names:
        want = manifest["files"].get(n)
        if want is None:
            raise ConfigError(f"cache has no {n}")
        if _sha256(ws.cache / n) != want:
            raise ConfigError(f"cache file {ws.cache / n} does not match its manifest hash")


def load_split(ws, name, with_features=False):
    """Dataset (and TF-IDF CSR when asked) of one cached split."""
    m = _manifest(ws)
    base = [f"{name}.ids.npy", f"{name}.lengths.npy", f"{name}.labels.indptr.npy", f"{name}.labels.indices.npy"]
    tf = [f"{name}.tfidf.indptr.npy", f"{name}.tfidf.indices.npy", f"{name}.tfidf.data.npy"] if with_features else []
    _verify(ws, m, ["vocab.txt"] + base + tf)
    arr = {n: np.load(ws.cache / n, allow_pickle=False) for n in base + tf}
    indptr, indices = arr[base[2]], arr[base[3]]
    labels = [indices[indptr[i] : indptr[i + 1]].astype(np.int64) for i in range(len(indptr) - 1)]
    vocab = ingest.Vocabulary.load(ws.cache / "vocab.txt")
    ds = ingest.Dataset(arr[base[0]], arr[base[1]], labels, m["num_labels"], vocab)
    if not with_features:
        return ds
    X = sp.csr_matrix((arr[tf[2]], arr[tf[1]], arr[tf[0]]), shape=(len(ds), len(vocab)))
    return ds, X


# ---- tree --------------------------------------------------------------------------------


def cmd_cluster(cfg, args):
    ws = Workspace(cfg)
    train, X = load_split(ws, "train", with_features=True)
    tree = build_hlt(pifa(train, X), cfg.num_clusters, seed=cfg.seed, max_iter=cfg.tree_max_iter)
    tree.check()
    tree.save(ws.tree)
    sizes = tree.sizes()
    summary = {
        "num_labels": tree.num_labels,
        "num_clusters": tree.num_clusters,
        "seed": cfg.seed,
        "max_iter": cfg.tree_max_iter,
        "max_size": int(sizes.max()),
        "min_size": int(sizes.min()),
        "mean_size": float(sizes.mean()),
        "sha256": _sha256(ws.tree),
    }
    _dump_json(ws.tree_summary, summary)
    for k in ("num_clusters", "max_size", "mean_size"):
        print(f"{k}: {summary[k]}")
    return 0


def _load_tree(ws, num_labels):
    if not ws.tree.exists():
        raise ConfigError(f"no label tree at {ws.tree}; run 'shortxc cluster' first")
    tree = LabelTree.load(ws.tree)
    if tree.num_clusters != ws.cfg.num_clusters or tree.num_labels != num_labels:
        raise ConfigError(
            f"tree has L={tree.num_labels}, L'={tree.num_clusters}; config and data need "
            f"L={num_labels}, L'={ws.cfg.num_clusters}"
        )
    return tree


# ---- model -------------------------------------------------------------------------------


def check_compatible(desc, cfg, num_labels):
    """Refuse a checkpoint whose L, L', S or d differ from the config and data."""
    want = {
        "L": num_labels,
        "L'": cfg.num_clusters if cfg.variant == "plus" else 0,
        "S": cfg.seq_len,
        "d": cfg.embed_dim,
        "variant": cfg.variant,
    }
    have = {
        "L": desc["num_labels"],
        "L'": desc["num_clusters"],
        "S": desc["encoder"]["seq_len"],
        "d": desc["encoder"]["embed_dim"],
        "variant": desc["variant"],
    }
    bad = [f"{k}: checkpoint {have[k]} vs config {want[k]}" for k in want if have[k] != want[k]]
    if bad:
        raise ConfigError("checkpoint does not match the config (" + "; ".join(bad) + ")")


def _fresh_model(cfg, train, tree, table=None):
    if table is None:
        pretrained = None
        if cfg.embeddings is not None:
            pretrained = ingest.load_embeddings(cfg.embeddings, d=cfg.embed_dim, vocab=train.vocab)
        table = ingest.build_embedding_table(train.vocab, pretrained, cfg.embed_dim, seed=cfg.seed).data
    return Model.create(cfg.variant, cfg.encoder_config(), table, train.num_labels, tree=tree, seed=cfg.seed)


def _train(cfg, train, tree, table=None, checkpoint=None, progress=None):
    model = _fresh_model(cfg, train, tree, table)
    trainer = Trainer(model, train, cfg.train_config(), progress=progress)
    if checkpoint is not None and checkpoint.exists():
        _, meta = blob.load(checkpoint)
        check_compatible(meta["model"], cfg, train.num_labels)
        trainer.restore(checkpoint)
        log.info("resuming from epoch %d", trainer.epoch)
    trainer.fit(checkpoint)
    return model, trainer


def cmd_train(cfg, args):
    ws = Workspace(cfg)
    train = load_split(ws, "train")
    tree = _load_tree(ws, train.num_labels) if cfg.variant == "plus" else None
    if args.fresh and ws.checkpoint.exists():
        ws.checkpoint.unlink()
    resume = ws.checkpoint.exists()
    with open(ws.progress, "a" if resume else "w", encoding="utf-8", newline="\n") as prog:
        if not resume:
            prog.write("epoch,meta_P@1,ext_P@1,loss\n")
        _, trainer = _train(cfg, train, tree, checkpoint=ws.checkpoint, progress=prog)
    last = trainer.history[-1] if trainer.history else {"epoch": trainer.epoch}
    print(f"checkpoint: {ws.checkpoint}")
    print(f"epochs: {last['epoch']}")
    if "loss" in last:
        print(f"final loss: {last['loss']:.6f}")
    return 0


def _load_model(ws, num_labels):
    if not ws.checkpoint.exists():
        raise ConfigError(f"no checkpoint at {ws.checkpoint}; run 'shortxc train' first")
    model, meta, _ = Model.load(ws.checkpoint)
    check_compatible(meta["model"], ws.cfg, num_labels)
    return model


def _propensity(cfg, train):
    return evaluator.PropensityModel.from_dataset(train, cfg.propensity_a, cfg.propensity_b)


def _top_k(cfg):
    return cfg.top_k if cfg.variant == "plus" else None


def cmd_eval(cfg, args):
    ws = Workspace(cfg)
    train = load_split(ws, "train")
    test = load_split(ws, "test")
    model = _load_model(ws, train.num_labels)
    report, _ = evaluator.evaluate_model(model, test, _propensity(cfg, train), _top_k(cfg))
    text = report.format()
    ws.metrics.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def _encode_file(path, vocab, seq_len):
    with open(path, encoding="utf-8") as fh:
        texts = fh.read().splitlines()
    stop = ingest.default_stopwords()
    ids = np.zeros((len(texts), seq_len), dtype=np.int32)
    lengths = np.zeros(len(texts), dtype=np.int32)
    for i, t in enumerate(texts):
        seq = ingest.pad_truncate(vocab.encode(ingest.tokenize(t, stop)), seq_len)
        ids[i], lengths[i] = seq.ids, seq.true_len
    return ids, lengths


def cmd_predict(cfg, args):
    ws = Workspace(cfg)
    train = load_split(ws, "train")
    model = _load_model(ws, train.num_labels)
    if args.input is not None:
        ids, lengths = _encode_file(args.input, train.vocab, cfg.seq_len)
    else:
        test = load_split(ws, "test")
        ids, lengths = test.ids, test.lengths
    k = args.k if args.k is not None else cfg.predict_k
    preds = evaluator.predict(model, ids, lengths, k, _top_k(cfg))
    out = Path(args.output) if args.output else ws.predictions
    preds.write(out)
    print(f"predictions: {out} ({len(preds)} lines)")
    return 0


def _stats_json(mean_sd):
    return {k: {"mean": m, "sd": s} for k, (m, s) in mean_sd.items()}


def cmd_ablate(cfg, args):
    ws = Workspace(cfg)
    train = load_split(ws, "train")
    test = load_split(ws, "test")
    prop = _propensity(cfg, train)
    trials = args.trials if args.trials is not None else cfg.trials
    if args.kind == "word":
        model = _load_model(ws, train.num_labels)
        base, reports, stats = evaluator.word_permutation_harness(model, test, prop, trials, cfg.seed, _top_k(cfg))
        result = {"kind": "word", "baseline": base.to_dict(), "trials": [r.to_dict() for r in reports]}
    else:
        tree = _load_tree(ws, train.num_labels) if cfg.variant == "plus" else None
        table = _fresh_model(cfg, train, tree).params["enc.emb"].data

        def train_fn(t):
            return _train(cfg, train, tree, table=t)[0]

        reports, stats = evaluator.embedding_permutation_harness(
            train_fn, table, test, prop, trials, cfg.seed, _top_k(cfg)
        )
        result = {"kind": "embedding", "trials": [r.to_dict() for r in reports]}
    result["summary"] = _stats_json(stats)
    _dump_json(ws.ablation(args.kind), result)
    for key in ("P@1", "P@5", "PSP@5"):
        m, s = stats[key]
        print(f"{key}: {m:.6f} +- {s:.6f}")
    return 0


def cmd_make_toy(args):
    out = Path(args.directory)
    toy.write_toy(out, seed=args.seed)
    for variant in ("full", "plus"):
        cfg = {
            "preset": f"toy-{variant}",
            "train_text": "trn_X.txt",
            "train_labels": "trn_Y.txt",
            "test_text": "tst_X.txt",
            "test_labels": "tst_Y.txt",
            "output_dir": f"run-{variant}",
        }
        _dump_json(out / f"toy-{variant}.json", cfg)
    print(f"toy dataset and configs written to {out}")
    return 0


# ---- plumbing ----------------------------------------------------------------------------

COMMANDS = {
    "preprocess": cmd_preprocess,
    "cluster": cmd_cluster,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="shortxc", description="Short-text extreme multi-label classification.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in (
        ("preprocess", "tokenize, build the vocabulary and TF-IDF cache"),
        ("cluster", "build the balanced label tree"),
        ("train", "train (or resume) a model"),
        ("eval", "P@k and PSP@k on the test split"),
        ("predict", "write ranked label:score lines"),
        ("ablate", "word-order or embedding-order permutation trials"),
    ):
        sp_ = sub.add_parser(name, help=helptext)
        sp_.add_argument("--config", required=True, help="JSON run config")
        sp_.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if name == "train":
            sp_.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
        if name == "predict":
            sp_.add_argument("--input", help="raw text file, one query per line (default: test split)")
            sp_.add_argument("--output", help="output path (default: <output_dir>/predictions.txt)")
            sp_.add_argument("-k", type=int, help="labels per line")
        if name == "ablate":
            sp_.add_argument("--kind", choices=("word", "embedding"), required=True)
            sp_.add_argument("--trials", type=int)
    mk = sub.add_parser("make-toy", help="write the synthetic toy dataset and configs")
    mk.add_argument("directory")
    mk.add_argument("--seed", type=int, default=0)
    sub.add_parser("presets", help="list the named presets")
    return p


def _thread_limit(cfg):
    env_det = os.environ.get("SHORTXC_DETERMINISTIC")
    if env_det is not None:
        if env_det not in ("0", "1"):
            raise ConfigError("SHORTXC_DETERMINISTIC must be 0 or 1")
        cfg.deterministic = env_det == "1"
    env_threads = os.environ.get("SHORTXC_THREADS")
    if env_threads is not None:
        try:
            cfg.threads = int(env_threads)
        except ValueError as exc:
            raise ConfigError(f"SHORTXC_THREADS must be an integer, got {env_threads!r}") from exc
        if cfg.threads < 1:
            raise ConfigError("SHORTXC_THREADS must be positive")
    if cfg.deterministic:
        return 1
    return cfg.threads


def _limits(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "make-toy":
        return cmd_make_toy(args)
    if args.command == "presets":
        for name in sorted(PRESETS):
            print(f"{name}: {json.dumps(PRESETS[name], sort_keys=True)}")
        return 0
    overrides = dict(parse_override(s) for s in args.set)
    cfg = RunConfig.load(args.config, overrides)
    threads = _thread_limit(cfg)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    with _limits(threads):
        return COMMANDS[args.command](cfg, args)


def main(argv=None):
    try:
        return run(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except (ConfigError, ParseError) as exc:
        print(f"shortxc: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"shortxc: error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"shortxc: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
