"""Command-line experiment runner: generate / train / eval / report.

A run is described by one JSON config (dataset, model, training and test
protocol, output directory, base seed) plus a handful of flag overrides.
Every command re-archives the resolved config into the run directory, so
a run directory plus the package version is enough to reproduce all of
its outputs bit for bit in 64-bit single-threaded mode.

Exit codes: 0 success, 1 usage error, 2 data-format error (malformed
dataset, checkpoint, or table files), 3 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import analysis, data
from . import checkpoint as ckpt
from . import model as model_mod
from . import tensor as T
from . import train as train_mod

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

# spawn-key namespaces for the per-run generators (data epochs use small
# keys; these stay out of their way)
_INIT_KEY = 2 ** 29
_EVAL_KEY = 2 ** 31


class UsageError(Exception):
    """Bad invocation or config; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we own the codes
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULT_TEST_SNRS = (64.0, 4.0, 1.0, 0.25, 0.0625)


@dataclasses.dataclass
class ExperimentConfig:
    dataset: dict
    model: object                      # preset name or inline spec dict
    train: train_mod.TrainConfig
    test_frames: int = 51
    test_repetitions: int = 5
    test_snr_set: tuple = DEFAULT_TEST_SNRS
    test_items: int | None = None      # cap evaluated items (None = all)
    out: str = "runs/run"
    seed: int = 0
    precision: int = 32

    def __post_init__(self):
        kind = self.dataset.get("kind")
        if kind not in ("toyset", "cifar10"):
            raise UsageError(f"dataset.kind must be 'toyset' or 'cifar10', got {kind!r}")
        if kind == "toyset":
            self.dataset.setdefault("n_per_class", 100)
            self.dataset.setdefault("test_per_class", 20)
            self.dataset.setdefault("image_size", 16)
        elif "files" not in self.dataset or "test_files" not in self.dataset:
            raise UsageError("cifar10 dataset needs 'files' and 'test_files' lists")
        if isinstance(self.model, str):
            if self.model not in model_mod.PRESETS:
                raise UsageError(f"unknown model preset {self.model!r}; "
                                 f"known: {', '.join(model_mod.PRESETS)}")
        elif isinstance(self.model, dict):
            try:
                model_mod.ModelSpec.from_dict(self.model)
            except Exception as e:
                raise UsageError(f"inline model spec is invalid: {e}") from e
        else:
            raise UsageError("model must be a preset name or an inline spec object")
        if self.test_frames < 1 or self.test_repetitions < 1:
            raise UsageError("test_frames and test_repetitions must be positive")
        self.test_snr_set = tuple(float(s) for s in self.test_snr_set)
        if not self.test_snr_set or any(s <= 0 for s in self.test_snr_set):
            raise UsageError("test_snr_set must be non-empty and positive")
        if self.precision not in (32, 64):
            raise UsageError(f"precision must be 32 or 64, got {self.precision}")

    def to_dict(self):
        return {
            "dataset": self.dataset,
            "model": self.model,
            "train": self.train.to_dict(),
            "test": {"frames": self.test_frames,
                     "repetitions": self.test_repetitions,
                     "snr_set": list(self.test_snr_set),
                     "items": self.test_items},
            "out": self.out,
            "seed": self.seed,
            "precision": self.precision,
        }

    @staticmethod
    def from_dict(d):
        d = dict(d)
        known = {"dataset", "model", "train", "test", "out", "seed", "precision"}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        for key in ("dataset", "model"):
            if key not in d:
                raise UsageError(f"config is missing required key {key!r}")
        try:
            tc = train_mod.TrainConfig.from_dict(d.get("train", {}))
        except (TypeError, ValueError) as e:
            raise UsageError(f"bad train section: {e}") from e
        test = d.get("test", {})
        return ExperimentConfig(
            dataset=dict(d["dataset"]),
            model=d["model"],
            train=tc,
            test_frames=test.get("frames", 51),
            test_repetitions=test.get("repetitions", 5),
            test_snr_set=tuple(test.get("snr_set", DEFAULT_TEST_SNRS)),
            test_items=test.get("items"),
            out=d.get("out", "runs/run"),
            seed=d.get("seed", 0),
            precision=d.get("precision", 32),
        )


def load_config(path, overrides=None):
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise UsageError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise UsageError(f"{path} must hold a JSON object")
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    return ExperimentConfig.from_dict(raw)


def run_paths(cfg):
    out = cfg.out
    return {
        "out": out,
        "config": os.path.join(out, "config.json"),
        "data": os.path.join(out, "data"),
        "checkpoints": os.path.join(out, "checkpoints"),
        "logs": os.path.join(out, "logs"),
        "tables": os.path.join(out, "tables"),
        "report": os.path.join(out, "report"),
    }


def archive_config(cfg):
    paths = run_paths(cfg)
    os.makedirs(paths["out"], exist_ok=True)
    with open(paths["config"], "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return paths


def model_name(cfg):
    return cfg.model if isinstance(cfg.model, str) else cfg.model["name"]


def model_spec(cfg):
    size = cfg.dataset.get("image_size", 32 if cfg.dataset["kind"] == "cifar10" else 16)
    if isinstance(cfg.model, str):
        return model_mod.preset(cfg.model, input_size=size)
    return model_mod.ModelSpec.from_dict(cfg.model)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def _toyset_paths(cfg):
    d = run_paths(cfg)["data"]
    return os.path.join(d, "train.toys"), os.path.join(d, "test.toys")


def _generate_toyset(cfg):
    train_path, test_path = _toyset_paths(cfg)
    os.makedirs(os.path.dirname(train_path), exist_ok=True)
    ds = cfg.dataset
    train_imgs = data.synth_toyset(ds["n_per_class"], ds["image_size"],
                                   data.sequence_rng(cfg.seed, 100))
    test_imgs = data.synth_toyset(ds["test_per_class"], ds["image_size"],
                                  data.sequence_rng(cfg.seed, 101))
    data.save_toyset(train_path, train_imgs)
    data.save_toyset(test_path, test_imgs)
    return train_path, test_path


def _file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


def load_corpora(cfg):
    """Normalized (train, test) image lists; train statistics apply to both."""
    if cfg.dataset["kind"] == "toyset":
        train_path, test_path = _toyset_paths(cfg)
        if not (os.path.exists(train_path) and os.path.exists(test_path)):
            log.info("toyset archives missing; generating them")
            _generate_toyset(cfg)
        train_imgs = data.load_toyset(train_path)
        test_imgs = data.load_toyset(test_path)
    else:
        train_imgs, test_imgs = [], []
        for p in cfg.dataset["files"]:
            train_imgs.extend(data.load_cifar10(p))
        for p in cfg.dataset["test_files"]:
            test_imgs.extend(data.load_cifar10(p))
    train_norm, (mean, std) = data.preprocess_corpus(train_imgs)
    test_norm = [data.LabeledImage((im.pixels - mean) / std, im.label)
                 for im in test_imgs]
    return train_norm, test_norm, (mean, std)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg):
    paths = archive_config(cfg)
    if cfg.dataset["kind"] == "toyset":
        train_path, test_path = _generate_toyset(cfg)
        raw = data.load_toyset(train_path)
        print(f"wrote {train_path} ({len(raw)} images) "
              f"sha256={_file_digest(train_path)}")
        print(f"wrote {test_path} ({len(data.load_toyset(test_path))} images) "
              f"sha256={_file_digest(test_path)}")
    else:
        raw = []
        for p in cfg.dataset["files"] + cfg.dataset["test_files"]:
            batch = data.load_cifar10(p)
            print(f"validated {p}: {len(batch)} records")
            raw.extend(batch)
    stacked = np.concatenate([im.pixels.ravel() for im in raw])
    print(f"corpus stats before normalization: mean={stacked.mean():.6g} "
          f"std={stacked.std():.6g}")
    norm, _ = data.preprocess_corpus(raw)
    stacked = np.concatenate([im.pixels.ravel() for im in norm])
    print(f"corpus stats after normalization:  mean={stacked.mean():.6g} "
          f"std={stacked.std():.6g}")
    return EXIT_OK


def _checkpoint_path(cfg, k):
    return os.path.join(run_paths(cfg)["checkpoints"],
                        f"{model_name(cfg)}__s{k}.ckpt")


def _log_path(cfg, k):
    return os.path.join(run_paths(cfg)["logs"],
                        f"train_{model_name(cfg)}__s{k}.csv")


def train_one_seed(cfg, k, resume=False):
    """Train the configured model with run seed (cfg.seed + k); returns paths."""
    T.set_default_dtype(np.float32 if cfg.precision == 32 else np.float64)
    corpus, _, _ = load_corpora(cfg)
    spec = model_spec(cfg)
    seed_k = cfg.seed + k
    ckpt_path = _checkpoint_path(cfg, k)
    os.makedirs(os.path.dirname(ckpt_path), exist_ok=True)
    log_path = _log_path(cfg, k)
    os.makedirs(os.path.dirname(log_path), exist_ok=True)

    start_epoch, optimizer, dropout_rng = 0, None, None
    if resume and os.path.exists(ckpt_path):
        bundle = ckpt.load_checkpoint(
            ckpt_path, expected_hash=ckpt.spec_hash(spec.to_dict()))
        model = bundle.model
        optimizer, dropout_rng = bundle.optimizer, bundle.rng
        start_epoch = bundle.epoch
        log.info("resuming %s seed %d from epoch %d", model_name(cfg), k, start_epoch)
    else:
        model = model_mod.build_model(spec, data.sequence_rng(seed_k, _INIT_KEY))
    if start_epoch >= cfg.train.epochs:
        log.info("%s seed %d already trained to epoch %d", model_name(cfg), k, start_epoch)
        return ckpt_path, log_path

    def save(model, optimizer, rng, epoch):
        ckpt.save_checkpoint(ckpt_path, model, optimizer, rng, epoch=epoch + 1)

    train_mod.train(model, corpus, cfg.train, seed=seed_k, optimizer=optimizer,
                    dropout_rng=dropout_rng, start_epoch=start_epoch,
                    on_epoch_end=save, log_path=log_path)
    return ckpt_path, log_path


def _train_worker(cfg_dict, k, resume):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return train_one_seed(cfg, k, resume)


def cmd_train(cfg, jobs=1, resume=False):
    archive_config(cfg)
    ks = list(range(cfg.train.seeds))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_worker, cfg.to_dict(), k, resume)
                       for k in ks]
            results = [f.result() for f in futures]
    else:
        results = [train_one_seed(cfg, k, resume) for k in ks]
    for ckpt_path, log_path in results:
        print(f"checkpoint {ckpt_path}")
        print(f"log {log_path}")
    return EXIT_OK


def _table_path(cfg, k, snr):
    return os.path.join(run_paths(cfg)["tables"],
                        f"{model_name(cfg)}__s{k}__snr{snr!r}.csv")


def eval_one(cfg, k, snr, batch=64):
    """Evaluate one checkpoint at one SNR; writes and returns the table path."""
    T.set_default_dtype(np.float32 if cfg.precision == 32 else np.float64)
    _, test_imgs, _ = load_corpora(cfg)
    if cfg.test_items is not None:
        test_imgs = test_imgs[:cfg.test_items]
    if not test_imgs:
        raise data.DataFormatError("test corpus is empty")
    spec = model_spec(cfg)
    bundle = ckpt.load_checkpoint(
        _checkpoint_path(cfg, k), expected_hash=ckpt.spec_hash(spec.to_dict()))
    model = bundle.model

    seed_k = cfg.seed + k
    snr_idx = cfg.test_snr_set.index(snr)
    n, reps, frames = len(test_imgs), cfg.test_repetitions, cfg.test_frames
    probs = np.empty((n, reps, frames, 10), dtype=np.float64)
    labels = np.array([im.label for im in test_imgs], dtype=np.int64)
    with T.no_grad():
        for rep in range(reps):
            for lo in range(0, n, batch):
                chunk = test_imgs[lo:lo + batch]
                seqs = [data.make_sequence(
                            im.pixels, frames, snr,
                            data.sequence_rng(seed_k, _EVAL_KEY, snr_idx, rep, lo + j))
                        for j, im in enumerate(chunk)]
                out = model_mod.forward_sequence(model, np.stack(seqs),
                                                 training=False)
                probs[lo:lo + len(chunk), rep] = out.data.astype(np.float64)

    table = analysis.PredictionTable(probs, labels, np.full(n, float(snr)),
                                     model=model_name(cfg), seed=seed_k)
    path = _table_path(cfg, k, snr)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    table.save_csv(path)
    return path


def _eval_worker(cfg_dict, k, snr):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return eval_one(cfg, k, snr)


def cmd_eval(cfg, jobs=1):
    archive_config(cfg)
    tasks = [(k, snr) for k in range(cfg.train.seeds) for snr in cfg.test_snr_set]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_eval_worker, cfg.to_dict(), k, snr)
                       for k, snr in tasks]
            results = [f.result() for f in futures]
    else:
        results = [eval_one(cfg, k, snr) for k, snr in tasks]
    for path in results:
        print(f"table {path}")
    return EXIT_OK


def _write_csv(path, header, rows):
    import csv as _csv
    with open(path, "w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def write_report_files(report, report_dir):
    """The JSON report plus one CSV sidecar per figure-equivalent section."""
    os.makedirs(report_dir, exist_ok=True)
    out = {"report": os.path.join(report_dir, "report.json")}
    with open(out["report"], "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")

    rows = [(m, snr, t, c["raw"][t], c["bayes"][t])
            for m, per in report["accuracy_curves"].items()
            for snr, c in per.items() for t in c["frames"]]
    _write_csv(os.path.join(report_dir, "accuracy_curves.csv"),
               ["model", "snr", "frame", "raw", "bayes"], rows)
    rows = [(m, snr, v["raw"], v["bayes"])
            for m, per in report["last_frame_accuracy"].items()
            for snr, v in per.items()]
    _write_csv(os.path.join(report_dir, "last_frame_accuracy.csv"),
               ["model", "snr", "raw", "bayes"], rows)
    rows = [(pair, snr, t, d[t])
            for pair, per in report["difference_curves"].items()
            for snr, d in per.items() for t in range(len(d))]
    _write_csv(os.path.join(report_dir, "difference_curves.csv"),
               ["pair", "snr", "frame", "difference"], rows)
    rows = [(m, snr, src, f["a"], f["c"], f["tau"], f["residual"],
             f["converged"], f["increase"])
            for m, per in report["exp_fits"].items()
            for snr, fits in per.items() for src, f in fits.items()]
    _write_csv(os.path.join(report_dir, "exp_fits.csv"),
               ["model", "snr", "source", "a", "c", "tau", "residual",
                "converged", "increase"], rows)
    rows = [(m, snr, t, c["rate"][t])
            for m, per in report["rejection_rates"].items()
            for snr, c in per.items() for t in c["frames"]]
    _write_csv(os.path.join(report_dir, "rejection_rates.csv"),
               ["model", "snr", "frame", "rate"], rows)
    rows = [(m, snr, b["lo_pct"], b["hi_pct"], b["mean_p"], b["frac_pos"], b["count"])
            for m, per in report["reliability"].items()
            for snr, bins in per.items() for b in bins]
    _write_csv(os.path.join(report_dir, "reliability.csv"),
               ["model", "snr", "lo_pct", "hi_pct", "mean_p", "frac_pos", "count"], rows)
    rows = [(m, snr, f["a"], f["c"], f["r2"], f["n_used"])
            for m, per in report["calibration"].items()
            for snr, f in per.items()]
    _write_csv(os.path.join(report_dir, "calibration.csv"),
               ["model", "snr", "a", "c", "r2", "n_used"], rows)
    rows = [(m, snr, v["positive_above_0.4"], v["negative_below_0.01"],
             v["n_positive"], v["n_negative"])
            for m, per in report["cdf"].items() for snr, v in per.items()]
    _write_csv(os.path.join(report_dir, "cdf.csv"),
               ["model", "snr", "positive_above_0.4", "negative_below_0.01",
                "n_positive", "n_negative"], rows)
    return out["report"]


def cmd_report(cfg, tables_dir=None):
    archive_config(cfg)
    tables_dir = tables_dir or run_paths(cfg)["tables"]
    files = sorted(glob.glob(os.path.join(tables_dir, "*.csv")))
    if not files:
        raise data.DataFormatError(f"no prediction tables under {tables_dir}")
    tables = []
    for path in files:
        name = os.path.basename(path).split("__")[0]
        tables.append(analysis.PredictionTable.load_csv(path, model=name))
    report = analysis.build_report(tables)
    path = write_report_files(report, run_paths(cfg)["report"])
    print(f"report {path}")
    for gap in report["gaps"]:
        print(f"gap: {gap}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="grucnn",
                     description="Train and analyze sequence classifiers on "
                                 "noisy jittered image streams.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, helptext in (("generate", "write or validate dataset artifacts"),
                           ("train", "train one checkpoint per seed"),
                           ("eval", "evaluate checkpoints into prediction tables"),
                           ("report", "assemble the analysis report from tables")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override base seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--precision", type=int, choices=(32, 64), default=None,
                       help="float width for parameters and arithmetic")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel worker processes for independent jobs")
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue from existing checkpoints")
        if name == "report":
            p.add_argument("--tables", default=None,
                           help="read tables from this directory instead")
    return parser


def main(argv=None):
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    prior_dtype = T.get_default_dtype()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (generate/train/eval/report)")
        if getattr(args, "jobs") < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config,
                          overrides={"seed": args.seed, "out": args.out,
                                     "precision": args.precision})
        T.set_default_dtype(np.float32 if cfg.precision == 32 else np.float64)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg, jobs=args.jobs, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, jobs=args.jobs)
        return cmd_report(cfg, tables_dir=args.tables)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DataFormatError, ckpt.CheckpointError, analysis.AnalysisError,
            OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except train_mod.DivergenceError as e:
        print(f"training diverged: {e} (last epoch checkpoint retained)",
              file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        T.set_default_dtype(prior_dtype)


if __name__ == "__main__":
    sys.exit(main())
