"""Command-line pipeline: dataset construction, synthetic benchmarks,
splitting, training, evaluation, attribution, and motif extraction.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields

import numpy as np

from . import __version__
from . import attribution as attr
from . import data as dat
from . import metrics as met
from . import training as trn
from .model import ModelConfig, TcnModel, receptive_field

logger = logging.getLogger("tcnbind")

DEFAULT_MOTIFS = ("CACGTG", "TTTCGCGC", "TGACTCA", "GGGCGG",
                  "TGACGTCA", "CAGCTG", "TTGACA", "GGGACTTTCC")

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(trn.TrainConfig)}
_FLOAT_KEYS = {"lr_max", "warmup_frac", "dropout"}
_DERIVED_KEYS = {"input_length", "num_labels"}  # cross-checked, set by dataset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _convert(key: str, text: str):
    if key in ("monitor", "classifier_input"):
        return text
    if key in _FLOAT_KEYS:
        return float(text)
    if key == "cnn_kernel_size":
        return None if text.lower() in ("", "none") else int(text)
    return int(text)


def load_run_config(path: str | None, overrides: list[str]) -> dict:
    """Flat key=value configuration; file first, then flag overrides.
    Unknown keys are rejected."""
    known = _MODEL_KEYS | _TRAIN_KEYS
    resolved: dict = {}

    def absorb(text: str, origin: str):
        if "=" not in text:
            raise UsageError(f"{origin}: expected key=value, got {text!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        if key not in known:
            raise UsageError(f"{origin}: unknown configuration key {key!r}")
        try:
            resolved[key] = _convert(key, value)
        except ValueError:
            raise UsageError(f"{origin}: bad value for {key}: {value!r}") from None

    if path:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                absorb(line, f"{path}:{lineno}")
    for item in overrides or []:
        absorb(item, "--set")
    return resolved


def _config_hash(resolved: dict) -> str:
    text = "\n".join(f"{k}={resolved[k]}" for k in sorted(resolved))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _provenance(resolved: dict, seed) -> list[str]:
    digest = _config_hash(resolved)
    logger.info("resolved config (hash %s): %s", digest,
                " ".join(f"{k}={v}" for k, v in sorted(resolved.items())))
    return [f"tcnbind {__version__} config_hash={digest} seed={seed}"]


def _split_configs(resolved: dict, ds: dat.EncodedDataset):
    model_kwargs = {k: v for k, v in resolved.items() if k in _MODEL_KEYS}
    train_kwargs = {k: v for k, v in resolved.items() if k in _TRAIN_KEYS}
    for key in _DERIVED_KEYS:
        derived = ds.sequence_length if key == "input_length" else ds.num_labels
        if key in model_kwargs and model_kwargs[key] != derived:
            raise dat.DataError(
                f"config {key}={model_kwargs[key]} conflicts with dataset value "
                f"{derived}")
        model_kwargs[key] = derived
    return ModelConfig(**model_kwargs), trn.TrainConfig(**train_kwargs)


# ---------------------------------------------------------------------------
# subcommands

def cmd_build_dataset(args) -> int:
    peak_sets: dict[str, list[dat.GenomicInterval]] = {}
    for spec in args.peaks:
        if "=" not in spec:
            raise UsageError(f"--peaks expects NAME=path, got {spec!r}")
        name, path = spec.split("=", 1)
        if name in peak_sets:
            raise UsageError(f"duplicate peak label {name!r}")
        with open(path, "r", encoding="utf-8") as fh:
            peak_sets[name] = dat.parse_bed(fh, tf=name)
    with open(args.genome, "r", encoding="utf-8") as fh:
        genome = dat.parse_fasta(fh)
    ds = dat.build_dataset(peak_sets, genome, window=args.window)
    resolved = {"window": args.window, "peaks": ",".join(sorted(peak_sets))}
    dat.save_dataset(ds, args.out, _provenance(resolved, seed="-"))
    logger.info("wrote %d records across %d labels to %s",
                len(ds), ds.num_labels, args.out)
    return 0


def cmd_synth(args) -> int:
    if args.motif:
        motifs = {}
        for spec in args.motif:
            if "=" not in spec:
                raise UsageError(f"--motif expects NAME=CONSENSUS, got {spec!r}")
            name, consensus = spec.split("=", 1)
            motifs[name] = consensus.upper()
    else:
        if args.labels > len(DEFAULT_MOTIFS):
            raise UsageError(
                f"only {len(DEFAULT_MOTIFS)} built-in motifs; pass --motif")
        motifs = {f"TF{i}": DEFAULT_MOTIFS[i] for i in range(args.labels)}

    marginals = None
    if args.marginal:
        marginals = {}
        for spec in args.marginal:
            name, value = spec.split("=", 1)
            marginals[name] = float(value)
        for name in motifs:
            marginals.setdefault(name, 0.5)
    co_occurrence = {}
    for spec in args.co_occur or []:
        pair, value = spec.split("=", 1)
        a, b = pair.split(",")
        co_occurrence[(a, b)] = float(value)

    spec = dat.SyntheticSpec(num_samples=args.n, length=args.length,
                             label_motifs=motifs, marginals=marginals,
                             co_occurrence=co_occurrence, noise=args.noise)
    ds = dat.generate_synthetic(spec, np.random.default_rng(args.seed))
    resolved = {"n": args.n, "length": args.length, "noise": args.noise,
                "motifs": ",".join(f"{k}:{v}" for k, v in motifs.items())}
    dat.save_dataset(ds, args.out, _provenance(resolved, args.seed))
    logger.info("wrote %d synthetic records to %s", len(ds), args.out)
    return 0


def cmd_split(args) -> int:
    ds = dat.load_dataset(args.dataset)
    train, val, test = dat.split_dataset(ds, args.train_frac, args.val_frac,
                                         args.seed)
    resolved = {"train_frac": args.train_frac, "val_frac": args.val_frac}
    header = _provenance(resolved, args.seed)
    for part, name in ((train, "train"), (val, "val"), (test, "test")):
        path = f"{args.out_prefix}.{name}.tsv"
        dat.save_dataset(part, path, header)
        logger.info("%s: %d records -> %s", name, len(part), path)
    return 0


def cmd_train(args) -> int:
    train_ds = dat.load_dataset(args.dataset)
    if args.val:
        val_ds = dat.load_dataset(args.val)
    else:
        # hold out 20% of the provided training records for monitoring
        rng = np.random.default_rng(args.seed if args.seed is not None else 0)
        order = rng.permutation(len(train_ds))
        n_val = max(1, int(0.2 * len(train_ds)))
        val_ds = train_ds.subset(order[:n_val])
        train_ds = train_ds.subset(order[n_val:])

    resolved = load_run_config(args.config, args.set)
    if args.seed is not None:
        resolved["seed"] = args.seed
    if args.epochs is not None:
        resolved["epochs"] = args.epochs
    model_cfg, train_cfg = _split_configs(resolved, train_ds)
    resolved = {**model_cfg.to_dict(), **train_cfg.to_dict()}
    header = _provenance(resolved, train_cfg.seed)

    model = TcnModel.initialize(model_cfg, np.random.default_rng(train_cfg.seed))
    logger.info("receptive field %d for input length %d",
                receptive_field(model_cfg), model_cfg.input_length)
    ckpt, history = trn.train(model, train_ds, val_ds, train_cfg)
    trn.save_checkpoint(ckpt, args.out, extra={
        "tool_version": __version__,
        "config_hash": _config_hash(resolved),
        "seed": str(train_cfg.seed)})
    logger.info("best %s %.5f at epoch %s; checkpoint -> %s",
                train_cfg.monitor, float(ckpt.metadata["best_value"]),
                ckpt.metadata["epoch"], args.out)
    if args.history:
        with open(args.history, "w", encoding="ascii") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            for row in history:
                fh.write(" ".join(f"{k}={v:.6g}" if isinstance(v, float)
                                  else f"{k}={v}" for k, v in row.items()) + "\n")
    return 0


def cmd_evaluate(args) -> int:
    ds = dat.load_dataset(args.dataset)
    ckpt = trn.load_checkpoint(args.model)
    trn.ensure_labels_match(ckpt, ds)
    model = trn.build_model(ckpt)
    scores = trn.predict_scores(model, ds.onehot())
    report = met.metrics_report(scores, ds.labels, ds.label_names,
                                threshold=args.threshold)
    resolved = {"threshold": args.threshold, "model": args.model}
    header = _provenance(resolved, ckpt.metadata.get("seed", "-"))
    with open(args.out, "w", encoding="ascii") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        fh.write(met.render_report(report))
    logger.info("micro AP %.4f; report -> %s",
                report.summary["ap_micro"], args.out)
    return 0


def _attribution_targets(args, label_names: list[str]) -> list[int]:
    if args.label is None or args.label == "all":
        return list(range(len(label_names)))
    if args.label not in label_names:
        raise dat.DataError(f"label {args.label!r} not in registry {label_names}")
    return [label_names.index(args.label)]


def cmd_attribute(args) -> int:
    ds = dat.load_dataset(args.dataset)
    ckpt = trn.load_checkpoint(args.model)
    trn.ensure_labels_match(ckpt, ds)
    model = trn.build_model(ckpt)
    targets = _attribution_targets(args, ds.label_names)
    count = min(args.max_samples, len(ds))

    jobs = []
    rng = np.random.default_rng(args.seed)
    for i in range(count):
        seq = ds.sequences[i]
        baselines = attr.make_shuffled_baselines(seq, args.baselines, rng)
        for t in targets:
            jobs.append((i, seq, t, baselines))

    def run(job):
        i, seq, t, baselines = job
        return attr.integrated_gradients(
            model, dat.one_hot(seq), t, baselines, steps=args.steps,
            label_name=ds.label_names[t], sequence=seq,
            sample_id=f"{ds.origins[i]}#{i}")

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            maps = list(pool.map(run, jobs))
    else:
        maps = [run(job) for job in jobs]

    resolved = {"steps": args.steps, "baselines": args.baselines,
                "samples": count}
    attr.write_attribution_maps(maps, args.out, _provenance(resolved, args.seed))
    logger.info("wrote %d attribution maps to %s", len(maps), args.out)
    return 0


def extract_label_motifs(model: TcnModel, ds: dat.EncodedDataset,
                         label_index: int, rng: np.random.Generator,
                         steps: int = 25, baselines: int = 5,
                         max_seqs: int = 40, null_count: int = 10,
                         window: int = 15, threads: int = 1) -> list[attr.Pwm]:
    """IG tracks for sequences positive for one label, a shuffled-sequence
    null, seqlet extraction, then clustering into PWMs."""
    label = ds.label_names[label_index]
    positives = np.flatnonzero(ds.labels[:, label_index] == 1)[:max_seqs]
    if positives.size == 0:
        raise dat.DataError(f"no positive sequences for label {label!r}")

    def attribute(seq: str) -> attr.AttributionMap:
        bl = attr.make_shuffled_baselines(seq, baselines, rng)
        return attr.integrated_gradients(model, dat.one_hot(seq), label_index,
                                         bl, steps=steps, label_name=label)

    real_seqs = [ds.sequences[i] for i in positives]
    null_seqs = [dinuc for i in positives[:null_count]
                 for dinuc in [dat.dinucleotide_shuffle(ds.sequences[i], rng)]]

    def track_for(seq: str) -> np.ndarray:
        return attr.actual_base_scores(attribute(seq), dat.one_hot(seq))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            tracks = list(pool.map(track_for, real_seqs))
            null_tracks = list(pool.map(track_for, null_seqs))
    else:
        tracks = [track_for(s) for s in real_seqs]
        null_tracks = [track_for(s) for s in null_seqs]

    seqlets = attr.extract_seqlets(tracks, window, null_tracks, label=label)
    onehots = [dat.one_hot(s) for s in real_seqs]
    pwms = attr.cluster_and_build_pwm(seqlets, onehots)
    for pwm in pwms:
        pwm.name = f"{label}.{pwm.name}"
    return pwms


def cmd_motifs(args) -> int:
    ds = dat.load_dataset(args.dataset)
    ckpt = trn.load_checkpoint(args.model)
    trn.ensure_labels_match(ckpt, ds)
    model = trn.build_model(ckpt)
    targets = _attribution_targets(args, ds.label_names)

    rng = np.random.default_rng(args.seed)
    pwms: list[attr.Pwm] = []
    for t in targets:
        pwms.extend(extract_label_motifs(
            model, ds, t, rng, steps=args.steps, baselines=args.baselines,
            max_seqs=args.max_seqs, null_count=args.null_count,
            window=args.window, threads=args.threads))
    resolved = {"window": args.window, "steps": args.steps,
                "baselines": args.baselines, "max_seqs": args.max_seqs}
    attr.write_pwms(pwms, args.out, _provenance(resolved, args.seed))
    logger.info("wrote %d PWMs to %s", len(pwms), args.out)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="tcnbind", description=__doc__)
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("build-dataset", help="intersect peak files over a genome")
    p.add_argument("--peaks", action="append", required=True,
                   metavar="NAME=BED")
    p.add_argument("--genome", required=True)
    p.add_argument("--window", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("synth", help="generate a planted-motif dataset")
    p.add_argument("--labels", type=int, default=4)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--motif", action="append", metavar="NAME=CONSENSUS")
    p.add_argument("--marginal", action="append", metavar="NAME=P")
    p.add_argument("--co-occur", dest="co_occur", action="append",
                   metavar="A,B=P")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="deterministic train/val/test partition")
    p.add_argument("--dataset", required=True)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--val-frac", type=float, default=0.2,
                   help="fraction of the train pool held out for validation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--val")
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a configuration key")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="optional per-epoch history file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attribute", help="integrated-gradients attribution maps")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--label", help="label name, or 'all'")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--baselines", type=int, default=10)
    p.add_argument("--max-samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("motifs", help="extract seqlets and PWMs per label")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--label", help="label name, or 'all'")
    p.add_argument("--window", type=int, default=15)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--baselines", type=int, default=5)
    p.add_argument("--max-seqs", type=int, default=40)
    p.add_argument("--null-count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_motifs)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except dat.DataError as exc:
        logger.error("%s", exc)
        return 2
    except trn.TrainingDiverged as exc:
        logger.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
