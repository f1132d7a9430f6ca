"""
transfusor command line: synth | extract | stats | train | generate | evaluate | viz

Every command writes into the output directory (``--out``, else the
TRANSFUSOR_OUT environment variable, else the working directory), echoes its
effective configuration to ``run_config.txt`` and exits nonzero on error.
"""

import argparse
import csv
import io
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt_io
from . import cvae as cvae_mod
from . import data
from . import diffusion
from . import evaluation as ev
from . import synth
from . import tensor as T
from .config import RunConfig, describe_options, output_root
from .errors import (ConfigurationError, LabelingError, TrainingError, TransfusorError, UsageError)
from .labels import ConditionLabel, all_labels
from .training import TrainingConfig

log = logging.getLogger("transfusor")

DEFAULT_VIZ_CATEGORY = "car/left/normal"


# helpers ---------------------------------------------------------------------

def _out_dir(args):
    out = output_root(args.out)
    os.makedirs(out, exist_ok=True)
    return out


def _echo_config(out, cfg, **extra):
    text = cfg.to_text() + data.write_kv(sorted(extra.items()))
    data.atomic_write_text(os.path.join(out, "run_config.txt"), text)


def parse_categories(text):
    """``all``, or a comma-separated list of indices / ``vehicle/direction/aggressiveness`` names."""
    if text.strip().lower() == "all":
        return all_labels()
    out = []
    for part in text.split(","):
        try:
            out.append(ConditionLabel.parse(part.strip()))
        except LabelingError as exc:
            raise UsageError(str(exc)) from None
    return out


def _figure(cfg, fn, *args, **kw):
    if not cfg.figures:
        return None
    path = fn(*args, **kw)
    log.info("wrote %s", path)
    return path


def _load(path, kind=None):
    model, ckpt = ckpt_io.load_model(path)
    if kind is not None and model.kind != kind:
        raise UsageError(f"{path} holds a {model.kind} model; this command needs {kind}")
    return model, ckpt


def _sampler(model, cfg, rng):
    if model.kind == "transfusor":
        return lambda label, n: diffusion.sample_trajectories(model, label, n, rng, cfg.guidance)
    return lambda label, n: cvae_mod.cvae_sample(model, label, n, rng)


# commands ----------------------------------------------------------------------

def cmd_synth(args, cfg):
    if args.spec:
        try:
            with open(args.spec) as fh:
                spec = synth.SynthSpec.from_kv(fh.read())
        except OSError as exc:
            raise UsageError(f"cannot read spec {args.spec}: {exc.strerror}") from None
    else:
        spec = synth.SynthSpec.uniform(args.count)
    spec.validate()
    out = _out_dir(args)
    table, truth = synth.synth_tracks(spec, T.SeededRng(cfg.seed))
    raw = synth.raw_table(table, truth, T.SeededRng(cfg.seed + 1))
    data.write_tracks(raw, os.path.join(out, "tracks.csv"))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["vehicle_id", "cbt_frame", "category_index", "label", "driving_direction"])
    for gt in truth:
        w.writerow([gt.vehicle_id, gt.cbt_frame, gt.label.index, gt.label.symbol(), gt.driving_direction])
    data.atomic_write_text(os.path.join(out, "ground_truth.csv"), buf.getvalue())
    _echo_config(out, cfg, synth_counts=",".join(str(spec.counts.get(i, 0)) for i in range(12)))
    print(f"wrote {len(truth)} synthetic tracks to {out}")
    return 0


def cmd_extract(args, cfg):
    table = data.ingest_tracks(args.tracks)
    table = data.canonicalize_frame(table, reversed_direction=cfg.reversed_direction)
    corpus = data.extract_corpus(table, cfg.method, cfg.downsample, cfg.exclude_overlaps,
                                 cfg.dyn_threshold, cfg.dyn_interval)
    out = _out_dir(args)
    fingerprint = data.write_corpus(corpus, out)
    _echo_config(out, cfg, tracks=args.tracks)
    from . import plotting
    _figure(cfg, plotting.plot_speed_ratios, os.path.join(out, "speed_ratios.png"), corpus)
    print(f"{len(corpus)} trajectories, {len(corpus.rejections)} rejected; corpus fingerprint {fingerprint}")
    return 0


def stats_text(manifest):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(data.STATS_HEADER)
    for row in manifest.rows():
        w.writerow(row)
    w.writerow([manifest.method, "all", "all", "", "", manifest.total, "", "", ""])
    return buf.getvalue()


def cmd_stats(args, cfg):
    corpus = data.read_corpus(args.corpus)
    text = stats_text(data.corpus_stats(corpus))
    out = _out_dir(args)
    data.atomic_write_text(os.path.join(out, "stats.csv"), text)
    sys.stdout.write(text)
    return 0


def build_model(cfg, normalizer):
    if cfg.model == "transfusor":
        schedule = diffusion.build_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
        return diffusion.Transfusor(diffusion.ModelConfig(), schedule, normalizer, cfg.seed)
    if cfg.model == "cvae":
        conf = cvae_mod.CvaeConfig(latent=cfg.latent, kl_weight=cfg.kl_weight).validate()
        return cvae_mod.Cvae(conf, normalizer, cfg.seed)
    raise ConfigurationError(f"unknown model {cfg.model!r}; choose transfusor or cvae")


def cmd_train(args, cfg):
    corpus = data.read_corpus(args.corpus)
    if len(corpus) == 0:
        raise UsageError(f"corpus {args.corpus} is empty")
    fingerprint = data.corpus_fingerprint(args.corpus)
    deltas = corpus.deltas()
    normalizer = data.fit_normalization(deltas)
    model = build_model(cfg, normalizer)
    tcfg = TrainingConfig(cfg.epochs, cfg.batch_size, cfg.lr, cfg.p_uncond, cfg.seed, cfg.checkpoint_every)
    tcfg.validate()
    out = _out_dir(args)
    _echo_config(out, cfg, corpus=args.corpus, corpus_fingerprint=fingerprint)
    ckpt_path = os.path.join(out, "model.trsf")
    history = []

    def write_log():
        text = "epoch,loss\n" + "".join(f"{i},{data.format_float(v)}\n" for i, v in enumerate(history, 1))
        data.atomic_write_text(os.path.join(out, "loss.csv"), text)

    def save(epoch):
        ckpt_io.save_model(model, ckpt_path, corpus_fingerprint=fingerprint, epochs=epoch, lr=cfg.lr,
                           batch_size=cfg.batch_size, p_uncond=cfg.p_uncond)

    def on_epoch(epoch, loss):
        history.append(loss)
        log.info("epoch %d loss %.6f", epoch, loss)
        if tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0 and epoch < tcfg.epochs:
            save(epoch)
            write_log()

    trainer = diffusion.train if model.kind == "transfusor" else cvae_mod.train
    try:
        trainer(model, normalizer.normalize(deltas), corpus.labels(), tcfg, T.SeededRng(cfg.seed), on_epoch)
    except TrainingError:
        write_log()
        if os.path.exists(ckpt_path):
            log.error("training aborted; last good checkpoint kept at %s", ckpt_path)
        raise
    save(tcfg.epochs)
    write_log()
    from . import plotting
    _figure(cfg, plotting.plot_loss, os.path.join(out, "loss.png"), history)
    print(f"trained {model.kind} for {tcfg.epochs} epochs; final loss {history[-1]:.6f}; wrote {ckpt_path}")
    return 0


def cmd_generate(args, cfg):
    model, _ = _load(args.checkpoint)
    labels = parse_categories(cfg.category)
    if cfg.n < 0:
        raise UsageError("n must be >= 0")
    rng = T.SeededRng(cfg.seed)
    sample = _sampler(model, cfg, rng)
    generated = {}
    for label in labels:
        generated[label.index] = data.from_deltas(sample(label, cfg.n))
    out = _out_dir(args)
    path = os.path.join(out, "generated.csv")
    ev.export_trajectories(path, generated)
    _echo_config(out, cfg, checkpoint=args.checkpoint)
    if cfg.n:
        from . import plotting
        _figure(cfg, plotting.plot_trajectories, os.path.join(out, "generated.png"), generated,
                title=f"{model.kind} samples")
    print(f"wrote {cfg.n * len(labels)} trajectories to {path}")
    return 0


def cmd_evaluate(args, cfg):
    corpus = data.read_corpus(args.corpus)
    fingerprint = data.corpus_fingerprint(args.corpus)
    reports = []
    for path in args.checkpoint:
        model, ckpt = _load(path)
        bound = ckpt.metadata.get("corpus_fingerprint")
        if bound != fingerprint:
            raise UsageError(f"{path} was trained on corpus {bound or '(unrecorded)'}, not {fingerprint} "
                             f"({args.corpus}); its normalization statistics do not apply")
        rng = T.SeededRng(cfg.seed)
        sample = _sampler(model, cfg, rng)
        reports.append(ev.table2_report(corpus, lambda lab, n: data.from_deltas(sample(lab, n)),
                                        cfg.thresholds, cfg.n_gen or None, model.kind))
    out = _out_dir(args)
    path = os.path.join(out, "coverage.csv")
    ev.export_report(path, reports)
    _echo_config(out, cfg, corpus=args.corpus, checkpoints=" ".join(args.checkpoint))
    from . import plotting
    for th in sorted(cfg.thresholds):
        _figure(cfg, plotting.plot_coverage, os.path.join(out, f"coverage_{th:g}m.png"), reports, th)
    with open(path) as fh:
        sys.stdout.write(fh.read())
    return 0


def kde_points(snapshot):
    """Every point of every chain except the shared origin."""
    return np.asarray(snapshot)[:, 1:].reshape(-1, 2)


def cmd_viz(args, cfg):
    model, _ = _load(args.checkpoint, "transfusor")
    label = parse_categories(args.category)
    if len(label) != 1:
        raise UsageError("viz takes a single category")
    label = label[0]
    steps = list(cfg.steps)
    for k in steps:
        if not 0 <= k <= model.schedule.K:
            raise UsageError(f"step {k} outside 0..{model.schedule.K}")
    snaps = diffusion.snapshot_diffusion(model, label, cfg.viz_n, steps, T.SeededRng(cfg.seed), cfg.guidance)
    out = _out_dir(args)
    grids = []
    for order, k in enumerate(steps):
        grid = ev.kde_grid(kde_points(snaps[k]), step=k)
        grid.order = order
        grids.append(grid)
        ev.export_kde(os.path.join(out, f"kde_step{k:03d}.csv"), grid)
        ev.export_trajectories(os.path.join(out, f"snapshot_step{k:03d}.csv"), {label.index: snaps[k]})
    _echo_config(out, cfg, checkpoint=args.checkpoint, viz_category=label.symbol())
    from . import plotting
    _figure(cfg, plotting.plot_kde_ladder, os.path.join(out, "kde_ladder.png"), grids, label.symbol())
    for g in grids:
        var = float(kde_points(snaps[g.step]).var(axis=0).mean())
        print(f"k={g.step:3d} variance={var:.4f} peak_density={g.peak():.6f}")
    return 0


# argument parsing ---------------------------------------------------------------

def _common(p, suppress):
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="key = value run configuration file")
    p.add_argument("--seed", type=int, default=default, help="random seed (default 0)")
    p.add_argument("--out", default=default, help="output directory (default $TRANSFUSOR_OUT or .)")
    p.add_argument("--no-figures", action="store_true", default=default, help="skip PNG figures")
    p.add_argument("-v", "--verbose", action="store_true", default=default, help="log progress to stderr")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="transfusor",
        description="Lane-change trajectory extraction, diffusion and CVAE generators, coverage evaluation.",
        epilog="configuration keys (defaults):\n" + describe_options(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="write synthetic raw tracks with ground truth")
    p.add_argument("--spec", help="key = value spec (count, count.<category>, jitters)")
    p.add_argument("--count", type=int, default=100, help="trajectories per category without --spec")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="extract and label lane changes from a track file")
    p.add_argument("tracks")
    p.add_argument("--method", choices=data.METHODS)
    p.add_argument("--exclude-overlaps", action="store_const", const=True, dest="exclude_overlaps")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("stats", help="per-group counts and speed-ratio statistics of a corpus")
    p.add_argument("corpus")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a transfusor or CVAE on a corpus")
    p.add_argument("corpus")
    p.add_argument("--model", choices=("transfusor", "cvae"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--p-uncond", type=float, dest="p_uncond")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample trajectories from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--category", help="all, index, or e.g. car/left/normal (comma-separated list allowed)")
    p.add_argument("-n", type=int, dest="n", help="trajectories per category")
    p.add_argument("--guidance", type=float, help="guidance weight w (transfusor only)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="coverage report of one or more checkpoints against a corpus")
    p.add_argument("corpus")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--thresholds", help="comma-separated ADE thresholds in meters")
    p.add_argument("--n-gen", type=int, dest="n_gen")
    p.add_argument("--guidance", type=float)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("viz", help="density grids of reverse-diffusion snapshots")
    p.add_argument("checkpoint")
    p.add_argument("--category", default=DEFAULT_VIZ_CATEGORY)
    p.add_argument("--steps", help="comma-separated diffusion steps")
    p.add_argument("-n", type=int, dest="viz_n", help="number of reverse chains")
    p.add_argument("--guidance", type=float)
    p.set_defaults(func=cmd_viz)

    for p in sub.choices.values():
        _common(p, suppress=True)
    return parser


OVERRIDE_KEYS = ("seed", "method", "exclude_overlaps", "model", "epochs", "batch_size", "lr", "p_uncond",
                 "checkpoint_every", "category", "n", "guidance", "thresholds", "n_gen", "steps", "viz_n")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in OVERRIDE_KEYS if getattr(args, k, None) is not None}
    if args.command == "viz":
        overrides.pop("category", None)
    if args.no_figures:
        overrides["figures"] = False
    try:
        cfg = RunConfig.load(args.config, overrides)
        return args.func(args, cfg)
    except (UsageError, ConfigurationError) as exc:
        print(f"transfusor {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TransfusorError, OSError) as exc:
        print(f"transfusor {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
