"""Command-line pipeline: synth, train, generate, eval-abx, eval-per, gumbel-sweep.

One executable with subcommands. Settings come from built-in defaults,
overridden by a key = value config file, overridden by flags (flags win).
Every subcommand writes the resolved configuration and tool version into its
output directory as run_config.txt, so re-running a command reproduces the
directory bit for bit.

Exit codes: 0 success, 1 usage error, 2 data or contract error, 3 numeric
failure.
"""

import argparse
import json
import os
import shutil
import sys

import numpy as np

from . import __version__, abx, corpus, ctc, model
from .checkpoint import save_checkpoint
from .errors import ContractError, NumericError, UsageError
from .gumbel import AnnealingSchedule, sample_sweep, write_sweep_csv
from .losses import LossWeights


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_float(s):
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a number, got %r" % s)
    if not (v > 0.0):
        raise argparse.ArgumentTypeError("must be > 0, got %r" % s)
    return v


def _positive_int(s):
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError("expected an integer, got %r" % s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1, got %r" % s)
    return v


def _nonneg_int(s):
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError("expected an integer, got %r" % s)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0, got %r" % s)
    return v


def _unit_float(s):
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a number, got %r" % s)
    if not (0.0 <= v <= 1.0):
        raise argparse.ArgumentTypeError("must be in [0, 1], got %r" % s)
    return v


def _int_pair(s):
    parts = s.replace(",", " ").split()
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected LO,HI, got %r" % s)
    return int(parts[0]), int(parts[1])


def _tau_list(s):
    try:
        taus = tuple(float(p) for p in s.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers, got %r" % s)
    if not taus or any(t <= 0 for t in taus):
        raise argparse.ArgumentTypeError("temperatures must be positive: %r" % s)
    return taus


def parse_config_file(path):
    """Read key = value lines; '#' starts a comment; hyphens fold to underscores."""
    values = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise UsageError("cannot read config file %s: %s" % (path, exc))
    with fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError("config %s line %d: expected key = value" % (path, lineno))
            key, val = line.split("=", 1)
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _coerce(name, raw, kind):
    try:
        return kind(raw)
    except (ValueError, TypeError, argparse.ArgumentTypeError) as exc:
        raise UsageError("config key %s: %s" % (name, exc))


def _resolve(flag_value, file_values, name, kind, default):
    raw = file_values.pop(name, None)
    if flag_value is not None:
        return flag_value
    if raw is not None:
        return _coerce(name, raw, kind)
    return default


def _reject_leftovers(file_values, path):
    if file_values:
        raise UsageError("config %s: unknown keys %s" % (path, sorted(file_values)))


def _format_value(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return repr(tuple(v))
    return str(v)


def write_run_config(out_dir, command, resolved):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.txt"), "w", encoding="utf-8") as fh:
        fh.write("tool_version = %s\n" % __version__)
        fh.write("command = %s\n" % command)
        for key in sorted(resolved):
            fh.write("%s = %s\n" % (key, _format_value(resolved[key])))


def _default_threads():
    return os.cpu_count() or 1


def _print_rows(header, rows):
    widths = [max(len(str(h)), max((len(str(r[i])) for r in rows), default=0))
              for i, h in enumerate(header)]
    print("  ".join(str(h).ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))


def _filter_entries(entries, subset):
    if subset == "all":
        return entries
    kept = [e for e in entries if e.subset == subset]
    if not kept:
        raise ContractError("no utterances in subset %r (have %s)"
                            % (subset, sorted({e.subset for e in entries})))
    return kept


def cmd_synth(args):
    file_values = parse_config_file(args.spec) if args.spec else {}
    spec = corpus.SynthSpec(
        phones=_resolve(args.phones, file_values, "phones", int, 8),
        speakers=_resolve(args.speakers, file_values, "speakers", int, 4),
        utterances=_resolve(args.utterances, file_values, "utterances", int, 400),
        phones_per_utterance=_resolve(args.phones_per_utterance, file_values,
                                      "phones_per_utterance", _int_pair, (6, 10)),
        frames_per_phone=_resolve(args.frames_per_phone, file_values,
                                  "frames_per_phone", _int_pair, (4, 10)),
        feature_dim=_resolve(args.feature_dim, file_values, "feature_dim", int, 13),
        prototype_scale=_resolve(args.prototype_scale, file_values,
                                 "prototype_scale", float, 1.0),
        speaker_offset_scale=_resolve(args.speaker_offset_scale, file_values,
                                      "speaker_offset_scale", float, 0.75),
        noise_scale=_resolve(args.noise_scale, file_values, "noise_scale", float, 0.3),
        seed=_resolve(args.seed, file_values, "seed", int, 0),
    )
    _reject_leftovers(file_values, args.spec)
    entries = corpus.generate_synthetic(spec, args.out)
    echo = {f: getattr(spec, f) for f in ("phones", "speakers", "utterances",
                                          "phones_per_utterance", "frames_per_phone",
                                          "feature_dim", "prototype_scale",
                                          "speaker_offset_scale", "noise_scale", "seed")}
    write_run_config(args.out, "synth", echo)
    print("wrote %d utterances under %s" % (len(entries), args.out))
    return 0


def _resolve_train_configs(args, file_values, input_dim_default):
    schedule = AnnealingSchedule(
        tau_start=_resolve(args.tau_start, file_values, "tau_start", float, 2.0),
        factor=_resolve(args.tau_factor, file_values, "tau_factor", float, 0.9999),
        cutoff=_resolve(args.tau_cutoff, file_values, "tau_cutoff", float, 0.1),
        interval=_resolve(args.anneal_interval, file_values, "anneal_interval", int, 1),
    )
    variant = _resolve(args.variant, file_values, "variant", str, "gumbel")
    # The legacy variant trains against the sparsity objective by default.
    sparsity_default = 2.0 if variant == "sparsityloss" else 0.0
    weights = LossWeights(
        reconstruction_weight=_resolve(args.reconstruction_weight, file_values,
                                       "reconstruction_weight", float, 1.0),
        sparsity_weight=_resolve(args.sparsity_weight, file_values,
                                 "sparsity_weight", float, sparsity_default),
        diversity_weight=_resolve(args.diversity_weight, file_values,
                                  "diversity_weight", float, 100.0),
    )
    mcfg = model.ModelConfig(
        input_dim=_resolve(args.input_dim, file_values, "input_dim", int,
                           input_dim_default),
        memory_size=_resolve(args.memory_size, file_values, "memory_size", int, 16),
        embed_dim=_resolve(args.embed_dim, file_values, "embed_dim", int, 16),
        encoder_layers=_resolve(args.encoder_layers, file_values, "encoder_layers", int, 1),
        decoder_layers=_resolve(args.decoder_layers, file_values, "decoder_layers", int, 1),
        hidden_width=_resolve(args.hidden_width, file_values, "hidden_width", int, 32),
        mask_prob=_resolve(args.mask_prob, file_values, "mask_prob", float, 0.2),
        schedule=schedule,
        weights=weights,
        seed=_resolve(args.seed, file_values, "seed", int, 0),
    )
    tcfg = model.TrainerConfig(
        stage1_epochs=_resolve(args.stage1_epochs, file_values, "stage1_epochs", int, 5),
        stage2_epochs=_resolve(args.stage2_epochs, file_values, "stage2_epochs", int, 10),
        batch_size=_resolve(args.batch_size, file_values, "batch_size", int, 8),
        learning_rate=_resolve(args.learning_rate, file_values, "learning_rate",
                               float, 1e-3),
        clip_norm=_resolve(args.clip_norm, file_values, "clip_norm", float, 5.0),
        variant=variant,
        omega=_resolve(args.omega, file_values, "omega", float, 1.0),
        max_steps=_resolve(args.max_steps, file_values, "max_steps", int, 0),
    )
    return mcfg, tcfg


def _flatten_train_echo(mcfg, tcfg):
    echo = {}
    for key, val in mcfg.to_dict().items():
        if isinstance(val, dict):
            for k2, v2 in val.items():
                echo["%s.%s" % (key, k2)] = v2
        else:
            echo[key] = val
    for key, val in tcfg.to_dict().items():
        echo["trainer.%s" % key] = val
    return echo


def cmd_train(args):
    file_values = parse_config_file(args.config) if args.config else {}
    entries = corpus.load_manifest(os.path.join(args.corpus_dir, "manifest.tsv"))
    entries = _filter_entries(entries, args.subset)
    reps = corpus.load_representations(entries)
    _, dim = corpus.read_feature_header(entries[0].path)
    mcfg, tcfg = _resolve_train_configs(args, file_values, dim)
    _reject_leftovers(file_values, args.config)

    def progress(stage, epoch, last):
        if last is not None:
            sys.stderr.write("stage %d epoch %d: step %d recon %.6f total %.6f\n"
                             % (stage, epoch + 1, last[0], last[3], last[5]))
            sys.stderr.flush()

    result = model.train(reps, mcfg, tcfg, args.out_dir, progress=progress)
    echo = _flatten_train_echo(mcfg, tcfg)
    echo["corpus_dir"] = args.corpus_dir
    echo["subset"] = args.subset
    write_run_config(args.out_dir, "train", echo)
    print("stage1 checkpoint: %s" % result.stage1_path)
    print("stage2 checkpoint: %s" % result.stage2_path)
    if result.history:
        print("final total loss: %r" % result.history[-1][5])
    return 0


def cmd_generate(args):
    entries = corpus.load_manifest(os.path.join(args.corpus_dir, "manifest.tsv"))
    entries = _filter_entries(entries, args.subset)
    reps = corpus.load_representations(entries)
    posts, _ = model.generate(args.checkpoint, reps, args.tau, threads=args.threads)
    feat_dir = os.path.join(args.out_dir, "feats")
    os.makedirs(feat_dir, exist_ok=True)
    new_entries = []
    for e in entries:
        path = os.path.join(feat_dir, e.utterance_id + ".ssf")
        corpus.write_features(path, posts[e.utterance_id])
        new_entries.append(corpus.ManifestEntry(e.utterance_id, e.speaker_id,
                                                e.subset, path))
    corpus.write_manifest(os.path.join(args.out_dir, "manifest.tsv"), new_entries)
    for name in ("alignments.tsv", "transcripts.tsv", "phones.txt"):
        src = os.path.join(args.corpus_dir, name)
        if os.path.isfile(src):
            shutil.copyfile(src, os.path.join(args.out_dir, name))
    write_run_config(args.out_dir, "generate", {
        "checkpoint": args.checkpoint, "corpus_dir": args.corpus_dir,
        "tau": args.tau, "subset": args.subset,
    })
    print("wrote %d posteriorgrams under %s" % (len(new_entries), args.out_dir))
    return 0


def _detect_distance(reps):
    """Posteriorgram-shaped data (nonnegative rows summing to 1) gets symmetric
    KL; anything else is treated as an embedding and gets cosine."""
    for utt in sorted(reps):
        rep = reps[utt]
        if rep.shape[0] == 0:
            continue
        if np.any(rep < 0) or np.any(np.abs(rep.sum(axis=1) - 1.0) > 1e-3):
            return "cosine"
    return "skl"


def cmd_eval_abx(args):
    entries = corpus.load_manifest(os.path.join(args.data_dir, "manifest.tsv"))
    align_path = args.alignments or os.path.join(args.data_dir, "alignments.tsv")
    alignments = corpus.load_alignments(align_path)
    segments = corpus.extract_segments(entries, alignments)
    subset_of = {e.utterance_id: e.subset for e in entries}
    by_subset = {}
    for seg in segments:
        by_subset.setdefault(subset_of[seg.utterance_id], []).append(seg)
    reps = corpus.load_representations(entries)
    distance = args.distance
    if distance == "auto":
        distance = _detect_distance(reps)
    if distance == "skl":
        reps = abx.normalize_posteriorgrams(reps)
    conditions = ("within", "across") if args.condition == "both" else (args.condition,)
    limits = abx.AbxLimits(max_triples_per_cell=args.max_triples_per_cell,
                           min_segment_frames=args.min_segment_frames)
    report = abx.evaluate_abx(by_subset, reps, conditions, distance, limits,
                              args.seed, threads=args.threads)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "abx.csv"), "w", encoding="utf-8", newline="") as fh:
        abx.write_abx_csv(report, fh)
    if args.json:
        with open(os.path.join(args.out, "abx.json"), "w", encoding="utf-8") as fh:
            abx.write_abx_json(report, fh)
    write_run_config(args.out, "eval-abx", {
        "data_dir": args.data_dir, "alignments": align_path, "distance": distance,
        "condition": args.condition, "max_triples_per_cell": args.max_triples_per_cell,
        "min_segment_frames": args.min_segment_frames, "seed": args.seed,
    })
    rows = [(r["condition"], r["subset"], r["cells"], r["triples"],
             "" if np.isnan(r["error_pct"]) else "%.4f" % r["error_pct"])
            for r in report.rows]
    _print_rows(("condition", "subset", "cells", "triples", "error_pct"), rows)
    return 0


def _resolve_probe_config(args, file_values, inventory_size):
    return ctc.ProbeConfig(
        inventory_size=inventory_size,
        kernel_size=_resolve(args.kernel_size, file_values, "kernel_size", int, 8),
        recurrent_hidden=_resolve(args.recurrent_hidden, file_values,
                                  "recurrent_hidden", int, 100),
        beam_width=_resolve(args.beam_width, file_values, "beam_width", int, 10),
        learning_rate=_resolve(args.learning_rate, file_values, "learning_rate",
                               float, 1e-2),
        epochs=_resolve(args.epochs, file_values, "epochs", int, 100),
        batch_size=_resolve(args.batch_size, file_values, "batch_size", int, 8),
        labeled_fraction=_resolve(args.labeled_fraction, file_values,
                                  "labeled_fraction", float, 0.1),
        clip_norm=_resolve(args.clip_norm, file_values, "clip_norm", float, 5.0),
        seed=_resolve(args.seed, file_values, "seed", int, 0),
    )


def cmd_eval_per(args):
    entries = corpus.load_manifest(os.path.join(args.data_dir, "manifest.tsv"))
    transcripts_path = args.transcripts or os.path.join(args.data_dir, "transcripts.tsv")
    phones_path = args.phones or os.path.join(args.data_dir, "phones.txt")
    transcripts = corpus.load_transcripts(transcripts_path)
    inventory = corpus.load_phone_inventory(phones_path)
    phone_to_id = {p: i + 1 for i, p in enumerate(inventory)}
    label_ids = {}
    for utt, phones in transcripts.items():
        try:
            label_ids[utt] = [phone_to_id[p] for p in phones]
        except KeyError as exc:
            raise ContractError("transcript for %s uses unknown phone %s" % (utt, exc))

    file_values = parse_config_file(args.config) if args.config else {}
    cfg = _resolve_probe_config(args, file_values, len(inventory))
    _reject_leftovers(file_values, args.config)

    reps = corpus.load_representations(entries)
    train_utts = sorted(e.utterance_id for e in entries
                        if e.subset == args.train_subset and e.utterance_id in label_ids)
    if not train_utts:
        raise ContractError("no labeled utterances in subset %r" % args.train_subset)
    pool_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    order = pool_rng.permutation(len(train_utts))
    n_labeled = max(1, int(round(cfg.labeled_fraction * len(train_utts))))
    labeled = {train_utts[i] for i in order[:n_labeled]}

    def progress(epoch, last):
        if last is not None:
            sys.stderr.write("probe epoch %d: loss %.6f\n" % (epoch + 1, last[1]))
            sys.stderr.flush()

    params, history, skipped = ctc.train_probe(
        reps, {u: label_ids[u] for u in labeled}, cfg, progress=progress)
    if skipped:
        sys.stderr.write("skipped %d infeasible labelings during training\n" % skipped)

    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "probe.ckpt"),
                    {"probe": cfg.to_dict(), "inventory": inventory},
                    {k: v.data for k, v in params.items()})
    with open(os.path.join(args.out, "loss_curve.csv"), "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, loss in history:
            fh.write("%d,%r\n" % (step, loss))

    report_rows = []
    for subset in sorted({e.subset for e in entries}):
        utts = [e.utterance_id for e in entries
                if e.subset == subset and e.utterance_id in label_ids
                and e.utterance_id not in labeled]
        if not utts:
            continue
        hyps = ctc.decode_corpus(reps, params, cfg, utts, threads=args.threads)
        refs = {u: label_ids[u] for u in utts}
        pct, edits, ref_len = ctc.per(hyps, refs)
        report_rows.append({"subset": subset, "utterances": len(utts),
                            "edits": edits, "ref_len": ref_len, "per_pct": pct})
    with open(os.path.join(args.out, "per_report.csv"), "w", encoding="utf-8") as fh:
        fh.write("subset,utterances,edits,ref_len,per_pct\n")
        for r in report_rows:
            fh.write("%s,%d,%d,%d,%.6f\n" % (r["subset"], r["utterances"],
                                             r["edits"], r["ref_len"], r["per_pct"]))
    if args.json:
        with open(os.path.join(args.out, "per_report.json"), "w", encoding="utf-8") as fh:
            json.dump({"rows": report_rows, "labeled_utterances": n_labeled,
                       "skipped_infeasible": skipped}, fh, indent=2)
            fh.write("\n")
    echo = dict(cfg.to_dict())
    echo.update({"data_dir": args.data_dir, "transcripts": transcripts_path,
                 "phones": phones_path, "train_subset": args.train_subset})
    write_run_config(args.out, "eval-per", echo)
    _print_rows(("subset", "utterances", "edits", "ref_len", "per_pct"),
                [(r["subset"], r["utterances"], r["edits"], r["ref_len"],
                  "%.4f" % r["per_pct"]) for r in report_rows])
    return 0


def cmd_gumbel_sweep(args):
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    logits = np.zeros(args.components)
    rows = sample_sweep(logits, args.taus, args.draws, rng)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "sweep.csv"), "w", encoding="utf-8", newline="") as fh:
        write_sweep_csv(rows, fh)
    maxes = {tau: [] for tau in args.taus}
    for tau, _, sample in rows:
        maxes[tau].append(float(sample.max()))
    summary = [{"tau": tau, "median_max_component": float(np.median(maxes[tau])),
                "mean_max_component": float(np.mean(maxes[tau]))}
               for tau in args.taus]
    with open(os.path.join(args.out, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write("tau,median_max_component,mean_max_component\n")
        for r in summary:
            fh.write("%r,%r,%r\n" % (r["tau"], r["median_max_component"],
                                     r["mean_max_component"]))
    if args.json:
        with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump({"rows": summary}, fh, indent=2)
            fh.write("\n")
    write_run_config(args.out, "gumbel-sweep", {
        "taus": args.taus, "draws": args.draws, "components": args.components,
        "seed": args.seed,
    })
    _print_rows(("tau", "median_max_component", "mean_max_component"),
                [(r["tau"], "%.6f" % r["median_max_component"],
                  "%.6f" % r["mean_max_component"]) for r in summary])
    return 0


def build_parser():
    parser = _Parser(prog="sparsespeech",
                     description="Unsupervised sparse speech representations "
                                 "with a Gumbel-Softmax memory bottleneck.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--spec", help="key = value config file for the generator")
    p.add_argument("--seed", type=int)
    p.add_argument("--phones", type=_positive_int)
    p.add_argument("--speakers", type=_positive_int)
    p.add_argument("--utterances", type=_positive_int)
    p.add_argument("--phones-per-utterance", type=_int_pair, metavar="LO,HI")
    p.add_argument("--frames-per-phone", type=_int_pair, metavar="LO,HI")
    p.add_argument("--feature-dim", type=_positive_int)
    p.add_argument("--prototype-scale", type=_positive_float)
    p.add_argument("--speaker-offset-scale", type=float)
    p.add_argument("--noise-scale", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="two-stage training on a corpus")
    p.add_argument("corpus_dir")
    p.add_argument("out_dir")
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--subset", default="train",
                   help="manifest subset to train on, or 'all' (default: train)")
    p.add_argument("--seed", type=int)
    p.add_argument("--input-dim", type=_positive_int,
                   help="default: read from the first feature file")
    p.add_argument("--memory-size", type=_positive_int)
    p.add_argument("--embed-dim", type=_positive_int)
    p.add_argument("--encoder-layers", type=_positive_int)
    p.add_argument("--decoder-layers", type=_positive_int)
    p.add_argument("--hidden-width", type=_positive_int)
    p.add_argument("--mask-prob", type=_unit_float)
    p.add_argument("--tau-start", type=_positive_float)
    p.add_argument("--tau-factor", type=_positive_float)
    p.add_argument("--tau-cutoff", type=_positive_float)
    p.add_argument("--anneal-interval", type=_positive_int)
    p.add_argument("--reconstruction-weight", type=float)
    p.add_argument("--sparsity-weight", type=float)
    p.add_argument("--diversity-weight", type=float)
    p.add_argument("--stage1-epochs", type=_nonneg_int)
    p.add_argument("--stage2-epochs", type=_nonneg_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--learning-rate", type=_positive_float)
    p.add_argument("--clip-norm", type=_positive_float)
    p.add_argument("--variant", choices=("gumbel", "sparsityloss"))
    p.add_argument("--omega", type=float, choices=(0.0, 1.0))
    p.add_argument("--max-steps", type=_nonneg_int,
                   help="cap optimizer steps per stage (0 = no cap)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate",
                       help="emit pseudo-posteriorgrams from a stage-2 checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("corpus_dir")
    p.add_argument("out_dir")
    p.add_argument("--tau", type=_positive_float, default=3.0,
                   help="generation temperature (default: 3.0)")
    p.add_argument("--subset", default="all")
    p.add_argument("--threads", type=_positive_int, default=_default_threads())
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval-abx", help="ABX discriminability of representations")
    p.add_argument("data_dir", help="directory with manifest.tsv and feature files")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--alignments", help="default: <data_dir>/alignments.tsv")
    p.add_argument("--distance", choices=("auto", "skl", "cosine"), default="auto",
                   help="auto: skl for posteriorgrams, cosine otherwise")
    p.add_argument("--condition", choices=("within", "across", "both"), default="both")
    p.add_argument("--max-triples-per-cell", type=_positive_int, default=500)
    p.add_argument("--min-segment-frames", type=_positive_int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive_int, default=_default_threads())
    p.add_argument("--json", action="store_true", help="also write abx.json")
    p.set_defaults(func=cmd_eval_abx)

    p = sub.add_parser("eval-per",
                       help="semi-supervised probe: train on a labeled fraction, "
                            "report phone error rate")
    p.add_argument("data_dir", help="directory with manifest.tsv and feature files")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--transcripts", help="default: <data_dir>/transcripts.tsv")
    p.add_argument("--phones", help="default: <data_dir>/phones.txt")
    p.add_argument("--config", help="key = value probe config file")
    p.add_argument("--train-subset", default="train")
    p.add_argument("--kernel-size", type=_positive_int)
    p.add_argument("--recurrent-hidden", type=_positive_int)
    p.add_argument("--beam-width", type=_positive_int)
    p.add_argument("--learning-rate", type=_positive_float)
    p.add_argument("--epochs", type=_nonneg_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--labeled-fraction", type=_unit_float)
    p.add_argument("--clip-norm", type=_positive_float)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=_positive_int, default=_default_threads())
    p.add_argument("--json", action="store_true", help="also write per_report.json")
    p.set_defaults(func=cmd_eval_per)

    p = sub.add_parser("gumbel-sweep",
                       help="sample max-component statistics over a temperature grid")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--taus", type=_tau_list, default=(0.05, 0.1, 0.2, 2.0, 5.0),
                   metavar="T1,T2,...")
    p.add_argument("--draws", type=_positive_int, default=1000)
    p.add_argument("--components", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="also write summary.json")
    p.set_defaults(func=cmd_gumbel_sweep)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args) or 0
    except UsageError as exc:
        print("usage error: %s" % exc, file=sys.stderr)
        return 1
    except ContractError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except NumericError as exc:
        print("numeric failure: %s" % exc, file=sys.stderr)
        return 3
