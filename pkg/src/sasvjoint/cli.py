"""``sasvjoint`` command line: corpus generation, sub-system pre-training,
SASV training, evaluation and the training-speaker sweep.

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("sasvjoint")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _existing_dir(value: str) -> Path:
    p = Path(value)
    if not p.is_dir():
        raise argparse.ArgumentTypeError(f"{value}: no such directory")
    return p


def _existing_file(value: str) -> Path:
    p = Path(value)
    if not p.is_file():
        raise argparse.ArgumentTypeError(f"{value}: no such file")
    return p


def _int_list(value: str) -> list[int]:
    try:
        out = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _mode_list(value: str) -> list[str]:
    from .trainer import MODES

    out = [v.strip() for v in value.split(",") if v.strip()]
    bad = [m for m in out if m not in MODES]
    if not out or bad:
        raise argparse.ArgumentTypeError(f"modes must be drawn from {','.join(MODES)}, got {value!r}")
    return out


def _config(args, overrides: dict | None = None):
    from .config import load_config

    overrides = dict(overrides or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(getattr(args, "config", None), overrides)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_corpus(path):
    from .protocol_io import Corpus

    return Corpus(path)


def _load_subsystem(path, name: str):
    from .checkpoint_store import load_modules

    modules, _ = load_modules(path, {name: None})
    return modules[name]


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .synth_corpus import generate_corpus, summarise, tree_digest

    corpus = {}
    for flag, key in (("speakers", "n_speakers"), ("utts", "utts_per_speaker"), ("attacks", "n_attacks")):
        if getattr(args, flag) is not None:
            corpus[key] = getattr(args, flag)
    cfg = _config(args, {"corpus": corpus})
    manifest = generate_corpus(cfg.corpus, args.out, overwrite=args.overwrite)
    cfg.write(args.out)
    print(f"{'partition':<10}{'speakers':>9}{'utts':>7}{'bonafide':>9}{'spoof':>7}{'attacks':>8}")
    for part, s in summarise(manifest).items():
        print(f"{part:<10}{s['speakers']:>9}{s['utterances']:>7}{s['bonafide']:>9}{s['spoof']:>7}{s['attacks']:>8}")
    print(f"tree hash: {tree_digest(args.out)}")
    return EXIT_OK


def _cell(v) -> str:
    return str(int(v)) if isinstance(v, (int, np.integer)) else repr(float(v))


def _write_history(path, history: list[dict]) -> None:
    keys = list(history[0]) if history else ["epoch"]
    lines = [",".join(keys)] + [",".join(_cell(h[k]) for k in keys) for h in history]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_pretrain(args, which: str) -> int:
    from .checkpoint_store import save_modules

    cfg = _config(args)
    corpus = _load_corpus(args.data)
    out = _out_dir(args.out)
    rng = np.random.default_rng([cfg.seed, 10 if which == "asv" else 11])
    if which == "asv":
        from .asv_encoder import asv_pretrain

        arch = dataclasses.replace(cfg.asv, n_speakers=len(corpus.manifest.speakers("train")))
        model, history, selected = asv_pretrain(corpus, arch, cfg.asv_train, rng)
        metric = "dev_sv_eer"
    else:
        from .cm_encoder import cm_pretrain

        model, history, selected = cm_pretrain(corpus, cfg.cm, cfg.cm_train, rng)
        metric = "dev_cm_eer"
    for h in history:
        print(f"epoch {h['epoch']}  loss {h['loss']:.4f}  {metric} {h[metric]:.4f}")
    print(f"selected epoch: {selected}")
    _write_history(out / f"{which}_log.csv", history)
    save_modules(out / f"{which}.ckpt", {which: model}, seed=cfg.seed, selected_epoch=selected,
                 meta={"history": history})
    cfg.write(out)
    print(f"checkpoint: {out / f'{which}.ckpt'}")
    return EXIT_OK


def _changed_arrays(before, after) -> int:
    return sum(not np.array_equal(before.arrays[k], after.arrays[k]) for k in before.arrays)


def cmd_train_sasv(args) -> int:
    from .backend import build_backend
    from .checkpoint_store import save, section_from_module
    from .trainer import train

    cfg = _config(args)
    tcfg = dataclasses.replace(cfg.training, mode=args.mode)
    corpus = _load_corpus(args.data)
    out = _out_dir(args.out)
    asv = _load_subsystem(args.asv, "asv")
    cm = _load_subsystem(args.cm, "cm")
    backend = build_backend(cfg.backend, cfg.seed)
    before = {"asv": section_from_module(asv), "cm": section_from_module(cm)}

    ckpt, run = train(asv, cm, backend, corpus, tcfg)
    ckpt.meta["run"] = cfg.to_dict()
    save(ckpt, out / "sasv.ckpt")
    (out / "train_log.csv").write_text(run.to_csv())
    cfg.write(out)
    for r in run.epochs:
        print(f"epoch {r.epoch}  loss {r.loss:.4f}  dev SASV-EER {r.sasv_eer:.4f}  "
              f"SPF-EER {r.spf_eer:.4f}  SV-EER {r.sv_eer:.4f}")
    print(run.summary())
    changed = {n: _changed_arrays(before[n], ckpt.sections[n]) for n in ("asv", "cm")}
    if args.mode == "fixed":
        if any(changed.values()):
            print(f"frozen: FAILED (changed arrays {changed})")
            return EXIT_RUNTIME
        print("frozen: ok")
    else:
        print("frozen: n/a (joint)")
    print(f"changed parameter arrays: {sum(changed.values())} (asv {changed['asv']}, cm {changed['cm']})")
    print(f"checkpoint: {out / 'sasv.ckpt'}")
    return EXIT_OK


def _evaluate(ckpt_path, corpus, partition: str, tcfg):
    from .checkpoint_store import load_modules
    from .trainer import infer

    modules, _ = load_modules(ckpt_path, {"asv": None, "cm": None, "backend": None})
    return infer(modules["asv"], modules["cm"], modules["backend"], corpus, partition, tcfg)


def cmd_evaluate(args) -> int:
    from .metrics import metric_report
    from .protocol_io import write_scores

    cfg = _config(args)
    corpus = _load_corpus(args.data)
    out = _out_dir(args.out)
    print(f"enrolment cap: {cfg.training.enrolment_cap(args.partition):g} s ({args.partition})")
    scores = _evaluate(args.ckpt, corpus, args.partition, cfg.training)
    write_scores(scores, out / f"scores_{args.partition}.txt")
    table = metric_report({args.name: {args.partition: scores}}, [args.partition])
    (out / f"metrics_{args.partition}.txt").write_text(table)
    cfg.write(out)
    print(table, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    from .metrics import metric_csv, metric_report
    from .protocol_io import write_scores

    cfg = _config(args)
    corpus = _load_corpus(args.data)
    out = _out_dir(args.out)
    systems = {}
    for spec in args.system:
        name, sep, path = spec.partition("=")
        if not sep or not name or not Path(path).is_file():
            raise UsageError(f"--system expects NAME=CHECKPOINT, got {spec!r}")
        systems[name] = {}
        for part in ("dev", "eval"):
            print(f"{name}: scoring {part} (enrolment cap {cfg.training.enrolment_cap(part):g} s)")
            systems[name][part] = _evaluate(path, corpus, part, cfg.training)
            write_scores(systems[name][part], out / f"scores_{name}_{part}.txt")
    table = metric_report(systems)
    (out / "metrics.txt").write_text(table)
    (out / "metrics.csv").write_text(metric_csv(systems))
    cfg.write(out)
    print(table, end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import plot_ablation, run_ablation, write_ablation

    cfg = _config(args)
    counts = args.counts or list(cfg.ablation.counts)
    modes = args.modes or list(cfg.ablation.modes)
    corpus = _load_corpus(args.data)
    out = _out_dir(args.out)
    asv = _load_subsystem(args.asv, "asv")
    cm = _load_subsystem(args.cm, "cm")
    tcfg = dataclasses.replace(cfg.training, epochs=cfg.ablation.epochs)
    result = run_ablation(corpus, asv, cm, counts, modes, tcfg, cfg.backend)
    write_ablation(result, out / "ablation.csv")
    for k, spk in result.subsets.items():
        print(f"speakers {k:>3}: {' '.join(spk)}")
    for r in result.rows:
        print(f"n={r.n_speakers:<3} {r.mode:<6} SV-EER {100 * r.sv_eer:6.2f}  SPF-EER {100 * r.spf_eer:6.2f}  "
              f"SASV-EER {100 * r.sasv_eer:6.2f}")
    if len(result.counts()) >= 2:
        plot_ablation(result, out / "ablation.png", out / "ablation.csv")
        print(f"figure: {out / 'ablation.png'}")
    cfg.write(out)
    return EXIT_OK


def cmd_plot(args) -> int:
    from .ablation import plot_ablation, read_ablation

    result = read_ablation(args.inp)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    summary = plot_ablation(result, out, out.with_suffix(".csv"))
    for label, (xs, ys) in summary.series.items():
        print(f"{label}: " + " ".join(f"{x}:{y:.2f}" for x, y in zip(xs, ys)))
    print(f"figure: {out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .trainer import MODES

    p = argparse.ArgumentParser(prog="sasvjoint", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, data=True):
        if data:
            sp.add_argument("--data", required=True, type=_existing_dir, help="corpus directory")
        sp.add_argument("--config", type=_existing_file, help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="overrides the configured seed")

    sp = sub.add_parser("gen-data", help="render the synthetic corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--speakers", type=int, help="train speakers (dev and eval get half each)")
    sp.add_argument("--utts", type=int, help="bona fide utterances per speaker")
    sp.add_argument("--attacks", type=int)
    sp.add_argument("--overwrite", action="store_true")
    common(sp, data=False)
    sp.set_defaults(func=cmd_gen_data)

    for which in ("asv", "cm"):
        sp = sub.add_parser(f"pretrain-{which}", help=f"pre-train the {which.upper()} sub-system")
        sp.add_argument("--out", required=True)
        common(sp)
        sp.set_defaults(func=lambda a, w=which: cmd_pretrain(a, w))

    sp = sub.add_parser("train-sasv", help="train the SASV system, sub-systems fixed or joint")
    sp.add_argument("--mode", required=True, choices=MODES)
    sp.add_argument("--asv", required=True, type=_existing_file, help="ASV checkpoint")
    sp.add_argument("--cm", required=True, type=_existing_file, help="CM checkpoint")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_train_sasv)

    sp = sub.add_parser("evaluate", help="score one partition with a trained SASV checkpoint")
    sp.add_argument("--ckpt", required=True, type=_existing_file)
    sp.add_argument("--partition", required=True, choices=("dev", "eval"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--name", default="system", help="row label in the metric table")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="score dev and eval for several systems; one table")
    sp.add_argument("--system", required=True, action="append", metavar="NAME=CKPT")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("ablate", help="sweep the number of training speakers")
    sp.add_argument("--asv", required=True, type=_existing_file)
    sp.add_argument("--cm", required=True, type=_existing_file)
    sp.add_argument("--counts", type=_int_list, help="comma-separated speaker counts")
    sp.add_argument("--modes", type=_mode_list, help="comma-separated subset of fixed,joint")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("plot", help="plot an ablation data file")
    sp.add_argument("--in", dest="inp", required=True, type=_existing_file)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    from .config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"sasvjoint: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # every module error surfaces as a runtime failure
        print(f"sasvjoint: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
