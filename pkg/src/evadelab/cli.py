"""Command-line interface: train, eval, attack, grid, game, whitebox, detect."""

import argparse
import json
import logging
import sys

import numpy as np

from . import attacks as A
from . import defenses as D
from . import experiment as E
from .errors import ConfigError, FormatError, ParameterError
from .game import run_game, scripted_attacker, transcript_to_jsonl, EvCsaGame
from .model import (RandomizedClassifier, TrainConfig, accuracy, load_model, mlp_spec, randomized_error,
                    save_model, small_cnn_spec, train)
from .prng import key_from_seed, stream_id

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _write(text, out):
    if out and out != "-":
        with open(out, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _data(args):
    return E.load_dataset(args.dataset, args.data, args.seed)


def _defended(model, desc, seed):
    return RandomizedClassifier(model, D.parse_defense(desc), key_from_seed(("cli", seed)))


def cmd_train(args):
    train_set, test_set = _data(args)
    shape = train_set.image_shape
    spec = (mlp_spec(shape, num_classes=train_set.num_classes) if args.arch == "mlp"
            else small_cnn_spec(shape, train_set.num_classes))
    cfg = TrainConfig(args.lr, args.epochs, args.batch, args.seed)
    if args.crop:
        model = D.train_with_crops(spec, train_set, args.crop, cfg)
    else:
        model = train(spec, train_set, cfg)
    save_model(model, args.out)
    print(json.dumps({"model": args.out, "test_accuracy": round(accuracy(model, test_set), 6)}))


def cmd_eval(args):
    _, test = _data(args)
    test = test.head(args.n)
    clf = _defended(load_model(args.model), args.defense, args.seed)
    res = randomized_error(clf, test, args.reps, tag=args.seed)
    _write(json.dumps({"defense": args.defense, "accuracy": round(1 - res.mean, 6), "std": round(res.std, 6),
                       "reps": args.reps, "samples": len(test)}) + "\n", args.out)


def cmd_attack(args):
    _, test = _data(args)
    model = load_model(args.model)
    clean = E._pick_clean(model, test, args.n)
    res = A.run_attack(args.attack, model, clean.images, clean.labels)
    summary = {"attack": args.attack, "success_rate": round(res.success_rate, 6),
               "mean_d2": round(float(np.mean(res.d2)), 6), "max_dinf": round(float(np.max(res.dinf)), 6)}
    if args.defense:
        clf = _defended(model, args.defense, args.seed)
        acc = randomized_error(clf, type(clean)(res.x_adv, clean.labels, clean.num_classes), args.reps, args.seed)
        summary.update(defense=args.defense, defended_accuracy=round(1 - acc.mean, 6))
    if args.save:
        np.savez(args.save, x=res.x, x_adv=res.x_adv, labels=clean.labels, target=res.target)
    _write(json.dumps(summary) + "\n", args.out)


def cmd_grid(args):
    grid = E.load_config(args.config) if args.config else E.ExperimentGrid(
        dataset=args.dataset, model=args.model, defenses=tuple(args.defense), attacks=tuple(args.attack),
        deltas=tuple(args.deltas), reps=args.reps, seed=args.seed, legit_size=args.legit_size,
        adv_size=args.adv_size, data_dir=args.data or "", timings=args.timings)
    if args.model:
        grid.model = args.model
    if not grid.model:
        raise ConfigError("grid needs a model path (--model or model = ... in the config)")
    rows = E.run_grid(grid, workers=args.workers)
    text = E.emit_results(rows, None, args.format, grid.timings)
    _write(text, args.out)
    if args.outcomes:
        E.emit_outcomes(rows, args.outcomes)


def cmd_game(args):
    _, test = _data(args)
    model = load_model(args.model)
    clean = E._pick_clean(model, test, args.N)
    clf = _defended(model, args.defense, args.seed)
    spec = A.parse_attack(args.attack)
    res = A.run_attack(spec, model, clean.images, clean.labels)
    targeted = spec.mode != "untargeted"
    attacker = scripted_attacker(list(enumerate(res.x_adv)), res.target if targeted else None)
    p = np.inf if args.p == "inf" else int(args.p)
    stats = run_game(attacker, clf, clean, args.eps, args.N, args.reps, p, targeted, args.seed)
    game = EvCsaGame(clf, clean, args.eps, args.N, p, targeted, stream_base=stream_id("game", args.seed, 0))
    attacker(game)
    _, transcript = game.finish()
    if args.transcript:
        with open(args.transcript, "w", encoding="utf-8") as f:
            f.write(transcript_to_jsonl(transcript))
    _write(json.dumps({"attack": args.attack, "defense": args.defense, "eps": args.eps, "N": args.N,
                       "mean_rate": round(stats.mean, 6), "std": round(stats.std, 6), "reps": args.reps}) + "\n",
           args.out)


def cmd_whitebox(args):
    _, test = _data(args)
    model = load_model(args.model)
    spec = A.parse_attack(args.attack)
    o = spec.options
    series = E.run_whitebox_curves(model, test, args.defense, int(o["iters"]), args.n, args.seed, int(o["M"]),
                                   int(o["E"]), o["step"], o["eps"])
    _write(E.emit_curves(series), args.out)


def cmd_detect(args):
    _, test = _data(args)
    model = load_model(args.model)
    squeezers = [D.parse_squeezer(s.split(":")) for s in args.squeezer]
    fit, held = test.head(2 * args.n).split(args.n)
    threshold = D.fit_detection_threshold(model, squeezers, fit, args.percentile)
    fp = float(np.mean(D.squeeze_discrepancy_detect(model, squeezers, held.images, threshold)))
    out = {"threshold": round(threshold, 6), "false_positive_rate": round(fp, 6)}
    if args.attack:
        clean = E._pick_clean(model, test, args.n)
        res = A.run_attack(args.attack, model, clean.images, clean.labels)
        flagged = D.squeeze_discrepancy_detect(model, squeezers, res.x_adv[res.success], threshold)
        out.update(attack=args.attack, detection_rate=round(float(np.mean(flagged)) if flagged.size else 0.0, 6))
    _write(json.dumps(out) + "\n", args.out)


def build_parser():
    parser = argparse.ArgumentParser(prog="evadelab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="-")
        p.add_argument("--dataset", default="mnist", help="mnist or synthetic[:K=..][:n=..][:side=..]")
        p.add_argument("--data", default=None, help="directory holding the MNIST IDX files")
        if model:
            p.add_argument("--model", required=True)

    p = sub.add_parser("train", help="train a model and save it")
    common(p, model=False)
    p.add_argument("--arch", choices=("mlp", "cnn"), default="cnn")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--crop", type=int, default=0, help="train on random crops of this size")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="defended accuracy averaged over repetitions")
    common(p)
    p.add_argument("--defense", default="none")
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--n", type=int, default=1000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack", help="run a graybox attack against the base model")
    common(p)
    p.add_argument("--attack", required=True)
    p.add_argument("--defense", default=None)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--save", default=None, help="write the adversarial samples to this .npz")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("grid", help="attack x defense x delta experiment grid")
    common(p, model=False)
    p.add_argument("--config", default=None)
    p.add_argument("--model", default="")
    p.add_argument("--defense", action="append", default=None)
    p.add_argument("--attack", action="append", default=None)
    p.add_argument("--deltas", type=float, nargs="+", default=list(E.MNIST_DELTAS))
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--legit-size", type=int, default=1000)
    p.add_argument("--adv-size", type=int, default=100)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--outcomes", default=None, help="write the per-sample outcome log here")
    p.add_argument("--timings", action="store_true", help="fill the seconds column (not reproducible)")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("game", help="play repeated evasion games with a scripted attacker")
    common(p)
    p.add_argument("--attack", default="fgsm:next:eps=0.3")
    p.add_argument("--defense", default="none")
    p.add_argument("--eps", type=float, default=0.3)
    p.add_argument("--p", choices=("0", "2", "inf"), default="inf")
    p.add_argument("--N", type=int, default=100)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--transcript", default=None)
    p.set_defaults(func=cmd_game)

    p = sub.add_parser("whitebox", help="BPDA/EOT curves against defenses")
    common(p)
    p.add_argument("--attack", default="whitebox:bpda+eot:iters=100:M=30")
    p.add_argument("--defense", action="append", default=None)
    p.add_argument("--n", type=int, default=100)
    p.set_defaults(func=cmd_whitebox)

    p = sub.add_parser("detect", help="fit and evaluate the squeezing-discrepancy detector")
    common(p)
    p.add_argument("--squeezer", action="append", default=None)
    p.add_argument("--percentile", type=float, default=95.0)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--attack", default=None)
    p.set_defaults(func=cmd_detect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    for name, default in (("defense", ["none"]), ("attack", ["fgsm:next:eps=0.3"]), ("squeezer", ["bit_depth:1", "median:2x2"])):
        if getattr(args, name, 0) is None:
            setattr(args, name, default)
    if args.command == "whitebox" and args.defense == ["none"]:
        args.defense = ["bit_depth:1"]
    try:
        args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
