"""Command-line entry point: ``imdistill <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error (nothing written), 2 runtime error.
Each run writes ``run.ini`` (the resolved flags) into its output directory;
``--from-run run.ini`` replays those flags.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from .core import DEFAULT_MAX_DEGREES, DEFAULT_NOISE_SIGMA, BEST_MASK_WEIGHT, DEFAULT_TRUNCATION
from .imageio import contact_sheet, write_text_atomic

DATA_ENV = "IMDISTILL_DATA"
RUN_FILE = "run.ini"
MARKER = ".imdistill-run"
MECHANISMS = ("shape", "texture", "background")

log = logging.getLogger("imdistill")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _unit_weight(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is outside the bound (0, 1]")
    return v


def _positive(kind):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a {kind.__name__}: {text!r}") from None
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
        return v

    parse.__name__ = kind.__name__
    return parse


def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _data_default(sub):
    root = os.environ.get(DATA_ENV)
    return str(Path(root) / sub) if root else None


# -- flag groups -------------------------------------------------------------


def _common(p, out_required=True):
    p.add_argument("--seed", type=int, default=0, help="seed for every random draw in this run (default 0)")
    p.add_argument("--out", required=out_required, help="output directory; refused if it holds a completed run")
    p.add_argument("--force", action="store_true", help="replace a completed run in --out")
    p.add_argument("--from-run", metavar="RUN_INI", help="take defaults from a previous run's run.ini")


def _mechanism_sources(p):
    for m in MECHANISMS:
        p.add_argument(
            f"--{m}",
            default="procedural",
            help=f"{m} mechanism: 'procedural' or a generator checkpoint directory (default procedural)",
        )
    p.add_argument("--teacher-seed", type=int, default=0, help="seed of the procedural mechanisms' class tables")


def _distill_flags(p):
    p.add_argument("--im", choices=MECHANISMS, default="texture", help="mechanism to distill (default texture)")
    p.add_argument("--teacher", choices=("procedural", "checkpoint", "replay"), default="procedural",
                   help="teacher kind when no --dataset is given (default procedural)")
    p.add_argument("--teacher-source", help="checkpoint or teacher-dataset directory for non-procedural teachers")
    p.add_argument("--teacher-seed", type=int, default=0, help="seed of the procedural teacher's class tables")
    p.add_argument("--dataset", help="teacher dataset written by teacher-sample; replaces live sampling")
    p.add_argument("--profile", choices=("mnist28", "imagenet256"), default="mnist28", help="network profile")
    p.add_argument("--per-class", type=_positive(int), default=500,
                   help="teacher samples per class when sampling live (default 500)")
    p.add_argument("--epochs", type=_nonneg_int, default=20, help="training epochs (default 20)")
    p.add_argument("--batch-size", type=_positive(int), default=64, help="minibatch size, >= 2 (default 64)")
    p.add_argument("--disc-steps", type=_nonneg_int, default=2,
                   help="discriminator steps per generator step (default 2)")
    p.add_argument("--lambda-pix", type=float, default=1.0, help="pixel-loss weight (default 1)")
    p.add_argument("--lambda-adv", type=float, default=None,
                   help="adversarial generator-loss weight (default 1, or the --recipe value)")
    p.add_argument("--recipe", choices=("default", "desk"), default="default",
                   help="desk: learning rate 1e-3 and adversarial weight 0.1, tuned for CPU-scale runs; "
                   "explicit --learning-rate / --lambda-adv override it")
    p.add_argument("--alpha", help="comma-separated feature-loss weights per discriminator layer "
                   "(default 1/num_layers each)")
    p.add_argument("--use-kl", action="store_true", help="add the temperature-softened KL term")
    p.add_argument("--temperature", type=_positive(float), default=1.0, help="KL softmax temperature (default 1)")
    p.add_argument("--kl-temperature-squared", action="store_true", help="scale the KL term by temperature^2")
    p.add_argument("--pixel-norm", choices=("L1", "L2"), default="L1", help="pixel-loss norm (default L1)")
    p.add_argument("--gan-loss", choices=("hinge", "hinge_literal", "bce"), default="hinge",
                   help="adversarial loss form (default hinge)")
    p.add_argument("--feature-distance", choices=("L1", "per_layer_kl"), default="L1",
                   help="discriminator-feature distance (default L1)")
    p.add_argument("--learning-rate", type=_positive(float), default=None,
                   help="Adam learning rate (default: the training default)")
    p.add_argument("--beta1", type=float, default=0.0, help="Adam beta1 (default 0)")
    p.add_argument("--beta2", type=float, default=0.999, help="Adam beta2 (default 0.999)")
    p.add_argument("--checkpoint-every", type=_nonneg_int, default=0,
                   help="write a checkpoint every N epochs; 0 writes only the final one")
    p.add_argument("--config", help="distillation config .ini; explicit flags are ignored when given")


def build_parser():
    parser = _Parser(prog="imdistill", description="Distil independent image mechanisms into compact students.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-mnist", help="build the double-colored digit dataset")
    p.add_argument("--source", default=_data_default("mnist"),
                   help=f"directory of MNIST IDX files (default ${DATA_ENV}/mnist)")
    p.add_argument("--synthetic", action="store_true",
                   help="render a synthetic MNIST-like IDX source instead of reading --source")
    p.add_argument("--n-train", type=_positive(int), default=60000, help="synthetic training digits (default 60000)")
    p.add_argument("--n-test", type=_positive(int), default=10000, help="synthetic test digits (default 10000)")
    p.add_argument("--scale", type=_unit_weight, default=1.0,
                   help="stratified fraction of each split to keep, in (0, 1] (default 1)")
    _common(p)

    p = sub.add_parser("teacher-sample", help="sample a teacher into a replayable dataset")
    p.add_argument("--mechanism", choices=MECHANISMS, required=True, help="mechanism the teacher produces")
    p.add_argument("--teacher", choices=("procedural", "checkpoint"), default="procedural", help="teacher kind")
    p.add_argument("--teacher-source", help="generator checkpoint directory for --teacher checkpoint")
    p.add_argument("--teacher-seed", type=int, default=0, help="seed of the procedural teacher's class tables")
    p.add_argument("--profile", choices=("mnist28", "imagenet256"), default="mnist28", help="image geometry")
    p.add_argument("--per-class", type=_positive(int), default=500, help="samples per class (default 500)")
    p.add_argument("--truncation", type=_positive(float), default=DEFAULT_TRUNCATION,
                   help="latent truncation bound (default 2)")
    _common(p)

    for name, text in (("distill", "distill one mechanism"), ("baseline", "adversarial-only training")):
        p = sub.add_parser(name, help=text)
        _distill_flags(p)
        _common(p)

    p = sub.add_parser("compose", help="generate counterfactual composites")
    _mechanism_sources(p)
    p.add_argument("--count", type=_positive(int), default=100, help="number of composites (default 100)")
    p.add_argument("--mask-weight", type=_unit_weight, default=1.0,
                   help="mask transparency in (0, 1]; 0.75 is the recommended setting (default 1)")
    p.add_argument("--label-mode", choices=("independent", "shared"), default="independent",
                   help="independent labels per mechanism, or one shared label (default independent)")
    p.add_argument("--truncation", type=_positive(float), default=DEFAULT_TRUNCATION, help="latent truncation")
    _common(p)

    p = sub.add_parser("study-shape", help="shape-mask transformation study")
    p.add_argument("--transform", choices=("noise", "rotation", "transparency"), required=True,
                   help="mask transformation applied before composition")
    p.add_argument("--sigma", type=_positive(float), default=DEFAULT_NOISE_SIGMA,
                   help="noise standard deviation (default 0.1)")
    p.add_argument("--max-degrees", type=_positive(float), default=DEFAULT_MAX_DEGREES,
                   help="rotation bound in degrees, at most 180 (default 30)")
    p.add_argument("--weight", type=_unit_weight, default=BEST_MASK_WEIGHT,
                   help="transparency factor in (0, 1] (default 0.75)")
    p.add_argument("--dataset", default=_data_default("colored-mnist"),
                   help=f"double-colored dataset from make-mnist (default ${DATA_ENV}/colored-mnist)")
    _mechanism_sources(p)
    p.add_argument("--task", choices=("digit", "real_vs_generated"), default="digit",
                   help="digit: learn shape labels from counterfactuals, test on real images; "
                   "real_vs_generated: separate real from counterfactual images (default digit)")
    p.add_argument("--n-generated", type=_positive(int), default=10000, help="counterfactual images (default 10000)")
    p.add_argument("--n-real", type=_positive(int), default=10000, help="real images used (default 10000)")
    p.add_argument("--epochs", type=_positive(int), default=5, help="classifier epochs (default 5)")
    _common(p)

    p = sub.add_parser("eval-classifier", help="real-vs-generated classifier accuracy")
    p.add_argument("--real", default=_data_default("colored-mnist"), help="double-colored dataset directory")
    p.add_argument("--generated", required=True, help="teacher dataset or compose output directory")
    p.add_argument("--limit", type=_positive(int), default=10000, help="images per side (default 10000)")
    p.add_argument("--epochs", type=_positive(int), default=5, help="classifier epochs (default 5)")
    _common(p)

    p = sub.add_parser("params", help="parameter counts of a network profile")
    p.add_argument("--profile", choices=("mnist28", "imagenet256"), default="mnist28", help="network profile")
    p.add_argument("--im", choices=MECHANISMS, default="texture", help="mechanism (shape builds mask students)")
    p.add_argument("--out", help="optional directory for params.json")
    p.add_argument("--force", action="store_true", help="replace a completed run in --out")
    p.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    p.add_argument("--from-run", metavar="RUN_INI", help="take defaults from a previous run's run.ini")

    p = sub.add_parser("grid", help="teacher-over-student PNG contact sheet")
    p.add_argument("--dataset", required=True, help="teacher dataset directory")
    p.add_argument("--checkpoint", required=True, help="student generator checkpoint directory")
    p.add_argument("--count", type=_positive(int), default=10, help="columns in the sheet (default 10)")
    _common(p)
    return parser


# -- run directory handling --------------------------------------------------


def _prepare_out(out, force):
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not (out / MARKER).exists():
            raise UsageError(f"--out {out} is not empty and was not written by imdistill; refusing to touch it")
        if (out / RUN_FILE).exists() and not force:
            raise UsageError(f"--out {out} holds a completed run; pass --force to replace it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / MARKER).touch()
    return out


_SKIP = {"force", "from_run", "out", "verbose"}


def _write_run(out, command, args):
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["run"] = {"command": command}
    cp["args"] = {k: json.dumps(v) for k, v in sorted(vars(args).items()) if k not in _SKIP | {"command"}}
    tmp = Path(out) / (RUN_FILE + ".tmp")
    with open(tmp, "w") as fh:
        cp.write(fh)
    os.replace(tmp, Path(out) / RUN_FILE)


def _from_run_path(argv):
    for i, a in enumerate(argv):
        if a == "--from-run":
            return argv[i + 1] if i + 1 < len(argv) else None
        if a.startswith("--from-run="):
            return a.split("=", 1)[1]
    return None


def _apply_run_defaults(parser, argv):
    """Parse ``argv``; a ``--from-run`` file supplies defaults for every flag it records."""
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _from_run_path(argv)
    if path is None:
        return parser.parse_args(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    subs = parser._subparsers._group_actions[0].choices
    if command not in subs:
        return parser.parse_args(argv)
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path):
        raise UsageError(f"--from-run: cannot read {path}")
    if cp.get("run", "command", fallback=None) != command:
        raise UsageError(f"--from-run: {path} records a different command")
    sub = subs[command]
    known = {a.dest for a in sub._actions}
    stored = {k: json.loads(v) for k, v in cp["args"].items()}
    unknown = sorted(set(stored) - known)
    if unknown:
        raise UsageError(f"--from-run: unknown keys {unknown}")
    sub.set_defaults(**stored)
    for a in sub._actions:
        if a.dest in stored:
            a.required = False
    return parser.parse_args(argv)


def _check_required(args):
    if args.command == "study-shape" and not args.dataset:
        raise UsageError(f"--dataset is required (or set ${DATA_ENV})")
    if args.command == "eval-classifier" and not args.real:
        raise UsageError(f"--real is required (or set ${DATA_ENV})")
    if args.command == "make-mnist" and not (args.synthetic or args.source):
        raise UsageError(f"--source is required unless --synthetic is given (or set ${DATA_ENV})")
    if args.command in ("distill", "baseline") and args.teacher != "procedural" and not (
        args.teacher_source or args.dataset or args.config
    ):
        raise UsageError("--teacher-source is required for non-procedural teachers")


# -- subcommands -------------------------------------------------------------


def _mechanism(args, name):
    from .teachers import ProceduralTeacher

    src = getattr(args, name)
    if src == "procedural":
        return ProceduralTeacher(name, seed=args.teacher_seed)
    return src


def cmd_make_mnist(args, out):
    from .datasets import build_double_colored_mnist, write_synthetic_mnist

    source, label = args.source, None
    if args.synthetic:
        source = out / "source"
        write_synthetic_mnist(source, args.n_train, args.n_test, seed=args.seed)
        label = f"synthetic(n_train={args.n_train}, n_test={args.n_test}, seed={args.seed})"
    m = build_double_colored_mnist(source, args.seed, out / "data", scale=args.scale, source_label=label)
    print(f"wrote {m.split_size('train')} train / {m.split_size('test')} test images to {out / 'data'}")


def cmd_teacher_sample(args, out):
    from .nets import profile_specs
    from .teachers import generate_teacher_dataset, make_teacher

    g, _ = profile_specs(args.profile)
    teacher = make_teacher(args.teacher, args.mechanism, args.teacher_source, num_classes=g.num_classes,
                           image_size=g.output_size, latent_dim=g.latent_dim, seed=args.teacher_seed)
    if teacher.output != ("mask" if args.mechanism == "shape" else "rgb"):
        raise ValueError(f"teacher output {teacher.output} does not match mechanism {args.mechanism}")
    ds = generate_teacher_dataset(teacher, args.per_class, latent_dim=g.latent_dim, truncation=args.truncation,
                                  seed=args.seed, out_dir=out / "data")
    print(f"wrote {len(ds)} teacher samples to {ds.root}")


def _distill_config(args):
    from .config import DistillConfig, OptimizerConfig, TeacherConfig, load_config
    from .losses import LossWeights
    from .train import DESK_RECIPE

    if args.config:
        cfg = load_config(args.config)
        from dataclasses import replace

        return replace(cfg, seed=args.seed)
    alpha = None
    if args.alpha:
        alpha = [float(a) for a in args.alpha.split(",")]
    recipe = DESK_RECIPE if args.recipe == "desk" else {}
    lambda_adv = args.lambda_adv if args.lambda_adv is not None else recipe.get("lambda_adv", 1.0)
    learning_rate = args.learning_rate if args.learning_rate is not None else recipe.get("learning_rate")
    weights = LossWeights(
        lambda_pix=args.lambda_pix, lambda_adv=lambda_adv, alpha=alpha, temperature=args.temperature,
        use_kl=args.use_kl, pixel_norm=args.pixel_norm, gan_loss=args.gan_loss,
        feature_distance=args.feature_distance, kl_temperature_squared=args.kl_temperature_squared,
    )
    opt = OptimizerConfig(beta1=args.beta1, beta2=args.beta2)
    if learning_rate is not None:
        opt = OptimizerConfig(learning_rate=learning_rate, beta1=args.beta1, beta2=args.beta2)
    return DistillConfig(
        im=args.im, weights=weights, optimizer=opt, batch_size=args.batch_size, epochs=args.epochs,
        disc_steps_per_gen_step=args.disc_steps, seed=args.seed,
        teacher=TeacherConfig(kind=args.teacher, mechanism=args.im, source=args.teacher_source,
                              seed=args.teacher_seed),
        dataset=args.dataset, checkpoint_every=args.checkpoint_every, profile=args.profile,
        per_class=args.per_class,
    )


def cmd_distill(args, out, baseline=False):
    from .train import distill_im, train_baseline

    cfg = _distill_config(args)
    report = (train_baseline if baseline else distill_im)(cfg, out)
    last = report.rows[-1] if report.rows else {}
    print(f"{len(report.rows)} epochs, final pixel {last.get('pixel', float('nan')):.4f}, "
          f"checkpoint {report.checkpoint}")


def cmd_compose(args, out):
    from .counterfactual import generate_counterfactuals, save_counterfactuals

    cf = generate_counterfactuals(
        _mechanism(args, "shape"), _mechanism(args, "texture"), _mechanism(args, "background"),
        args.count, seed=args.seed, mask_weight=args.mask_weight, label_mode=args.label_mode,
        truncation=args.truncation,
    )
    save_counterfactuals(cf, out)
    print(f"wrote {len(cf)} composites to {out}")


def cmd_study_shape(args, out):
    from .study import append_results_csv, run_shape_study

    params = {"noise": {"sigma": args.sigma}, "rotation": {"max_degrees": args.max_degrees},
              "transparency": {"weight": args.weight}}[args.transform]
    base = {m: _mechanism(args, m) for m in MECHANISMS}
    res = run_shape_study(args.transform, params, base, _dataset_dir(args.dataset), seed=args.seed,
                          n_generated=args.n_generated, n_real=args.n_real, epochs=args.epochs, task=args.task)
    append_results_csv(out / "study.csv", [res])
    print(f"{res.transform}: train {res.train_accuracy:.2f}% test {res.test_accuracy:.2f}%")


def _dataset_dir(path):
    p = Path(path)
    if not (p / "manifest").exists() and (p / "data" / "manifest").exists():
        p = p / "data"
    return p


def cmd_eval_classifier(args, out):
    from .study import append_results_csv, train_invariant_classifier

    gen = Path(args.generated)
    if (gen / "data" / "manifest").exists():
        gen = gen / "data"
    if (gen / "manifest").exists():
        from .teachers import TeacherDataset

        gen_src = TeacherDataset(gen)
    else:
        from .imageio import IMAGE_DIR, read_png

        files = sorted((gen / IMAGE_DIR).glob("*.png"))[: args.limit]
        if not files:
            raise FileNotFoundError(f"no images under {gen}")
        gen_src = torch.stack([read_png(f) for f in files])
    res = train_invariant_classifier(_dataset_dir(args.real), gen_src, epochs=args.epochs, seed=args.seed,
                                     limit=args.limit)
    append_results_csv(out / "study.csv", [res])
    print(f"train {res.train_accuracy:.2f}% test {res.test_accuracy:.2f}%")


def cmd_params(args, out):
    from .nets import build_discriminator, build_generator, param_count, profile_specs

    g, d = profile_specs(args.profile, mask_mode=args.im == "shape")
    counts = {
        "profile": args.profile,
        "im": args.im,
        "generator": param_count(g),
        "generator_built": param_count(build_generator(g)),
        "discriminator": param_count(d),
    }
    print(f"{args.profile} {args.im}: generator {counts['generator']:,}, discriminator {counts['discriminator']:,}")
    if out is not None:
        write_text_atomic(out / "params.json", json.dumps(counts, indent=2) + "\n")


def cmd_grid(args, out):
    from .checkpoint import load_checkpoint
    from .nets import generate
    from .teachers import TeacherDataset

    ds = TeacherDataset(_dataset_dir(args.dataset))
    gen, _ = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    idx = sorted(rng.choice(len(ds), size=min(args.count, len(ds)), replace=False).tolist())
    z, y = ds.latents()[idx], ds.labels()[idx]
    teacher = ds.images(idx)
    student = generate(gen, z, y)
    contact_sheet([teacher, student], out / "grid.png")
    print(f"wrote {out / 'grid.png'}")


COMMANDS = {
    "make-mnist": cmd_make_mnist,
    "teacher-sample": cmd_teacher_sample,
    "distill": cmd_distill,
    "baseline": lambda a, o: cmd_distill(a, o, baseline=True),
    "compose": cmd_compose,
    "study-shape": cmd_study_shape,
    "eval-classifier": cmd_eval_classifier,
    "params": cmd_params,
    "grid": cmd_grid,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_run_defaults(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _check_required(args)
        torch.manual_seed(args.seed)
        out = _prepare_out(args.out, args.force) if args.out else None
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        COMMANDS[args.command](args, out)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"imdistill {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    if out is not None:
        _write_run(out, args.command, args)
    return 0


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
