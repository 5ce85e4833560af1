"""``imvae`` command line: the pipeline as subcommands over one config file.

Exit codes: 0 success, 2 config or data error, 3 missing artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import PipelineConfig, load_config
from .errors import ConfigError, IMVAEError

log = logging.getLogger("imvae")

SUBCOMMANDS = ("prepare", "train-psg", "pseudo", "train", "evaluate", "ablate", "sweep")


def _floats(text: str) -> tuple[float, ...]:
    """``25,50,100`` (percent) or ``0.25,0.5,1`` (fractions)."""
    vals = [float(v) for v in text.split(",") if v.strip()]
    if not vals:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    return tuple(v / 100 if v > 1 else v for v in vals)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML pipeline config")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", type=Path, help="output directory (default: config 'out')")
    common.add_argument("--force", action="store_true", help="recompute even if outputs are up to date")
    common.add_argument("--cross-encoder", choices=("attention", "mlp"), dest="cross_encoder")
    common.add_argument("--ablation", choices=("no_psg", "no_if_ds", "no_dn"),
                        help="train a single ablated variant")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="imvae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "sweep":
            p.add_argument("--density", type=_floats, help="e.g. 25,50,75,100")
            p.add_argument("--overlap-ratio", type=_floats, dest="overlap_ratio", help="K_o values, e.g. 25,100")
        else:
            p.add_argument("--density", type=_floats, help="single record-keep fraction, e.g. 50")
            p.add_argument("--overlap-ratio", type=_floats, dest="overlap_ratio", help="single K_o value")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.out is not None:
        config = replace(config, out=str(args.out))
    model = config.model
    if args.cross_encoder:
        model = replace(model, cross_encoder_mode=args.cross_encoder)
    if args.ablation and args.command != "ablate":
        model = replace(model, **{args.ablation: True})
    config = replace(config, model=model)
    if args.command == "sweep":
        sweep = config.sweep
        if args.density or args.overlap_ratio:
            # explicit axes on the command line replace the configured ones
            sweep = replace(sweep, density=args.density or (), overlap=args.overlap_ratio or (),
                            T=(), lambda_a=(), lambda_t=())
        config = replace(config, sweep=sweep)
    else:
        for flag, key in ((args.density, "density"), (args.overlap_ratio, "k_o")):
            if flag:
                if len(flag) != 1:
                    raise ConfigError(f"--{key} takes one value outside `sweep`")
                config = replace(config, corpus=replace(config.corpus, **{key: flag[0]}))
    return config.validate()


def run(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(config.to_yaml())
    cmd = args.command
    if cmd == "prepare":
        print(pipeline.run_prepare(config, out, args.force))
    elif cmd == "train-psg":
        print(pipeline.run_train_psg(config, out, args.force))
    elif cmd == "pseudo":
        print(pipeline.run_pseudo(config, out, args.force))
    elif cmd == "train":
        print(pipeline.run_train(config, out, args.force))
    elif cmd == "evaluate":
        d = pipeline.run_evaluate(config, out, args.force)
        print((d / "report.txt").read_text(), end="")
    elif cmd == "ablate":
        variants = ("full", args.ablation) if args.ablation else pipeline.VARIANTS
        reports = pipeline.run_ablate(config, out, args.force, variants)
        for name, rep in reports.items():
            print(f"== {name} ==")
            print(rep.format_table())
    elif cmd == "sweep":
        rows = pipeline.run_sweep(config, out, args.force)
        print(f"{len(rows)} runs -> {out / 'sweep' / 'summary.csv'}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return run(args)
    except IMVAEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
