"""Command line entry point: ``deepminer {train,eval,viz,ablate}``.

Exit status: 0 on success, 1 for usage errors, 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .checkpoint import load_checkpoint
from .config import load_config
from .data import load_dir, read_image, synth_dataset
from .errors import ConfigInvalid, DeepMinerError
from .training import ablate_threshold, evaluate_split, format_ablation, train
from .viz import visualize_masks

logger = logging.getLogger("deepminer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _taus(text: str) -> list[float]:
    try:
        taus = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad tau list {text!r}") from None
    if not taus:
        raise argparse.ArgumentTypeError("empty tau list")
    return taus


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deepminer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="image directory or 'synth'")

    p = sub.add_parser("viz", help="write activation heatmaps and erasing masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="sweep the erasing threshold")
    p.add_argument("--config", required=True)
    p.add_argument("--taus", type=_taus, default=[0.5, 0.6, 0.7, 0.8, 0.9, 0.99])
    return parser


def _cmd_train(args) -> None:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    hist = train(cfg)
    if hist.final is not None:
        sys.stdout.write(hist.final.format())
    else:
        sys.stdout.write(f"loss {hist.epochs[-1].loss:.6f}\n")


def _cmd_eval(args) -> None:
    model = load_checkpoint(args.checkpoint)
    cfg = model.config
    if args.data == "synth":
        meta = getattr(model, "metadata", {})
        test_set = synth_dataset(int(meta.get("num_ids", cfg.num_identities)), int(meta.get("per_id", 16)),
                                 int(meta.get("num_cams", 2)), cfg.image_height, cfg.image_width,
                                 seed=int(meta.get("data_seed", 0)) + 1)
    else:
        test_set = load_dir(args.data, cfg.image_height, cfg.image_width)
    result = evaluate_split(model, test_set, k_max=10)
    sys.stdout.write(result.format())


def _cmd_viz(args) -> None:
    model = load_checkpoint(args.checkpoint)
    image = read_image(args.image, model.config.image_height, model.config.image_width)
    for path in visualize_masks(model, image, args.out):
        sys.stdout.write(f"{path}\n")


def _cmd_ablate(args) -> None:
    cfg = load_config(args.config)
    sys.stdout.write(format_ablation(ablate_threshold(cfg, args.taus)))


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "viz": _cmd_viz, "ablate": _cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"deepminer: error: {exc}\n")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ConfigInvalid as exc:
        sys.stderr.write(f"deepminer: config error: {exc}\n")
        return 1
    except (DeepMinerError, OSError) as exc:
        sys.stderr.write(f"deepminer: {type(exc).__name__}: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
