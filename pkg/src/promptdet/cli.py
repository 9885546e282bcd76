"""Command line: ``promptdet <stage> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 missing or
malformed input, 1 anything else. Failures print one diagnostic line.
"""

import argparse
import json
import logging
import sys

from . import pipeline
from .binio import FormatError
from .config import load_config_file, resolve
from .exceptions import ConfigurationError, InputError, LayoutError

EXIT_USAGE = 2
EXIT_INPUT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _on_off(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def _key_value(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", help="artifact root (default: $P3OVD_HOME or ./promptdet_runs)")
    common.add_argument("--config", help="flat key=value configuration file")
    common.add_argument("--set", dest="overrides", action="append", type=_key_value, default=[],
                        metavar="KEY=VALUE", help="override one configuration key")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="torch intra-op threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="promptdet", description="Prompt-driven pseudo-labelling pipeline for "
                                                "open-vocabulary detection on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write the synthetic benchmark")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-pretrain", type=int)
    p.add_argument("--n-transfer", type=int)

    p = sub.add_parser("pretrain", parents=[common], help="contrastive VLM pretraining")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("adapt", parents=[common], help="fit the prompt modules")
    p.add_argument("--text-prompt", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--visual-prompt", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--hand-prompt", metavar="TEMPLATE", help="fixed template such as 'a photo of a {}'")
    p.add_argument("--layout", metavar="l,m", help="front and total prompt token counts")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr-text", type=float)
    p.add_argument("--lr-visual", type=float)

    p = sub.add_parser("label", parents=[common], help="generate pseudo labels")
    p.add_argument("--prompts", metavar="ARM", help="adapted arm to label with (default both)")
    p.add_argument("--delta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--objectness", type=float)
    p.add_argument("--oracle-proposals", action="store_true")

    p = sub.add_parser("train-detector", parents=[common], help="self-train the detector")
    p.add_argument("--no-pseudo", action="store_true", help="base boxes only (baseline arm)")
    p.add_argument("--prompts", metavar="ARM")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", parents=[common], help="mAP of a detector or a detections file")
    p.add_argument("--detector", default=None, metavar="TAG", help="pseudo-<arm> or no-pseudo")
    p.add_argument("--split", default="val", choices=("val", "transfer"))
    p.add_argument("--detections", metavar="FILE", help="evaluate a JSON-lines detections file")

    p = sub.add_parser("sweep", parents=[common], help="pseudo-label quality over a threshold grid")
    p.add_argument("--param", required=True, choices=("delta", "gamma", "objectness"))
    p.add_argument("--values", required=True, help="comma-separated grid")
    p.add_argument("--prompts", metavar="ARM")

    sub.add_parser("run-all", parents=[common], help="every stage of the reference experiment")
    return parser


_FLAG_KEYS = {
    "seed": "seed", "workers": "workers",
    "n_train": "data.n_train", "n_val": "data.n_val", "n_pretrain": "data.n_pretrain",
    "n_transfer": "data.n_transfer",
    "layout": "adapt.layout", "lr_text": "adapt.lr_text", "lr_visual": "adapt.lr_visual",
    "delta": "label.delta", "gamma": "label.gamma", "objectness": "label.objectness",
}
_EPOCH_KEYS = {"pretrain": "pretrain.epochs", "adapt": "adapt.epochs", "train-detector": "detector.epochs"}


def cli_values(args):
    """Configuration keys set on the command line (``--set`` first, named flags win)."""
    values = dict(args.overrides)
    for attr, key in _FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    if getattr(args, "epochs", None) is not None:
        values[_EPOCH_KEYS[args.command]] = args.epochs
    if getattr(args, "oracle_proposals", False):
        values["label.oracle_proposals"] = True
    if getattr(args, "prompts", None):
        values["label.prompts"] = args.prompts
    return values


def run(args):
    file_values = load_config_file(args.config) if args.config else {}
    cfg = resolve(file_values, cli_values(args))
    root = pipeline.artifact_root(args.out_dir)
    cmd = args.command
    if cmd == "gen-data":
        m = pipeline.stage_gen_data(root, cfg)
        print(f"wrote {len(m.outputs)} files under {root / 'data'}")
    elif cmd == "pretrain":
        pipeline.stage_pretrain(root, cfg)
        summary = json.loads((root / "vlm" / "pretrain.json").read_text())
        print(f"pretrained VLM; final loss {summary['losses'][-1]:.4f}, "
              f"retrieval accuracy {summary['retrieval_accuracy']:.3f}")
    elif cmd == "adapt":
        arm = pipeline.arm_name(args.text_prompt, args.visual_prompt, args.hand_prompt)
        if args.hand_prompt:
            cfg["adapt.hand_template"] = args.hand_prompt
        pipeline.stage_adapt(root, cfg, arm)
        last = json.loads((root / "adapt" / arm / "report.jsonl").read_text().splitlines()[-1])
        print(f"adapt[{arm}] novel mIoU {last['miou_novel']:.4f} base mIoU {last['miou_base']:.4f}")
    elif cmd == "label":
        pipeline.label_thresholds(cfg)
        arm = cfg["label.prompts"]
        pipeline.stage_label(root, cfg, arm)
        rep = json.loads((root / "label" / arm / "report.json").read_text())
        print(f"label[{arm}] {rep['config']['n_labels']} pseudo labels, novel mAP {rep['map_novel']:.4f}")
    elif cmd == "train-detector":
        pipeline.stage_train_detector(root, cfg, no_pseudo=args.no_pseudo, arm=cfg["label.prompts"])
        print("trained detector " + ("no-pseudo" if args.no_pseudo else f"pseudo-{cfg['label.prompts']}"))
    elif cmd == "eval":
        tag = args.detector or f"pseudo-{cfg['label.prompts']}"
        report = pipeline.stage_eval(root, cfg, tag, args.split, args.detections)
        print(report.table())
    elif cmd == "sweep":
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise ConfigurationError(f"bad --values {args.values!r}") from None
        rows = pipeline.stage_sweep(root, cfg, args.param, values, cfg["label.prompts"])
        for v, m, n in rows:
            print(f"{args.param}={v:g} novel mAP {m:.4f} labels {n}")
    elif cmd == "run-all":
        summary = pipeline.run_reference(root, cfg)
        summary.pop("manifests")
        print(json.dumps(summary, indent=1, sort_keys=True, default=str))
    return 0


def cli_main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigurationError, LayoutError) as exc:
        print(f"promptdet: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"promptdet: input error: missing {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, FormatError) as exc:
        print(f"promptdet: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - top-level diagnostic
        print(f"promptdet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
