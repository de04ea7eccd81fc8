"""
MoNet Harness - moment-embedding pooling head
Command-line entry point: configuration, logging and exit codes
"""

import argparse
import asyncio
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv
from pydantic import ValidationError

from models.schemas import VARIANT_FLAGS, RunConfig
from services import harness
from services.errors import ConfigError, MoNetError, VerificationFailure

# Load environment variables
load_dotenv()

# Configure logging
logging.basicConfig(
    level=os.getenv("MONET_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFICATION = 2

COMMANDS = ("train", "eval", "gradcheck", "verify", "sketchbench", "gen-data")

ENV_FIELDS = {
    "MONET_SEED": ("seed", int),
    "MONET_DATA": ("data", str),
    "MONET_OUT": ("out", str),
    "MONET_WORKERS": ("workers", int),
}


class HarnessArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors as ConfigError instead of exiting 2"""

    def error(self, message):
        raise ConfigError("arguments", message)


def _on_off(value: str) -> bool:
    lowered = value.lower()
    if lowered not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got '{value}'")
    return lowered == "on"


def _clip(value: str) -> List[float]:
    """'c' means [-c, c]; 'lo,hi' is taken as given"""
    try:
        parts = [float(p) for p in value.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid clip range '{value}'")
    if len(parts) == 1:
        return [-abs(parts[0]), abs(parts[0])]
    if len(parts) == 2:
        return parts
    raise argparse.ArgumentTypeError(f"invalid clip range '{value}'")


def _join_clip(argv: Sequence[str]) -> List[str]:
    # argparse takes "-1,1" for an option, so bind it to --clip explicitly
    joined: List[str] = []
    pending = False
    for token in argv:
        if pending and token.startswith("-") and "," in token:
            joined[-1] = f"--clip={token}"
        else:
            joined.append(token)
        pending = token == "--clip"
    return joined


def build_parser() -> argparse.ArgumentParser:
    parser = HarnessArgumentParser(
        prog="monet",
        description="Train, evaluate and verify MoNet moment-embedding heads",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON file with RunConfig fields; flags override it")

    arch = parser.add_argument_group("architecture")
    arch.add_argument("--variant", choices=sorted(VARIANT_FLAGS))
    arch.add_argument("--pooling", choices=("bilinear", "ts"))
    arch.add_argument("--sketch-dim", type=int)
    arch.add_argument("--epsilon", type=float, help="singular values at or below this are dropped")
    arch.add_argument("--adapter", action="store_const", const=True,
                      help="train a C x C feature adapter after warm start")

    optim = parser.add_argument_group("optimization")
    optim.add_argument("--epochs", type=int)
    optim.add_argument("--warmup-steps", type=int)
    optim.add_argument("--lr", type=float)
    optim.add_argument("--momentum", type=float)
    optim.add_argument("--weight-decay", type=float)
    optim.add_argument("--batch-size", type=int)
    optim.add_argument("--clip", type=_clip, help="c for [-c, c], or lo,hi")
    optim.add_argument("--workers", type=int)
    optim.add_argument("--augment-flip", action="store_const", const=True)

    task = parser.add_argument_group("synthetic task")
    task.add_argument("--task", choices=("covariance_only", "mean_and_covariance"))
    task.add_argument("--classes", type=int)
    task.add_argument("--locations", type=int)
    task.add_argument("--channels", type=int)
    task.add_argument("--train-per-class", type=int)
    task.add_argument("--test-per-class", type=int)

    io = parser.add_argument_group("data and output")
    io.add_argument("--seed", type=int)
    io.add_argument("--data")
    io.add_argument("--test-data")
    io.add_argument("--model")
    io.add_argument("--out")
    io.add_argument("--preprocess-signed-sqrt", type=_on_off, metavar="{on,off}")
    io.add_argument("--timing", type=_on_off, metavar="{on,off}")
    io.add_argument("--gradcheck-tol", type=float)
    io.add_argument("--sketch-trials", type=int)
    return parser


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _variant_document(doc: Dict[str, Any]) -> Dict[str, Any]:
    """Accept "variant": "monet-2" plus top-level pooling/sketch_dim in config files"""
    doc = dict(doc)
    variant = doc.get("variant", {})
    if isinstance(variant, str):
        if variant not in VARIANT_FLAGS:
            raise ConfigError("variant", f"unknown variant '{variant}', expected one of {sorted(VARIANT_FLAGS)}")
        use_hm, use_ssqrt = VARIANT_FLAGS[variant]
        variant = {"use_hm": use_hm, "use_ssqrt": use_ssqrt}
    variant = dict(variant)
    for key in ("pooling", "sketch_dim"):
        if key in doc:
            variant[key] = doc.pop(key)
    if variant.get("pooling") == "ts":
        variant["pooling"] = "sketch"
    if variant:
        doc["variant"] = variant
    return doc


def _env_document() -> Dict[str, Any]:
    doc: Dict[str, Any] = {}
    for name, (field, kind) in ENV_FIELDS.items():
        raw = os.getenv(name)
        if raw is None or raw == "":
            continue
        try:
            doc[field] = kind(raw)
        except ValueError:
            raise ConfigError(field, f"environment variable {name}={raw!r} is not a valid {kind.__name__}")
    return doc


def _file_document(path: str) -> Dict[str, Any]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError("config", f"cannot read {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"{path} is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise ConfigError("config", f"{path} must hold a JSON object")
    return _variant_document(doc)


def _flag_document(args: argparse.Namespace) -> Dict[str, Any]:
    doc: Dict[str, Any] = {"command": args.command}

    def put(section: Optional[str], key: str, value):
        if value is None:
            return
        if section is None:
            doc[key] = value
        else:
            doc.setdefault(section, {})[key] = value

    if args.variant is not None:
        use_hm, use_ssqrt = VARIANT_FLAGS[args.variant]
        put("variant", "use_hm", use_hm)
        put("variant", "use_ssqrt", use_ssqrt)
    put("variant", "pooling", "sketch" if args.pooling == "ts" else args.pooling)
    put("variant", "sketch_dim", args.sketch_dim)

    put("optim", "lr", args.lr)
    put("optim", "momentum", args.momentum)
    put("optim", "weight_decay", args.weight_decay)
    put("optim", "batch_size", args.batch_size)
    if args.clip is not None:
        put("optim", "clip_lo", args.clip[0])
        put("optim", "clip_hi", args.clip[1])

    put("task", "kind", args.task)
    put("task", "classes", args.classes)
    put("task", "locations", args.locations)
    put("task", "channels", args.channels)
    put("task", "train_per_class", args.train_per_class)
    put("task", "test_per_class", args.test_per_class)

    for key in ("epsilon", "epochs", "warmup_steps", "seed", "data", "test_data", "model", "out",
                "preprocess_signed_sqrt", "timing", "workers", "adapter", "augment_flip",
                "gradcheck_tol", "sketch_trials"):
        put(None, key, getattr(args, key))
    return doc


def _validation_field(error: ValidationError) -> str:
    details = error.errors()
    if not details:
        return "config"
    return ".".join(str(part) for part in details[0]["loc"]) or "config"


def build_config(argv: Optional[Sequence[str]] = None) -> RunConfig:
    """Defaults < environment < --config file < command-line flags"""
    if argv is None:
        argv = sys.argv[1:]
    args = build_parser().parse_args(_join_clip(argv))
    doc = _env_document()
    if args.config:
        doc = _merge(doc, _file_document(args.config))
    doc = _merge(doc, _flag_document(args))
    # the task follows the run seed unless a config pins it
    if "seed" in doc and "seed" not in doc.get("task", {}):
        doc.setdefault("task", {})["seed"] = doc["seed"]
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(_validation_field(e), e.errors()[0]["msg"])


def dispatch(cfg: RunConfig) -> int:
    logger.info(f"Running {cfg.command} (variant {cfg.variant.label}, seed {cfg.seed}, out {cfg.out})")
    if cfg.command == "train":
        result = asyncio.run(harness.run_train(cfg))
        logger.info(f"Model written to {result.model_path}")
    elif cfg.command == "eval":
        summary = asyncio.run(harness.run_eval(cfg))
        print(summary.model_dump_json(indent=2))
    elif cfg.command == "gradcheck":
        reports = harness.run_gradcheck(cfg)
        failed = [r.op for r in reports if not r.passed]
        if failed:
            raise VerificationFailure(f"gradient checks failed: {', '.join(failed)}")
    elif cfg.command == "verify":
        checks = harness.run_verify(cfg)
        failed = [c.name for c in checks if not c.passed]
        if failed:
            raise VerificationFailure(f"oracle checks failed: {', '.join(failed)}")
    elif cfg.command == "sketchbench":
        harness.run_sketchbench(cfg)
    elif cfg.command == "gen-data":
        train_path, test_path = harness.run_gen_data(cfg)
        logger.info(f"Dataset manifests: {train_path}, {test_path}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cfg = build_config(argv)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE

    try:
        return dispatch(cfg)
    except VerificationFailure as e:
        logger.error(str(e))
        return EXIT_VERIFICATION
    except (MoNetError, ValueError, OSError) as e:
        logger.error(f"{cfg.command} failed: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
