"""Command-line interface.

Exit status: 0 success, 1 verification or feasibility failure, 2 usage or
configuration error.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import verify
from .attention import write_trace_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigurationError, DimensionError, InfeasibleError
from .model import ConvShareViT, ModelConfig, attention_heatmaps
from .optics.planner import plan_inferences, plan_table
from .optics.simulate import ENGINES, compare
from .optics.tiling import DeviceSpec
from .training import (TOY_KINDS, ScheduleConfig, ToyDataset, toy_model_config, train,
                       write_metrics_csv)

DEFAULT_SEED = 0
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
PRECISIONS = {"single": np.float32, "double": np.float64}
SIM_TOLERANCE = 1e-6

log = logging.getLogger("convshare")


@dataclass
class RunConfig:
    command: str
    config_path: Path | None
    device: DeviceSpec
    seed: int
    out: Path
    precision: str

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def model_config(self, default):
        if self.config_path is None:
            return default
        if not self.config_path.is_file():
            raise ConfigurationError(f"config file {self.config_path} does not exist")
        return ModelConfig.from_json(self.config_path.read_text())


def _run_config(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return RunConfig(args.command, Path(args.config) if args.config else None,
                     DeviceSpec(args.device_res, args.device_clock), args.seed, out,
                     args.precision)


def _write_json(path, data):
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def write_pgm(path, image):
    """8-bit plain (P2) PGM of ``image`` with values in ``[0, 1]``."""
    image = np.asarray(image)
    pix = np.clip(np.rint(image * 255), 0, 255).astype(int)
    lines = ["P2", f"{pix.shape[1]} {pix.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in pix]
    Path(path).write_text("\n".join(lines) + "\n")
    return path


# commands ---------------------------------------------------------------
def cmd_verify(rc, args):
    report = verify.run_all(rc.seed, fault=args.inject_fault)
    _write_json(rc.out / "verify.json", report)
    print(json.dumps(report, indent=2, sort_keys=True))
    for name in report["failed"]:
        print(f"FAILED: {name}", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_plan(rc, args):
    config = rc.model_config(verify.deployment_config())
    plan = plan_inferences(config, rc.device)
    _write_json(rc.out / "plan.json", plan.to_dict())
    table = plan_table(plan, rc.device)
    (rc.out / "plan.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def _toy(args, seed, count):
    return ToyDataset(args.toy, args.image_size, count, seed, noise=args.noise)


def cmd_train(rc, args):
    train_set = _toy(args, rc.seed, args.train_count)
    val_set = _toy(args, rc.seed + 1, args.val_count)
    config = rc.model_config(toy_model_config(train_set))
    epochs = args.epochs
    schedule = ScheduleConfig(args.lr, min(args.warmup, epochs - 1), epochs)
    model = ConvShareViT(config, seed=rc.seed, dtype=rc.dtype)
    result = train(model, train_set.generate(), val_set.generate(), schedule, seed=rc.seed,
                   batch_size=args.batch_size)
    write_metrics_csv(result.metrics, rc.out / "metrics.csv")
    save_checkpoint(rc.out / "checkpoint.ckpt", model, seed=rc.seed, epoch=epochs)
    last = result.metrics[-1]
    print(f"epochs {epochs} train_acc {last['train_acc']:.4f} val_acc {last['val_acc']:.4f}")
    return EXIT_OK


def _load_image(args, config, seed):
    if args.image:
        image = np.load(args.image)
    else:
        data = ToyDataset(args.toy, config.image_size, args.toy_index + 1, seed + 1,
                          channels=config.in_channels)
        image = data.generate()[0][args.toy_index]
    expected = (config.in_channels, config.image_size, config.image_size)
    if image.shape != expected:
        raise DimensionError(f"image has shape {image.shape}, model expects {expected}")
    return image


def cmd_attnmap(rc, args):
    model, meta = load_checkpoint(args.checkpoint)
    image = _load_image(args, model.config, meta["seed"])
    _, trace = model.forward(image[None], trace=True)
    maps = attention_heatmaps([t[0] for t in trace], model.config)
    for i, (m, t) in enumerate(zip(maps, trace)):
        np.savetxt(rc.out / f"attn_layer{i}.csv", m, delimiter=",", fmt="%.17g")
        write_pgm(rc.out / f"attn_layer{i}.pgm", m)
        write_trace_csv(t[0], rc.out / f"scores_layer{i}.csv")
    print(f"wrote {len(maps)} heatmap pairs to {rc.out}")
    return EXIT_OK


def cmd_simulate(rc, args):
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model = ConvShareViT(rc.model_config(verify.deployment_config()), seed=rc.seed,
                             dtype=rc.dtype)
    config = model.config
    if args.image:
        images = _load_image(args, config, rc.seed)[None]
    else:
        shape = (args.images, config.in_channels, config.image_size, config.image_size)
        images = np.random.default_rng(rc.seed).standard_normal(shape)
    report = compare(model, images, rc.device, args.engine)
    np.save(rc.out / "optical_logits.npy", report.pop("optical_logits"))
    np.save(rc.out / "electronic_logits.npy", report.pop("electronic_logits"))
    report.update(schema_version=verify.SCHEMA_VERSION, command="simulate",
                  tolerance=SIM_TOLERANCE)
    report["passed"] = bool(report["max_relative_deviation"] < SIM_TOLERANCE
                            and report["argmax_identical"]
                            and report["inferences_per_image"] == report["plan_total"])
    _write_json(rc.out / "simulate.json", report)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK if report["passed"] else EXIT_FAIL


# parser -----------------------------------------------------------------
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="model config JSON")
    common.add_argument("--device-res", type=int, default=2160, metavar="INT",
                        help="device pixels per axis (default 2160)")
    common.add_argument("--device-clock", type=float, default=2e6, metavar="HZ",
                        help="optical inferences per second (default 2e6)")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, metavar="INT",
                        help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--out", default=".", metavar="DIR", help="output directory")
    common.add_argument("--precision", choices=tuple(PRECISIONS), default="double")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="convshare", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="run the equivalence suites")
    p.add_argument("--inject-fault", action="store_true",
                   help="scale one kernel by 1+1e-6 to check that the suites notice")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("plan", parents=[common], help="optical inference plan and latency")
    p.set_defaults(func=cmd_plan)

    toy = argparse.ArgumentParser(add_help=False)
    toy.add_argument("--toy", choices=TOY_KINDS, default="quadrant-blob")
    toy.add_argument("--image-size", type=int, default=16)
    toy.add_argument("--noise", type=float, default=0.1)

    p = sub.add_parser("train", parents=[common, toy], help="train on a toy dataset")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--train-count", type=int, default=512)
    p.add_argument("--val-count", type=int, default=256)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=int, default=5)
    p.set_defaults(func=cmd_train)

    image = argparse.ArgumentParser(add_help=False)
    image.add_argument("--image", metavar="NPY", help="[C, S, S] image as .npy")
    image.add_argument("--toy-index", type=int, default=0,
                       help="without --image: use this toy validation image")

    p = sub.add_parser("attnmap", parents=[common, toy, image], help="attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_attnmap)

    p = sub.add_parser("simulate", parents=[common, toy, image],
                       help="run a model through the simulated 4f device")
    p.add_argument("--checkpoint", help="trained model (default: random weights)")
    p.add_argument("--images", type=int, default=100, help="random inputs when no --image")
    p.add_argument("--engine", choices=ENGINES, default="spectral")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(_run_config(args), args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (ConfigurationError, DimensionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
