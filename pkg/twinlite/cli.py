"""
The ``twinlite`` command.

.. code-block:: text

    twinlite gen-data --out synthetic --count 20 --seed 7 --size 64x64
    twinlite train --data synthetic --out model.twlt --epochs 300 --batch 8 --seed 7
    twinlite eval --data synthetic --ckpt model.twlt --split val
    twinlite infer --image road.png --ckpt model.twlt --out overlay.png --raw
    twinlite fuse --ckpt model.twlt --out fused.twlt
    twinlite bench --ckpt fused.twlt --iters 20 --warmup 3
    twinlite ablate --data synthetic --epochs 5

Every option may also come from a flat JSON file given with ``--config``; its
keys are option names with dashes replaced by underscores. Options on the
command line win over the file. Failures print one line starting with
``twinlite: error: <ErrorClass>:`` to stderr and exit with status 1.
"""
import argparse
import json
import logging
import os
import sys
import time
import typing

import imageio.v2 as imageio
import numpy as np

from twinlite import data, trainer
from twinlite.checkpoint import load_checkpoint, save_checkpoint
from twinlite.errors import ConfigError, DatasetError, TwinLiteError
from twinlite.grad import no_grad
from twinlite.model import SINGLE_HEAD, TWO_HEADS, ModelConfig, TwinLiteNet
from twinlite.reparam import ensure_unfused, fuse_model
from twinlite.tensor import Tensor

logger = logging.getLogger(__name__)

PROG = "twinlite"

# Overlay tints as (RGB, alpha).
DRIVABLE_TINT = (np.array([0.0, 1.0, 0.0]), 0.4)
LANE_TINT = (np.array([1.0, 0.0, 0.0]), 0.7)

DEFAULTS: typing.Dict[str, typing.Dict[str, typing.Any]] = {
    "gen-data": {"out": None, "count": 20, "seed": 0, "size": "64x64"},
    "train": {
        "data": None,
        "out": None,
        "history": None,
        "epochs": 100,
        "batch": 32,
        "lr": 5e-4,
        "seed": 0,
        "no_attention": False,
        "single_head": False,
        "size": None,
        "lane_dilation": 8,
        "scale_dilation": False,
        "checkpoint_every": 0,
    },
    "eval": {"data": None, "ckpt": None, "split": data.VAL, "batch": 8, "oracle": False},
    "infer": {"image": None, "ckpt": None, "out": None, "raw": False},
    "fuse": {"ckpt": None, "out": None, "seed": 0},
    "bench": {"ckpt": None, "size": None, "iters": 10, "warmup": 2},
    "ablate": {"data": None, "epochs": 5, "batch": 8, "seed": 0, "size": None},
}

# Option types, shared by the argument parser and config-file coercion.
INTEGER_OPTIONS = frozenset(
    ("count", "seed", "epochs", "batch", "lane_dilation", "checkpoint_every", "iters", "warmup")
)
FLOAT_OPTIONS = frozenset(("lr",))
FLAG_OPTIONS = frozenset(("no_attention", "single_head", "scale_dilation", "oracle", "raw"))

REQUIRED = {
    "gen-data": ("out",),
    "train": ("data", "out"),
    "eval": ("data", "ckpt"),
    "infer": ("image", "ckpt", "out"),
    "fuse": ("ckpt", "out"),
    "bench": ("ckpt",),
    "ablate": ("data",),
}


class RunConfig:
    """A parsed command with its merged options, readable as attributes."""

    def __init__(self, command: str, options: typing.Mapping[str, typing.Any]):
        self.command = command
        self.options = dict(options)

    def __getattr__(self, name: str) -> typing.Any:
        try:
            return self.__dict__["options"][name]
        except KeyError:
            raise AttributeError(name) from None


def build_parser() -> argparse.ArgumentParser:
    """The argument parser. Option defaults are None so that omitted flags can be told apart."""
    parser = argparse.ArgumentParser(prog=PROG, description=__doc__.split("\n\n")[0].strip())
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", help="flat JSON file with default option values")
        return sub

    gen = command("gen-data", "render a synthetic road-scene dataset")
    gen.add_argument("--out")
    gen.add_argument("--count", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--size", help="WxH, both divisible by 8")

    train = command("train", "train a model")
    train.add_argument("--data")
    train.add_argument("--out", help="checkpoint path")
    train.add_argument("--history", help="history CSV path (default: <out>.csv)")
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--seed", type=int)
    train.add_argument("--no-attention", action="store_true", default=None)
    train.add_argument("--single-head", action="store_true", default=None)
    train.add_argument("--size", help="WxH input size (default: the dataset's)")
    train.add_argument("--lane-dilation", type=int)
    train.add_argument(
        "--scale-dilation",
        action="store_true",
        default=None,
        help="read --lane-dilation as a 640-pixel-wide extent and scale it to the input width",
    )
    train.add_argument("--checkpoint-every", type=int)

    evaluate = command("eval", "score a checkpoint")
    evaluate.add_argument("--data")
    evaluate.add_argument("--ckpt")
    evaluate.add_argument("--split", choices=data.SPLITS)
    evaluate.add_argument("--batch", type=int)
    evaluate.add_argument("--oracle", action="store_true", default=None)

    infer = command("infer", "segment one image and write an overlay")
    infer.add_argument("--image")
    infer.add_argument("--ckpt")
    infer.add_argument("--out")
    infer.add_argument("--raw", action="store_true", default=None)

    fuse = command("fuse", "fold batch norms into convolutions")
    fuse.add_argument("--ckpt")
    fuse.add_argument("--out")
    fuse.add_argument("--seed", type=int, help="seed of the random comparison input")

    bench = command("bench", "time single-image inference")
    bench.add_argument("--ckpt")
    bench.add_argument("--size", help="WxH (default: the model input size)")
    bench.add_argument("--iters", type=int)
    bench.add_argument("--warmup", type=int)

    ablate = command("ablate", "train and compare the four ablation configurations")
    ablate.add_argument("--data")
    ablate.add_argument("--epochs", type=int)
    ablate.add_argument("--batch", type=int)
    ablate.add_argument("--seed", type=int)
    ablate.add_argument("--size")
    return parser


def _read_config_file(path: str, command: str) -> typing.Dict[str, typing.Any]:
    try:
        with open(path) as handle:
            values = json.load(handle)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(values) - set(DEFAULTS[command]))
    if unknown:
        raise ConfigError(f"unknown keys for {command} in {path}: {unknown}")
    return {
        key: coerce_option(key, value, path) for key, value in values.items() if value is not None
    }


def coerce_option(key: str, value: typing.Any, source: str) -> typing.Any:
    """
    Convert a config-file value with the type the matching command-line option
    uses. Null keeps the default.

    Raises:
        ConfigError: Naming `key` when the value has the wrong type.
    """
    if value is None:
        return None
    if key in FLAG_OPTIONS:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} in {source} must be true or false, got {value!r}")
        return value
    if key in INTEGER_OPTIONS or key in FLOAT_OPTIONS:
        kind = int if key in INTEGER_OPTIONS else float
        if isinstance(value, (bool, list, dict)):
            raise ConfigError(f"{key} in {source} must be {kind.__name__}, got {value!r}")
        try:
            return kind(str(value))
        except ValueError:
            raise ConfigError(f"{key} in {source} must be {kind.__name__}, got {value!r}") from None
    if not isinstance(value, str):
        raise ConfigError(f"{key} in {source} must be a string, got {value!r}")
    return value


def resolve(args: argparse.Namespace) -> RunConfig:
    """
    Merge defaults, the config file and explicit flags, in rising priority.

    Raises:
        ConfigError: On unknown file keys or a missing required option.
    """
    options = dict(DEFAULTS[args.command])
    if args.config:
        options.update(_read_config_file(args.config, args.command))
    for key in DEFAULTS[args.command]:
        value = getattr(args, key, None)
        if value is not None:
            options[key] = value
    missing = [key for key in REQUIRED[args.command] if options.get(key) is None]
    if missing:
        raise ConfigError(
            f"{args.command} needs --{missing[0].replace('_', '-')}"
        )
    for key in ("epochs", "batch", "count", "iters"):
        if key in options and options[key] is not None and int(options[key]) < 1:
            raise ConfigError(f"--{key} must be >= 1, got {options[key]}")
    if options.get("warmup") is not None and int(options["warmup"]) < 0:
        raise ConfigError(f"--warmup must be >= 0, got {options['warmup']}")
    if options.get("size"):
        data.parse_size(options["size"])
    return RunConfig(command=args.command, options=options)


def _dataset_size(index: data.DatasetIndex) -> typing.Tuple[int, int]:
    if not len(index):
        raise DatasetError(f"no samples in {index.root}/{index.split}")
    return data.read_sample(index, 0).size


def _model_preprocess(
    config: ModelConfig, lane_dilation: int = 8, scale_dilation: bool = False
) -> data.PreprocessConfig:
    return data.PreprocessConfig(
        width=config.input_width,
        height=config.input_height,
        lane_dilation=lane_dilation,
        scale_dilation=scale_dilation,
    ).validate()


def cmd_gen_data(run: RunConfig) -> int:
    """Render a synthetic dataset and split it 90/10."""
    size = data.parse_size(run.size)
    samples = data.synth_generate(run.count, run.seed, size)
    train_count, _ = data.split_counts(run.count)
    data.write_dataset(samples[:train_count], run.out, data.TRAIN)
    data.write_dataset(samples[train_count:], run.out, data.VAL)
    print(f"wrote {train_count} train and {run.count - train_count} val samples to {run.out}")
    return 0


def _train_model(
    model_config: ModelConfig,
    samples: typing.Sequence[data.Sample],
    train_config: trainer.TrainConfig,
    checkpoint_path: typing.Optional[str] = None,
) -> typing.Tuple[TwinLiteNet, trainer.TrainResult]:
    model = TwinLiteNet(model_config, seed=train_config.seed)
    result = trainer.train(model, samples, train_config, checkpoint_path=checkpoint_path)
    return model, result


def cmd_train(run: RunConfig) -> int:
    """Train on the train split, writing a checkpoint and a history CSV."""
    train_config = trainer.TrainConfig(
        epochs=run.epochs,
        batch_size=run.batch,
        lr=run.lr,
        seed=run.seed,
        checkpoint_every=run.checkpoint_every,
    ).validate()
    index = data.load_dataset(run.data, data.TRAIN)
    width, height = data.parse_size(run.size) if run.size else _dataset_size(index)
    model_config = ModelConfig(
        use_attention=not run.no_attention,
        head_mode=SINGLE_HEAD if run.single_head else TWO_HEADS,
        input_width=width,
        input_height=height,
    ).validate()
    preprocess = _model_preprocess(model_config, run.lane_dilation, run.scale_dilation)
    samples = data.read_samples(index, preprocess)
    model = TwinLiteNet(model_config, seed=run.seed)
    print(f"parameters: {model.param_count()}")
    result = trainer.train(model, samples, train_config, checkpoint_path=run.out)
    for record in result.history.records:
        print(f"epoch {record.epoch} lr {record.lr:.6g} loss {record.loss_total:.6f}")
    history_path = run.history or os.path.splitext(run.out)[0] + ".csv"
    result.history.write_csv(history_path)
    print(f"wrote {run.out} and {history_path}")
    return 0


def cmd_eval(run: RunConfig) -> int:
    """Print drivable mIoU and lane IoU on thin labels."""
    model, _ = load_checkpoint(run.ckpt)
    index = data.load_dataset(run.data, run.split)
    samples = data.read_samples(index, _model_preprocess(model.config), split=data.VAL)
    result = trainer.evaluate(model, samples, batch_size=run.batch, oracle=run.oracle)
    print(f"heads: {', '.join(model.config.head_names)}")
    print(result.report())
    return 0


def overlay(image: np.ndarray, da_mask: np.ndarray, lane_mask: np.ndarray) -> np.ndarray:
    """
    Tint drivable pixels green at 40% and lane pixels red at 70% over an
    ``H, W, 3`` image in [0, 1]. Untinted pixels are unchanged.
    """
    result = image.astype(np.float64).copy()
    for mask, (color, alpha) in ((da_mask, DRIVABLE_TINT), (lane_mask, LANE_TINT)):
        selected = mask.astype(bool)
        result[selected] = (1 - alpha) * result[selected] + alpha * color
    return result


def cmd_infer(run: RunConfig) -> int:
    """Write an overlay (and with ``--raw`` the two masks) for one image."""
    model, _ = load_checkpoint(run.ckpt)
    width, height = model.config.input_width, model.config.input_height
    try:
        pixels = data.read_image(run.image, os.path.basename(run.image))
    except DatasetError as exc:
        raise DatasetError(f"unreadable input image: {exc}") from exc
    blank = np.zeros(pixels.shape[1:], dtype=np.uint8)
    sample = data.resize_pair(data.Sample("input", pixels, blank, blank), width, height)
    da_mask, lane_mask = trainer.predict_masks(model, Tensor(sample.image[None]))
    picture = overlay(sample.image.transpose(1, 2, 0), da_mask[0], lane_mask[0])
    imageio.imwrite(run.out, np.round(picture * 255).astype(np.uint8))
    print(f"wrote {run.out} ({width}x{height})")
    if run.raw:
        stem = os.path.splitext(run.out)[0]
        for suffix, mask in (("_da.png", da_mask[0]), ("_lane.png", lane_mask[0])):
            imageio.imwrite(stem + suffix, (mask * 255).astype(np.uint8))
            print(f"wrote {stem + suffix}")
    return 0


def output_deviation(reference: TwinLiteNet, candidate: TwinLiteNet, seed: int) -> float:
    """Largest absolute logit difference between two models on a seeded random image."""
    config = reference.config
    image = np.random.default_rng(seed).random(
        (1, config.in_channels, config.input_height, config.input_width)
    ).astype(np.float32)
    with no_grad():
        first = reference(Tensor(image))
        second = candidate(Tensor(image))
    return max(
        float(np.abs(a.data.astype(np.float64) - b.data).max()) for a, b in zip(first, second)
    )


def cmd_fuse(run: RunConfig) -> int:
    """Fold batch norms into convolutions and report the output deviation."""
    model, _ = load_checkpoint(run.ckpt)
    ensure_unfused(model)
    fused = fuse_model(model.eval())
    deviation = output_deviation(model, fused, run.seed)
    save_checkpoint(fused, run.out)
    print(f"parameters: {model.param_count()} -> {fused.param_count()}")
    print(f"max abs deviation on a random input: {deviation:.3e}")
    return 0


class BenchReport(typing.NamedTuple):
    """Single-image latency statistics."""

    median_ms: float
    p90_ms: float
    fps: float
    parameters: int

    def render(self) -> str:
        return "\n".join(
            [
                f"median latency: {self.median_ms:.3f} ms",
                f"p90 latency:    {self.p90_ms:.3f} ms",
                f"FPS:            {self.fps:.2f}",
                f"parameters:     {self.parameters}",
            ]
        )


def benchmark(
    model: TwinLiteNet,
    width: int,
    height: int,
    *,
    iters: int = 10,
    warmup: int = 2,
    seed: int = 0,
) -> BenchReport:
    """Time `iters` single-image forwards after `warmup` untimed ones."""
    rng = np.random.default_rng(seed)
    image = Tensor(rng.random((1, model.config.in_channels, height, width)).astype(np.float32))
    model.eval()
    timings = []
    with no_grad():
        for step in range(warmup + iters):
            start = time.perf_counter()
            model(image)
            elapsed = (time.perf_counter() - start) * 1000.0
            if step >= warmup:
                timings.append(elapsed)
    median = float(np.median(timings))
    return BenchReport(
        median_ms=median,
        p90_ms=float(np.percentile(timings, 90)),
        fps=1000.0 / median,
        parameters=model.param_count(),
    )


def cmd_bench(run: RunConfig) -> int:
    """Print latency percentiles, FPS and the parameter count."""
    model, _ = load_checkpoint(run.ckpt)
    if run.size:
        width, height = data.parse_size(run.size)
    else:
        width, height = model.config.input_width, model.config.input_height
    report = benchmark(model, width, height, iters=run.iters, warmup=run.warmup)
    print(report.render())
    return 0


def ablation_configs(width: int, height: int) -> typing.List[typing.Tuple[str, ModelConfig]]:
    """Baseline, +attention and +two heads; fusion is applied to the last one after training."""
    base = ModelConfig(input_width=width, input_height=height)
    return [
        ("baseline", base._replace(use_attention=False, head_mode=SINGLE_HEAD)),
        ("+attention", base._replace(head_mode=SINGLE_HEAD)),
        ("+two heads", base),
    ]


def cmd_ablate(run: RunConfig) -> int:
    """
    Train each ablation configuration briefly, then tabulate its parameter
    count, final loss, scores on thin labels, latency and output shapes.

    Scores use the validation split, or the training split when the dataset
    has no validation samples.
    """
    train_config = trainer.TrainConfig(
        epochs=run.epochs, batch_size=run.batch, seed=run.seed
    ).validate()
    index = data.load_dataset(run.data, data.TRAIN)
    width, height = data.parse_size(run.size) if run.size else _dataset_size(index)
    configs = ablation_configs(width, height)
    preprocess = _model_preprocess(configs[0][1])
    samples = data.read_samples(index, preprocess)
    val_index = data.load_dataset(run.data, data.VAL)
    scored = data.read_samples(val_index if len(val_index) else index, preprocess, split=data.VAL)

    rows = []
    for label, model_config in configs:
        model, result = _train_model(model_config, samples, train_config)
        rows.append((label, model, result.history.losses[-1]))
    label, full, loss = rows[-1]
    rows.append(("+fusion", fuse_model(full.eval()), loss))

    first = Tensor(np.stack([sample.image for sample in scored[:1]]))
    print(
        f"{'configuration':<14}  {'parameters':>10}  {'final loss':>10}  {'DA mIoU':>8}  "
        f"{'lane IoU':>8}  {'ms':>8}  {'FPS':>7}  output shapes"
    )
    for label, model, loss in rows:
        scores = trainer.evaluate(model, scored, batch_size=run.batch)
        timing = benchmark(model, width, height, iters=3, warmup=1, seed=run.seed)
        with no_grad():
            shapes = [output.shape for output in model(first)]
        print(
            f"{label:<14}  {model.param_count():>10}  {loss:>10.4f}  {scores.da_miou:>8.2%}  "
            f"{scores.lane_iou:>8.2%}  {timing.median_ms:>8.2f}  {timing.fps:>7.1f}  {shapes}"
        )
    return 0


COMMANDS: typing.Dict[str, typing.Callable[[RunConfig], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "fuse": cmd_fuse,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
}


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    """Entry point. Returns the process exit status."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](resolve(args))
    except TwinLiteError as exc:
        print(f"{PROG}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{PROG}: error: OSError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
