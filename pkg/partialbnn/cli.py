"""Command line entry point: train, eval, sweep and gradcheck."""

from __future__ import annotations

import json
import logging
import sys
from argparse import ArgumentParser, Namespace
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

from .checkpoint import bind_checkpoint, read_checkpoint, save_checkpoint
from .const import DEFAULT_SEED, RHO_INIT, STREAM_SAMPLE
from .data import Dataset, Split, make_synthetic, parse_fer2013
from .evaluate import EvalMode, evaluate, sigma_profile
from .exceptions import InvalidConfig, InvalidPlacement, PartialBnnError
from .gradcheck import DEFAULT_TOLERANCE, GradcheckScope, gradcheck, mini_model
from .model import ArchSpec, PlacementConfig
from .report import ReportFormat, export_report
from .sweep import placement_sweep
from .trainer import KL_AUTO, Trainer, TrainConfig, initial_model

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

_LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

PRESETS = {"desk": ArchSpec.desk, "resnet18": ArchSpec.resnet18}
ALL_GROUPS = "1,2,3,4,5"
CHECKPOINT_NAME = "model.pbnn"


@dataclass(frozen=True)
class CliConfig:
    """Merged view of defaults, config file and command line flags."""

    seed: int = DEFAULT_SEED
    out: str = "out"
    report_format: ReportFormat = ReportFormat.JSONL
    timing: bool = False
    synthetic: bool = False
    data: str | None = None
    per_class: int = 140
    noise: float = 0.05
    subsample: int | None = None
    standardize: bool = False
    preset: str = "desk"
    groups: str = "5"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    mc_samples: int = 1
    kl_weight: float | str = KL_AUTO
    momentum: float = 0.0
    eval_every: int = 1
    prior_sigma: float = 1.0
    rho_init: float = RHO_INIT
    augment: bool = False
    prefetch: bool = False
    jobs: int = 1
    checkpoint: str | None = None
    split: str = f"{Split.PUBLIC_TEST},{Split.PRIVATE_TEST}"
    mode: EvalMode = EvalMode.MEAN
    samples: int = 32
    tolerance: float = DEFAULT_TOLERANCE
    layer: GradcheckScope = GradcheckScope.ALL

    def __post_init__(self) -> None:
        """Normalize enum-valued fields."""
        for name, enum in (
            ("report_format", ReportFormat),
            ("mode", EvalMode),
            ("layer", GradcheckScope),
        ):
            try:
                object.__setattr__(self, name, enum(getattr(self, name)))
            except ValueError as e:
                value = getattr(self, name)
                raise InvalidConfig(name, f"unknown value {value!r}") from e
        if self.preset not in PRESETS:
            raise InvalidConfig("preset", f"must be one of {', '.join(PRESETS)}")
        if self.samples < 1:
            raise InvalidConfig("samples", "must be at least 1")
        if self.jobs < 1:
            raise InvalidConfig("jobs", "must be at least 1")

    @property
    def arch(self) -> ArchSpec:
        """Architecture preset."""
        return PRESETS[self.preset]()

    @property
    def placement(self) -> PlacementConfig:
        """Groups as one placement."""
        return PlacementConfig.parse(self.groups)

    def sweep_placements(self) -> list[PlacementConfig]:
        """Groups as a list of single-group placements."""
        return [PlacementConfig.parse(token) for token in self.groups.split(",")]

    def splits(self) -> list[Split]:
        """Evaluation splits."""
        try:
            return [Split(token.strip()) for token in self.split.split(",")]
        except ValueError as e:
            raise InvalidConfig("split", str(e)) from e

    def train_config(self) -> TrainConfig:
        """Training hyper-parameters."""
        return TrainConfig(
            learning_rate=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            mc_samples=self.mc_samples,
            kl_weight=self.kl_weight,
            seed=self.seed,
            eval_every=self.eval_every,
            momentum=self.momentum,
            prior_sigma=self.prior_sigma,
            rho_init=self.rho_init,
            augment=self.augment,
            prefetch=self.prefetch,
        )

    @property
    def checkpoint_path(self) -> Path:
        """Checkpoint location."""
        if self.checkpoint:
            return Path(self.checkpoint)
        return Path(self.out) / CHECKPOINT_NAME

    def report_path(self, name: str) -> Path:
        """Report location for name."""
        return Path(self.out) / f"{name}.{self.report_format}"

    def to_dict(self, keys: Sequence[str]) -> dict[str, Any]:
        """Plain values of the given keys."""
        values = asdict(self)
        return {key: _plain(values[key]) for key in keys}


def _plain(value: Any) -> Any:  # noqa: ANN401
    if isinstance(value, ReportFormat | EvalMode | GradcheckScope):
        return str(value)
    return value


DATA_KEYS = (
    "synthetic",
    "data",
    "per_class",
    "noise",
    "subsample",
    "standardize",
)
COMMON_KEYS = ("seed", "out", "report_format", "timing")
TRAIN_KEYS = (
    "preset",
    "groups",
    "epochs",
    "batch_size",
    "lr",
    "mc_samples",
    "kl_weight",
    "momentum",
    "eval_every",
    "prior_sigma",
    "rho_init",
    "augment",
    "prefetch",
)
COMMAND_KEYS: dict[str, tuple[str, ...]] = {
    "train": (*COMMON_KEYS, *DATA_KEYS, *TRAIN_KEYS, "checkpoint"),
    "eval": (*COMMON_KEYS, *DATA_KEYS, "checkpoint", "split", "mode", "samples"),
    "sweep": (*COMMON_KEYS, *DATA_KEYS, *TRAIN_KEYS, "jobs"),
    "gradcheck": ("seed", "groups", "tolerance", "layer"),
}
CONFIG_KEYS = frozenset(f.name for f in fields(CliConfig)) | {"format"}


def _kl_weight(text: str) -> float | str:
    return text if text == KL_AUTO else float(text)


def _add_common(parser: ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        "-cf",
        type=str,
        help="Load options from a flat JSON config file. \
        Command line options override those in the file.",
    )
    parser.add_argument("--seed", type=int, help="Seed of every random stream.")
    parser.add_argument("--out", type=str, help="Output directory.")
    parser.add_argument(
        "--format",
        dest="report_format",
        choices=list(ReportFormat),
        help="Report format.",
    )
    parser.add_argument(
        "--timing",
        action="store_true",
        default=None,
        help="Include wall time in reports.",
    )


def _add_data(parser: ArgumentParser) -> None:
    parser.add_argument(
        "--synthetic",
        action="store_true",
        default=None,
        help="Use the synthetic 7-class dataset.",
    )
    parser.add_argument("--data", type=str, help="FER2013 CSV file.")
    parser.add_argument("--per-class", type=int, help="Synthetic images per class.")
    parser.add_argument("--noise", type=float, help="Synthetic pixel noise.")
    parser.add_argument("--subsample", type=int, help="Random subset size.")
    parser.add_argument(
        "--standardize",
        action="store_true",
        default=None,
        help="Standardize with training split statistics.",
    )


def _add_training(parser: ArgumentParser, groups_help: str) -> None:
    parser.add_argument("--preset", choices=list(PRESETS), help="Architecture.")
    parser.add_argument("--groups", type=str, help=groups_help)
    parser.add_argument("--epochs", type=int, help="Training epochs.")
    parser.add_argument("--batch-size", type=int, help="Minibatch size.")
    parser.add_argument("--lr", type=float, help="Learning rate.")
    parser.add_argument("--mc-samples", type=int, help="Weight samples per step.")
    parser.add_argument(
        "--kl-weight",
        type=_kl_weight,
        help=f"KL weight or {KL_AUTO!r} for 1/num_batches.",
    )
    parser.add_argument("--momentum", type=float, help="SGD momentum.")
    parser.add_argument("--eval-every", type=int, help="Epochs between evaluations.")
    parser.add_argument("--prior-sigma", type=float, help="Prior standard deviation.")
    parser.add_argument("--rho-init", type=float, help="Initial rho.")
    parser.add_argument(
        "--augment",
        action="store_true",
        default=None,
        help="Random horizontal flips.",
    )
    parser.add_argument(
        "--prefetch",
        action="store_true",
        default=None,
        help="Prepare batches on a background thread.",
    )


def build_parser() -> ArgumentParser:
    """Argument parser with one sub-parser per command."""
    parser = ArgumentParser(
        prog="partial-bnn",
        description="Partially Bayesian residual networks",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging.")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Train one placement.")
    _add_common(train)
    _add_data(train)
    _add_training(train, "Bayesian groups, e.g. 5, 1,5 or none.")
    train.add_argument("--checkpoint", type=str, help="Checkpoint output path.")

    evaluation = commands.add_parser("eval", help="Evaluate a checkpoint.")
    _add_common(evaluation)
    _add_data(evaluation)
    evaluation.add_argument("--checkpoint", type=str, help="Checkpoint to load.")
    evaluation.add_argument("--split", type=str, help="Comma separated splits.")
    evaluation.add_argument("--mode", choices=list(EvalMode), help="Weights used.")
    evaluation.add_argument("--samples", type=int, help="Monte-Carlo samples.")

    sweep = commands.add_parser("sweep", help="Train one model per placement.")
    _add_common(sweep)
    _add_data(sweep)
    _add_training(sweep, f"Groups to sweep, one placement each ({ALL_GROUPS}).")
    sweep.add_argument("--jobs", type=int, help="Parallel training processes.")

    check = commands.add_parser("gradcheck", help="Finite-difference gradient check.")
    check.add_argument("--config", "-cf", type=str, help="JSON config file.")
    check.add_argument("--seed", type=int, help="Seed.")
    check.add_argument("--groups", type=str, help="Bayesian groups of the mini model.")
    check.add_argument("--tolerance", type=float, help="Maximum relative error.")
    check.add_argument("--layer", choices=list(GradcheckScope), help="Groups checked.")
    return parser


JSON_TYPES: dict[str, tuple[type, ...]] = {
    "int": (int,),
    "float": (int, float),
    "bool": (bool,),
    "str": (str,),
    "None": (type(None),),
}


def _check_types(values: dict[str, Any]) -> None:
    """Reject config file values whose JSON type does not fit the field."""
    for f in fields(CliConfig):
        if f.name not in values:
            continue
        parts = [part.strip() for part in str(f.type).split("|")]
        if not all(part in JSON_TYPES for part in parts):
            continue
        allowed = tuple(t for part in parts for t in JSON_TYPES[part])
        value = values[f.name]
        if isinstance(value, bool) and bool not in allowed:
            allowed = ()
        if not isinstance(value, allowed):
            raise InvalidConfig(
                f.name,
                f"expected {f.type}, got {type(value).__name__}",
            )


def resolve_config(args: Namespace) -> CliConfig:
    """Defaults, then the config file, then flags."""
    values: dict[str, Any] = {}
    if args.command in ("sweep", "gradcheck"):
        values["groups"] = ALL_GROUPS
    if args.config:
        try:
            with Path(args.config).open(encoding="utf-8") as f:
                loaded = json.load(f)
        except OSError as e:
            raise InvalidConfig("config", f"cannot read {args.config}: {e}") from e
        except json.JSONDecodeError as e:
            raise InvalidConfig("config", f"not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise InvalidConfig("config", "must be a JSON object")
        unknown = sorted(set(loaded) - CONFIG_KEYS)
        if unknown:
            raise InvalidConfig("config", f"unknown keys {', '.join(unknown)}")
        if "format" in loaded:
            loaded["report_format"] = loaded.pop("format")
        if isinstance(loaded.get("groups"), list):
            loaded["groups"] = ",".join(str(g) for g in loaded["groups"])
        _check_types(loaded)
        values.update(loaded)
    for key in COMMAND_KEYS[args.command]:
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    try:
        return CliConfig(**values)
    except TypeError as e:
        raise InvalidConfig("config", str(e)) from e


def load_dataset(config: CliConfig) -> Dataset:
    """Synthetic or FER2013 data as configured."""
    if config.synthetic == bool(config.data):
        raise InvalidConfig("data", "give exactly one of --data PATH or --synthetic")
    if config.data:
        dataset = parse_fer2013(config.data)
    else:
        dataset = make_synthetic(config.per_class, config.noise, config.seed)
    if config.subsample is not None:
        dataset = dataset.subsample(config.subsample, config.seed)
    if config.standardize:
        dataset = dataset.standardized()
    _LOGGER.info(
        "[data] %s images of %s, %s",
        len(dataset),
        "x".join(str(d) for d in dataset.image_shape),
        dataset.counts(),
    )
    return dataset


def _print_config(command: str, config: CliConfig) -> dict[str, Any]:
    resolved = config.to_dict(COMMAND_KEYS[command])
    print(json.dumps({"command": command, **resolved}, indent=2, sort_keys=True))
    return resolved


def _write_config(config: CliConfig, resolved: dict[str, Any]) -> None:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def cmd_train(config: CliConfig) -> int:
    """Train, save the checkpoint and write the report."""
    resolved = _print_config("train", config)
    train_config = config.train_config()
    placement = config.placement
    dataset = load_dataset(config)
    _write_config(config, resolved)
    model = initial_model(config.arch, placement, train_config)
    trainer = Trainer(model, train_config)
    records = trainer.train(dataset)
    rows: list[Any] = list(records)
    for split in (Split.PUBLIC_TEST, Split.PRIVATE_TEST):
        if dataset.count(split):
            result = evaluate(model, dataset, split, EvalMode.MEAN)
            print(f"{split} {result.mode_label}: accuracy {result.accuracy:.4f}")
            rows.append(result)
    save_checkpoint(
        model,
        config.checkpoint_path,
        seed=config.seed,
        step=trainer.step_index,
        prior=trainer.prior,
    )
    export_report(
        rows,
        config.report_path("train"),
        config.report_format,
        config=resolved,
        include_timing=config.timing,
    )
    if model.variational_layers():
        export_report(
            sigma_profile(model).layers,
            config.report_path("sigma"),
            config.report_format,
            config=resolved,
        )
    return EXIT_OK


def cmd_eval(config: CliConfig) -> int:
    """Evaluate a checkpoint on the requested splits."""
    resolved = _print_config("eval", config)
    splits = config.splits()
    data = read_checkpoint(config.checkpoint_path)
    model = bind_checkpoint(data)
    dataset = load_dataset(config)
    _write_config(config, resolved)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, STREAM_SAMPLE]))
    results = []
    for split in splits:
        result = evaluate(
            model,
            dataset,
            split,
            config.mode,
            rng=rng,
            n_samples=config.samples,
        )
        print(
            f"{split} {result.mode_label}: accuracy {result.accuracy:.4f} "
            f"({result.n_correct}/{result.n_total})",
        )
        results.append(result)
    export_report(
        results,
        config.report_path("eval"),
        config.report_format,
        config=resolved,
        include_timing=config.timing,
    )
    return EXIT_OK


def cmd_sweep(config: CliConfig) -> int:
    """Train every placement and write the sweep report."""
    resolved = _print_config("sweep", config)
    placements = config.sweep_placements()
    train_config = config.train_config()
    dataset = load_dataset(config)
    _write_config(config, resolved)
    report = placement_sweep(
        config.arch,
        placements,
        dataset,
        train_config,
        jobs=config.jobs,
    )
    for label, accuracy in report.ranking():
        print(f"groups {label}: verification accuracy {accuracy:.4f}")
    export_report(
        report.rows(include_timing=config.timing),
        config.report_path("sweep"),
        config.report_format,
        config=resolved,
    )
    return EXIT_OK


def cmd_gradcheck(config: CliConfig) -> int:
    """Gradient check a mini model; exit 1 when any group exceeds the tolerance."""
    _print_config("gradcheck", config)
    model = mini_model(config.placement, seed=config.seed)
    report = gradcheck(
        model,
        tolerance=config.tolerance,
        scope=config.layer,
        seed=config.seed,
    )
    for group in report.groups:
        status = "ok" if group.passed else "FAIL"
        print(f"{group.name}: max error {group.max_error:.3e} {status}")
    if report.passed:
        return EXIT_OK
    worst = report.worst
    if worst is not None:
        print(
            f"worst offender {worst.name}: "
            f"{worst.max_error:.3e} > {config.tolerance}",
        )
    return EXIT_FAILURE


COMMANDS: dict[str, Callable[[CliConfig], int]] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Run main."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](config)
    except (InvalidConfig, InvalidPlacement) as e:
        print(f"{parser.prog} {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PartialBnnError, OSError) as e:
        _LOGGER.exception("[%s] Failed: %s", args.command, e)  # noqa: TRY401
        return EXIT_FAILURE
