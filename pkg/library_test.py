"""Full pipeline check for partial-bnn on a FER2013 subsample."""

import json
import logging
import sys
from argparse import ArgumentParser, Namespace
from pathlib import Path

from partialbnn.data import Split, parse_fer2013
from partialbnn.evaluate import EvalMode, evaluate
from partialbnn.exceptions import PartialBnnError
from partialbnn.model import ArchSpec, PlacementConfig
from partialbnn.report import RecordKind
from partialbnn.trainer import Trainer, TrainConfig, initial_model

PRESETS = {"desk": ArchSpec.desk, "resnet18": ArchSpec.resnet18}


def get_arguments() -> tuple[ArgumentParser, Namespace]:
    """Get parsed passed in arguments."""
    parser = ArgumentParser(description="partial-bnn pipeline test")
    parser.add_argument("--data", "-d", type=str, help="FER2013 CSV file")
    parser.add_argument(
        "--subsample",
        "-s",
        type=int,
        default=2000,
        help="Number of images drawn from the file",
    )
    parser.add_argument("--epochs", "-e", type=int, default=2, help="Training epochs")
    parser.add_argument(
        "--preset",
        "-p",
        type=str,
        default="desk",
        help="Architecture, options are: " + ", ".join(PRESETS.keys()),
    )
    parser.add_argument("--groups", "-g", type=str, default="5", help="Bayesian groups")
    parser.add_argument("--seed", type=int, default=1234, help="Seed")
    parser.add_argument(
        "--configfile",
        "-cf",
        type=str,
        help="Load options from JSON config file. \
        Command line options override those in the file.",
    )

    arguments = parser.parse_args()
    # Re-parse the command line
    # taking the options in the optional JSON file as a basis
    if arguments.configfile and Path(arguments.configfile).exists():
        with Path(arguments.configfile).open(encoding="utf-8") as f:
            arguments = parser.parse_args(namespace=Namespace(**json.load(f)))

    return parser, arguments


def main() -> None:
    """Run main."""
    parser, args = get_arguments()

    if not args.data or args.preset not in PRESETS:
        print("You have to specify the FER2013 CSV file and a known preset")
        parser.print_help()
        sys.exit(1)

    print("-" * 20)
    print("Parsing FER2013...")
    dataset = parse_fer2013(args.data).subsample(args.subsample, args.seed)
    print("Split sizes: ", dataset.counts())

    config = TrainConfig(epochs=args.epochs, seed=args.seed)
    placement = PlacementConfig.parse(args.groups)
    model = initial_model(PRESETS[args.preset](), placement, config)
    print("-" * 20)
    print("Parameters: ", model.parameter_count())
    print("Variational convs: ", len(model.variational_layers()))

    records = Trainer(model, config).train(dataset)
    curve = [r.l_cen for r in records if r.kind is RecordKind.EPOCH]
    print("-" * 20)
    for epoch, l_cen in enumerate(curve, start=1):
        print(f"Epoch {epoch}: L_cen {l_cen:.4f}")

    for split in (Split.PUBLIC_TEST, Split.PRIVATE_TEST):
        if dataset.count(split):
            result = evaluate(model, dataset, split, EvalMode.MEAN)
            print(f"{split} accuracy: {result.accuracy:.4f}")

    decreasing = all(
        b is not None and a is not None and b < a for a, b in zip(curve, curve[1:])
    )
    print("-" * 20)
    print("L_cen decreasing: ", decreasing)
    if not decreasing:
        sys.exit(1)


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    try:
        main()
    except PartialBnnError as e:
        print("Pipeline failed: ", e)
        sys.exit(1)
