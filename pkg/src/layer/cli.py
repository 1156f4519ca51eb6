"""Command-line entry point: phantom -> train -> explain / faithfulness / sanity / associate -> report."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from . import __version__
from .cohort import Scenario
from .config import RunConfig, default_seed, default_threads, load_environment, log_file, make_run_config
from .errors import ConfigError, LayerError
from .faithfulness import Method, compare_methods
from .formats import read_manifest
from .logging_config import configure_logging, configure_tracing, tracing_enabled
from .phantom import generate_cohort, make_config
from .reports import (
    AssociationDocument,
    ExplainDocument,
    FaithfulnessDocument,
    SanityDocument,
    TrainDocument,
    cross_validation_document,
    epoch_rows,
    evaluation_summary,
    provenance,
    read_document,
    render_annulus,
    render_chord_annulus,
    write_association_csv,
    write_document,
    write_faithfulness_csv,
    write_layer_csv,
    write_pair_csv,
    write_scan_csv,
    write_training_log,
)
from .saliency import run_layer_analysis, side_directional_scores
from .scorer import TrainableScorer, load_checkpoint, save_checkpoint
from .training import cross_validate, evaluate, make_train_config, train_carn
from .validation import run_association, sanity_randomization
from .volume import Layer

logger = logging.getLogger("layer")


def _dims(text: str):
    try:
        dims = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 64,64,32, got '{text}'") from None
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"dims needs three values, got '{text}'")
    return dims


def _layer(text: str) -> int:
    try:
        return int(Layer(int(text))) if text.isdigit() else int(Layer.from_name(text))
    except (ValueError, LayerError):
        raise argparse.ArgumentTypeError(f"unknown layer '{text}'") from None


def _methods(text: str) -> List[str]:
    try:
        return [Method.parse(name).value for name in text.split(",") if name.strip()]
    except LayerError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layer", description="Layer-wise occlusion explainability for 3-D volumes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Seed (default: $LAYER_SEED or 0).")
    common.add_argument("--threads", type=int, default=None, help="Worker threads, 0 = auto (default: $LAYER_THREADS).")
    common.add_argument("--out", type=Path, required=True, help="Output directory.")

    analysis = argparse.ArgumentParser(add_help=False)
    analysis.add_argument("--data", type=Path, help="Cohort directory containing manifest.json.")
    analysis.add_argument("--scenario", choices=[s.value for s in Scenario], default=None)
    analysis.add_argument("--modality", choices=["bmode", "swe", "both"], default=None)

    trained = argparse.ArgumentParser(add_help=False)
    trained.add_argument("--model", type=Path, help="Checkpoint written by 'train'.")

    phantom = commands.add_parser("phantom", parents=[common], help="Generate a synthetic layered cohort.")
    phantom.add_argument("--patients", type=int, default=40)
    phantom.add_argument("--dims", type=_dims, default=(64, 64, 32))
    phantom.add_argument("--delta", type=float, default=2.0, help="Planted effect size in noise units.")
    phantom.add_argument("--planted-layer", type=_layer, default=int(Layer.DFM))
    phantom.add_argument("--noise", type=float, default=1.0)
    phantom.add_argument("--jitter", type=float, default=0.25)
    phantom.add_argument("--side-variability", type=float, default=0.0,
                         help="Spread of per-side layer means in noise units.")

    train = commands.add_parser("train", parents=[common, analysis], help="Train a CARN scorer.")
    train.add_argument("--epochs", type=int, default=30)
    train.add_argument("--batch-size", type=int, default=16)
    train.add_argument("--lr", type=float, default=1e-4)
    train.add_argument("--curriculum", action=argparse.BooleanOptionalAction, default=True)
    train.add_argument("--air", action=argparse.BooleanOptionalAction, default=False)
    train.add_argument("--folds", type=int, default=6)
    train.add_argument("--fold", type=int, default=0, help="Validation fold.")
    train.add_argument("--cv", action="store_true", help="Train one model per cross-validation fold.")

    explain = commands.add_parser("explain", parents=[common, analysis, trained], help="Layer occlusion analysis.")
    explain.add_argument("--pairs", action=argparse.BooleanOptionalAction, default=True)
    explain.add_argument("--csv", action="store_true", help="Also write per-layer, per-pair and per-scan tables.")
    explain.add_argument("--svg", action="store_true", help="Also render the saliency annulus.")

    faithfulness = commands.add_parser("faithfulness", parents=[common, analysis, trained],
                                       help="Insertion/deletion comparison of attribution methods.")
    faithfulness.add_argument("--methods", type=_methods, default=[m.value for m in Method])
    faithfulness.add_argument("--random-draws", type=int, default=32,
                              help="Permutations averaged into the Random baseline of each scan.")
    faithfulness.add_argument("--csv", action="store_true")

    commands.add_parser("sanity", parents=[common, analysis, trained], help="Model-randomization sanity check.")

    associate = commands.add_parser("associate", parents=[common, analysis, trained],
                                    help="Association of side-level directional scores with labels.")
    associate.add_argument("--csv", action="store_true")

    report = commands.add_parser("report", parents=[common], help="Render figures and tables from explain.json.")
    report.add_argument("--input", type=Path, required=True, help="An explain.json document.")
    report.add_argument("--svg", action="store_true")
    report.add_argument("--chords", choices=["correlation", "ois"], default=None)
    report.add_argument("--csv", action="store_true")
    return parser


# subcommands


def _model_defaults(config: RunConfig, scorer: TrainableScorer) -> RunConfig:
    """Fill scenario and modality from the checkpoint when not given on the command line."""
    update = {}
    if config.options.get("scenario_from_model"):
        update["scenario"] = Scenario(scorer.metadata.get("scenario", Scenario.SIDE_MP.value))
    if config.options.get("modality_from_model"):
        update["modality"] = scorer.metadata.get("modality", "bmode")
    return config.model_copy(update=update)


def cmd_phantom(config: RunConfig) -> None:
    o = config.options
    phantom = make_config(dims=o["dims"], patients=o["patients"], planted_layer=o["planted_layer"], delta=o["delta"],
                          noise=o["noise"], jitter=o["jitter"], side_variability=o["side_variability"],
                          seed=config.seed)
    manifest = generate_cohort(phantom, config.out, config.threads)
    prov = provenance("phantom", config.seed, dict(config.provenance_config(), phantom=phantom.model_dump(mode="json")))
    (Path(config.out) / "provenance.json").write_text(prov.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(manifest.scans)} scans for {len(manifest.patients)} patients to {config.out}")


def cmd_train(config: RunConfig) -> None:
    o = config.options
    manifest = read_manifest(config.manifest_path)
    train_config = make_train_config(scenario=config.scenario, modality=config.modality, epochs=o["epochs"],
                                     batch_size=o["batch_size"], lr=o["lr"], curriculum=o["curriculum"], air=o["air"],
                                     seed=config.seed, folds=o["folds"], validation_fold=o["fold"])
    prov = provenance("train", config.seed,
                      dict(config.provenance_config(), train=train_config.model_dump(mode="json")))
    out = Path(config.out)
    if o["cv"]:
        result = cross_validate(manifest, config.data, train_config, config.threads)
        write_document(out / "cross_validation.json", cross_validation_document(result, prov))
        return
    result = train_carn(manifest, config.data, train_config, threads=config.threads)
    checkpoint = out / "model.lckp"
    save_checkpoint(checkpoint, result.scorer)
    write_training_log(out / "training_log.csv", result.log, prov)
    test = None
    if result.folds.test_fold is not None:
        test_patients = result.folds.patients_in(result.folds.test_fold)
        if test_patients:
            test = evaluation_summary(evaluate(result.scorer, manifest, config.data, config.scenario, config.modality,
                                               test_patients, threads=config.threads))
    write_document(out / "train.json", TrainDocument(provenance=prov, checkpoint=checkpoint.name,
                                                     log=epoch_rows(result.log), test=test))


def cmd_explain(config: RunConfig) -> None:
    scorer = load_checkpoint(config.model)
    config = _model_defaults(config, scorer)
    manifest = read_manifest(config.manifest_path)
    analysis = run_layer_analysis(scorer, manifest, config.data, config.scenario, config.modality,
                                  pairs=config.options["pairs"], seed=config.seed, threads=config.threads)
    out = Path(config.out)
    prov = provenance("explain", config.seed, config.provenance_config())
    write_document(out / "explain.json", ExplainDocument(provenance=prov, saliency=analysis.saliency,
                                                         interaction=analysis.interaction))
    if config.options["csv"]:
        write_layer_csv(out / "layers.csv", analysis.saliency, prov)
        write_scan_csv(out / "scans.csv", analysis.scans, prov)
        if analysis.interaction is not None:
            write_pair_csv(out / "pairs.csv", analysis.interaction, prov)
    if config.options["svg"]:
        (out / "annulus.svg").write_text(render_annulus(analysis.saliency, prov=prov), encoding="utf-8")


def cmd_faithfulness(config: RunConfig) -> None:
    scorer = load_checkpoint(config.model)
    config = _model_defaults(config, scorer)
    manifest = read_manifest(config.manifest_path)
    comparison = compare_methods(scorer, manifest, config.data, config.options["methods"], config.scenario,
                                 config.modality, config.seed, random_draws=config.options["random_draws"],
                                 threads=config.threads)
    out = Path(config.out)
    prov = provenance("faithfulness", config.seed, config.provenance_config())
    write_document(out / "faithfulness.json", FaithfulnessDocument(provenance=prov, summary=comparison.summary))
    if config.options["csv"]:
        write_faithfulness_csv(out / "faithfulness.csv", comparison.results, prov)


def cmd_sanity(config: RunConfig) -> None:
    scorer = load_checkpoint(config.model)
    config = _model_defaults(config, scorer)
    manifest = read_manifest(config.manifest_path)
    check = sanity_randomization(scorer, manifest, config.data, config.seed, config.scenario, config.modality,
                                 threads=config.threads)
    write_document(Path(config.out) / "sanity.json",
                   SanityDocument(provenance=provenance("sanity", config.seed, config.provenance_config()),
                                  result=check.result))


def cmd_associate(config: RunConfig) -> None:
    scorer = load_checkpoint(config.model)
    config = _model_defaults(config, scorer)
    manifest = read_manifest(config.manifest_path)
    analysis = run_layer_analysis(scorer, manifest, config.data, config.scenario, config.modality, pairs=False,
                                  seed=config.seed, threads=config.threads)
    rows = run_association(side_directional_scores(analysis.scans, config.scenario))
    out = Path(config.out)
    prov = provenance("associate", config.seed, config.provenance_config())
    write_document(out / "association.json", AssociationDocument(provenance=prov, rows=rows))
    if config.options["csv"]:
        write_association_csv(out / "association.csv", rows, prov)


def cmd_report(config: RunConfig) -> None:
    document = read_document(config.options["input"], kind="explain")
    prov = document.provenance
    out = Path(config.out)
    o = config.options
    if not (o["svg"] or o["chords"] or o["csv"]):
        raise ConfigError("Nothing to render; pass --svg, --chords or --csv.")
    if o["svg"]:
        (out / "annulus.svg").write_text(render_annulus(document.saliency, prov=prov), encoding="utf-8")
    if o["chords"]:
        if document.interaction is None:
            raise ConfigError("The explain document has no pair analysis; rerun 'explain --pairs'.")
        chords = render_chord_annulus(document.interaction, o["chords"], prov=prov)
        (out / f"chords_{o['chords']}.svg").write_text(chords, encoding="utf-8")
    if o["csv"]:
        write_layer_csv(out / "layers.csv", document.saliency, prov)
        if document.interaction is not None:
            write_pair_csv(out / "pairs.csv", document.interaction, prov)


COMMANDS: Dict[str, Callable[[RunConfig], None]] = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "explain": cmd_explain,
    "faithfulness": cmd_faithfulness,
    "sanity": cmd_sanity,
    "associate": cmd_associate,
    "report": cmd_report,
}

_SHARED = {"command", "data", "model", "out", "scenario", "modality", "seed", "threads"}


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    values = vars(args)
    options = {key: (str(value) if isinstance(value, Path) else value)
               for key, value in values.items() if key not in _SHARED}
    options["scenario_from_model"] = values.get("scenario") is None
    options["modality_from_model"] = values.get("modality") is None
    config = make_run_config(
        command=args.command,
        data=values.get("data"),
        model=values.get("model"),
        out=args.out,
        scenario=values.get("scenario") or Scenario.SIDE_MP,
        modality=values.get("modality") or "bmode",
        seed=default_seed() if args.seed is None else args.seed,
        threads=default_threads() if args.threads is None else args.threads,
        options=options,
    )
    Path(config.out).mkdir(parents=True, exist_ok=True)
    return config


def main(argv: Optional[List[str]] = None) -> int:
    load_environment()
    args = build_parser().parse_args(argv)

    configure_logging(log_file())
    configure_tracing(tracing_enabled(os.getenv("LAYER_ENABLE_TRACING")), logger)
    try:
        config = run_config_from_args(args)
        COMMANDS[args.command](config)
    except LayerError as e:
        logger.error(f"{args.command} failed: {e}")
        print(json.dumps({"error": type(e).__name__, "message": str(e), "command": args.command}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
