"""
============
Command line
============

The ``nerveseg`` command. Exit codes: 0 on success, 1 for usage errors, 2 for
runtime errors and 3 when the gradient suite finds a violation.

"""

import logging
import sys
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any, Optional

import click
import numpy as np
import pandas as pd

from nerveseg import data, trainer
from nerveseg.__about__ import __version__
from nerveseg.config import ARCH_ALIASES, LayeredSettings, build_train_config
from nerveseg.exceptions import GradientCheckError, NerveSegError
from nerveseg.gradcheck import assert_passed, run_gradient_suite
from nerveseg.metrics import binarize
from nerveseg.model import (
    Architecture,
    ModelConfig,
    build_model,
    covers_input,
    parameter_count,
    receptive_field_table,
)
from nerveseg.tensor import make_rng
from nerveseg.trainer import TrainConfig

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3


def _dilations(
    ctx: click.Context, param: click.Parameter, value: Optional[str]
) -> Optional[list[int]]:
    if value is None:
        return None
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma separated integers, got {value!r}") from None


def _arch(name: str) -> Architecture:
    return Architecture(ARCH_ALIASES.get(name, name))


def _settings(config_file: Optional[Path], overrides: dict[str, dict[str, Any]]) -> TrainConfig:
    """Package defaults, then ``config_file``, then explicit flags."""
    settings = LayeredSettings()
    if config_file is not None:
        settings.update(config_file, layer="config_file")
    flags = {
        section: {k: v for k, v in values.items() if v is not None}
        for section, values in overrides.items()
    }
    settings.update(
        {section: values for section, values in flags.items() if values},
        layer="command_line",
        source="command line",
    )
    settings.freeze()
    return build_train_config(settings)


def _model_overrides(
    arch: Optional[str], base_channels: Optional[int], dilations: Optional[list[int]]
) -> dict[str, Any]:
    return {"arch": arch, "base_channels": base_channels, "dilations": dilations}


existing_file = click.Path(exists=True, dir_okay=False, path_type=Path)
output_file = click.Path(dir_okay=False, path_type=Path)

config_option = click.option(
    "--config",
    "config_file",
    type=existing_file,
    help="YAML settings file; explicit flags override it.",
)
data_option = click.option(
    "--data",
    "data_dir",
    required=True,
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    help="Dataset root holding subject_<k> directories.",
)
ckpt_option = click.option("--ckpt", required=True, type=existing_file, help="Checkpoint file.")


@click.group()
@click.version_option(__version__, prog_name="nerveseg")
@click.option("-v", "--verbose", is_flag=True, help="Log debug messages.")
def cli(verbose: bool) -> None:
    """Nerve segmentation in ultrasound images with U-Net and dilated U-Net."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


@cli.command()
@data_option
@click.option(
    "--arch", required=True, type=click.Choice(["unet", "dilated"]), help="Network architecture."
)
@click.option("--test-subject", required=True, type=int, help="Subject held out for testing.")
@click.option("--val-subject", required=True, type=int, help="Subject used for early stopping.")
@click.option("--epochs", type=click.IntRange(min=1))
@click.option("--patience", type=click.IntRange(min=1))
@click.option("--lr", type=float)
@click.option("--batch", type=click.IntRange(min=1), help="Batch size.")
@click.option("--seed", type=click.IntRange(min=0))
@click.option("--base-channels", type=click.IntRange(min=1))
@click.option("--dilations", callback=_dilations, help="Comma separated, e.g. 2,4.")
@config_option
@click.option("--out", required=True, type=output_file, help="Checkpoint file.")
@click.option("--history", type=output_file, help="JSON lines epoch log.")
def train(
    data_dir: Path,
    arch: str,
    test_subject: int,
    val_subject: int,
    epochs: Optional[int],
    patience: Optional[int],
    lr: Optional[float],
    batch: Optional[int],
    seed: Optional[int],
    base_channels: Optional[int],
    dilations: Optional[list[int]],
    config_file: Optional[Path],
    out: Path,
    history: Optional[Path],
) -> None:
    """Train one model on a single (test, validation) split."""
    cfg = _settings(
        config_file,
        {
            "model": _model_overrides(arch, base_channels, dilations),
            "training": {
                "epochs": epochs,
                "patience": patience,
                "lr": lr,
                "batch_size": batch,
                "seed": seed,
            },
        },
    )
    subjects = data.load_dataset(data_dir, size=cfg.model.input_size)
    train_samples, val, test = trainer.split_subjects(subjects, test_subject, val_subject)
    ck, run_history = trainer.train_run(train_samples, val.samples, cfg)
    trainer.save_checkpoint(ck, out)
    if history is not None:
        run_history.to_jsonl(history)
    test_dice = trainer.evaluate_subject(ck, test, cfg.batch_size)
    click.echo(
        f"best epoch {run_history.best_epoch}: val dice {run_history.best_val_dice:.4f}, "
        f"test dice {test_dice:.4f}"
    )


@cli.command()
@data_option
@click.option(
    "--arch", type=click.Choice(["unet", "dilated", "both"]), default="both", show_default=True
)
@click.option("--seed", type=click.IntRange(min=0))
@click.option("--epochs", type=click.IntRange(min=1))
@click.option("--patience", type=click.IntRange(min=1))
@click.option("--base-channels", type=click.IntRange(min=1))
@click.option("--report", required=True, type=output_file, help="CSV output.")
@click.option(
    "--jobs",
    type=click.IntRange(min=1),
    default=1,
    envvar="NERVESEG_THREADS",
    show_default=True,
    help="Folds trained in parallel.",
)
@click.option(
    "--history",
    type=click.Path(file_okay=False, path_type=Path),
    help="Directory for per-fold epoch logs.",
)
@config_option
def cv(
    data_dir: Path,
    arch: str,
    seed: Optional[int],
    epochs: Optional[int],
    patience: Optional[int],
    base_channels: Optional[int],
    report: Path,
    jobs: int,
    history: Optional[Path],
    config_file: Optional[Path],
) -> None:
    """Run the subject-wise nested cross validation and write the dice report."""
    cfg = _settings(
        config_file,
        {
            "model": _model_overrides(None, base_channels, None),
            "training": {"epochs": epochs, "patience": patience, "seed": seed},
        },
    )
    archs = ["unet", "dilated"] if arch == "both" else [arch]
    configs = [replace(cfg, model=replace(cfg.model, arch=_arch(name))) for name in archs]
    subjects = data.load_dataset(data_dir, size=cfg.model.input_size)
    result = trainer.run_nested_cv(subjects, configs, jobs=jobs)
    result.report.to_csv(report)
    if history is not None:
        history.mkdir(parents=True, exist_ok=True)
        for run in result.runs:
            run.history.to_jsonl(history / f"fold{run.fold_index:02d}_{run.arch.value}.jsonl")
    with pd.option_context("display.float_format", "{:.4f}".format):
        click.echo(result.report.side_by_side().to_string())


@cli.command()
@ckpt_option
@click.option("--input", "input_path", required=True, type=existing_file)
@click.option("--out", required=True, type=output_file, help="Mask image (0/255).")
@click.option("--prob", type=output_file, help="Probability image (255 * p).")
def predict(ckpt: Path, input_path: Path, out: Path, prob: Optional[Path]) -> None:
    """Segment one image at the model's input resolution."""
    ck = trainer.load_checkpoint(ckpt)
    image = data.load_image(input_path, ck.config.input_size)
    p = trainer.predict_probabilities(ck.to_model(), image)[0, 0]
    data.write_grayscale(out, binarize(p) * 255)
    if prob is not None:
        data.write_grayscale(prob, np.floor(p.astype(np.float64) * 255 + 0.5))
    logger.info("Wrote %s", out)


@cli.command(name="eval")
@ckpt_option
@data_option
@click.option("--subject", required=True, type=int)
@click.option("--per-image", is_flag=True, help="List dice and region count of every image.")
def evaluate(ckpt: Path, data_dir: Path, subject: int, per_image: bool) -> None:
    """Print the mean dice of a checkpoint on one subject."""
    ck = trainer.load_checkpoint(ckpt)
    subjects = data.load_dataset(data_dir, size=ck.config.input_size)
    table = trainer.subject_breakdown(ck, trainer.subject_by_id(subjects, subject))
    click.echo(f"{table['dice'].mean():.4f}")
    click.echo(f"mean predicted regions: {table['components'].mean():.2f}")
    if per_image:
        click.echo(table.to_string(index=False, float_format="{:.4f}".format))


@cli.command()
@click.option("--arch", required=True, type=click.Choice(["unet", "dilated"]))
@click.option("--depth", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--dilations", callback=_dilations, default="2,4", show_default=True)
@click.option("--input", "input_extent", type=click.IntRange(min=1), default=128, show_default=True)
@click.option("--base-channels", type=click.IntRange(min=1), default=16, show_default=True)
def rf(arch: str, depth: int, dilations: list[int], input_extent: int, base_channels: int) -> None:
    """Print the receptive field of every layer up to the bottleneck."""
    cfg = ModelConfig(
        arch=_arch(arch),
        depth=depth,
        base_channels=base_channels,
        dilations=tuple(dilations),
        input_size=(input_extent, input_extent),
    )
    rows = receptive_field_table(cfg)
    table = pd.DataFrame(
        [(r.layer, r.receptive_field, r.jump, f"{r.extent[0]}x{r.extent[1]}") for r in rows],
        columns=["layer", "receptive_field", "jump", "extent"],
    )
    click.echo(table.to_string(index=False))
    click.echo(f"innermost receptive field: {rows[-1].receptive_field}")
    click.echo(f"covers input: {'yes' if covers_input(cfg, rows) else 'no'}")
    click.echo(f"parameters: {parameter_count(build_model(cfg))}")


@cli.command()
@click.option("--out", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--subjects", type=click.IntRange(min=1), default=6, show_default=True)
@click.option("--per-subject", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
def phantom(out: Path, subjects: int, per_subject: int, seed: int) -> None:
    """Generate a synthetic ultrasound dataset."""
    generated = data.gen_phantom_subjects(subjects, per_subject, make_rng(seed))
    data.export_dataset(generated, out)
    click.echo(f"wrote {subjects} subjects x {per_subject} images to {out}")


@cli.command()
@click.option(
    "--seeds", type=click.IntRange(min=1), default=5, show_default=True, help="Number of seeds."
)
@click.option("--skip-model", is_flag=True, help="Only check the individual operators.")
def gradcheck(seeds: int, skip_model: bool) -> None:
    """Compare analytic gradients with central finite differences."""
    records = run_gradient_suite(range(seeds), include_model=not skip_model)
    for record in records:
        status = "ok" if record.passed else "FAIL"
        click.echo(
            f"{record.check:<22} seed {record.seed}  {record.max_rel_error:.3e}  "
            f"{record.points:>4} points  {status}"
        )
    assert_passed(records)


def run_cli(args: Sequence[str]) -> int:
    """Runs the command line with ``args`` and returns the exit code."""
    try:
        cli.main(args=list(args), prog_name="nerveseg", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        return EXIT_USAGE
    except GradientCheckError as e:
        click.echo(f"Error: {e}", err=True)
        return EXIT_CHECK_FAILED
    except (NerveSegError, OSError) as e:
        click.echo(f"Error: {e}", err=True)
        return EXIT_RUNTIME
    return 0


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))
