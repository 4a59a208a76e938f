import click
from flask import Blueprint

from app.blueprints.options import command_errors, common_options, load_settings
from app.services.pipeline import ExperimentPipeline

training_bp = Blueprint('training', __name__, cli_group=None)

TRAIN_FIELDS = {
    "data": "DATA_DIR",
    "ratings": "RATINGS_PATH",
    "test_ratings": "TEST_RATINGS_PATH",
    "pair_universe": "PAIR_UNIVERSE",
    "methods": "METHODS",
    "seeds": "SEEDS",
    "epochs": "EPOCHS",
    "batch_size": "BATCH_SIZE",
    "dim": "DIM",
    "inner_lr": "INNER_LR",
    "outer_lr": "OUTER_LR",
    "weight_decay": "WEIGHT_DECAY",
    "weight_decay_grid": "WEIGHT_DECAY_GRID",
    "optimizer": "OPTIMIZER",
    "checkpoint_every": "CHECKPOINT_EVERY",
    "pcc_every": "PCC_EVERY",
}

EVALUATE_FIELDS = {
    "run": "RUN_DIR",
    "ks": "KS",
}


@training_bp.cli.command('train')
@common_options
@click.option('--data', type=click.Path(exists=True, file_okay=False), help="Directory written by generate.")
@click.option('--ratings', type=click.Path(exists=True, dir_okay=False), help="Ratings TSV, split on the fly.")
@click.option('--test-ratings', type=click.Path(exists=True, dir_okay=False), help="Held-out ratings TSV.")
@click.option('--pair-universe', type=click.Choice(["grid", "observed"]))
@click.option('--method', '--methods', 'methods', help="Comma separated: naive,relmf,umf,ubo,jointopt,alteropt,biopt2.")
@click.option('--seeds', help="Comma separated seeds.")
@click.option('--epochs', type=int)
@click.option('--batch-size', type=int)
@click.option('--dim', type=int)
@click.option('--inner-lr', type=float)
@click.option('--outer-lr', type=float)
@click.option('--weight-decay', type=float)
@click.option('--weight-decay-grid', help="Comma separated candidates tuned on hyper-validation.")
@click.option('--optimizer', type=click.Choice(["adam", "sgd"]))
@click.option('--checkpoint-every', type=int, help="Also checkpoint every k epochs.")
@click.option('--pcc-every', type=int)
def train(**options):
    """Train the configured methods over every seed."""
    settings = load_settings(options, TRAIN_FIELDS)
    with command_errors("train"):
        paths = ExperimentPipeline(settings).train()
    click.echo(f"run\t{paths['run']}")


@training_bp.cli.command('evaluate')
@common_options
@click.option('--run', type=click.Path(exists=True, file_okay=False), help="Directory written by train.")
@click.option('--ks', help="Comma separated cut-offs, default 1,2,3.")
def evaluate(**options):
    """Ranking metrics per method and seed, with mean and standard deviation across seeds."""
    settings = load_settings(options, EVALUATE_FIELDS)
    with command_errors("evaluate"):
        pipeline = ExperimentPipeline(settings)
        report = pipeline.evaluate(out_dir=options.get("out"))
        summary = pipeline.summarize(report)
    click.echo(summary.to_string(index=False))
