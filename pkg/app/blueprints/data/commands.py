import click
from flask import Blueprint

from app.blueprints.options import command_errors, common_options, load_settings
from app.services.pipeline import ExperimentPipeline

data_bp = Blueprint('data', __name__, cli_group=None)

GENERATE_FIELDS = {
    "ratings": "RATINGS_PATH",
    "positive_threshold": "POSITIVE_THRESHOLD",
    "min_user_interactions": "MIN_USER_INTERACTIONS",
    "min_item_interactions": "MIN_ITEM_INTERACTIONS",
    "max_users": "MAX_USERS",
    "max_items": "MAX_ITEMS",
    "constant_gamma": "CONSTANT_GAMMA",
    "constant_exposure": "CONSTANT_EXPOSURE",
    "test_items_per_user": "TEST_ITEMS_PER_USER",
    "active_fraction": "ACTIVE_FRACTION",
    "hyper_val_fraction": "HYPER_VAL_FRACTION",
}


@data_bp.cli.command('generate')
@common_options
@click.option('--ratings', type=click.Path(exists=True, dir_okay=False), help="Base ratings TSV.")
@click.option('--positive-threshold', type=float)
@click.option('--min-user-interactions', type=int)
@click.option('--min-item-interactions', type=int)
@click.option('--max-users', type=int)
@click.option('--max-items', type=int)
@click.option('--constant-gamma', type=float, help="Replace the relevance recipe by a constant.")
@click.option('--constant-exposure', type=float, help="Replace the exposure recipe by a constant.")
@click.option('--test-items-per-user', type=int)
@click.option('--active-fraction', type=float)
@click.option('--hyper-val-fraction', type=float)
def generate(**options):
    """Generate a semi-synthetic dataset with known relevance and exposure."""
    settings = load_settings(options, GENERATE_FIELDS)
    with command_errors("generate"):
        paths = ExperimentPipeline(settings).generate()
    for name, path in paths.items():
        click.echo(f"{name}\t{path}")
