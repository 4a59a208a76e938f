import click
from flask import Blueprint

from app.blueprints.options import command_errors, common_options, load_settings
from app.exceptions import GradientCheckError
from app.services.pipeline import ExperimentPipeline

checks_bp = Blueprint('checks', __name__, cli_group=None)

VARIANCE_FIELDS = {
    "gammas": "VARIANCE_GAMMAS",
    "m_bars": "VARIANCE_M_BARS",
    "ps": "VARIANCE_PS",
    "samples": "VARIANCE_SAMPLES",
    "sampling": "VARIANCE_SAMPLING",
}

GRAD_CHECK_FIELDS = {
    "instances": "GRAD_CHECK_INSTANCES",
    "tolerance": "GRAD_CHECK_TOLERANCE",
    "fd_step": "FD_STEP",
}


@checks_bp.cli.command('variance-study')
@common_options
@click.option('--gammas', help="Comma separated relevance values.")
@click.option('--m-bars', help="Comma separated exposure values.")
@click.option('--ps', help="Comma separated predicted relevance values.")
@click.option('--samples', type=int, help="Monte Carlo draws per grid point.")
@click.option('--sampling', type=click.Choice(["iid", "stratified"]))
def variance_study(**options):
    """Closed-form and Monte Carlo gradient variances over a grid, as CSV."""
    settings = load_settings(options, VARIANCE_FIELDS)
    with command_errors("variance-study"):
        path = ExperimentPipeline(settings).variance_study()
    click.echo(f"variance\t{path}")


@checks_bp.cli.command('grad-check')
@common_options
@click.option('--instances', type=int, help="Random instances per check.")
@click.option('--tolerance', type=float, help="Relative error tolerance.")
@click.option('--fd-step', type=float, help="Central difference step.")
def grad_check(**options):
    """Verify hypergradients and closed forms against finite differences."""
    settings = load_settings(options, GRAD_CHECK_FIELDS)
    with command_errors("grad-check"):
        results = ExperimentPipeline(settings).grad_check()
        for result in results:
            status = "PASS" if result.passed else "FAIL"
            click.echo(f"{status}\t{result.component}\tmax_error={result.max_error:.3g}\t"
                       f"tolerance={result.tolerance:.3g}\tinstances={result.instances}")
        failed = [r.component for r in results if not r.passed]
        if failed:
            raise GradientCheckError(", ".join(failed), "tolerance exceeded")
