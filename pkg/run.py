import click
from flask.cli import FlaskGroup

from app import create_app


@click.group(cls=FlaskGroup, create_app=create_app, add_default_commands=False)
def cli():
    """Exposure-debiased matrix factorisation: generate, train, evaluate, variance-study, grad-check."""


if __name__ == '__main__':
    cli()
