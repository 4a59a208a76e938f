from typing import Optional

from flask import Flask
from loguru import logger

from app.config import Settings, get_config
from app.extensions import init_extensions


def create_app(settings: Optional[Settings] = None) -> Flask:
    # Load configuration with fail-fast validation
    if settings is None:
        try:
            settings = get_config()
        except Exception as e:
            logger.error(f"Configuration failed: {e}")
            raise

    # Create Flask app; it hosts the command line only
    app = Flask(__name__)
    app.config['SETTINGS'] = settings

    # Initialize extensions
    init_extensions(app)

    # Register command blueprints
    from app.blueprints.data import data_bp
    from app.blueprints.training import training_bp
    from app.blueprints.checks import checks_bp

    app.register_blueprint(data_bp)
    app.register_blueprint(training_bp)
    app.register_blueprint(checks_bp)

    logger.debug("Flask app created")

    return app
