import logging.config

from flask import Flask
from flask.cli import FlaskGroup

from config import Config
from extensions import db


def configure_logging(level):
    logging.config.dictConfig({
        'version': 1,
        'disable_existing_loggers': False,
        'formatters': {
            'default': {'format': '%(asctime)s %(levelname)s %(name)s: %(message)s'},
        },
        'handlers': {
            'stderr': {
                'class': 'logging.StreamHandler',
                'stream': 'ext://sys.stderr',
                'formatter': 'default',
            },
        },
        'root': {'level': level, 'handlers': ['stderr']},
    })


def create_app(test_config=None):
    app = Flask(__name__)
    app.config.from_object(Config)
    if test_config is not None:
        app.config.update(test_config)

    configure_logging(app.config['LOG_LEVEL'])

    # Initialize extensions
    db.init_app(app)

    from commands.collection import collection_bp
    from commands.dss import dss_bp
    from commands.res import res_bp
    from commands.scenario import scenario_bp
    from commands.runs import runs_bp

    app.register_blueprint(collection_bp)
    app.register_blueprint(dss_bp)
    app.register_blueprint(res_bp)
    app.register_blueprint(scenario_bp)
    app.register_blueprint(runs_bp)

    # Create the internal models repository tables
    with app.app_context():
        import models  # noqa: F401
        db.create_all()

    return app


cli = FlaskGroup(create_app=create_app)

if __name__ == '__main__':
    cli.main()
