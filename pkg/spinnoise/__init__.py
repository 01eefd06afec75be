import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from flask import Flask
from flask_cors import CORS

__version__ = "0.1.0"


def create_app(test_config=None):
    """Create and configure the JSON HTTP surface."""
    app = Flask(__name__, instance_relative_config=True)
    CORS(app)
    app.config.from_mapping(
        SECRET_KEY='dev',
        RESULT_CACHE=os.path.join(app.instance_path, 'results'),
        SPINNOISE_PRESET='red_detuned',
        SPINNOISE={},
    )

    if test_config is None:
        # instance TOML: upper-case keys, run configuration under [SPINNOISE]
        config_path = os.environ.get('SPINNOISE_CONFIG', 'config.toml')
        app.config.from_file(config_path, load=tomllib.load, text=False, silent=True)
    else:
        app.config.from_mapping(test_config)

    os.makedirs(app.config['RESULT_CACHE'], exist_ok=True)

    from spinnoise.components import pipeline, spectra, theory
    app.register_blueprint(theory.bp)
    app.register_blueprint(spectra.bp)
    app.register_blueprint(pipeline.bp)

    from flask import jsonify

    @app.route('/')
    def index():
        return jsonify({
            'service': 'spinnoise',
            'version': __version__,
            'endpoints': sorted(
                rule.rule for rule in app.url_map.iter_rules() if rule.endpoint != 'static'
            ),
        })

    return app
