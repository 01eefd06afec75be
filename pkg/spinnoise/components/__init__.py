from flask import current_app, request

from spinnoise.config import config_from_app
from spinnoise.exceptions import InvalidInputError


def query_float(name, default=None):
    raw = request.args.get(name)
    if raw is None:
        if default is None:
            raise InvalidInputError(f'Missing query parameter {name}.')
        return default
    try:
        return float(raw)
    except ValueError as exc:
        raise InvalidInputError(f'Query parameter {name} must be a number, got {raw!r}.') from exc


def request_config(overrides=None):
    """Run configuration of the app, with ``nu_ghz`` from the query string if given."""
    overrides = dict(overrides or {})
    if 'nu_ghz' in request.args:
        overrides.setdefault('probe', {}).update(
            {'reference': 'cm', 'detuning_ghz': query_float('nu_ghz')}
        )
    return config_from_app(current_app.config, overrides)
