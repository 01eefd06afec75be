from flask import Blueprint, current_app, jsonify, request

from spinnoise.components import query_float, request_config
from spinnoise.exceptions import InvalidInputError, SpinNoiseError
from spinnoise.utils.optics import detuning_sweep
from spinnoise.utils.pipeline import polar_payload, rates_payload
from spinnoise.utils.records import round_significant

bp = Blueprint('theory', __name__, url_prefix='/theory')


@bp.route('/sweep', methods=('GET',))
def sweep():
    """Detuning sweep of chi factors and power ratios."""
    try:
        config = request_config()
        start = query_float('from_ghz', -60.0)
        stop = query_float('to_ghz', 60.0)
        step = query_float('step_ghz', 0.5)
        table = detuning_sweep(config.optical_line(), config.operators(), start * 1e9, stop * 1e9, step * 1e9)
        return jsonify(round_significant({
            'schema': 'spinnoise.sweep/1',
            'rows': table.to_dict(orient='records'),
        }))
    except InvalidInputError as e:
        return jsonify({'error': str(e)}), 400
    except SpinNoiseError as e:
        current_app.logger.exception('Sweep failed')
        return jsonify({'error': f'Sweep failed: {str(e)}'}), 500


@bp.route('/polar', methods=('GET',))
def polar():
    try:
        config = request_config()
        low, high = config.polar_window_hz()
        window = (query_float('low_ghz', low / 1e9) * 1e9, query_float('high_ghz', high / 1e9) * 1e9)
        return jsonify(round_significant(polar_payload(config, window)))
    except InvalidInputError as e:
        return jsonify({'error': str(e)}), 400
    except SpinNoiseError as e:
        current_app.logger.exception('Polar search failed')
        return jsonify({'error': f'Polar search failed: {str(e)}'}), 500


@bp.route('/rates', methods=('GET',))
def rates():
    try:
        config = request_config()
        if 'gamma_per_s' in request.args:
            config = config.with_overrides({'se': {'gamma_per_s': query_float('gamma_per_s')}})
        return jsonify(round_significant(rates_payload(config)))
    except InvalidInputError as e:
        return jsonify({'error': str(e)}), 400
    except SpinNoiseError as e:
        current_app.logger.exception('Rate extraction failed')
        return jsonify({'error': f'Rate extraction failed: {str(e)}'}), 500
