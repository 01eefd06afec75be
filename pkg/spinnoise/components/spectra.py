from flask import Blueprint, current_app, jsonify

from spinnoise.components import query_float, request_config
from spinnoise.exceptions import InvalidInputError, SpinNoiseError
from spinnoise.utils.pipeline import SPECTRUM_MODES, theory_spectrum
from spinnoise.utils.records import round_significant
from spinnoise.utils.spectra import FrequencyGrid, evaluate_psd

bp = Blueprint('spectra', __name__, url_prefix='/spectra')


@bp.route('/<mode>', methods=('GET',))
def spectrum(mode):
    """Model PSD (rad^2/Hz) of a dc, zero-field or pi-PM spectrum."""
    if mode not in SPECTRUM_MODES:
        return jsonify({'error': f'Unknown spectrum mode {mode}.'}), 404
    try:
        config = request_config()
        grid = FrequencyGrid(
            query_float('start_hz', config['spectrum.start_hz']),
            query_float('stop_hz', config['spectrum.stop_hz']),
            int(query_float('points', config['spectrum.points'])),
        )
        freq = grid.values()
        nu, model = theory_spectrum(config, mode)
        return jsonify(round_significant({
            'schema': 'spinnoise.psd/1',
            'mode': mode,
            'nu_ghz': nu / 1e9,
            'freq_hz': freq.tolist(),
            'psd': evaluate_psd(model, freq).tolist(),
            'model': model.to_record(),
        }))
    except InvalidInputError as e:
        return jsonify({'error': str(e)}), 400
    except SpinNoiseError as e:
        current_app.logger.exception('Spectrum failed')
        return jsonify({'error': f'Spectrum failed: {str(e)}'}), 500
