import threading
import uuid

from flask import Blueprint, current_app, jsonify, request

from spinnoise.config import config_from_app
from spinnoise.exceptions import InvalidInputError
from spinnoise.utils.pipeline import run_pipeline
from spinnoise.utils.records import round_significant
from spinnoise.utils.result_cache import load_result, save_result

bp = Blueprint('pipeline', __name__, url_prefix='/pipeline')

# In-memory status tracking for background pipeline runs; only the most
# recently finished MAX_FINISHED_JOBS are kept.
JOB_STATUS = {}
JOB_LOCK = threading.Lock()
MAX_FINISHED_JOBS = 100
FINISHED_STATES = ('done', 'flagged', 'error')


def _set_job_status(job_id, status, message, progress, result=None):
    entry = {
        'status': status,
        'message': message,
        'progress': progress,
    }
    if result is not None:
        entry['result'] = result
    with JOB_LOCK:
        JOB_STATUS.pop(job_id, None)
        JOB_STATUS[job_id] = entry
        if status in FINISHED_STATES:
            finished = [key for key, info in JOB_STATUS.items() if info['status'] in FINISHED_STATES]
            for key in finished[:-MAX_FINISHED_JOBS]:
                del JOB_STATUS[key]


def _run_in_background(job_id, config, cache_dir, logger):
    def progress_callback(progress, message):
        _set_job_status(job_id, 'processing', message, progress)

    try:
        outcome = run_pipeline(config, progress=progress_callback)
        result = round_significant(outcome.report)
        if not save_result(cache_dir, config, result):
            logger.warning('Pipeline result for job %s was not cached', job_id)
        status = 'flagged' if outcome.flagged else 'done'
        _set_job_status(job_id, status, 'Pipeline complete.', 100, result)
    except Exception as exc:
        logger.exception('Pipeline job %s failed', job_id)
        _set_job_status(job_id, 'error', f'Pipeline failed: {str(exc)}', 100)


def _overrides_from_body(body):
    overrides = dict(body.get('config') or {})
    if 'nu_ghz' in body:
        overrides.setdefault('probe', {}).update({'reference': 'cm', 'detuning_ghz': body['nu_ghz']})
    if 'seed' in body:
        overrides.setdefault('simulation', {})['seed'] = body['seed']
    return overrides


@bp.route('', methods=('POST',))
def start():
    """Start a pipeline run; the response carries the job id to poll."""
    body = request.get_json(silent=True) or {}
    try:
        config = config_from_app(current_app.config, _overrides_from_body(body))
    except InvalidInputError as e:
        return jsonify({'error': str(e)}), 400

    job_id = str(uuid.uuid4())
    cache_dir = current_app.config['RESULT_CACHE']
    cached = load_result(cache_dir, config)
    if cached is not None:
        _set_job_status(job_id, 'done', 'Loaded from cache.', 100, cached)
        return jsonify({'job_id': job_id, 'status': 'done'}), 200

    _set_job_status(job_id, 'queued', 'Queued for simulation...', 5)
    thread = threading.Thread(
        target=_run_in_background,
        args=(job_id, config, cache_dir, current_app.logger),
        daemon=True
    )
    thread.start()
    return jsonify({'job_id': job_id, 'status': 'queued'}), 202


@bp.route('/status', methods=('GET',))
def status():
    job_id = request.args.get('job_id')
    if not job_id:
        return jsonify({'status': 'unknown', 'message': 'Missing job_id.', 'progress': 0}), 400

    with JOB_LOCK:
        status_info = JOB_STATUS.get(job_id)

    if not status_info:
        return jsonify({'status': 'unknown', 'message': 'No such job.', 'progress': 0}), 404

    return jsonify(status_info)
