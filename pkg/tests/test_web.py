import time

import pytest

from spinnoise.components import pipeline as pipeline_component
from spinnoise.components import theory as theory_component
from spinnoise.exceptions import SpinNoiseError


def test_index(client):
    response = client.get('/')
    assert response.status_code == 200
    assert '/theory/sweep' in response.get_json()['endpoints']


def test_sweep(client):
    response = client.get('/theory/sweep?from_ghz=-1&to_ghz=1&step_ghz=0.5')
    assert response.status_code == 200
    assert len(response.get_json()['rows']) == 5


def test_bad_query(client):
    response = client.get('/theory/sweep?step_ghz=abc')
    assert response.status_code == 400
    assert 'step_ghz' in response.get_json()['error']


def test_rates(client):
    response = client.get('/theory/rates?gamma_per_s=8000')
    assert response.status_code == 200
    assert response.get_json()['analytic']['gamma_minus'] == 6000.0


def test_polar(client):
    response = client.get('/theory/polar?low_ghz=20&high_ghz=30')
    assert response.status_code == 200
    assert response.get_json()['roots'] == []


def test_spectrum(client):
    response = client.get('/spectra/zf?points=11&stop_hz=100&nu_ghz=-20')
    payload = response.get_json()
    assert response.status_code == 200
    assert len(payload['psd']) == 11
    assert payload['nu_ghz'] == pytest.approx(-20.0)
    assert [c['label'] for c in payload['model']['components']] == ['plus', 'minus']


def test_unknown_spectrum_mode(client):
    assert client.get('/spectra/ac').status_code == 404


def test_pipeline_status_errors(client):
    assert client.get('/pipeline/status').status_code == 400
    assert client.get('/pipeline/status?job_id=nope').status_code == 404


def test_pipeline_rejects_bad_config(client):
    response = client.post('/pipeline', json={'config': {'pm': {'duty_cycle': 'x'}}})
    assert response.status_code == 400


def _wait(client, job_id, timeout=120.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        status = client.get(f'/pipeline/status?job_id={job_id}').get_json()
        if status['status'] in ('done', 'flagged', 'error'):
            return status
        time.sleep(0.2)
    raise AssertionError('pipeline job did not finish')


def test_pipeline_job_and_cache(client):
    response = client.post('/pipeline', json={'seed': 2})
    assert response.status_code == 202
    status = _wait(client, response.get_json()['job_id'])
    assert status['status'] in ('done', 'flagged')
    assert status['result']['schema'] == 'spinnoise.pipeline/1'

    again = client.post('/pipeline', json={'seed': 2})
    assert again.status_code == 200
    cached = client.get(f"/pipeline/status?job_id={again.get_json()['job_id']}").get_json()
    assert cached['result'] == status['result']


def test_polar_failure_is_a_server_error(client, monkeypatch):
    def broken(config, window):
        raise SpinNoiseError('root bracketing failed')

    monkeypatch.setattr(theory_component, 'polar_payload', broken)
    response = client.get('/theory/polar')
    assert response.status_code == 500
    assert 'Polar search failed' in response.get_json()['error']


def test_finished_jobs_are_evicted(monkeypatch):
    monkeypatch.setattr(pipeline_component, 'JOB_STATUS', {})
    monkeypatch.setattr(pipeline_component, 'MAX_FINISHED_JOBS', 2)
    pipeline_component._set_job_status('running', 'processing', 'Simulating...', 30)
    for job_id in ('first', 'second', 'third'):
        pipeline_component._set_job_status(job_id, 'done', 'Pipeline complete.', 100, {})
    assert list(pipeline_component.JOB_STATUS) == ['running', 'second', 'third']
