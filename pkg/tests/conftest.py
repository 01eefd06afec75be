import pytest
from click.testing import CliRunner

from spinnoise import create_app
from spinnoise.utils.atomic import RB87, build_operators
from spinnoise.utils.optics import OpticalLine


@pytest.fixture(scope="session")
def ops():
    return build_operators(RB87)


@pytest.fixture(scope="session")
def line():
    return OpticalLine.for_temperature(381.35)


@pytest.fixture
def app(tmp_path):
    app = create_app({
        'TESTING': True,
        'RESULT_CACHE': str(tmp_path / 'results'),
        'SPINNOISE_PRESET': 'red_detuned',
        'SPINNOISE': {'simulation': {'duration_s': 10.0}},
    })
    yield app


@pytest.fixture
def client(app):
    return app.test_client()


@pytest.fixture
def runner():
    return CliRunner(mix_stderr=False)
