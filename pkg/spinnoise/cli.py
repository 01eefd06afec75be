"""
Command-line surface.

Every command reads the run configuration (``--preset`` then ``--config``),
writes CSV or JSON to ``--out`` or standard output, and logs to standard error.
Exit status: 0 on success, 1 on rejected input, 2 when a fit is flagged.
"""
import functools
import json
import logging
import sys

import click

from spinnoise.config import PRESETS, load_config
from spinnoise.exceptions import InvalidInputError, SpinNoiseError
from spinnoise.utils.dynamics import rate_set
from spinnoise.utils.fitting import FitProblem, fit_dc_spectrum, fit_lorentzians
from spinnoise.utils.noisegen import segment_for_resolution, simulate_faraday_noise, welch_psd
from spinnoise.utils.optics import detuning_sweep
from spinnoise.utils.pipeline import (
    SPECTRUM_MODES,
    polar_payload,
    rates_payload,
    run_pipeline,
    theory_spectrum,
)
from spinnoise.utils.records import (
    SCHEMAS,
    dumps_json,
    input_kind,
    read_psd_csv,
    read_series_binary,
    read_series_csv,
    write_csv,
    write_series_binary,
    write_series_csv,
)
from spinnoise.utils.spectra import FrequencyGrid, evaluate_psd

logger = logging.getLogger(__name__)

EXIT_INPUT_ERROR = 1
EXIT_FIT_FLAGGED = 2


def _print_schema(name):
    def callback(ctx, _param, value):
        if value and not ctx.resilient_parsing:
            click.echo(json.dumps(SCHEMAS[name], indent=2))
            ctx.exit(0)
    return click.option("--schema", is_flag=True, expose_value=False, is_eager=True,
                        callback=callback, help="Print the output schema and exit.")


def handle_errors(command):
    """Report SpinNoiseError as JSON on standard error with exit status 1."""
    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except SpinNoiseError as exc:
            click.echo(json.dumps({"error": type(exc).__name__, "message": str(exc)}), err=True)
            sys.exit(EXIT_INPUT_ERROR)
    return wrapper


def _emit_json(payload, out):
    text = dumps_json(payload)
    if out:
        with open(out, "w", encoding="utf-8") as handle:
            handle.write(text + "\n")
    else:
        click.echo(text)


def _emit_csv(frame, out):
    if out:
        write_csv(frame, out)
    else:
        write_csv(frame, sys.stdout)


def _config(ctx, nu_ghz=None):
    config = ctx.obj["config"]
    if nu_ghz is not None:
        config = config.with_overrides({"probe": {"reference": "cm", "detuning_ghz": nu_ghz}})
    return config


nu_option = click.option("--nu-ghz", type=float, default=None,
                         help="Probe frequency from the D1 centre of gravity (GHz); "
                              "defaults to the configured probe.")
out_option = click.option("--out", type=click.Path(dir_okay=False), default=None,
                          help="Output file (standard output when omitted).")


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="TOML run configuration.")
@click.option("--preset", type=click.Choice(PRESETS), default=None, help="Built-in preset.")
@click.option("-v", "--verbose", is_flag=True, help="Debug logging on standard error.")
@click.pass_context
def cli(ctx, config_path, preset, verbose):
    """Spin-noise theory curves, synthesis and fitting."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    ctx.ensure_object(dict)
    try:
        ctx.obj["config"] = load_config(config_path, preset)
    except SpinNoiseError as exc:
        click.echo(json.dumps({"error": type(exc).__name__, "message": str(exc)}), err=True)
        sys.exit(EXIT_INPUT_ERROR)


@cli.command()
@click.option("--from-ghz", type=float, default=-60.0, show_default=True)
@click.option("--to-ghz", type=float, default=60.0, show_default=True)
@click.option("--step-ghz", type=float, default=0.1, show_default=True)
@out_option
@_print_schema("sweep")
@click.pass_context
@handle_errors
def sweep(ctx, from_ghz, to_ghz, step_ghz, out):
    """Detuning sweep of chi_a, chi_b and the power ratios (CSV)."""
    if step_ghz <= 0:
        raise InvalidInputError("--step-ghz must be positive")
    config = _config(ctx)
    table = detuning_sweep(config.optical_line(), config.operators(),
                           from_ghz * 1e9, to_ghz * 1e9, step_ghz * 1e9)
    _emit_csv(table, out)


@cli.command()
@click.option("--low-ghz", type=float, default=None)
@click.option("--high-ghz", type=float, default=None)
@out_option
@_print_schema("polar")
@click.pass_context
@handle_errors
def polar(ctx, low_ghz, high_ghz, out):
    """Polar frequencies inside the search window (JSON)."""
    config = _config(ctx)
    low, high = config.polar_window_hz()
    window = (low if low_ghz is None else low_ghz * 1e9, high if high_ghz is None else high_ghz * 1e9)
    _emit_json(polar_payload(config, window), out)


@cli.command()
@click.option("--gamma-per-s", type=float, default=None, help="Override the SE rate.")
@out_option
@_print_schema("rates")
@click.pass_context
@handle_errors
def rates(ctx, gamma_per_s, out):
    """Liouvillian eigen-rates next to their analytic values (JSON)."""
    config = _config(ctx)
    if gamma_per_s is not None:
        config = config.with_overrides({"se": {"gamma_per_s": gamma_per_s}})
    _emit_json(rates_payload(config), out)


@cli.command()
@click.option("--mode", type=click.Choice(SPECTRUM_MODES), default="pm", show_default=True)
@nu_option
@click.option("--start-hz", type=float, default=None)
@click.option("--stop-hz", type=float, default=None)
@click.option("--points", type=int, default=None)
@out_option
@_print_schema("spectrum")
@click.pass_context
@handle_errors
def spectrum(ctx, mode, nu_ghz, start_hz, stop_hz, points, out):
    """Model PSD in rad^2/Hz (CSV: freq_hz, psd)."""
    import pandas as pd

    config = _config(ctx, nu_ghz)
    grid = FrequencyGrid(
        config["spectrum.start_hz"] if start_hz is None else start_hz,
        config["spectrum.stop_hz"] if stop_hz is None else stop_hz,
        config["spectrum.points"] if points is None else points,
    )
    freq = grid.values()
    _, model = theory_spectrum(config, mode)
    _emit_csv(pd.DataFrame({"freq_hz": freq, "psd": evaluate_psd(model, freq)}), out)


@cli.command()
@nu_option
@click.option("--mode", type=click.Choice(("zero", "pm")), default="pm", show_default=True)
@click.option("--format", "fmt", type=click.Choice(("bin", "csv")), default="bin", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@_print_schema("series")
@click.pass_context
@handle_errors
def simulate(ctx, nu_ghz, mode, fmt, out):
    """Synthesize a Faraday-rotation time series (rad)."""
    config = _config(ctx, nu_ghz)
    line = config.optical_line()
    ops = config.operators()
    cfg = config.series_config()
    pm = config.pm_spec()
    nu = config.probe_frequency_hz(line)
    rates = rate_set(config.se_params().gamma_se, config.atom_spec(), ops)
    series = simulate_faraday_noise(nu, line, rates, pm.wall_broadening_hz, cfg,
                                    field_mode=mode, pm=pm, ops=ops, cell=config.cell())
    if fmt == "bin":
        write_series_binary(out, series, cfg.sample_rate_hz, cfg.seed)
    else:
        write_series_csv(out, series, cfg.sample_rate_hz)


def _read_spectrum(path, config, resolution_hz):
    """PSD frame from a PSD CSV, or the Welch estimate of a binary or CSV time series."""
    kind = input_kind(path)
    if kind == "psd":
        return read_psd_csv(path)
    if kind == "series_binary":
        series, header = read_series_binary(path)
        sample_rate = header["sample_rate_hz"]
    else:
        series, sample_rate = read_series_csv(path)
    if resolution_hz is None:
        resolution_hz = config["pipeline.wide_resolution_hz"]
    if not resolution_hz > 0:
        raise InvalidInputError("--resolution-hz must be positive")
    logger.info("Estimating the PSD of %d samples at %.3g Hz resolution", series.size, resolution_hz)
    return welch_psd(series, sample_rate, segment_for_resolution(sample_rate, resolution_hz),
                     config["pipeline.overlap_fraction"])


@cli.command()
@click.argument("psd_in", type=click.Path(exists=True, dir_okay=False))
@click.option("--template", type=click.Path(exists=True, dir_okay=False), default=None,
              help="JSON fit template: components, floor, masks.")
@click.option("--dc", is_flag=True, help="Fit the dc-field pair with the configured split.")
@click.option("--from-hz", type=float, default=None)
@click.option("--to-hz", type=float, default=None)
@click.option("--resolution-hz", type=float, default=None,
              help="Welch resolution for time-series input [default: pipeline.wide_resolution_hz].")
@out_option
@_print_schema("fit")
@click.pass_context
@handle_errors
def fit(ctx, psd_in, template, dc, from_hz, to_hz, resolution_hz, out):
    """
    Fit a spectrum with a Lorentzian template or the dc model.

    PSD_IN is a PSD CSV (freq_hz, psd) or a time series written by ``simulate``
    (binary or CSV), which is Welch-averaged first.
    """
    if bool(template) == dc:
        raise InvalidInputError("give exactly one of --template and --dc")
    frame = _read_spectrum(psd_in, _config(ctx), resolution_hz)
    if from_hz is not None or to_hz is not None:
        low = frame["freq_hz"].iloc[0] if from_hz is None else from_hz
        high = frame["freq_hz"].iloc[-1] if to_hz is None else to_hz
        frame = frame[(frame["freq_hz"] >= low) & (frame["freq_hz"] <= high)].reset_index(drop=True)
    if dc:
        result = fit_dc_spectrum(frame, _config(ctx).dc_spec())
    else:
        with open(template, encoding="utf-8") as handle:
            try:
                spec = json.load(handle)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"template is not valid JSON: {exc}") from exc
        result = fit_lorentzians(FitProblem.from_template(frame, spec))
    _emit_json(result.to_record(), out)
    if result.flagged:
        sys.exit(EXIT_FIT_FLAGGED)


@cli.command()
@nu_option
@click.option("--seed", type=int, default=None)
@out_option
@_print_schema("pipeline")
@click.pass_context
@handle_errors
def pipeline(ctx, nu_ghz, seed, out):
    """simulate -> Welch -> estimate xi (JSON)."""
    config = _config(ctx, nu_ghz)
    if seed is not None:
        config = config.with_overrides({"simulation": {"seed": seed}})
    outcome = run_pipeline(config)
    _emit_json(outcome.report, out)
    if outcome.flagged:
        sys.exit(EXIT_FIT_FLAGGED)


@cli.command()
@click.option("--host", default="localhost", show_default=True)
@click.option("--port", type=int, default=5000, show_default=True)
@click.option("--debug", is_flag=True)
def serve(host, port, debug):
    """Run the JSON HTTP surface."""
    from spinnoise import create_app

    create_app().run(debug=debug, host=host, port=port)
