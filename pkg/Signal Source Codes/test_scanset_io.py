import hashlib

import numpy as np
import pytest

from bayes_utils import PosteriorChain, PriorBox, ProposalSchedule, location_seed, run_chain
from calibrate import CalibrationResult, ParameterMap
from scanset_io import (MapLayer, RunConfig, config_keys, read_chain, read_chain_archive, read_config,
                        read_map, read_parameter_table, read_pgm, read_scan_set, write_chain,
                        write_chain_archive, write_config, write_map, write_parameter_table, write_pgm,
                        write_scan_set)
from signal_core import (AScan, InvalidArgumentError, MaterialParams, ScanSet, ScanSetParseError,
                         make_time_grid)


def _digest(path):
    with open(path, 'rb') as f:
        return hashlib.sha256(f.read()).hexdigest()


def _scan_set(nx=3, ny=2, skip=(), **kw):
    grid = make_time_grid(0.01, 50)
    rng = np.random.default_rng(5)
    scans = [AScan(grid=grid, samples=rng.standard_normal(50), index=(ix, iy))
             for iy in range(ny) for ix in range(nx) if (ix, iy) not in skip]
    return ScanSet(locations=scans, shape=(nx, ny), **kw)


def _chain(n=50, seed=7):
    return run_chain(None, None, PriorBox(), ProposalSchedule(), burn_in=10, n=n,
                     seed=location_seed(seed, (2, 1)), log_target=lambda b, c: -((b - 0.3) / 0.05) ** 2)


# ---------------------------------------------------------------------------
# scan sets

def test_scan_set_round_trip(tmp_path):
    scans = _scan_set(skip=[(1, 1)], t_ex=0.2, label='plate A', origin=(10.0, 5.0)).with_faulty([(2, 0)])
    path = tmp_path / 'a.scanset'
    write_scan_set(scans, str(path))
    back = read_scan_set(str(path))
    assert back.shape == (3, 2)
    assert back.get(1, 1) is None
    assert back.faulty == frozenset({(2, 0)})
    assert back.t_ex == 0.2 and back.label == 'plate A' and back.origin == (10.0, 5.0)
    for a, b in zip(scans, back):
        assert a.index == b.index
        assert np.array_equal(a.samples, b.samples)
    assert back.get(2, 1).location == (20.0, 10.0)

    again = tmp_path / 'b.scanset'
    write_scan_set(back, str(again))
    assert _digest(path) == _digest(again)


def test_scan_set_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_scan_set(str(tmp_path / 'nope.scanset'))


def _corrupt(tmp_path, transform):
    path = tmp_path / 'x.scanset'
    write_scan_set(_scan_set(), str(path))
    data = transform(path.read_bytes())
    path.write_bytes(data)
    return str(path)


def test_bad_magic_is_a_parse_error(tmp_path):
    path = _corrupt(tmp_path, lambda d: b'BOGUS' + d[10:])
    with pytest.raises(ScanSetParseError) as err:
        read_scan_set(path)
    assert err.value.line == 1


def test_truncated_payload_reports_offset(tmp_path):
    path = _corrupt(tmp_path, lambda d: d[:-8])
    with pytest.raises(ScanSetParseError) as err:
        read_scan_set(path)
    assert err.value.offset is not None


def test_unknown_header_key_reports_line(tmp_path):
    path = _corrupt(tmp_path, lambda d: d.replace(b'units = ', b'unit = ', 1))
    with pytest.raises(ScanSetParseError) as err:
        read_scan_set(path)
    assert err.value.line == 8


def test_bad_grid_value(tmp_path):
    path = _corrupt(tmp_path, lambda d: d.replace(b'grid = 3x2', b'grid = 3by2', 1))
    with pytest.raises(ScanSetParseError, match='grid'):
        read_scan_set(path)


def test_non_finite_sample(tmp_path):
    def poison(d):
        return d[:-8] + np.array([np.nan], dtype='<f8').tobytes()
    with pytest.raises(ScanSetParseError, match='non-finite'):
        read_scan_set(_corrupt(tmp_path, poison))


def test_multiline_label_rejected(tmp_path):
    with pytest.raises(InvalidArgumentError):
        write_scan_set(_scan_set(label='two\nlines'), str(tmp_path / 'l.scanset'))


# ---------------------------------------------------------------------------
# maps

def _layer():
    values = np.array([[0.1, 0.2, np.nan], [0.3, 0.4, 0.5]])
    return MapLayer.from_grid(values, 'b', '1/us', resolution=(5.0, 5.0), origin=(0.0, 10.0))


def test_map_csv_round_trip(tmp_path):
    path = tmp_path / 'b.csv'
    write_map(_layer(), str(path))
    back = read_map(str(path))
    assert back.name == 'b' and back.unit == '1/us'
    assert back.origin == (0.0, 10.0) and back.resolution == (5.0, 5.0)
    assert np.array_equal(np.isnan(back.values), np.isnan(_layer().values))
    assert np.nanmax(np.abs(back.values - _layer().values)) == 0.0
    again = tmp_path / 'b2.csv'
    write_map(back, str(again))
    assert _digest(path) == _digest(again)


def test_map_csv_header():
    frame = _layer().to_frame()
    assert list(frame.columns) == [0.0, 5.0, 10.0]
    assert list(frame.index) == [10.0, 15.0]


def test_write_map_needs_a_layer_name(tmp_path):
    pmap = ParameterMap(shape=(1, 1), results={(0, 0): None})
    with pytest.raises(InvalidArgumentError):
        write_map(pmap, str(tmp_path / 'm.csv'))
    with pytest.raises(InvalidArgumentError):
        write_map(_layer(), str(tmp_path / 'm.txt'), format='tiff')


def test_pgm_scaling(tmp_path):
    path = tmp_path / 'b.pgm'
    write_pgm(_layer(), str(path))
    pixels, vmin, vmax = read_pgm(str(path))
    assert pixels.shape == (2, 3)
    assert pixels[0, 0] == 0 and pixels[1, 2] == 255
    assert pixels[0, 2] == 0            # missing cell
    assert vmin == 0.1 and vmax == 0.5
    with open(path, 'rb') as f:
        assert f.read(2) == b'P5'


def test_pgm_constant_map_is_mid_gray(tmp_path):
    layer = MapLayer.from_grid(np.full((2, 2), 0.3), 'c', 'L/us')
    path = tmp_path / 'c.pgm'
    write_pgm(layer, str(path))
    pixels, _, _ = read_pgm(str(path))
    assert np.all(pixels == 128)


def test_pgm_explicit_range(tmp_path):
    path = tmp_path / 'r.pgm'
    write_map(_layer(), str(path), format='pgm', value_range=(0.0, 1.0))
    pixels, vmin, vmax = read_pgm(str(path))
    assert (vmin, vmax) == (0.0, 1.0)
    assert pixels[1, 2] == 128


# ---------------------------------------------------------------------------
# chains

def test_chain_csv_round_trip(tmp_path):
    chain = _chain()
    path = tmp_path / 'chain.csv'
    write_chain(chain, str(path))
    record = read_chain(str(path))
    back = PosteriorChain.from_record(record)
    assert np.array_equal(back.samples, chain.samples)
    assert np.array_equal(back.log_posterior, chain.log_posterior)
    assert back.seed == (7, 2, 1)
    assert back.accepted == chain.accepted and back.burn_in == 10
    assert back.prior == chain.prior and back.schedule == chain.schedule
    again = tmp_path / 'chain2.csv'
    write_chain(back, str(again))
    assert _digest(path) == _digest(again)


def test_chain_csv_missing_header(tmp_path):
    path = tmp_path / 'bad.csv'
    path.write_text("b,c,log_posterior\n0.1,0.2,0.0\n")
    with pytest.raises(ScanSetParseError, match='seed'):
        read_chain(str(path))


def test_chain_archive_round_trip(tmp_path):
    chains = {(0, 0): _chain(seed=1), (1, 0): _chain(seed=2), (0, 1): _chain(seed=3)}
    path = tmp_path / 'chains.h5'
    write_chain_archive(chains, str(path))
    records = read_chain_archive(str(path))
    assert set(records) == set(chains)
    for index, chain in chains.items():
        assert np.array_equal(records[index].samples, chain.samples)
        assert records[index].accepted == chain.accepted


# ---------------------------------------------------------------------------
# parameter tables

def test_parameter_table_round_trip(tmp_path):
    results = {(0, 0): CalibrationResult(MaterialParams(0.12, 0.224), 0.01, 40, True),
               (1, 0): None,
               (0, 1): CalibrationResult(MaterialParams(0.27, 0.214), 0.02, 500, False),
               (1, 1): CalibrationResult(MaterialParams(0.13, 0.2235), 0.015, 38, True)}
    pmap = ParameterMap(shape=(2, 2), results=results, resolution=(1.0, 1.0), label='detail scan')
    path = tmp_path / 'cmap.csv'
    write_parameter_table(pmap, str(path))
    table = read_parameter_table(str(path))
    assert table.shape == (2, 2) and table.resolution == (1.0, 1.0) and table.label == 'detail scan'
    back = ParameterMap.from_table(table)
    assert back.results[(1, 0)] is None
    assert back.results[(0, 1)].b == 0.27 and not back.results[(0, 1)].converged
    assert np.array_equal(np.isnan(back.values('c')), np.isnan(pmap.values('c')))
    again = tmp_path / 'cmap2.csv'
    write_parameter_table(back, str(again))
    assert _digest(path) == _digest(again)


def test_parameter_table_missing_columns(tmp_path):
    path = tmp_path / 't.csv'
    path.write_text("ix,iy,b\n0,0,0.1\n")
    with pytest.raises(ScanSetParseError, match='missing columns'):
        read_parameter_table(str(path))


# ---------------------------------------------------------------------------
# run configuration

def test_config_round_trip(tmp_path):
    config = RunConfig(noise_sigma=0.01, plate_shape=(5, 4), patch=(1, 3, 1, 2), root_seed=11)
    path = tmp_path / 'run.cfg'
    write_config(config, str(path))
    assert read_config(str(path)) == config
    assert set(config_keys()) >= {'dt_us', 'box', 'patch', 'workers'}


def test_config_overrides_and_none_patch(tmp_path):
    path = tmp_path / 'run.cfg'
    path.write_text("# small plate\n\nplate_shape = 3, 3\npatch = none\nnoise_sigma = 0.02  # noisy\n")
    config = read_config(str(path))
    assert config.plate_shape == (3, 3)
    assert config.patch is None
    assert config.noise_sigma == 0.02
    assert config.with_overrides(noise_sigma=None, workers=3).noise_sigma == 0.02
    assert config.with_overrides(workers=3).workers == 3


@pytest.mark.parametrize('text, line', [
    ("dt_us = 0.01\nfoo = 1\n", 2),
    ("\n\nbox = 0.1, 0.2\n", 3),
    ("burn_in 100\n", 1),
    ("dt_us = fast\n", 1),
])
def test_config_errors_carry_line(tmp_path, text, line):
    path = tmp_path / 'bad.cfg'
    path.write_text(text)
    with pytest.raises(ScanSetParseError) as err:
        read_config(str(path))
    assert err.value.line == line


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        RunConfig(quantile=1.0)
    with pytest.raises(InvalidArgumentError):
        RunConfig(box=(0.6, 0.05, 0.2, 0.25))
