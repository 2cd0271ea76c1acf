"""
File formats of the toolkit.

- scan sets: text header + little-endian float64 sample blocks (row-major cells)
- maps: CSV matrix (rows y, columns x, header with quantity and unit) and
  8-bit PGM rendered with Pillow
- chains: CSV with '#' header lines, or one HDF5 archive with a group per cell
- parameter tables: one row per grid cell
- run configuration: key = value text
"""

import io
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import h5py
import numpy as np
import pandas as pd
from PIL import Image

from signal_core import (AScan, DT_US, InvalidArgumentError, N_SAMPLES, PLATE_DZ,  # type: ignore
                         RESOLUTION_MM, ScanSet, ScanSetParseError, T_EX_US, TimeGrid)
from preprocess_utils import (ECHO_JUMP_THRESHOLD, EXCITATION_JUMP_THRESHOLD,  # type: ignore
                              SMOOTHING_CUTOFF_MHZ, TUKEY_TAPER_FRACTION)

SCANSET_MAGIC = 'ASCANSET 1'
END_HEADER = 'end_header'
SAMPLE_DTYPE = np.dtype('<f8')
HEADER_KEYS = ('dt_us', 'n_samples', 't_ex_us', 'grid', 'resolution_mm', 'origin_mm',
               'units', 'label', 'mask', 'faulty')
REQUIRED_KEYS = ('dt_us', 'n_samples', 'grid')


def _require_file(path: str) -> None:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such file: {path}")


def _fmt(value: float) -> str:
    return repr(float(value))


def _two(values: tuple) -> tuple:
    if len(values) != 2:
        raise ValueError(f"expected two values, got {len(values)}")
    return values


def _cells(text: str) -> List[Tuple[int, int]]:
    if text.strip().lower() in ('', 'none'):
        return []
    return [tuple(int(v) for v in item.split(',')) for item in text.split(';')]


# ---------------------------------------------------------------------------
# Scan sets
# ---------------------------------------------------------------------------

def write_scan_set(scans: ScanSet, path: str) -> str:
    nx, ny = scans.shape
    if '\n' in scans.label:
        raise InvalidArgumentError("scan-set label must be a single line")
    present = np.array([[scans.get(ix, iy) is not None for ix in range(nx)] for iy in range(ny)])
    faulty = sorted(scans.faulty, key=lambda i: (i[1], i[0]))
    lines = [
        SCANSET_MAGIC,
        f"dt_us = {_fmt(scans.grid.dt)}",
        f"n_samples = {scans.grid.n_samples}",
        f"t_ex_us = {'none' if scans.t_ex is None else _fmt(scans.t_ex)}",
        f"grid = {nx}x{ny}",
        f"resolution_mm = {_fmt(scans.resolution[0])},{_fmt(scans.resolution[1])}",
        f"origin_mm = {_fmt(scans.origin[0])},{_fmt(scans.origin[1])}",
        f"units = {scans.units}",
        f"label = {scans.label}",
        f"mask = {''.join('1' if v else '0' for v in present.ravel())}",
        f"faulty = {';'.join(f'{ix},{iy}' for ix, iy in faulty) or 'none'}",
        END_HEADER,
    ]
    with open(path, 'wb') as f:
        f.write(('\n'.join(lines) + '\n').encode('utf-8'))
        for scan in scans.locations:
            f.write(np.asarray(scan.samples, dtype=SAMPLE_DTYPE).tobytes())
    return path


def read_scan_set(path: str) -> ScanSet:
    """Parse a scan-set file; malformed content raises ScanSetParseError with line / byte offset."""
    _require_file(path)
    with open(path, 'rb') as f:
        data = f.read()

    header: Dict[str, str] = {}
    pos = 0
    line_no = 0
    while True:
        end = data.find(b'\n', pos)
        if end < 0:
            raise ScanSetParseError(f"header not terminated by '{END_HEADER}'", line=line_no + 1, offset=pos)
        line_no += 1
        try:
            line = data[pos:end].decode('utf-8').strip()
        except UnicodeDecodeError:
            raise ScanSetParseError("header line is not UTF-8 text", line=line_no, offset=pos)
        pos = end + 1
        if line_no == 1:
            if line != SCANSET_MAGIC:
                raise ScanSetParseError(f"bad magic '{line[:20]}', expected '{SCANSET_MAGIC}'", line=1, offset=0)
            continue
        if line == END_HEADER:
            break
        if not line or line.startswith('#'):
            continue
        key, sep, value = line.partition('=')
        key, value = key.strip(), value.strip()
        if not sep or key not in HEADER_KEYS:
            raise ScanSetParseError(f"unknown header entry '{line[:40]}'", line=line_no)
        if key in header:
            raise ScanSetParseError(f"duplicate header key '{key}'", line=line_no)
        header[key] = value
        header[f'_line_{key}'] = str(line_no)

    for key in REQUIRED_KEYS:
        if key not in header:
            raise ScanSetParseError(f"missing header key '{key}'", line=line_no)

    def parse(key, convert):
        try:
            return convert(header[key])
        except (ValueError, InvalidArgumentError) as e:
            raise ScanSetParseError(f"bad value for '{key}': {e}", line=int(header[f'_line_{key}']))

    dt = parse('dt_us', float)
    n_samples = parse('n_samples', int)
    nx, ny = parse('grid', lambda v: _two(tuple(int(p) for p in v.lower().split('x'))))
    resolution = parse('resolution_mm', lambda v: _two(tuple(float(p) for p in v.split(',')))) \
        if 'resolution_mm' in header else RESOLUTION_MM
    origin = parse('origin_mm', lambda v: _two(tuple(float(p) for p in v.split(',')))) \
        if 'origin_mm' in header else (0.0, 0.0)
    t_ex = parse('t_ex_us', lambda v: None if v.lower() == 'none' else float(v)) if 't_ex_us' in header else None
    faulty = parse('faulty', _cells) if 'faulty' in header else []
    try:
        grid = TimeGrid(dt=dt, n_samples=n_samples)
    except InvalidArgumentError as e:
        raise ScanSetParseError(str(e), line=int(header['_line_n_samples']))
    if nx < 1 or ny < 1:
        raise ScanSetParseError(f"grid must be positive, got {nx}x{ny}", line=int(header['_line_grid']))
    mask_text = header.get('mask', '1' * (nx * ny))
    if len(mask_text) != nx * ny or set(mask_text) - {'0', '1'}:
        raise ScanSetParseError(f"mask must hold {nx * ny} digits 0/1", line=int(header.get('_line_mask', line_no)))
    present = [(ix, iy) for iy in range(ny) for ix in range(nx) if mask_text[iy * nx + ix] == '1']

    block = n_samples * SAMPLE_DTYPE.itemsize
    expected = len(present) * block
    if len(data) - pos != expected:
        raise ScanSetParseError(
            f"payload has {len(data) - pos} bytes, expected {expected} for {len(present)} locations",
            offset=pos)
    samples = np.frombuffer(data, dtype=SAMPLE_DTYPE, offset=pos).reshape(len(present), n_samples)
    bad = np.flatnonzero(~np.isfinite(samples))
    if bad.size:
        raise ScanSetParseError("non-finite sample value", offset=pos + int(bad[0]) * SAMPLE_DTYPE.itemsize)

    scans = [AScan(grid=grid, samples=samples[k].astype(float), index=idx,
                   location=(origin[0] + idx[0] * resolution[0], origin[1] + idx[1] * resolution[1]))
             for k, idx in enumerate(present)]
    try:
        return ScanSet(locations=scans, resolution=resolution, label=header.get('label', ''), shape=(nx, ny),
                       origin=origin, t_ex=t_ex, units=header.get('units', 'normalized'), faulty=frozenset(faulty))
    except InvalidArgumentError as e:
        raise ScanSetParseError(str(e))


# ---------------------------------------------------------------------------
# Maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MapLayer:
    values: np.ndarray    # (ny, nx), NaN where missing
    name: str
    unit: str
    resolution: Tuple[float, float] = RESOLUTION_MM
    origin: Tuple[float, float] = (0.0, 0.0)

    @classmethod
    def from_grid(cls, values, name: str, unit: str, resolution=RESOLUTION_MM, origin=(0.0, 0.0)) -> 'MapLayer':
        values = np.array(values, dtype=float)
        if values.ndim != 2 or values.size == 0:
            raise InvalidArgumentError(f"map layer must be a nonempty 2-D array, got shape {values.shape}")
        return cls(values=values, name=name, unit=unit, resolution=tuple(resolution), origin=tuple(origin))

    @property
    def x_mm(self) -> np.ndarray:
        return self.origin[0] + self.resolution[0] * np.arange(self.values.shape[1])

    @property
    def y_mm(self) -> np.ndarray:
        return self.origin[1] + self.resolution[1] * np.arange(self.values.shape[0])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, index=pd.Index(self.y_mm), columns=self.x_mm)


def _layer_of(obj, name: Optional[str]) -> MapLayer:
    if isinstance(obj, MapLayer):
        return obj
    if name is None:
        raise InvalidArgumentError("a layer name is required for a map with several layers")
    return obj.layer(name)


def write_map(obj, path: str, format: str = 'csv', name: Optional[str] = None,
              value_range: Optional[Tuple[float, float]] = None) -> str:
    """Write a map layer (or the named layer of a parameter / probability map) as CSV or PGM."""
    layer = _layer_of(obj, name)
    if format == 'csv':
        layer.to_frame().to_csv(path, index_label=f"{layer.name} [{layer.unit}] y_mm/x_mm", na_rep='')
    elif format == 'pgm':
        write_pgm(layer, path, value_range)
    else:
        raise InvalidArgumentError(f"unknown map format '{format}', expected csv or pgm")
    return path


def _axis_step(axis: np.ndarray, default: float) -> float:
    return float(axis[1] - axis[0]) if axis.size > 1 else default


def read_map(path: str) -> MapLayer:
    """CSV layer written by write_map."""
    _require_file(path)
    try:
        frame = pd.read_csv(path, index_col=0, float_precision='round_trip')
        x = np.array([float(v) for v in frame.columns])
        y = frame.index.to_numpy(dtype=float)
        values = frame.to_numpy(dtype=float)
    except (ValueError, pd.errors.ParserError) as e:
        raise ScanSetParseError(f"malformed map CSV {path}: {e}")
    label = str(frame.index.name or '')
    name, _, rest = label.partition(' [')
    unit = rest.split(']')[0] if rest else ''
    return MapLayer.from_grid(values, name, unit,
                              resolution=(_axis_step(x, RESOLUTION_MM[0]), _axis_step(y, RESOLUTION_MM[1])),
                              origin=(float(x[0]), float(y[0])))


def write_pgm(layer: MapLayer, path: str, value_range: Optional[Tuple[float, float]] = None) -> str:
    """
    8-bit grayscale image, row 0 = first y row; min -> 0, max -> 255, missing -> 0.
    The value range is stated in a header comment.
    """
    values = layer.values
    finite = np.isfinite(values)
    if value_range is None:
        vmin = float(np.min(values[finite])) if finite.any() else 0.0
        vmax = float(np.max(values[finite])) if finite.any() else 0.0
    else:
        vmin, vmax = map(float, value_range)
    if vmax > vmin:
        scaled = np.clip((values - vmin) / (vmax - vmin), 0.0, 1.0) * 255.0
    else:
        scaled = np.full(values.shape, 128.0)
    gray = np.where(finite, np.rint(np.nan_to_num(scaled)), 0).astype(np.uint8)

    buffer = io.BytesIO()
    Image.fromarray(gray).save(buffer, format='PPM')
    magic, rest = buffer.getvalue().split(b'\n', 1)
    comment = f"# {layer.name} [{layer.unit}] min={_fmt(vmin)} max={_fmt(vmax)}\n".encode('utf-8')
    with open(path, 'wb') as f:
        f.write(magic + b'\n' + comment + rest)
    return path


def read_pgm(path: str) -> Tuple[np.ndarray, float, float]:
    """Pixels plus the (min, max) stated in the header comment."""
    _require_file(path)
    with Image.open(path) as img:
        pixels = np.array(img.convert('L'))
    vmin = vmax = float('nan')
    with open(path, 'rb') as f:
        for raw in f.read(512).split(b'\n')[:4]:
            if raw.startswith(b'#'):
                for token in raw.decode('utf-8', 'replace').split():
                    if token.startswith('min='):
                        vmin = float(token[4:])
                    elif token.startswith('max='):
                        vmax = float(token[4:])
    return pixels, vmin, vmax


# ---------------------------------------------------------------------------
# Chains
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ChainRecord:
    samples: np.ndarray
    log_posterior: np.ndarray
    accepted: int
    burn_in: int
    seed: object
    box: Tuple[float, float, float, float]
    schedule: Tuple[float, float, int]
    diagnostics: Tuple[str, ...] = ()


def _chain_meta(chain) -> Dict[str, str]:
    seed = chain.seed
    seed_text = 'none' if seed is None else ','.join(str(int(s)) for s in np.atleast_1d(seed))
    s = chain.schedule
    return {
        'seed': seed_text,
        'box': ','.join(_fmt(v) for v in chain.prior.as_tuple()),
        'schedule': f"{_fmt(s.eps_early)},{_fmt(s.eps_late)},{int(s.switch_step)}",
        'burn_in': str(int(chain.burn_in)),
        'accepted': str(int(chain.accepted)),
        'diagnostics': ' | '.join(chain.diagnostics),
    }


def _seed_from_text(text: str):
    if text in ('', 'none'):
        return None
    parts = tuple(int(p) for p in text.split(','))
    return parts[0] if len(parts) == 1 else parts


def _record_from_meta(meta: Dict[str, str], samples, log_posterior) -> ChainRecord:
    box = tuple(float(v) for v in meta['box'].split(','))
    eps_early, eps_late, switch = meta['schedule'].split(',')
    diagnostics = tuple(d for d in meta.get('diagnostics', '').split(' | ') if d)
    return ChainRecord(samples=np.asarray(samples, dtype=float), log_posterior=np.asarray(log_posterior, dtype=float),
                       accepted=int(meta['accepted']), burn_in=int(meta['burn_in']),
                       seed=_seed_from_text(meta['seed']), box=box,
                       schedule=(float(eps_early), float(eps_late), int(switch)), diagnostics=diagnostics)


def write_chain(chain, path: str) -> str:
    """Samples (b, c, log posterior) with seed, box, schedule, burn-in and accepted count in '#' lines."""
    frame = pd.DataFrame({'b': chain.samples[:, 0], 'c': chain.samples[:, 1],
                          'log_posterior': np.asarray(chain.log_posterior, dtype=float)})
    with open(path, 'w', newline='') as f:
        for key, value in _chain_meta(chain).items():
            f.write(f"# {key}={value}\n")
        frame.to_csv(f, index=False)
    return path


def read_chain(path: str) -> ChainRecord:
    _require_file(path)
    meta: Dict[str, str] = {}
    body = []
    with open(path, 'r') as f:
        for line_no, line in enumerate(f, start=1):
            if line.startswith('#'):
                key, sep, value = line[1:].strip().partition('=')
                if not sep:
                    raise ScanSetParseError(f"bad chain header line '{line.strip()}'", line=line_no)
                meta[key.strip()] = value.strip()
            else:
                body.append(line)
    for key in ('seed', 'box', 'schedule', 'burn_in', 'accepted'):
        if key not in meta:
            raise ScanSetParseError(f"chain file {path} lacks '# {key}=' header")
    try:
        frame = pd.read_csv(io.StringIO(''.join(body)), float_precision='round_trip')
        return _record_from_meta(meta, frame[['b', 'c']].to_numpy(dtype=float),
                                 frame['log_posterior'].to_numpy(dtype=float))
    except (KeyError, ValueError, pd.errors.ParserError) as e:
        raise ScanSetParseError(f"malformed chain file {path}: {e}")


def write_chain_archive(chains: Dict[Tuple[int, int], object], path: str) -> str:
    """All chains of a grid in one HDF5 file, group 'cell_<ix>_<iy>' per location."""
    with h5py.File(path, 'w') as f:
        for (ix, iy) in sorted(chains, key=lambda i: (i[1], i[0])):
            chain = chains[(ix, iy)]
            group = f.create_group(f"cell_{ix}_{iy}")
            group.create_dataset('samples', data=np.asarray(chain.samples, dtype=float))
            group.create_dataset('log_posterior', data=np.asarray(chain.log_posterior, dtype=float))
            for key, value in _chain_meta(chain).items():
                group.attrs[key] = value
            group.attrs['index'] = np.array([ix, iy])
    return path


def read_chain_archive(path: str) -> Dict[Tuple[int, int], ChainRecord]:
    _require_file(path)
    records = {}
    with h5py.File(path, 'r') as f:
        for name, group in f.items():
            if not isinstance(group, h5py.Group):
                continue
            ix, iy = (int(v) for v in group.attrs['index'])
            meta = {key: str(group.attrs[key]) for key in group.attrs if key != 'index'}
            records[(ix, iy)] = _record_from_meta(meta, group['samples'][()], group['log_posterior'][()])
    return records


# ---------------------------------------------------------------------------
# Per-cell parameter tables
# ---------------------------------------------------------------------------

TABLE_COLUMNS = ('ix', 'iy', 'x_mm', 'y_mm', 'b', 'c', 'misfit', 'iterations', 'converged')


@dataclass(frozen=True, eq=False)
class ParameterTable:
    frame: pd.DataFrame
    shape: Tuple[int, int]
    resolution: Tuple[float, float] = RESOLUTION_MM
    origin: Tuple[float, float] = (0.0, 0.0)
    label: str = ''


def write_parameter_table(pmap, path: str) -> str:
    """One row per grid cell of a calibration map; empty fields where a cell has no result."""
    nx, ny = pmap.shape
    rows = []
    for iy in range(ny):
        for ix in range(nx):
            res = pmap.results.get((ix, iy))
            rows.append({
                'ix': ix, 'iy': iy,
                'x_mm': pmap.origin[0] + ix * pmap.resolution[0],
                'y_mm': pmap.origin[1] + iy * pmap.resolution[1],
                'b': res.b if res is not None else np.nan,
                'c': res.c if res is not None else np.nan,
                'misfit': res.misfit if res is not None else np.nan,
                'iterations': res.iterations if res is not None else -1,
                'converged': int(res.converged) if res is not None else -1,
            })
    with open(path, 'w', newline='') as f:
        f.write(f"# grid={nx}x{ny}\n")
        f.write(f"# resolution_mm={_fmt(pmap.resolution[0])},{_fmt(pmap.resolution[1])}\n")
        f.write(f"# origin_mm={_fmt(pmap.origin[0])},{_fmt(pmap.origin[1])}\n")
        f.write(f"# label={pmap.label}\n")
        pd.DataFrame(rows, columns=list(TABLE_COLUMNS)).to_csv(f, index=False, na_rep='')
    return path


def read_parameter_table(path: str) -> ParameterTable:
    _require_file(path)
    meta: Dict[str, str] = {}
    with open(path, 'r') as f:
        text = f.read()
    body = []
    for line_no, line in enumerate(text.splitlines(keepends=True), start=1):
        if line.startswith('#'):
            key, sep, value = line[1:].strip().partition('=')
            if not sep:
                raise ScanSetParseError(f"bad table header line '{line.strip()}'", line=line_no)
            meta[key.strip()] = value.strip()
        else:
            body.append(line)
    try:
        frame = pd.read_csv(io.StringIO(''.join(body)), float_precision='round_trip')
        missing = set(TABLE_COLUMNS) - set(frame.columns)
        if missing:
            raise ValueError(f"missing columns {sorted(missing)}")
        if 'grid' in meta:
            nx, ny = (int(v) for v in meta['grid'].split('x'))
        else:
            nx, ny = int(frame['ix'].max()) + 1, int(frame['iy'].max()) + 1
        resolution = tuple(float(v) for v in meta['resolution_mm'].split(',')) \
            if 'resolution_mm' in meta else RESOLUTION_MM
        origin = tuple(float(v) for v in meta['origin_mm'].split(',')) if 'origin_mm' in meta else (0.0, 0.0)
    except (ValueError, pd.errors.ParserError) as e:
        raise ScanSetParseError(f"malformed parameter table {path}: {e}")
    return ParameterTable(frame=frame, shape=(nx, ny), resolution=resolution, origin=origin,
                          label=meta.get('label', ''))


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    # oscilloscope and plate
    dt_us: float = DT_US
    n_samples: int = N_SAMPLES
    t_ex_us: float = T_EX_US
    plate_dz: float = PLATE_DZ
    resolution_mm: Tuple[float, float] = RESOLUTION_MM
    # preprocessing
    smoothing_cutoff_mhz: float = SMOOTHING_CUTOFF_MHZ
    tukey_taper: float = TUKEY_TAPER_FRACTION
    echo_jump: float = ECHO_JUMP_THRESHOLD
    excitation_jump: float = EXCITATION_JUMP_THRESHOLD
    # estimation
    box: Tuple[float, float, float, float] = (0.05, 0.6, 0.2, 0.25)
    start: Tuple[float, float] = (0.2, 0.22)
    echo_window: Tuple[float, float] = (11.8, 22.0)
    eps_early: float = 0.02
    eps_late: float = 0.001
    switch_step: int = 100
    burn_in: int = 100
    chain_length: int = 1000
    root_seed: int = 0
    quantile: float = 0.99
    rejection_level: float = 0.01
    # synthetic plate
    pulse_center_mhz: float = 1.0
    pulse_cycles: int = 4
    pulse_start_us: float = 4.0
    pulse_amplitude: float = 1.0
    plate_shape: Tuple[int, int] = (21, 19)
    base: Tuple[float, float] = (0.12, 0.224)
    patch: Optional[Tuple[int, int, int, int]] = (8, 12, 7, 11)
    delta_b: float = 0.15
    delta_c: float = -0.01
    noise_sigma: float = 0.0
    param_jitter: Tuple[float, float] = (0.0, 0.0)
    synthetic_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        checks = [
            (self.dt_us > 0, "dt_us must be > 0"),
            (self.n_samples >= 2, "n_samples must be >= 2"),
            (0 < self.t_ex_us <= self.dt_us * self.n_samples, "t_ex_us must lie inside the record"),
            (self.smoothing_cutoff_mhz > 0, "smoothing_cutoff_mhz must be > 0"),
            (0 < self.tukey_taper <= 1, "tukey_taper must lie in (0, 1]"),
            (self.echo_window[0] < self.echo_window[1], "echo_window must be increasing"),
            (self.box[0] < self.box[1] and self.box[2] < self.box[3], "box must be nonempty"),
            (0.5 <= self.quantile < 1, "quantile must lie in [0.5, 1)"),
            (0 < self.rejection_level < 1, "rejection_level must lie in (0, 1)"),
            (self.eps_early > 0 and self.eps_late > 0, "proposal scales must be > 0"),
            (self.burn_in >= 0 and self.chain_length >= 1, "burn_in >= 0 and chain_length >= 1 required"),
            (self.noise_sigma >= 0, "noise_sigma must be >= 0"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise InvalidArgumentError(f"config: {message}")

    def with_overrides(self, **overrides) -> 'RunConfig':
        """Copy with the non-None overrides applied."""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


_CONFIG_DEFAULTS = RunConfig()


def _config_value(name: str, text: str):
    default = getattr(_CONFIG_DEFAULTS, name)
    if text.lower() == 'none':
        if name != 'patch':
            raise ValueError(f"'{name}' cannot be none")
        return None
    if name == 'patch' or isinstance(default, tuple):
        parts = [p.strip() for p in text.split(',')]
        template = default if default is not None else (0, 0, 0, 0)
        if len(parts) != len(template):
            raise ValueError(f"expected {len(template)} comma-separated values")
        return tuple(type(t)(float(p)) if isinstance(t, int) else float(p) for t, p in zip(template, parts))
    if isinstance(default, int):
        return int(text)
    return float(text)


def _config_text(value) -> str:
    if value is None:
        return 'none'
    if isinstance(value, tuple):
        return ','.join(_config_text(v) for v in value)
    if isinstance(value, float):
        return _fmt(value)
    return str(value)


def write_config(config: RunConfig, path: str) -> str:
    with open(path, 'w') as f:
        f.write("# A-scan toolkit run configuration\n")
        for key, value in asdict(config).items():
            f.write(f"{key} = {_config_text(value)}\n")
    return path


def read_config(path: str, base: Optional[RunConfig] = None) -> RunConfig:
    """key = value lines over `base` (default RunConfig()); '#' comments and blank lines ignored."""
    _require_file(path)
    known = {f.name for f in fields(RunConfig)}
    values = {}
    with open(path, 'r') as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            key, sep, text = line.partition('=')
            key, text = key.strip(), text.strip()
            if not sep:
                raise ScanSetParseError(f"expected 'key = value', got '{line}'", line=line_no)
            if key not in known:
                raise ScanSetParseError(f"unknown config key '{key}'", line=line_no)
            try:
                values[key] = _config_value(key, text)
            except ValueError as e:
                raise ScanSetParseError(f"bad value for '{key}': {e}", line=line_no)
    try:
        return replace(base or RunConfig(), **values)
    except InvalidArgumentError as e:
        raise ScanSetParseError(str(e))


def config_keys() -> Sequence[str]:
    return [f.name for f in fields(RunConfig)]


__all__ = ['MapLayer', 'ChainRecord', 'ParameterTable', 'RunConfig', 'read_scan_set', 'write_scan_set',
           'write_map', 'read_map', 'write_pgm', 'read_pgm', 'write_chain', 'read_chain',
           'write_chain_archive', 'read_chain_archive', 'write_parameter_table', 'read_parameter_table',
           'write_config', 'read_config', 'config_keys']
