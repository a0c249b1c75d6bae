"""
Serialization of reports: CSV and JSON tables, trace events, trajectory dumps.

Output is byte-deterministic for fixed inputs: rows keep their given order, floats are
written with repr, and nothing time-dependent goes into data files.
"""
import contextlib
import csv
import io
import json
import logging
import sys
from typing import IO, Iterator, List, Optional, Sequence

import numpy as np

from .exceptions import DiTParallelException, ValidationError
from .simulate import Timeline
from .utils import format_number

__all__ = ['CSV', 'JSON', 'FORMATS', 'render_rows', 'render_json', 'chrome_trace', 'open_output',
           'write_text', 'save_trajectory', 'columns_of']

logger = logging.getLogger(__name__)

CSV = 'csv'
JSON = 'json'
FORMATS = (CSV, JSON)


def render_rows(rows, columns, fmt=CSV):
    # type: (Sequence[dict], Sequence[str], str) -> str
    if fmt == CSV:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_number(row.get(column)) for column in columns])
        return buffer.getvalue()
    if fmt == JSON:
        return render_json([{column: row.get(column) for column in columns} for row in rows])
    raise ValidationError('format shall be one of %s, got %r' % (', '.join(FORMATS), fmt))


def render_json(document):
    # type: (object) -> str
    return json.dumps(document, indent=2) + '\n'


def chrome_trace(timeline):
    # type: (Timeline) -> dict
    """
    The same events in Chrome trace-event form ('X' complete events), for chrome://tracing and Perfetto.
    """
    events = []
    for e in timeline.events:
        args = {}
        if e.patch is not None:
            args['patch'] = e.patch
        if e.timestep is not None:
            args['timestep'] = e.timestep
        events.append({'name': e.label, 'ph': 'X', 'ts': e.start_s * 1e6, 'dur': e.duration_s * 1e6,
                       'pid': e.device, 'tid': e.stream, 'args': args})
    return {'traceEvents': events, 'displayTimeUnit': 'ms'}


@contextlib.contextmanager
def open_output(path=None):
    # type: (Optional[str]) -> Iterator[IO[str]]
    """
    `path` opened for writing, or stdout when None or '-'.
    """
    if path is None or path == '-':
        yield sys.stdout
        return
    try:
        f = open(path, 'w', newline='')
    except OSError as e:
        raise DiTParallelException('cannot write %s: %s' % (path, e))
    with f:
        yield f


def write_text(text, path=None):
    # type: (str, Optional[str]) -> None
    with open_output(path) as f:
        try:
            f.write(text)
        except OSError as e:
            raise DiTParallelException('cannot write %s: %s' % (path or 'stdout', e))
    if path not in (None, '-'):
        logger.info('wrote %s', path)


def save_trajectory(path, trajectory):
    # type: (str, Sequence) -> None
    """
    Latents per step as one (steps + 1) x p x hs float64 array in .npy format.
    """
    if not trajectory:
        raise ValidationError('no trajectory was recorded')
    stacked = np.stack([state.x for state in trajectory])
    try:
        np.save(path, stacked)
    except OSError as e:
        raise DiTParallelException('cannot write %s: %s' % (path, e))
    logger.info('wrote %d latents to %s', len(trajectory), path)


def columns_of(rows):
    # type: (Sequence[dict]) -> List[str]
    columns = []  # type: List[str]
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    return columns
