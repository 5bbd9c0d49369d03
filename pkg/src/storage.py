"""Binary and text persistence: replay buffers, network checkpoints, CSV and JSON results."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from src.datasets import ReplayBuffer
from src.envs import TransitionBatch
from src.numkit import MlpNetwork

BUFFER_MAGIC = b"RBUF"
NETWORK_MAGIC = b"NETS"
FORMAT_VERSION = 1


class SchemaError(ValueError):
    """A persisted file does not match the expected layout."""


# ── Shared header framing ────────────────────────────────────────────────────

def _write_header(f: Any, magic: bytes, header: dict) -> None:
    blob = json.dumps(header, sort_keys=True).encode('utf-8')
    f.write(magic)
    f.write(struct.pack('<HI', FORMAT_VERSION, len(blob)))
    f.write(blob)


def _read_header(f: Any, magic: bytes, path: Path) -> dict:
    got = f.read(4)
    if got != magic:
        raise SchemaError(f"{path}: bad magic {got!r}, expected {magic!r}")
    fixed = f.read(6)
    if len(fixed) != 6:
        raise SchemaError(f"{path}: truncated header")
    version, length = struct.unpack('<HI', fixed)
    if version != FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported format version {version}")
    blob = f.read(length)
    if len(blob) != length:
        raise SchemaError(f"{path}: truncated header")
    try:
        return json.loads(blob.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"{path}: unreadable header ({exc})") from exc


def _require(header: dict, keys: Iterable[str], path: Path) -> None:
    missing = [k for k in keys if k not in header]
    if missing:
        raise SchemaError(f"{path}: header missing {missing}")


# ── Replay buffers ───────────────────────────────────────────────────────────

_BUFFER_KEYS = ('tag', 'state_dim', 'action_dim', 'capacity', 'insertions', 'count')


def _record_width(state_dim: int, action_dim: int) -> int:
    # s, a, r, s', terminal, r_raw, u
    return 2 * state_dim + action_dim + 4


def save_buffer(buffer: ReplayBuffer, path: Path) -> None:
    """
    Write *buffer* as a header followed by length-prefixed float64 records.

    Records are written oldest first; absent r_raw/u are stored as NaN.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    batch = buffer.view()
    width = _record_width(buffer.state_dim, buffer.action_dim)
    rows = np.column_stack([
        batch.states, batch.actions, batch.rewards, batch.next_states,
        batch.terminals.astype(np.float64), batch.raw_rewards, batch.uncertainties,
    ]) if len(batch) else np.empty((0, width))
    header = {
        'tag': buffer.tag,
        'state_dim': buffer.state_dim,
        'action_dim': buffer.action_dim,
        'capacity': buffer.capacity,
        'insertions': buffer.insertions,
        'count': len(batch),
        'has_model_fields': buffer.is_model_buffer,
    }
    prefix = struct.pack('<I', width)
    with open(path, 'wb') as f:
        _write_header(f, BUFFER_MAGIC, header)
        for row in rows.astype('<f8'):
            f.write(prefix)
            f.write(row.tobytes())


def _rows_to_batch(rows: np.ndarray, sd: int, ad: int, model_fields: bool) -> TransitionBatch:
    c = np.cumsum([0, sd, ad, 1, sd, 1, 1, 1])
    return TransitionBatch(
        states=rows[:, c[0]:c[1]],
        actions=rows[:, c[1]:c[2]],
        rewards=rows[:, c[2]],
        next_states=rows[:, c[3]:c[4]],
        terminals=rows[:, c[4]] != 0.0,
        raw_rewards=rows[:, c[5]] if model_fields else None,
        uncertainties=rows[:, c[6]] if model_fields else None,
    )


def load_buffer(path: Path) -> ReplayBuffer:
    """Read a buffer written by save_buffer; contents, order and counters are restored."""
    path = Path(path)
    with open(path, 'rb') as f:
        header = _read_header(f, BUFFER_MAGIC, path)
        _require(header, _BUFFER_KEYS, path)
        sd, ad = int(header['state_dim']), int(header['action_dim'])
        width = _record_width(sd, ad)
        rows = np.empty((int(header['count']), width))
        for i in range(len(rows)):
            prefix = f.read(4)
            if len(prefix) != 4:
                raise SchemaError(f"{path}: expected {len(rows)} records, found {i}")
            (n_values,) = struct.unpack('<I', prefix)
            if n_values != width:
                raise SchemaError(f"{path}: record {i} has {n_values} values, expected {width}")
            blob = f.read(8 * width)
            if len(blob) != 8 * width:
                raise SchemaError(f"{path}: record {i} truncated")
            rows[i] = np.frombuffer(blob, dtype='<f8')
    try:
        buffer = ReplayBuffer(sd, ad, header['capacity'], header['tag'])
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    buffer.add_batch(_rows_to_batch(rows, sd, ad, buffer.is_model_buffer))
    buffer.insertions = int(header['insertions'])
    return buffer


def export_jsonl(buffer: ReplayBuffer, path: Path) -> None:
    """One JSON object per line with full-precision floats; the first line is the header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    batch = buffer.view()
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps({
            'tag': buffer.tag,
            'state_dim': buffer.state_dim,
            'action_dim': buffer.action_dim,
            'capacity': buffer.capacity,
            'insertions': buffer.insertions,
            'count': len(batch),
        }) + '\n')
        for i in range(len(batch)):
            t = batch.record(i)
            f.write(json.dumps({
                's': t.s.tolist(),
                'a': t.a.tolist(),
                'r': t.r,
                's_next': t.s_next.tolist(),
                'terminal': t.terminal,
                'r_raw': t.r_raw,
                'u': t.u,
            }) + '\n')


def import_jsonl(path: Path) -> ReplayBuffer:
    path = Path(path)
    with open(path, 'r', encoding='utf-8') as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise SchemaError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:]]
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    _require(header, _BUFFER_KEYS, path)
    buffer = ReplayBuffer(header['state_dim'], header['action_dim'], header['capacity'], header['tag'])
    if records:
        try:
            batch = TransitionBatch(
                states=np.array([r['s'] for r in records]),
                actions=np.array([r['a'] for r in records]),
                rewards=np.array([r['r'] for r in records]),
                next_states=np.array([r['s_next'] for r in records]),
                terminals=np.array([r['terminal'] for r in records]),
                raw_rewards=np.array([np.nan if r['r_raw'] is None else r['r_raw'] for r in records]),
                uncertainties=np.array([np.nan if r['u'] is None else r['u'] for r in records]),
            )
        except KeyError as exc:
            raise SchemaError(f"{path}: record missing field {exc}") from exc
        buffer.add_batch(batch)
    buffer.insertions = int(header['insertions'])
    return buffer


# ── Network checkpoints ──────────────────────────────────────────────────────

def save_networks(
    path: Path,
    kind: str,
    networks: dict[str, MlpNetwork],
    extra: Optional[dict] = None,
) -> None:
    """
    Write named networks as float64 parameter blobs behind a JSON header.

    The header records each network's layer sizes and activation so the blobs
    can be reshaped on load; *extra* carries model-specific metadata.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(networks)
    header = {
        'kind': kind,
        'networks': [
            {'name': n, 'sizes': list(networks[n].sizes), 'activation': networks[n].activation}
            for n in names
        ],
        'extra': extra or {},
    }
    with open(path, 'wb') as f:
        _write_header(f, NETWORK_MAGIC, header)
        for n in names:
            f.write(networks[n].get_flat().astype('<f8').tobytes())


def checkpoint_kind(path: Path) -> str:
    """The 'kind' recorded in a checkpoint header."""
    path = Path(path)
    with open(path, 'rb') as f:
        header = _read_header(f, NETWORK_MAGIC, path)
    _require(header, ('kind',), path)
    return str(header['kind'])


def load_networks(path: Path, kind: Optional[str] = None) -> tuple[dict[str, MlpNetwork], dict]:
    """
    Read a checkpoint written by save_networks.

    Returns:
        (networks by name, extra metadata)
    """
    path = Path(path)
    with open(path, 'rb') as f:
        header = _read_header(f, NETWORK_MAGIC, path)
        _require(header, ('kind', 'networks', 'extra'), path)
        if kind is not None and header['kind'] != kind:
            raise SchemaError(f"{path}: checkpoint kind '{header['kind']}', expected '{kind}'")
        networks: dict[str, MlpNetwork] = {}
        for entry in header['networks']:
            net = MlpNetwork.zeros(entry['sizes'], entry['activation'])
            blob = f.read(8 * net.num_params)
            if len(blob) != 8 * net.num_params:
                raise SchemaError(f"{path}: parameters of '{entry['name']}' truncated")
            net.set_flat(np.frombuffer(blob, dtype='<f8'))
            networks[entry['name']] = net
    return networks, header['extra']


# ── CSV and JSON results ─────────────────────────────────────────────────────

def write_csv(path: Path, fieldnames: Sequence[str], rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), restval='')
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path: Path) -> list[dict]:
    with open(path, 'r', newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))


def save_grid_csv(path: Path, points: np.ndarray, values: np.ndarray) -> None:
    """Uncertainty field as x,y,u rows."""
    write_csv(path, ('x', 'y', 'u'), (
        {'x': repr(float(p[0])), 'y': repr(float(p[1])), 'u': repr(float(v))}
        for p, v in zip(points, values)
    ))


def save_histogram_csv(path: Path, edges: np.ndarray, counts: np.ndarray) -> None:
    write_csv(path, ('bin_left', 'bin_right', 'count'), (
        {'bin_left': repr(float(lo)), 'bin_right': repr(float(hi)), 'count': int(c)}
        for lo, hi, c in zip(edges[:-1], edges[1:], counts)
    ))


def save_regret_csv(path: Path, instant: np.ndarray) -> None:
    cumulative = np.cumsum(instant)
    write_csv(path, ('episode', 'instant_regret', 'cumulative_regret'), (
        {'episode': k + 1, 'instant_regret': repr(float(r)), 'cumulative_regret': repr(float(c))}
        for k, (r, c) in enumerate(zip(instant, cumulative))
    ))


def save_json(data: Any, output_path: Path) -> None:
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2, ensure_ascii=False)


def load_json(input_path: Path) -> Any:
    with open(input_path, 'r', encoding='utf-8') as f:
        return json.load(f)
