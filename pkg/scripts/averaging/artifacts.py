"""
Output artifacts: atomic CSV/JSON writers, the run ledger and the markdown report

CSV and JSON bodies are a pure function of (config, seed); wall-clock
timestamps only go into the TinyDB ledger next to them.
"""

import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from jinja2 import Template
from tinydb import Query, TinyDB

logger = logging.getLogger(__name__)

TEMPLATE_PATH = Path(__file__).resolve().parents[2] / 'templates' / 'report.md.j2'


def format_real(value) -> str:
    """17 significant digits, '.' decimal separator"""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return format(float(value), '.17g')


def write_atomic(path, text: str) -> Path:
    """Write to a temp file in the same directory, then rename over `path`"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix='.tmp')
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_real(v) if isinstance(v, (float, int, np.floating, np.integer)) else v
                         for v in row])
    return buffer.getvalue()


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    return write_atomic(path, csv_text(header, rows))


def _to_builtin(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.random.SeedSequence):
        return {'entropy': value.entropy, 'spawn_key': list(value.spawn_key)}
    raise TypeError(f"cannot serialize {type(value).__name__}")


def json_text(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=_to_builtin, allow_nan=True) + '\n'


def write_json(path, payload) -> Path:
    return write_atomic(path, json_text(payload))


class RunLedger:
    """TinyDB record of executed runs; the only place timestamps are kept"""

    def __init__(self, db_path):
        Path(db_path).parent.mkdir(parents=True, exist_ok=True)
        self.db = TinyDB(db_path)
        self.Run = Query()

    def get_fingerprint(self, config_fingerprint: str, command: str, seed) -> str:
        return hashlib.md5(f"{config_fingerprint}{command}{seed}".encode()).hexdigest()

    def is_duplicate(self, config_fingerprint: str, command: str, seed) -> bool:
        fingerprint = self.get_fingerprint(config_fingerprint, command, seed)
        return len(self.db.search(self.Run.fingerprint == fingerprint)) > 0

    def add_run(self, config_fingerprint: str, command: str, seed, outputs: List[str], passed: Optional[bool]):
        self.db.insert({
            'fingerprint': self.get_fingerprint(config_fingerprint, command, seed),
            'config': config_fingerprint,
            'command': command,
            'seed': seed,
            'outputs': outputs,
            'passed': passed,
            'timestamp': datetime.now(timezone.utc).isoformat(),
        })

    def runs(self, command: Optional[str] = None) -> list:
        if command is None:
            return self.db.all()
        return self.db.search(self.Run.command == command)

    def cleanup_old_entries(self, days: int = 30):
        """Remove entries older than `days`"""
        cutoff = datetime.now(timezone.utc) - timedelta(days=days)

        def is_old(doc):
            return datetime.fromisoformat(doc['timestamp']) < cutoff

        self.db.remove(is_old)

    def close(self):
        self.db.close()


def render_report(context: dict, template_path: Path = TEMPLATE_PATH) -> str:
    """Render the markdown run report"""
    with open(template_path, 'r', encoding='utf-8') as f:
        template = Template(f.read(), trim_blocks=True, lstrip_blocks=True)
    return template.render(**context)


def write_report(out_dir, context: dict) -> Optional[Path]:
    if not TEMPLATE_PATH.exists():
        logger.error(f"Template file not found: {TEMPLATE_PATH}")
        return None
    return write_atomic(Path(out_dir) / 'report.md', render_report(context))
