"""Small file helpers shared by the samplers and the harness."""

import csv
import io
import json
import os
import tempfile
from pathlib import Path


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, rows, columns):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n",
                            extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in columns})
    atomic_write_text(path, buf.getvalue())


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_jsonl(path, records, header=None):
    lines = []
    if header is not None:
        lines.append(json.dumps(header, sort_keys=True))
    lines.extend(json.dumps(r, sort_keys=True) for r in records)
    atomic_write_text(path, "\n".join(lines) + "\n")


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value
