"""Small file helpers: atomic writes and CSV with a metadata comment block."""

import csv
import io
import os
import tempfile


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_value(v):
    if isinstance(v, float):
        if v != v:
            return "NA"
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def csv_text(header, rows, metadata=None):
    """Render rows as CSV text, preceded by ``# key: value`` comment lines."""
    buf = io.StringIO()
    if metadata:
        for key, value in metadata.items():
            buf.write(f"# {key}: {value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows, metadata=None):
    atomic_write_text(path, csv_text(header, rows, metadata))


def read_csv(path):
    """Read a CSV that may start with ``#`` comment lines.

    Returns ``(header, rows)`` with rows as lists of strings. Use
    :func:`read_csv_numbered` to keep source line numbers.
    """
    header, numbered = read_csv_numbered(path)
    return header, [row for _, row in numbered]


def read_csv_numbered(path):
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [(i + 1, line) for i, line in enumerate(fh)]
    body = [(n, line) for n, line in lines if not line.startswith("#") and line.strip()]
    if not body:
        return [], []
    reader = csv.reader([line for _, line in body])
    parsed = list(reader)
    header = [h.strip() for h in parsed[0]]
    return header, [(body[k][0], row) for k, row in enumerate(parsed[1:], start=1)]
