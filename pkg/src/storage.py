"""
Atomic file output shared by the serializers and the command line.
"""

import json
import os
import tempfile
from typing import Any

from observability.logger import json_default


def atomic_write_text(path: str, text: str) -> str:
    """Write `text` to `path` through a temp file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, 'w', newline='') as f:
            f.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
    return path


def write_json(path: str, data: Any) -> str:
    return atomic_write_text(path, json.dumps(data, indent=2, default=json_default) + "\n")
