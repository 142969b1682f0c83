"""Checkpoint archives: named weight arrays plus a JSON manifest.

The archive is a zip of .npy entries (readable by numpy) written with fixed
timestamps and sorted entry names, so saving the same state twice produces
byte-identical files.
"""

import io
import json
import zipfile

import numpy as np

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)
MANIFEST_NAME = "manifest.json"


def save_archive(path, arrays: dict, manifest: dict):
    """arrays: name -> ndarray; manifest: JSON-serializable metadata."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo(MANIFEST_NAME, date_time=_FIXED_DATE)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_FIXED_DATE)
            zf.writestr(info, buf.getvalue())


def load_archive(path):
    """Returns (arrays dict, manifest dict)."""
    arrays = {}
    with zipfile.ZipFile(path, "r") as zf:
        names = zf.namelist()
        if MANIFEST_NAME not in names:
            raise OSError(f"{path} has no {MANIFEST_NAME}; not a checkpoint archive")
        manifest = json.loads(zf.read(MANIFEST_NAME))
        for name in names:
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(
                    io.BytesIO(zf.read(name)))
    return arrays, manifest
