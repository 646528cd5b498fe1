"""Checkpoint archives: named parameter arrays in an .npz plus a JSON manifest."""

import hashlib
import io
import json
import os
import zipfile

import numpy as np
import torch


def state_to_arrays(module):
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _deterministic_npz_bytes(arrays):
    # np.savez embeds per-entry timestamps via zipfile; write entries with a
    # fixed date so identical arrays give identical bytes.
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            inner = io.BytesIO()
            np.lib.format.write_array(inner, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, inner.getvalue())
    return buf.getvalue()


def save_arrays(path, arrays, meta=None):
    """Write arrays deterministically; returns the archive's content hash."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    blob = _deterministic_npz_bytes(arrays)
    with open(path, "wb") as f:
        f.write(blob)
    digest = hashlib.sha256(blob).hexdigest()
    manifest = dict(meta or {})
    manifest["arrays_sha256"] = digest
    manifest["array_names"] = sorted(arrays)
    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return digest


def load_arrays(path):
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    manifest = {}
    if os.path.exists(path + ".json"):
        with open(path + ".json") as f:
            manifest = json.load(f)
    return arrays, manifest


def save_module(path, module, meta=None):
    return save_arrays(path, state_to_arrays(module), meta)


def load_module(path, module):
    arrays, manifest = load_arrays(path)
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    module.load_state_dict(state)
    return manifest


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
