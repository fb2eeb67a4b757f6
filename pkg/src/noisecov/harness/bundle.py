"""
Posterior bundles: one zip file holding ``meta.json`` and one ``.npy``
array per variational parameter.

Entries carry a fixed timestamp so identical posteriors give identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from ..inference import FitConfig, Posterior, VariationalState
from ..model import ModelSpec
from .data import dump_json

__all__ = ["save_posterior", "load_posterior", "write_elbo_trace"]

BUNDLE_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _put(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _npy(a) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def save_posterior(post: Posterior, path):
    q = post.q
    arrays = {"coords": post.coords, "elbo_trace": post.elbo_trace, "L_raw": q.L_raw, "r": q.r}
    if q.L_base is not None:
        arrays["L_base"] = q.L_base
    if post.n_trials is not None:
        arrays["n_trials"] = np.asarray(post.n_trials)
    for k, v in q.loc.items():
        arrays[f"loc.{k}"] = v
    for k, v in q.log_scale.items():
        arrays[f"log_scale.{k}"] = v
    meta = {
        "bundle_version": BUNDLE_VERSION,
        "spec": post.spec.to_dict(),
        "config": post.config.to_dict(),
        "family": q.family,
        "arrays": sorted(arrays),
    }
    with zipfile.ZipFile(path, "w") as zf:
        _put(zf, "meta.json", dump_json(meta).encode())
        for name in sorted(arrays):
            _put(zf, name + ".npy", _npy(arrays[name]))


def load_posterior(path) -> Posterior:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        arrays = {n: np.lib.format.read_array(io.BytesIO(zf.read(n + ".npy")), allow_pickle=False)
                  for n in meta["arrays"]}
    loc = {k[4:]: v for k, v in arrays.items() if k.startswith("loc.")}
    ls = {k[10:]: v for k, v in arrays.items() if k.startswith("log_scale.")}
    order = ("mu", "U", "z", "g")
    loc = {k: loc[k] for k in order if k in loc}
    ls = {k: ls[k] for k in order if k in ls}
    q = VariationalState(meta["family"], loc, ls, arrays["L_raw"], arrays["r"], arrays.get("L_base"))
    spec = ModelSpec.from_dict(meta["spec"])
    return Posterior(spec, arrays["coords"], q, arrays["elbo_trace"], FitConfig.from_dict(meta["config"]),
                     arrays.get("n_trials"))


def write_elbo_trace(path, trace):
    trace = np.asarray(trace, dtype=float)
    M = np.column_stack([np.arange(len(trace)), trace])
    lines = ["iteration,elbo"] + [f"{int(i)},{repr(float(v))}" for i, v in M]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
