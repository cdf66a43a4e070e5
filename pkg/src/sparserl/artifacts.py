"""On-disk formats: network checkpoints, per-layer mask dumps and the metrics stream.

Checkpoint
    A NumPy ``.npz`` archive. Entry ``meta`` is a JSON string::

        {"format": "sparserl-checkpoint", "version": 1,
         "networks": {name: {"dims": [...], "head": ..., "sparsity": [...]}}}

    and for every network ``name`` and layer ``l`` the arrays
    ``name/weights/l`` (float64, out x in, row-major), ``name/mask/l``
    (uint8 0/1) and ``name/bias/l`` (float64).

Mask dump
    Plain text, one file per layer: a header line ``rows cols`` followed by
    ``rows`` lines of ``cols`` space-separated 0/1 values.

Metrics
    CSV with the fixed header ``step,eval_return,buffer_size,policy_distance,
    drops,actor_active,critic_active,train_flops_cum``; floats are written
    with ``repr`` so they read back bit-exactly.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import numpy as np

from .agents import METRIC_COLUMNS
from .net import MaskedLinear, Mlp

CHECKPOINT_FORMAT = "sparserl-checkpoint"
METRICS_HEADER = ",".join(METRIC_COLUMNS)


class ArtifactError(ValueError):
    """A file could not be parsed; the message names the offending line or field."""


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, networks: dict) -> None:
    meta = {"format": CHECKPOINT_FORMAT, "version": 1, "networks": {}}
    arrays = {}
    for name, net in networks.items():
        if "/" in name:
            raise ValueError(f"network name {name!r} may not contain '/'")
        meta["networks"][name] = {
            "dims": net.dims,
            "head": net.head,
            "sparsity": [layer.target_sparsity for layer in net.layers],
        }
        for l, layer in enumerate(net.layers):
            arrays[f"{name}/weights/{l}"] = layer.weights
            arrays[f"{name}/mask/{l}"] = layer.mask.astype(np.uint8)
            arrays[f"{name}/bias/{l}"] = layer.bias
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def read_checkpoint(path) -> dict:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ArtifactError(f"{path}: not a checkpoint archive ({exc})") from None
    with archive:
        if "meta" not in archive.files:
            raise ArtifactError(f"{path}: missing field 'meta'")
        try:
            meta = json.loads(str(archive["meta"]))
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"{path}: field 'meta' is not JSON ({exc})") from None
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ArtifactError(f"{path}: field 'format' is {meta.get('format')!r}, expected {CHECKPOINT_FORMAT!r}")
        nets = {}
        for name, info in meta.get("networks", {}).items():
            dims = info["dims"]
            layers = []
            for l in range(len(dims) - 1):
                fields = {}
                for kind in ("weights", "mask", "bias"):
                    key = f"{name}/{kind}/{l}"
                    if key not in archive.files:
                        raise ArtifactError(f"{path}: missing field {key!r}")
                    fields[kind] = archive[key]
                expected = (dims[l + 1], dims[l])
                for kind in ("weights", "mask"):
                    if fields[kind].shape != expected:
                        raise ArtifactError(
                            f"{path}: field '{name}/{kind}/{l}' has shape {fields[kind].shape}, expected {expected}"
                        )
                mask = fields["mask"].astype(np.float64)
                w = fields["weights"].astype(np.float64)
                if np.any(w[mask == 0] != 0):
                    raise ArtifactError(f"{path}: field '{name}/weights/{l}' is nonzero at masked positions")
                try:
                    layers.append(MaskedLinear(w, mask, fields["bias"], info["sparsity"][l]))
                except ValueError as exc:
                    raise ArtifactError(f"{path}: layer '{name}/{l}': {exc}") from None
            nets[name] = Mlp(layers, info["head"])
        return nets


# ---------------------------------------------------------------------------
# mask dumps


def format_mask(mask) -> str:
    mask = np.asarray(mask)
    rows, cols = mask.shape
    lines = [f"{rows} {cols}"]
    lines += [" ".join("1" if v else "0" for v in row) for row in mask]
    return "\n".join(lines) + "\n"


def parse_mask(text: str, source="<mask>") -> np.ndarray:
    lines = text.splitlines()
    if not lines:
        raise ArtifactError(f"{source}: line 1: missing 'rows cols' header")
    header = lines[0].split()
    if len(header) != 2 or not all(re.fullmatch(r"\d+", h) for h in header):
        raise ArtifactError(f"{source}: line 1: expected 'rows cols', got {lines[0]!r}")
    rows, cols = int(header[0]), int(header[1])
    body = lines[1:]
    while body and not body[-1].strip():
        body.pop()
    if len(body) != rows:
        raise ArtifactError(f"{source}: expected {rows} mask rows, found {len(body)}")
    out = np.zeros((rows, cols))
    for r, line in enumerate(body):
        values = line.split()
        if len(values) != cols:
            raise ArtifactError(f"{source}: line {r + 2}: row {r} has {len(values)} entries, expected {cols}")
        for c, v in enumerate(values):
            if v not in ("0", "1"):
                raise ArtifactError(f"{source}: line {r + 2}: entry {c} is {v!r}, expected 0 or 1")
            out[r, c] = float(v)
    return out


def write_mask(path, mask) -> None:
    Path(path).write_text(format_mask(mask))


def read_mask(path) -> np.ndarray:
    return parse_mask(Path(path).read_text(), str(path))


def mask_filename(net_name: str, layer: int) -> str:
    return f"{net_name}_layer{layer}.txt"


def write_mask_dir(directory, masks: dict) -> list:
    """Write ``{net_name: [mask per layer]}`` as one file per layer."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, layer_masks in masks.items():
        for l, m in enumerate(layer_masks):
            p = directory / mask_filename(name, l)
            write_mask(p, m)
            written.append(p)
    return written


def read_mask_dir(directory) -> dict:
    directory = Path(directory)
    found = {}
    for p in directory.glob("*_layer*.txt"):
        m = re.fullmatch(r"(.+)_layer(\d+)\.txt", p.name)
        if m:
            found.setdefault(m.group(1), {})[int(m.group(2))] = read_mask(p)
    if not found:
        raise ArtifactError(f"{directory}: no mask files named <network>_layer<k>.txt")
    masks = {}
    for name, layers in found.items():
        if sorted(layers) != list(range(len(layers))):
            raise ArtifactError(f"{directory}: layers of {name!r} are not numbered 0..{len(layers) - 1}")
        masks[name] = [layers[l] for l in range(len(layers))]
    return masks


# ---------------------------------------------------------------------------
# metrics


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in METRIC_COLUMNS) + "\n")


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or ",".join(header) != METRICS_HEADER:
            raise ArtifactError(f"{path}: line 1: header must be {METRICS_HEADER!r}")
        rows = []
        for lineno, values in enumerate(reader, 2):
            if len(values) != len(METRIC_COLUMNS):
                raise ArtifactError(f"{path}: line {lineno}: expected {len(METRIC_COLUMNS)} fields, got {len(values)}")
            row = {}
            for col, v in zip(METRIC_COLUMNS, values):
                try:
                    row[col] = float(v) if col in ("eval_return", "policy_distance", "train_flops_cum") else int(v)
                except ValueError:
                    raise ArtifactError(f"{path}: line {lineno}: field {col!r} has bad value {v!r}") from None
            rows.append(row)
        return rows
