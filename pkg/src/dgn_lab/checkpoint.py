"""Network checkpoints as canonical JSON with a sha256 checksum over the body.

Floats are written with ``repr`` so every weight round-trips bit for bit.
Matrices are stored as ``{"shape": [...], "data": [...]}`` in row-major order.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError
from .network import LayerSpec, NetworkConfig, NeuronKind
from .neuron import AlifParams, DgnLayerParams, LifParams, SurrogateSpec

CHECKPOINT_FORMAT_VERSION = 1

_PARAM_TYPES = {
    NeuronKind.DGN: DgnLayerParams,
    NeuronKind.LIF: LifParams,
    NeuronKind.ALIF: AlifParams,
}
# Matrices are stored under "weights"; the feedforward split is derived at step time.
_UNSTORED_FIELDS = ("W", "C", "feedforward_channels")


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _encode_matrix(array: np.ndarray) -> dict:
    return {"shape": list(array.shape), "data": [float(v) for v in array.ravel()]}


def _decode_matrix(payload: dict) -> np.ndarray:
    shape = tuple(int(n) for n in payload["shape"])
    data = np.asarray(payload["data"], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise CheckpointError(f"matrix data has {data.size} values for shape {shape}")
    return data.reshape(shape)


def _encode_value(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, SurrogateSpec):
        return {"kind": value.kind.value, "width": value.width}
    return value


def _encode_layer(layer: LayerSpec) -> dict:
    params = {
        f.name: _encode_value(getattr(layer.params, f.name))
        for f in dataclasses.fields(layer.params)
        if f.name not in _UNSTORED_FIELDS
    }
    weights = {"W": _encode_matrix(layer.params.W)}
    if layer.has_conductance:
        weights["C"] = _encode_matrix(layer.params.C)
    if layer.recurrent:
        weights["W_rec"] = _encode_matrix(layer.W_rec)
        if layer.has_conductance:
            weights["C_rec"] = _encode_matrix(layer.C_rec)
    return {
        "neuron_kind": layer.neuron_kind.value,
        "recurrent": layer.recurrent,
        "params": params,
        "weights": weights,
    }


def _decode_layer(payload: dict) -> LayerSpec:
    kind = NeuronKind(payload["neuron_kind"])
    params = dict(payload["params"])
    params["surrogate"] = SurrogateSpec(**params["surrogate"])
    weights = payload["weights"]
    params["W"] = _decode_matrix(weights["W"])
    if kind is NeuronKind.DGN:
        params["C"] = _decode_matrix(weights["C"])
    layer_params = _PARAM_TYPES[kind](**params)
    return LayerSpec(
        neuron_kind=kind,
        params=layer_params,
        recurrent=bool(payload["recurrent"]),
        W_rec=_decode_matrix(weights["W_rec"]) if "W_rec" in weights else None,
        C_rec=_decode_matrix(weights["C_rec"]) if "C_rec" in weights else None,
    )


def network_body(net: NetworkConfig) -> dict:
    return {
        "input_channels": net.input_channels,
        "readout_dim": net.readout_dim,
        "smoothed": net.smoothed,
        "init_seed": net.init_seed,
        "layers": [_encode_layer(layer) for layer in net.layers],
        "W_L": _encode_matrix(net.W_L),
    }


def checkpoint_digest(net: NetworkConfig) -> str:
    """sha256 of the canonical network body; equal nets give equal digests."""
    return hashlib.sha256(canonical_json(network_body(net)).encode("utf-8")).hexdigest()


def save_checkpoint(net: NetworkConfig, path: Path) -> str:
    """Write ``net`` to ``path`` and return its checksum."""
    body = network_body(net)
    try:
        checksum = hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()
    except ValueError as exc:
        raise CheckpointError(f"network holds non-finite values: {exc}") from exc
    document = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "checksum": checksum,
        "body": body,
    }
    Path(path).write_text(canonical_json(document) + "\n", encoding="utf-8")
    return checksum


def load_checkpoint(path: Path) -> NetworkConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is corrupted: {exc.msg}") from exc
    if not isinstance(document, dict) or not {"format_version", "checksum", "body"} <= set(document):
        raise CheckpointError(f"checkpoint {path} is missing required fields")
    if document["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint version {document['format_version']!r} is not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    body = document["body"]
    actual = hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()
    if actual != document["checksum"]:
        raise CheckpointError(f"checkpoint {path} failed its checksum")
    try:
        return NetworkConfig(
            layers=[_decode_layer(layer) for layer in body["layers"]],
            readout_dim=int(body["readout_dim"]),
            input_channels=int(body["input_channels"]),
            W_L=_decode_matrix(body["W_L"]),
            smoothed=bool(body["smoothed"]),
            init_seed=body["init_seed"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} has an invalid body: {exc}") from exc
