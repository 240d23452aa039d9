"""Model description files: JSON validated against the bundled schema."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema

from .errors import SpecError
from .graph import NetworkSpec, validate_spec

PRESET_PREFIX = "preset:"


@lru_cache(maxsize=1)
def model_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("schema/model.schema.json").read_text())


def _fmt_path(path) -> str:
    return "/".join(str(p) for p in path) or "<root>"


def validate_document(doc) -> None:
    """Raise SpecError with a path to the first offending field."""
    schema = model_schema()
    top = dict(schema)
    top["properties"] = dict(schema["properties"], layers={"type": "array",
                                                           "items": {"type": "object"}})
    err = jsonschema.exceptions.best_match(jsonschema.Draft202012Validator(top).iter_errors(doc))
    if err is not None:
        raise SpecError(f"{_fmt_path(err.absolute_path)}: {err.message}")
    variants = {v["properties"]["op"]["const"]: v
                for v in schema["properties"]["layers"]["items"]["oneOf"]}
    for i, layer in enumerate(doc["layers"]):
        op = layer.get("op")
        if op not in variants:
            raise SpecError(f"layers/{i}/op: unknown op {op!r}; expected one of "
                            f"{sorted(variants)}")
        err = jsonschema.exceptions.best_match(
            jsonschema.Draft202012Validator(variants[op]).iter_errors(layer))
        if err is not None:
            where = "/".join(["layers", str(i), *map(str, err.absolute_path)])
            raise SpecError(f"{where} (layer {i}, {op}): {err.message}")


def parse_model(doc: dict) -> NetworkSpec:
    validate_document(doc)
    net = NetworkSpec.from_dict({k: v for k, v in doc.items() if k != "weights"})
    validate_spec(net)
    return net


def load_model(ref: str) -> tuple[NetworkSpec, str | None]:
    """Load `preset:<name>` or a JSON file; returns the network and its weights path, if any."""
    if ref.startswith(PRESET_PREFIX):
        from .presets import preset
        return preset(ref[len(PRESET_PREFIX):]), None
    try:
        with open(ref) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{ref}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise SpecError("<root>: expected a JSON object")
    return parse_model(doc), doc.get("weights")


def dump_model(net: NetworkSpec, weights: str | None = None) -> str:
    doc = net.to_dict()
    if weights:
        doc["weights"] = weights
    return json.dumps(doc, indent=2)
