"""Weight quantization toolkit for modular vision-language-action pipelines."""

import json

from ._vlaquant import (
    CalibrationError,
    Error,
    FormatError,
    IntegrityError,
    NotPositiveDefinite,
    PlanError,
    QuantizedTensor,
    QuantScheme,
    ShapeError,
    __version__,
    cholesky_lower,
    compute_scales,
    gptq_quantize_layer,
    load_store,
    matmul,
    proxy_loss,
    quantized_bytes,
    rtn_quantize,
    run_cli,
    save_store,
    spd_inverse,
)
from . import _vlaquant


def reference_manifest():
    return json.loads(_vlaquant.reference_manifest())


def toy_manifest():
    return json.loads(_vlaquant.toy_manifest())


def build_plan(policy, manifest, sensitivity=None, budget_bytes=None):
    """Returns the plan as a dict; manifest and sensitivity are dicts."""
    sens = None if sensitivity is None else json.dumps(sensitivity)
    return json.loads(_vlaquant.build_plan(policy, json.dumps(manifest), sens, budget_bytes))


__all__ = [
    "CalibrationError",
    "Error",
    "FormatError",
    "IntegrityError",
    "NotPositiveDefinite",
    "PlanError",
    "QuantizedTensor",
    "QuantScheme",
    "ShapeError",
    "build_plan",
    "cholesky_lower",
    "compute_scales",
    "gptq_quantize_layer",
    "load_store",
    "matmul",
    "proxy_loss",
    "quantized_bytes",
    "reference_manifest",
    "rtn_quantize",
    "run_cli",
    "save_store",
    "spd_inverse",
    "toy_manifest",
]
