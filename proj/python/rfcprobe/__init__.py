"""Python bindings for the rfcprobe conformance-testing core."""

import json

from . import _rfcprobe
from ._rfcprobe import ConfigError, DegenerateInput, Error, SchemaError, __version__

__all__ = [
    "ConfigError",
    "DegenerateInput",
    "Error",
    "SchemaError",
    "aggregate_report",
    "build_debug_prompt",
    "default_filter_terms",
    "filter_reports",
    "index_library",
    "inventory",
    "parse_blueprint",
    "pass_at_k",
    "retrieve",
    "run_arm",
    "run_blueprint",
]


def inventory(content, doc_id="doc", markdown=False, rfc2119=None):
    """Coverage and functional points of a document given as text."""
    return json.loads(_rfcprobe.inventory(content, doc_id, markdown, rfc2119))


def pass_at_k(matrix, k):
    return _rfcprobe.pass_at_k([[bool(x) for x in row] for row in matrix], k)


def default_filter_terms():
    return list(_rfcprobe.default_filter_terms())


def filter_reports(reports, terms=None):
    terms = default_filter_terms() if terms is None else list(terms)
    return json.loads(_rfcprobe.filter_reports(json.dumps(reports), terms))


def build_debug_prompt(history, window, initial_prompt, case_text, debug_prompt, next_context=""):
    return _rfcprobe.build_debug_prompt(
        json.dumps(history), window, initial_prompt, case_text, debug_prompt, next_context
    )


def parse_blueprint(text):
    return json.loads(_rfcprobe.parse_blueprint(text))


def run_blueprint(blueprint, workspace, timeout_ms=30000, grace_ms=3000, env=None, ports=""):
    """Run a blueprint (dict or JSON text) from workspace; returns the feedback."""
    if not isinstance(blueprint, str):
        blueprint = json.dumps(blueprint)
    out = _rfcprobe.run_blueprint(blueprint, str(workspace), timeout_ms, grace_ms, dict(env or {}), ports)
    return json.loads(out)


def index_library(store_dir, library):
    return json.loads(_rfcprobe.index_library(str(store_dir), str(library)))


def retrieve(store_dir, query, top_k=4):
    return json.loads(_rfcprobe.retrieve(str(store_dir), query, top_k))


def run_arm(config, workspace=None, arm="full", force=False):
    """Run one arm of a pipeline config; returns the exit status (0 or 2)."""
    return _rfcprobe.run_arm(str(config), None if workspace is None else str(workspace), arm, force)


def aggregate_report(arm_dir):
    return json.loads(_rfcprobe.aggregate_report(str(arm_dir)))
