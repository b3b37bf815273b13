import os
from typing import Any

from fastmcp import FastMCP

from .config import configure_logging
from .harness import compare, run_experiment
from .scenario import list_presets as _preset_names
from .scenario import load_preset


HOST = os.getenv("FASTMCP_HOST", "0.0.0.0")
PORT = int(os.getenv("PORT", os.getenv("FASTMCP_PORT", "8000")))
_raw_mcp_path = os.getenv("FASTMCP_PATH", "/mcp")
if not _raw_mcp_path.startswith("/"):
    _raw_mcp_path = f"/{_raw_mcp_path}"
if _raw_mcp_path != "/" and _raw_mcp_path.endswith("/"):
    _raw_mcp_path = _raw_mcp_path[:-1]
MCP_PATH = _raw_mcp_path


mcp = FastMCP("MeshFL Simulator")


def list_presets() -> list[dict[str, Any]]:
    """
    Lists the shipped experiment presets with their variants and routing protocols.
    """
    return [load_preset(name).summary() for name in _preset_names()]


def run_preset(
    preset: str, variant: str | None = None, protocol: str | None = None, seed: int | None = None
) -> dict[str, Any]:
    """
    Runs one arm of a preset and returns its round count, final loss, simulated
    minutes, mean slowest-worker delay and packet counters.

    Args:
        preset: Preset name (e.g., "fig12_distributions")
        variant: Variant name; defaults to the preset's first variant.
        protocol: baseline, rl-greedy, rl-softmax or rl-epsilon.
        seed: Optional value overriding every seed field.
    """
    cfg = load_preset(preset).config(variant, protocol)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return run_experiment(cfg).summary()


def compare_preset(
    preset: str, variant: str | None = None, target_loss: float | None = None, seed: int | None = None
) -> dict[str, Any]:
    """
    Runs every protocol of a preset variant and compares time-to-target-loss.

    Args:
        preset: Preset name.
        variant: Variant name; defaults to the preset's first variant.
        target_loss: Loss threshold; defaults to the preset's own target.
        seed: Optional value overriding every seed field.
    """
    spec = load_preset(preset)
    target = target_loss if target_loss is not None else spec.target_loss
    if target is None:
        raise ValueError(f"Preset {preset!r} has no target loss; pass target_loss")
    logs = {}
    for protocol in spec.protocols:
        cfg = spec.config(variant, protocol)
        if seed is not None:
            cfg = cfg.with_seed(seed)
        logs[protocol] = run_experiment(cfg)
    report = compare(logs, target)
    return {
        "reference": report.reference,
        "target_loss": report.target_loss,
        "time_to_target_ms": report.times,
        "speedup": report.speedups,
        "curves_equal": report.curves_equal,
    }


mcp.tool()(list_presets)
mcp.tool()(run_preset)
mcp.tool()(compare_preset)

if __name__ == "__main__":
    configure_logging()
    # Streamable HTTP, same as the deployed transport.
    mcp.run(transport="http", host=HOST, port=PORT, path=MCP_PATH)
