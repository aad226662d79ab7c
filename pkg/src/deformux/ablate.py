"""Ablation harness: train each variant along one design axis on shared data."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Tuple

from .network import NetworkConfig, build_network
from .train import Dataset, TrainConfig, train

# axis -> [(row label, config overrides)]
AXES: Dict[str, List[Tuple[str, dict]]] = {
    "operator": [("plain depthwise conv", {"operator": "depthwise"}),
                 ("standard deformable conv", {"operator": "standard"}),
                 ("depthwise deformable conv", {"operator": "ddc"})],
    "offset-kernel": [("offset kernel 3x3x3", {"offset_branch": "conv3"}),
                      ("offset kernel 1x1x1", {"offset_branch": "pointwise"})],
    "plane": [("x-y", {"plane": "x-y"}), ("x-z", {"plane": "x-z"}), ("y-z", {"plane": "y-z"}),
              ("tri-planar", {"plane": "tri-planar"})],
    "scaling": [("no MLP", {"scaling": "none"}), ("MLP", {"scaling": "mlp"}),
                ("depthwise conv scaling", {"scaling": "depthwise"})],
}


def run(axis: str, base: NetworkConfig, tcfg: TrainConfig, data: Dataset, out_dir=None, model_seed: int = 0,
        log=None) -> dict:
    """Train every variant with the same seed and data; returns the comparison table."""
    if axis not in AXES:
        raise KeyError(f"unknown ablation axis {axis!r}; expected one of {sorted(AXES)}")
    rows = []
    for label, over in AXES[axis]:
        cfg = base.replace(**over)
        model = build_network(cfg, seed=model_seed)
        run_dir = None if out_dir is None else Path(out_dir) / "variants" / label.replace(" ", "_")
        rep = train(model, data, tcfg, run_dir, log=log)
        rows.append({"variant": label, "config": over, "params": int(sum(v.value.size for v in model.params.values())),
                     "val_dice": rep["val"][-1]["dice"] if rep["val"] else None,
                     "test_dice": rep["test"]["mean"] if rep["test"] else None,
                     "final_loss": rep["loss"][-1] if rep["loss"] else None})
    table = {"axis": axis, "steps": tcfg.steps, "seed": tcfg.seed, "rows": rows}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(table, indent=1, sort_keys=True) + "\n")
        (out / "ablation.txt").write_text(format_table(table) + "\n")
    return table


def _fmt(v):
    return "-" if v is None else f"{v:.4f}"


def format_table(table: dict) -> str:
    head = ("variant", "params", "val dice", "test dice")
    body = [(r["variant"], f"{r['params']:,}", _fmt(r["val_dice"]), _fmt(r["test_dice"])) for r in table["rows"]]
    widths = [max(len(x[i]) for x in [head] + body) for i in range(4)]
    line = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    out = [f"ablation axis: {table['axis']} ({table['steps']} steps, seed {table['seed']})", line(head),
           "  ".join("-" * w for w in widths)]
    return "\n".join(out + [line(r) for r in body])
