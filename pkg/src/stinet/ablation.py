"""Train and evaluate a matrix of configuration variants under shared seeds."""
from __future__ import annotations

import json
import logging
import traceback
from pathlib import Path

import yaml

from .config import apply_overrides, from_dict
from .train import EvalReport, evaluate, load_clips, train

log = logging.getLogger(__name__)

# ablation name -> dotted overrides applied on top of the base configuration
STANDARD_VARIANTS = {
    "full": [],
    "wo_stlr": ["model.stlr.enabled=false"],
    "wo_stgr": ["model.stgr.enabled=false"],
    "wo_mcl": ["mcl.abs=off", "mcl.rel=off"],
    "wo_flow_adaption": ["model.stfi.flow=unadapted"],
}

EXTRA_VARIANTS = {
    "wo_hr": ["model.branches=lr"],
    "wo_lr": ["model.branches=hr"],
    "wo_optical_flows": ["model.stfi.flow=none"],
    "wo_inet": ["model.stlr.inet=false"],
    "unshared_pnet": ["model.stfi.shared=false"],
    "strong_rel": ["mcl.rel=strong"],
}


def load_matrix(path: str | Path) -> dict:
    """YAML/JSON with ``base`` (config dict) and ``variants`` (name -> override list).

    ``variants: standard`` expands to the five-way comparison; a string
    ``base`` names a config file, relative to the matrix file.
    """
    path = Path(path)
    text = path.read_text()
    matrix = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    variants = matrix.get("variants", "standard")
    if variants == "standard":
        variants = dict(STANDARD_VARIANTS)
    matrix["variants"] = {k: list(v or []) for k, v in variants.items()}
    base = matrix.get("base") or {}
    if isinstance(base, str):
        base_path = path.parent / base
        base = json.loads(base_path.read_text()) if base_path.suffix == ".json" else yaml.safe_load(base_path.read_text())
    matrix["base"] = base or {}
    return matrix


def run_ablation_suite(matrix: dict, out_dir: str | Path, resume: bool = True) -> dict:
    """Run every variant; returns (and writes ``table.json``) the comparison table.

    Each variant gets ``out_dir/<name>/report.json``. With ``resume`` a
    variant whose report exists with a matching fingerprint is not retrained.
    A failing variant is recorded with its error and the suite moves on.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = matrix.get("base", {})
    table = {"variants": {}, "baseline": None}
    heldout = None
    for name, overrides in matrix["variants"].items():
        vdir = out / name
        try:
            cfg = from_dict(apply_overrides(base, overrides))
            report_path = vdir / "report.json"
            run_cfg = vdir / "run_config.json"
            if resume and report_path.exists() and run_cfg.exists():
                report = EvalReport.load(report_path)
                same = json.loads(run_cfg.read_text()) == cfg.to_dict()
                if same and report.fingerprint == cfg.fingerprint():
                    log.info("%s: reusing %s", name, report_path)
                    table["variants"][name] = _row(report, overrides)
                    table["baseline"] = table["baseline"] or report.baseline
                    continue
            log.info("%s: training", name)
            result = train(cfg, out_dir=vdir)
            heldout = heldout or load_clips(cfg, heldout=True)
            report = evaluate(result.model, heldout, fingerprint=cfg.fingerprint())
            report.curves = [{"iter": r["iter"], "total": r["total"], "l_rec": r["l_rec"]} for r in result.curves]
            report.save(report_path)
            run_cfg.write_text(json.dumps(cfg.to_dict(), indent=2))
            table["variants"][name] = _row(report, overrides)
            table["baseline"] = table["baseline"] or report.baseline
        except Exception as exc:  # recorded, suite continues
            log.error("%s failed: %s", name, exc)
            table["variants"][name] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}",
                                       "traceback": traceback.format_exc(), "overrides": overrides}
    (out / "table.json").write_text(json.dumps(table, indent=2))
    return table


def _row(report: EvalReport, overrides) -> dict:
    return {"status": "ok", "mean_psnr": report.mean_psnr, "mean_ssim": report.mean_ssim,
            "fingerprint": report.fingerprint, "overrides": overrides}


def plot_report(report_path: str | Path, out_png: str | Path) -> Path:
    """Bar chart of an ablation table, or loss curves of a single evaluation report."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = json.loads(Path(report_path).read_text())
    fig, ax = plt.subplots(figsize=(7, 4))
    if "variants" in data:
        names = [n for n, r in data["variants"].items() if r.get("status") == "ok"]
        vals = [data["variants"][n]["mean_psnr"] for n in names]
        ax.bar(names, vals, color="tab:blue")
        if data.get("baseline"):
            ax.axhline(data["baseline"]["mean_psnr"], color="tab:red", ls="--", label="bicubic + repeat")
            ax.legend()
        ax.set_ylabel("mean PSNR (dB)")
        if vals:
            lo = min(vals + [data["baseline"]["mean_psnr"]] if data.get("baseline") else vals)
            ax.set_ylim(lo - 1, max(vals) + 0.5)
        ax.tick_params(axis="x", rotation=30)
    else:
        curves = data.get("curves") or []
        if not curves:
            raise ValueError(f"{report_path} has neither variants nor loss curves")
        ax.plot([r["iter"] for r in curves], [r["total"] for r in curves], label="total")
        ax.plot([r["iter"] for r in curves], [r["l_rec"] for r in curves], label="l_rec")
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=100)
    plt.close(fig)
    return Path(out_png)
