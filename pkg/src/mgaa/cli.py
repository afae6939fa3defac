"""Command-line entry point.

Exit status is 0 on success, 2 on usage errors and 1 on data errors. Data
errors are printed to stderr as ``mgaa: error [<stage>]: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .allocate import SublayerUnits, build_plan, ratio_allocation, sid_str
from .decompose import energy_profile
from .errors import MGAAError
from .harness import SUBLAYER_MATRICES, collect_calibration, init_toy_model, unit_dims
from .linalg import sym_evd
from .pipeline import eval_model, mgaa_compress, plan_from_stats

log = logging.getLogger("mgaa")


def _require(path, what):
    if not Path(path).is_file():
        raise io.FormatError(f"{what} file not found", path)
    return path


def _random_tokens(vocab, count, length, seed):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, vocab, size=length) for _ in range(count)]


def cmd_gen_toy(args):
    run_cfg = io.load_run_config(args.config) if args.config else io.parse_run_config({})
    cfg = io.toy_config(run_cfg)
    io.save_model(args.out, init_toy_model(cfg))
    if args.calib_out:
        seqs = _random_tokens(cfg.vocab, run_cfg["calib_sequences"], run_cfg["calib_length"], cfg.seed + 1)
        io.write_tokens(args.calib_out, seqs)
    return 0


def _load_model_and_calib(model_path, calib_path):
    model = io.load_model(_require(model_path, "model"))
    calib = io.read_tokens(_require(calib_path, "calibration"), vocab=model.cfg.vocab)
    return model, calib


def cmd_capture(args):
    model, calib = _load_model_and_calib(args.model, args.calib)
    stats = collect_calibration(model, calib)
    io.save_stats(args.out_stats, stats, model.cfg)
    return 0


def cmd_allocate(args):
    run_cfg = io.load_run_config(args.config)
    stats, scfg = io.load_stats(_require(args.stats, "stats"))
    if "model" not in run_cfg:
        raise io.RunConfigError("allocate needs the 'model' path in the run config")
    model = io.load_model(_require(run_cfg["model"], "model"))
    if model.cfg != scfg:
        raise io.FormatError("statistics were captured from a different model configuration", args.stats)
    cfg = io.allocation_config(run_cfg)
    plan, _, _ = plan_from_stats(model, stats, cfg, run_cfg["method"])
    io.write_json(args.out_plan, io.plan_to_dict(plan))
    return 0


def cmd_compress(args):
    run_cfg = io.load_run_config(args.config)
    model, calib = _load_model_and_calib(args.model, args.calib)
    cfg = io.allocation_config(run_cfg)
    compressed, report = mgaa_compress(model, calib, cfg, run_cfg["method"], workers=run_cfg["workers"])
    io.save_model(args.out, compressed)
    io.write_json(args.report, report.to_dict(timings=args.timings))
    if args.out_plan:
        plan, _, _ = plan_from_stats(model, collect_calibration(model, calib), cfg, run_cfg["method"])
        io.write_json(args.out_plan, io.plan_to_dict(plan))
    return 0


def cmd_eval(args):
    model, calib = _load_model_and_calib(args.model, args.calib)
    ref = io.load_model(_require(args.ref, "reference model"))
    m = eval_model(model, ref, calib)
    out = {
        "hidden_error": m.hidden_error,
        "hidden_error_rel": m.hidden_error_rel,
        "kl_to_reference": m.kl_to_reference,
        "scope_params": model.scope_param_count(),
        "reference_scope_params": ref.scope_param_count(),
        "achieved_ratio": 1.0 - model.scope_param_count() / ref.dense_scope_param_count(),
    }
    sys.stdout.write(io.dumps_json(out))
    return 0


def _write_csv(path, header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    with io.atomic_open(path, "w") as fh:
        fh.write(buf.getvalue())


def _save_fig(fig, path):
    with io.atomic_open(path, "wb") as fh:
        fig.savefig(fh, format="png", dpi=110)


def cmd_analyze(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stats, mcfg = io.load_stats(_require(args.stats, "stats"))
    run_cfg = io.load_run_config(args.config) if args.config else io.parse_run_config({})
    out = Path(args.plot_dir)
    out.mkdir(parents=True, exist_ok=True)
    sids = sorted(stats)
    labels = [sid_str(s) for s in sids]

    # output-Gram eigen spectra need no weights
    profiles = {}
    for sid in sids:
        for name in SUBLAYER_MATRICES[sid[1]]:
            gram = stats[sid].matrix_stats[name].gram_y
            profiles[(sid, name)] = energy_profile(sym_evd(gram).eigvals, "eigen")

    cfg = io.allocation_config(run_cfg)
    ra = ratio_allocation({s: stats[s].importance for s in sids}, {s: stats[s].param_count for s in sids}, cfg)
    units = {
        sid: SublayerUnits(
            dims={n: unit_dims(mcfg, n) for n in SUBLAYER_MATRICES[sid[1]]},
            profiles={n: profiles[(sid, n)] for n in SUBLAYER_MATRICES[sid[1]]},
            original_dims={n: unit_dims(mcfg, n) for n in SUBLAYER_MATRICES[sid[1]]},
        )
        for sid in sids
    }
    plan = build_plan(ra, units, cfg, "pca")

    _write_csv(out / "importance.csv", ["sublayer", "importance", "z_score", "ratio"],
               [[sid_str(s), f"{stats[s].importance:.10g}", f"{ra.z_scores.get(s, 0.0):.10g}",
                 f"{ra.ratios[s]:.10g}"] for s in sids])
    rows = []
    for (sid, name), prof in sorted(profiles.items()):
        for i, (e, c) in enumerate(zip(prof.energies, prof.cumulative), start=1):
            rows.append([sid_str(sid), name, i, f"{e:.10g}", f"{c:.10g}"])
    _write_csv(out / "energy.csv", ["sublayer", "matrix", "rank", "energy", "cumulative"], rows)
    rows = []
    for sid in sids:
        for name, r in sorted(plan.ranks.get(sid, {}).items()):
            rows.append([sid_str(sid), name, r, f"{plan.retained[sid][name]:.10g}"])
    _write_csv(out / "ranks.csv", ["sublayer", "matrix", "rank", "retained_energy"], rows)

    x = np.arange(len(sids))
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.bar(x, [stats[s].importance for s in sids], color=["tab:blue" if s[1] == "mha" else "tab:orange"
                                                          for s in sids])
    ax.set_xticks(x, labels, rotation=45, ha="right")
    ax.set_ylabel("input/output cosine similarity")
    fig.tight_layout()
    _save_fig(fig, out / "importance.png")
    plt.close(fig)

    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, kind in zip(axes, ("mha", "ffn")):
        for (sid, name), prof in sorted(profiles.items()):
            if sid[1] == kind:
                ax.plot(np.arange(1, len(prof.cumulative) + 1), prof.cumulative, lw=0.9,
                        label=f"{sid_str(sid)}.{name}")
        ax.set_title(kind.upper())
        ax.set_xlabel("rank")
        ax.legend(fontsize=5, ncol=2)
    axes[0].set_ylabel("cumulative energy")
    fig.tight_layout()
    _save_fig(fig, out / "energy.png")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.bar(x, [ra.ratios[s] for s in sids], color="tab:green")
    ax.axhline(cfg.target_ratio, color="k", ls="--", lw=0.8)
    ax.set_xticks(x, labels, rotation=45, ha="right")
    ax.set_ylabel("compression ratio")
    fig.tight_layout()
    _save_fig(fig, out / "ratios.png")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(9, 3.5))
    names = sorted({n for s in sids for n in plan.ranks.get(s, {})})
    width = 0.8 / max(len(names), 1)
    for j, name in enumerate(names):
        vals = [plan.ranks.get(s, {}).get(name, 0) for s in sids]
        ax.bar(x + j * width, vals, width, label=name)
    ax.set_xticks(x + 0.4, labels, rotation=45, ha="right")
    ax.set_ylabel("retained rank")
    ax.legend(fontsize=6, ncol=len(names))
    fig.tight_layout()
    _save_fig(fig, out / "ranks.png")
    plt.close(fig)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mgaa", description="Adaptive low-rank compression of a toy transformer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-toy", help="create a seeded toy model")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--calib-out", help="also write random calibration tokens")
    s.set_defaults(fn=cmd_gen_toy)

    s = sub.add_parser("capture", help="run the calibration passes and save statistics")
    s.add_argument("--model", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--out-stats", required=True)
    s.set_defaults(fn=cmd_capture)

    s = sub.add_parser("allocate", help="compute an allocation plan from saved statistics")
    s.add_argument("--stats", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out-plan", required=True)
    s.set_defaults(fn=cmd_allocate)

    s = sub.add_parser("compress", help="calibrate, allocate and factor a model")
    s.add_argument("--model", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--out-plan")
    s.add_argument("--timings", action="store_true", help="include wall-clock times in the report")
    s.set_defaults(fn=cmd_compress)

    s = sub.add_parser("eval", help="compare a model against a reference")
    s.add_argument("--model", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--calib", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("analyze", help="write importance/energy CSVs and plots")
    s.add_argument("--stats", required=True)
    s.add_argument("--plot-dir", required=True)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="mgaa: %(levelname)s: %(message)s")
    try:
        return args.fn(args)
    except MGAAError as exc:
        stage = getattr(exc, "pipeline_stage", None) or exc.stage
        print(f"mgaa: error [{stage}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"mgaa: error [io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
