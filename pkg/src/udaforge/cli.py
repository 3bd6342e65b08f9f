"""The uda-forge command line: synth, train, eval, report.

Each command reads a JSON run configuration (--config); --mode, --seed and
--out override the matching fields. Failures print one machine-readable
JSON line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .dataset import UNLABELED
from .io import ConfigError, FormatError
from .kspace import (
    ALIAS_CENTER_KEEP,
    ALIAS_FACTORS,
    CARDIAC_DEFORM_RANGE,
    CARDIAC_LINE_RANGE,
    GIBBS_KEEP_RANGE,
    RESP_AMPLITUDE_RANGE,
    RESP_CYCLES_RANGE,
)
from .metrics import METRIC_NAMES, confusion_matrix
from .protocol import pca_project, run_protocol
from .synth import SOURCE_DOMAIN, TARGET_DOMAIN, DomainSpec, synth_dataset
from .train import TrainConfig, graphs_from_specs, predict_dataset, train

EXIT_CONFIG, EXIT_FORMAT, EXIT_VALUE, EXIT_IO = 2, 3, 4, 5


def _fail(code, message, status):
    sys.stderr.write(json.dumps({"error": code, "message": str(message)}) + "\n")
    return status


def _out_dir(cfg, args):
    out = args.out or cfg.get("out_dir")
    if not out:
        raise ConfigError("missing_key", "no output directory (out_dir or --out)")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _domain_spec(block, default):
    merged = default.to_dict()
    merged.update({k: v for k, v in (block or {}).items() if k != "seed"})
    return DomainSpec.from_dict(merged)


def cmd_synth(cfg, args):
    block = cfg.get("synth")
    if block is None:
        raise ConfigError("missing_key", "config has no synth block")
    out = _out_dir(cfg, args)
    hw = tuple(block.get("hw", (32, 32)))
    n_patients = int(block.get("n_patients", 20))
    spp = int(block.get("slices_per_patient", 50))
    mode = block.get("mode", "spatial")
    src_spec = _domain_spec(block.get("source"), SOURCE_DOMAIN)
    tgt_spec = _domain_spec(block.get("target"), TARGET_DOMAIN)
    src_seed = int((block.get("source") or {}).get("seed", 1))
    tgt_seed = int((block.get("target") or {}).get("seed", src_seed + 7919))
    if args.seed is not None:
        src_seed, tgt_seed = args.seed, args.seed + 7919
    if src_seed == tgt_seed:
        raise ConfigError("bad_value", "source and target seeds must differ")

    src = synth_dataset(src_spec, n_patients, spp, src_seed, hw=hw, domain=0, mode=mode)
    tgt = synth_dataset(tgt_spec, n_patients, spp, tgt_seed, hw=hw, domain=1, mode=mode)
    io.write_dataset(out / "source.uds", src)
    io.write_dataset(out / "target.uds", tgt)
    manifest = {
        "hw": list(hw),
        "mode": mode,
        "n_patients": n_patients,
        "slices_per_patient": spp,
        "seeds": {"source": src_seed, "target": tgt_seed},
        "domains": {"source": src_spec.to_dict(), "target": tgt_spec.to_dict()},
        "counts": {
            "source": {str(k): v for k, v in src.class_counts().items()},
            "target": {str(k): v for k, v in tgt.class_counts().items()},
        },
        "patients": {
            "source": src.patient_list(),
            "target": tgt.patient_list(),
        },
        "severity_ranges": {
            "gibbs_keep_fraction": list(GIBBS_KEEP_RANGE),
            "alias_factors": list(ALIAS_FACTORS),
            "alias_center_keep": list(ALIAS_CENTER_KEEP),
            "respiratory_amplitude_px": list(RESP_AMPLITUDE_RANGE),
            "respiratory_cycles": list(RESP_CYCLES_RANGE),
            "cardiac_deform_strength": list(CARDIAC_DEFORM_RANGE),
            "cardiac_line_fraction": list(CARDIAC_LINE_RANGE),
        },
    }
    io.atomic_write_text(out / "manifest.json", io.dump_config(manifest))
    print(f"wrote {out / 'source.uds'} and {out / 'target.uds'}")
    return 0


def _train_config(block, args):
    fields = {
        k: v
        for k, v in block.items()
        if k not in ("source", "target", "resume_from", "checkpoint_every")
    }
    cfg = TrainConfig.from_dict(fields)
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_train(cfg, args):
    block = cfg.get("train")
    if block is None:
        raise ConfigError("missing_key", "config has no train block")
    out = _out_dir(cfg, args)
    tconfig = _train_config(block, args)

    source = target = None
    if tconfig.mode in ("uda", "source_only"):
        if "source" not in block:
            raise ConfigError("missing_key", "train block needs a source dataset")
        source = io.read_dataset(block["source"])
    if tconfig.mode in ("uda", "target_supervised"):
        if "target" not in block:
            raise ConfigError("missing_key", "train block needs a target dataset")
        target = io.read_dataset(block["target"])
    for name, ds in (("source", source), ("target", target)):
        if ds is not None and ds.mode != tconfig.input_mode:
            raise ConfigError(
                "mode_mismatch",
                f"{name} dataset is {ds.mode} but config expects {tconfig.input_mode}",
            )

    resume = None
    if block.get("resume_from"):
        resume = io.load_checkpoint(block["resume_from"])
    every = int(block.get("checkpoint_every", 0))
    ckpt_dir = out / "checkpoint"

    def on_epoch(state):
        # periodic snapshots land in their own directories so an
        # interrupted run can be resumed from any of them
        if every and state.epoch % every == 0 and state.epoch < state.config.epochs:
            io.save_checkpoint(out / f"checkpoint_ep{state.epoch:04d}", state)

    result = train(tconfig, source, target, resume=resume, epoch_callback=on_epoch)
    io.save_checkpoint(ckpt_dir, result.state)
    io.write_train_log(out, result.log)
    print(
        f"trained {tconfig.mode} for {result.state.epoch} epochs "
        f"({len(result.log.steps)} steps this run); checkpoint at {ckpt_dir}"
    )
    return 0


def _predictions_csv(preds):
    lines = ["true,pred," + ",".join(f"prob_{c}" for c in range(5)) + ",patient,domain"]
    for i in range(len(preds)):
        probs = ",".join(repr(float(p)) for p in preds.probs[i])
        lines.append(
            f"{preds.y_true[i]},{preds.y_pred[i]},{probs},"
            f"{int(preds.patients[i])},{int(preds.domains[i])}"
        )
    return "\n".join(lines) + "\n"


def _write_features(out, features, labels, domains):
    io.write_tensor(out / "features.ten", np.asarray(features), io.DTYPE_F64)
    lines = ["domain,label"]
    for d, l in zip(domains, labels):
        lines.append(f"{int(d)},{int(l)}")
    io.atomic_write_text(out / "features_meta.csv", "\n".join(lines) + "\n")


def cmd_eval(cfg, args):
    block = cfg.get("eval")
    if block is None:
        raise ConfigError("missing_key", "config has no eval block")
    out = _out_dir(cfg, args)
    state = io.load_checkpoint(block["checkpoint"])
    ds = io.read_dataset(block["dataset"])
    want = state.specs["extractor"].input_shape
    have = (ds.channels,) + ds.hw
    if tuple(want) != have:
        raise ConfigError(
            "spec_mismatch",
            f"checkpoint expects input {tuple(want)}, dataset provides {have}",
        )
    if np.any(ds.labels == UNLABELED):
        raise ConfigError("bad_value", "dataset has unlabeled records; eval needs labels")
    graphs = graphs_from_specs(state.specs, state.config)
    preds, feats = predict_dataset(graphs, state.params, ds)
    from .metrics import summarize

    m = summarize(preds)
    io.atomic_write_text(out / "predictions.csv", _predictions_csv(preds))
    io.atomic_write_text(
        out / "metrics.json",
        json.dumps({k: m[k] for k in METRIC_NAMES}, sort_keys=True, indent=2) + "\n",
    )
    cm = confusion_matrix(preds.y_true, preds.y_pred)
    io.atomic_write_text(
        out / "confusion.csv",
        "\n".join(",".join(str(v) for v in row) for row in cm) + "\n",
    )
    _write_features(out, feats, ds.labels, ds.domains)
    print(f"accuracy {m['accuracy']:.4f}; outputs in {out}")
    return 0


def _pct(mean, std):
    if std is None:
        return f"{100 * mean:.2f}"
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


MODE_ROWS = (
    ("source_only", "Train on source/Test on target"),
    ("uda", "Using the proposed model"),
    ("target_supervised", "Train on target/Test on target"),
)


def _write_tables(out, report):
    modes = report["modes"]
    missing = [m for m, _ in MODE_ROWS if m not in modes]
    if missing:
        raise ConfigError(
            "inconsistent_runs", f"protocol runs missing modes: {missing}"
        )
    header = "mode," + ",".join(METRIC_NAMES)
    csv_lines = [header]
    txt_lines = [f"{'mode':<34}" + "".join(f"{m:>18}" for m in METRIC_NAMES)]
    for mode, title in MODE_ROWS:
        cells = [
            _pct(modes[mode][m]["mean"], modes[mode][m]["std"]) for m in METRIC_NAMES
        ]
        csv_lines.append(",".join([title] + cells))
        txt_lines.append(f"{title:<34}" + "".join(f"{c:>18}" for c in cells))
    cov = report.get("gap_coverage") or {}
    if cov.get("accuracy") is not None:
        txt_lines.append(f"\ndomain gap coverage (accuracy): {cov['accuracy']:.3f}")
    io.atomic_write_text(out / "table.csv", "\n".join(csv_lines) + "\n")
    io.atomic_write_text(out / "table.txt", "\n".join(txt_lines) + "\n")

    gap_lines = ["metric,lower,uda,upper,coverage"]
    for m in METRIC_NAMES:
        c = cov.get(m)
        gap_lines.append(
            ",".join(
                [
                    m,
                    repr(modes["source_only"][m]["mean"]),
                    repr(modes["uda"][m]["mean"]),
                    repr(modes["target_supervised"][m]["mean"]),
                    "NA" if c is None else repr(c),
                ]
            )
        )
    io.atomic_write_text(out / "gap_coverage.csv", "\n".join(gap_lines) + "\n")


def cmd_report(cfg, args):
    block = cfg.get("report")
    if block is None:
        raise ConfigError("missing_key", "config has no report block")
    out = _out_dir(cfg, args)

    if "protocol" in block:
        p = block["protocol"]
        source = io.read_dataset(p["source"])
        target = io.read_dataset(p["target"])
        overrides = dict(p.get("train", {}))
        overrides.setdefault("input_mode", source.mode)
        base = TrainConfig.from_dict(overrides)
        seeds = [int(s) for s in p.get("seeds", [0, 1, 2])]
        if args.seed is not None:
            seeds = [args.seed]
        report, features = run_protocol(
            source,
            target,
            base,
            k=int(p.get("k", 5)),
            seeds=seeds,
            folds=p.get("folds"),
            fold_seed=int(p.get("fold_seed", 0)),
        )
        io.atomic_write_text(out / "protocol.json", io.dump_config(report))
        if features is not None:
            _write_features(out, features["features"], features["labels"],
                            features["domains"])
            trend_lines = ["iteration,wasserstein"] + [
                f"{i},{repr(float(w))}" for i, w in features["trend"]
            ]
            io.atomic_write_text(out / "trend.csv", "\n".join(trend_lines) + "\n")
    else:
        runs_path = block.get("runs")
        if not runs_path:
            raise ConfigError("missing_key", "report needs a protocol block or runs path")
        report = json.loads(Path(runs_path).read_text())
        if "modes" not in report or "runs" not in report:
            raise ConfigError("inconsistent_runs", f"{runs_path} is not a protocol report")

    _write_tables(out, report)

    feat_path = out / "features.ten"
    pca_done = False
    if feat_path.exists():
        feats = io.read_tensor(feat_path)
        meta = (out / "features_meta.csv").read_text().strip().splitlines()[1:]
        domains = np.array([int(r.split(",")[0]) for r in meta])
        labels = np.array([int(r.split(",")[1]) for r in meta])
        points, _ = pca_project(feats)
        lines = ["pc1,pc2,domain,label"]
        for i in range(len(points)):
            lines.append(
                f"{repr(points[i, 0])},{repr(points[i, 1])},{domains[i]},{labels[i]}"
            )
        io.atomic_write_text(out / "pca.csv", "\n".join(lines) + "\n")
        pca_done = True

    if block.get("figures", True) and not args.no_figures:
        from . import figures

        figures.render_gap_bars(
            report["modes"], report.get("gap_coverage"), out / "gap_bars.png"
        )
        if pca_done:
            figures.render_feature_scatter(
                points, labels, domains, out / "features_pca.png"
            )
        trend_path = out / "trend.csv"
        if trend_path.exists():
            rows = trend_path.read_text().strip().splitlines()[1:]
            trend = [(int(r.split(",")[0]), float(r.split(",")[1])) for r in rows]
            figures.render_distance_trend(trend, out / "distance_trend.png")
    print(f"report written to {out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="uda-forge",
        description="synthesize artifact datasets, train the adaptation model, "
        "evaluate, and report",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument(
            "--mode", choices=("uda", "source_only", "target_supervised"), default=None
        )
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--no-figures", action="store_true",
                       help="skip figure rendering (report only)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = io.load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        return _fail(e.code, e, EXIT_CONFIG)
    except FormatError as e:
        return _fail(e.code, e, EXIT_FORMAT)
    except FileNotFoundError as e:
        return _fail("not_found", e, EXIT_IO)
    except (ValueError, AssertionError) as e:
        return _fail("bad_value", e, EXIT_VALUE)


if __name__ == "__main__":
    sys.exit(main())
