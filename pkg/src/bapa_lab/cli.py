"""Command-line driver.

    bapa-lab gen       --out DIR                          -> DIR/dataset.npz
    bapa-lab train     --dataset D --scheme S --seed N    -> checkpoint + training log
    bapa-lab eval      --checkpoint C --dataset D         -> report (JSON, CSV, PGM)
    bapa-lab occlude   --checkpoint C --dataset D         -> importance maps
    bapa-lab simprobe  --checkpoint C --dataset D         -> similarity CSV
    bapa-lab flow      --checkpoint C --dataset D         -> attention-flow map
    bapa-lab compare   --baseline R.. --candidate R..     -> comparison report
    bapa-lab pipeline                                     -> all of the above, both schemes, every seed
    bapa-lab config                                       -> print the resolved config

Every command writes under ``--out`` and records the resolved configuration in
``<command>_manifest.json`` there.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, metrics
from .config import dump_config, load_config, model_config, train_config
from .errors import LabError
from .model import init_model, load_checkpoint, save_checkpoint
from .probe import EVAL, NUM_SLOTS, gen_library, gen_probe, load_dataset, save_dataset
from .train import train

log = logging.getLogger("bapa_lab")

EXIT_IO = 8


def _write_manifest(out: Path, command: str, cfg: dict, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": cfg, **extra}
    (out / f"{command}_manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _run_tag(scheme: str, seed: int) -> str:
    return f"{scheme}_s{seed}"


# --- commands ----------------------------------------------------------------------


def cmd_gen(cfg: dict, out: Path) -> Path:
    d = cfg["dataset"]
    lib = gen_library(d["vocab_size"], d["patch_dim"], d["seed"], cell_size=d["cell_size"])
    ds = gen_probe(lib, d["num_keys"], d["seed"], train_size=d["train_size"],
                   disjoint=d["disjoint"], system_len=d["system_len"])
    path = save_dataset(ds, out / "dataset.npz")
    (out / "dataset_manifest.json").write_text(json.dumps(ds.manifest, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "gen", cfg, dataset=str(path), dataset_hash=ds.content_hash)
    log.info("wrote %s (%d samples, hash %s)", path, len(ds), ds.content_hash[:12])
    return path


def cmd_train(cfg: dict, dataset: Path, out: Path, scheme: str, seed: int) -> Path:
    ds = load_dataset(dataset)
    mcfg = model_config(cfg, scheme, seed)
    if mcfg.text_vocab_size != ds.prompt.text_vocab_size or mcfg.patch_dim != ds.library.patch_dim:
        raise LabError("model config does not match the dataset (vocab_size / patch_dim / system_len)")
    model = init_model(mcfg)
    t0 = time.perf_counter()
    history = train(model, ds, train_config(cfg, seed))
    tag = _run_tag(scheme, seed)
    ckpt = save_checkpoint(model, out / f"checkpoint_{tag}.npz",
                           extra={"dataset_hash": ds.content_hash, "train": cfg["train"]})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "step", "loss", "grad_norm"])
    for row in history:
        w.writerow([row["stage"], row["step"], repr(row["loss"]), repr(row.get("grad_norm", ""))])
    (out / f"train_log_{tag}.csv").write_text(buf.getvalue())
    _write_manifest(out, f"train_{tag}", cfg, dataset=str(dataset), checkpoint=str(ckpt),
                    model=mcfg.to_dict())
    log.info("trained %s in %.1fs, final loss %.4f", tag, time.perf_counter() - t0, history[-1]["loss"])
    return ckpt


def cmd_eval(checkpoint: Path, dataset: Path, out: Path) -> metrics.PositionReport:
    model, _ = load_checkpoint(checkpoint)
    ds = load_dataset(dataset)
    report = metrics.evaluate(model, ds)
    metrics.save_report(report, out, stem=f"report_{_run_tag(model.cfg.scheme, model.cfg.seed)}")
    log.info("%s seed %s: avg %.4f delta %.6f acc_neg %.4f", report.scheme, report.seed,
             report.avg, report.delta, report.acc_neg)
    return report


def cmd_occlude(checkpoint: Path, dataset: Path, out: Path, regions=(3, 3), background: float = 0.0,
                limit: int | None = None) -> dict:
    model, _ = load_checkpoint(checkpoint)
    ds = load_dataset(dataset)
    ev = ds.indices(EVAL)
    pos = ev[ds.label[ev] == 1]
    if limit is not None:
        pos = pos[:limit]
    bg = np.full(ds.library.patch_dim, background)
    rate, maps = analysis.localization_rate(model, ds, pos, regions, bg)
    tag = _run_tag(model.cfg.scheme, model.cfg.seed)
    slot_maps = {}
    for n in range(NUM_SLOTS):
        sel = [m for i, m in zip(pos, maps) if ds.slot[i] == n]
        if sel:
            agg = analysis.aggregate_importance(sel)
            slot_maps[n] = agg
            analysis.write_matrix(out, f"occlusion_{tag}_slot{n}", agg,
                                  comment=f"importance, key slot {n}; {analysis.AGGREGATION}")
    summary = {
        "checkpoint": str(checkpoint),
        "regions": list(regions),
        "background": background,
        "aggregation": analysis.AGGREGATION,
        "samples": int(len(pos)),
        "localization_rate": rate,
    }
    (out / f"occlusion_{tag}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("%s: top region hits the key cell on %.1f%% of %d positives", tag, 100 * rate, len(pos))
    return summary


def cmd_simprobe(checkpoint: Path, dataset: Path, out: Path, background: float = 0.0) -> list:
    model, _ = load_checkpoint(checkpoint)
    ds = load_dataset(dataset)
    bg = np.full(ds.library.patch_dim, background)
    records = analysis.similarity_probe(model, ds, background=bg)
    mismatched = analysis.similarity_probe(model, ds, background=bg, caption_shift=1)
    tag = _run_tag(model.cfg.scheme, model.cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"similarity_{tag}.csv").write_text(analysis.similarity_csv(records))
    (out / f"similarity_{tag}_mismatched.csv").write_text(analysis.similarity_csv(mismatched))
    scores = np.array([r.score for r in records])
    log.info("%s similarity: mean %.4f spread %.3g (mismatched mean %.4f)", tag, scores.mean(),
             scores.max() - scores.min(), np.mean([r.score for r in mismatched]))
    return records


def cmd_flow(checkpoint: Path, dataset: Path, out: Path) -> analysis.AttentionFlowMap:
    model, _ = load_checkpoint(checkpoint)
    ds = load_dataset(dataset)
    flow = analysis.attention_flow(model, ds)
    tag = _run_tag(model.cfg.scheme, model.cfg.seed)
    analysis.write_matrix(out, f"flow_{tag}", flow.grid(), comment="mean text->image attention")
    doc = {"values": flow.values.tolist(), "cv": flow.cv, "total_mass": flow.total_mass,
           "num_samples": flow.num_samples, "normalization": flow.normalization}
    (out / f"flow_{tag}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    log.info("%s flow CV %.4f", tag, flow.cv)
    return flow


def cmd_compare(baseline: list[Path], candidate: list[Path], out: Path,
                avg_tolerance: float = 0.02, min_wins: int | None = None) -> metrics.ComparisonReport:
    a = [metrics.load_report(p) for p in baseline]
    b = [metrics.load_report(p) for p in candidate]
    comp = metrics.compare(a, b, avg_tolerance=avg_tolerance, min_wins=min_wins)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.json").write_text(comp.to_json())
    (out / "comparison.csv").write_text(comp.to_csv())
    v = comp.verdict
    log.info("variance reduced in %d/%d pairs; mean avg %.4f -> %.4f; trend reproduced: %s",
             v["variance_reduced_count"], v["pairs"], v["mean_avg_baseline"], v["mean_avg_candidate"],
             v["trend_reproduced"])
    return comp


def cmd_pipeline(cfg: dict, out: Path, schemes=("sequential", "bapa")) -> dict:
    t0 = time.perf_counter()
    dataset = cmd_gen(cfg, out)
    reports: dict[str, list[Path]] = {s: [] for s in schemes}
    flows: dict[str, list[float]] = {s: [] for s in schemes}
    occl: dict[str, list[float]] = {s: [] for s in schemes}
    for seed in cfg["seeds"]:
        for scheme in schemes:
            ckpt = cmd_train(cfg, dataset, out, scheme, seed)
            rep = cmd_eval(ckpt, dataset, out)
            reports[scheme].append(out / f"report_{_run_tag(scheme, seed)}.json")
            flows[scheme].append(cmd_flow(ckpt, dataset, out).cv)
            occl[scheme].append(cmd_occlude(ckpt, dataset, out)["localization_rate"])
            cmd_simprobe(ckpt, dataset, out)
            log.info("%s seed %d done", scheme, seed)
            del rep
    comp = cmd_compare(reports[schemes[0]], reports[schemes[1]], out)
    cv_wins = sum(b < a for a, b in zip(flows[schemes[0]], flows[schemes[1]]))
    summary = {
        "seeds": cfg["seeds"],
        "comparison": comp.verdict,
        "flow_cv": flows,
        "flow_cv_reduced_count": cv_wins,
        "localization_rate": occl,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "pipeline", cfg)
    log.info("pipeline finished in %.1fs", time.perf_counter() - t0)
    return summary


# --- argument parsing ------------------------------------------------------------------


def _regions(text: str) -> tuple[int, int]:
    try:
        r, c = text.lower().split("x")
        return int(r), int(c)
    except ValueError:
        raise argparse.ArgumentTypeError(f"regions must look like 3x3, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. --set train.steps=200")
    common.add_argument("--out", type=Path, help="output directory (default: config 'out')")
    common.add_argument("--seed", type=int, help="seed (train: model/data order; gen: dataset)")
    common.add_argument("--scheme", help="position scheme: sequential | bapa")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bapa-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the probe dataset")
    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--dataset", type=Path, required=True)
    for name in ("eval", "flow", "simprobe", "occlude"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--checkpoint", type=Path, required=True)
        s.add_argument("--dataset", type=Path, required=True)
        if name in ("occlude", "simprobe"):
            s.add_argument("--background", type=float, default=0.0, help="background patch value")
        if name == "occlude":
            s.add_argument("--regions", type=_regions, default=(3, 3))
            s.add_argument("--limit", type=int, default=None, help="max positive samples")
    c = sub.add_parser("compare", parents=[common], help="compare baseline vs candidate reports")
    c.add_argument("--baseline", type=Path, nargs="+", required=True)
    c.add_argument("--candidate", type=Path, nargs="+", required=True)
    c.add_argument("--avg-tolerance", type=float, default=0.02)
    c.add_argument("--min-wins", type=int, default=None)
    sub.add_parser("pipeline", parents=[common], help="gen, train both schemes per seed, analyse, compare")
    sub.add_parser("config", parents=[common], help="print the resolved config")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    overrides = list(args.overrides)
    if args.scheme is not None:
        overrides.append(f"scheme={json.dumps(args.scheme)}")
    if args.out is not None:
        overrides.append(f"out={json.dumps(str(args.out))}")
    if args.seed is not None and args.command == "gen":
        overrides.append(f"dataset.seed={args.seed}")
    elif args.seed is not None:
        overrides.append(f"seeds=[{args.seed}]")
    cfg = load_config(args.config, overrides)
    out = Path(cfg["out"])
    seed = cfg["seeds"][0]
    cmd = args.command
    if cmd == "config":
        sys.stdout.write(dump_config(cfg))
    elif cmd == "gen":
        cmd_gen(cfg, out)
    elif cmd == "train":
        cmd_train(cfg, args.dataset, out, cfg["scheme"], seed)
    elif cmd == "eval":
        cmd_eval(args.checkpoint, args.dataset, out)
    elif cmd == "occlude":
        cmd_occlude(args.checkpoint, args.dataset, out, args.regions, args.background, args.limit)
    elif cmd == "simprobe":
        cmd_simprobe(args.checkpoint, args.dataset, out, args.background)
    elif cmd == "flow":
        cmd_flow(args.checkpoint, args.dataset, out)
    elif cmd == "compare":
        cmd_compare(args.baseline, args.candidate, out, args.avg_tolerance, args.min_wins)
    elif cmd == "pipeline":
        cmd_pipeline(cfg, out)
    if cmd not in ("config", "pipeline"):
        _write_manifest(out, cmd, cfg, argv=list(sys.argv[1:] if argv is None else argv))
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except LabError as exc:
        print(f"bapa-lab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"bapa-lab: missing file: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
