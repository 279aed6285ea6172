"""``cmdistill`` command line: data generation, training, evaluation and diagnostics."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ABLATION_ROWS, LAMBDA1_GRID, RunConfig, SyntheticSpec, load_config, parse_config_text
from .data import Dataset, gen_synthetic, read_dataset, write_dataset
from .diagnostics import COMPONENTS, OBJECTIVES, grad_check, gradient_concentration
from .errors import CMDError, ConfigError
from .eval import export_features, extract_features, linear_probe, metrics_csv, retrieval_eval
from .trainer import DistillState, checkpoint_load, train

log = logging.getLogger("cmdistill")


def _load_spec(path: str) -> SyntheticSpec:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"spec file not found: {p}")
    _, spec = parse_config_text(p.read_text(), str(p))
    if os.environ.get("CMD_SEED"):
        try:
            spec.seed = int(os.environ["CMD_SEED"])
        except ValueError:
            raise ConfigError(f"CMD_SEED must be an integer, got {os.environ['CMD_SEED']!r}") from None
    return spec.validate()


def train_split(data: Dataset) -> Dataset:
    return data.subset(data.split() == "train")


def evaluate(state: DistillState, data: Dataset, label_fraction: float = 1.0, metric: str = "cosine") -> dict:
    table = extract_features(data, state.student, state.config.image_crop_px)
    test = table.split == "test"
    r1, r5, m = retrieval_eval(table.features[test], table.labels[test], metric)
    top1 = linear_probe(table, label_fraction, seed=state.config.seed)
    return {"top1": top1, "rank1": r1, "rank5": r5, "mAP": m}


# subcommands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = _load_spec(args.spec)
    path = write_dataset(gen_synthetic(spec), spec, args.out)
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    cfg, _ = load_config(args.config)
    data = read_dataset(args.data)
    state, history = train(train_split(data), cfg, args.out, progress=True)
    last = history[-1] if history else {}
    print(f"trained {state.step} steps; final loss {last.get('loss_total', float('nan')):.6f}; outputs in {args.out}")
    return 0


def cmd_probe(args) -> int:
    state = checkpoint_load(args.checkpoint)
    table = extract_features(read_dataset(args.data), state.student, state.config.image_crop_px)
    top1 = linear_probe(table, args.label_fraction, seed=state.config.seed)
    if args.export_features:
        export_features(table, args.export_features)
    print(metrics_csv({"top1": top1}), end="")
    return 0


def cmd_retrieve(args) -> int:
    state = checkpoint_load(args.checkpoint)
    table = extract_features(read_dataset(args.data), state.student, state.config.image_crop_px)
    test = table.split == "test"
    r1, r5, m = retrieval_eval(table.features[test], table.labels[test], args.metric)
    print(metrics_csv({"rank1": r1, "rank5": r5, "mAP": m}), end="")
    return 0


def cmd_gradcheck(args) -> int:
    report = grad_check(seed=args.seed, component=args.component)
    print(report.text())
    return 0 if report.passed else 1


def cmd_diagnose(args) -> int:
    state = checkpoint_load(args.checkpoint)
    data = read_dataset(args.data)
    data = data.subset(data.split() == "test")
    report = gradient_concentration(state, data, args.objective, args.samples, state.config.seed)
    print(report.text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"report-diagnose-{args.objective}.csv").write_text(report.csv())
    return 0


def ablation_cells(cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    """Component rows followed by the lambda1 grid on the full objective."""
    cells = [(name, cfg.replace(**toggles)) for name, toggles in ABLATION_ROWS]
    full = dict(ABLATION_ROWS)["LV+MIL+LR+LT+LS"]
    cells += [(f"lambda1={lam:g}", cfg.replace(lambda1=lam, **full)) for lam in LAMBDA1_GRID]
    return cells


def cmd_ablate(args) -> int:
    cfg, _ = load_config(args.config)
    data = read_dataset(args.data)
    rows = ["cell,lambda1,top1,rank1,rank5,mAP"]
    print(rows[0], flush=True)
    for name, cell_cfg in ablation_cells(cfg):
        state, _ = train(train_split(data), cell_cfg)
        m = evaluate(state, data)
        row = f"{name},{cell_cfg.lambda1!r},{m['top1']!r},{m['rank1']!r},{m['rank5']!r},{m['mAP']!r}"
        rows.append(row)
        print(row, flush=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report-ablate.csv").write_text("\n".join(rows) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmdistill", description="Teacher-student distillation on patch bags at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write the synthetic dataset and its manifest")
    s.add_argument("--spec", required=True, help="key = value file with data.* fields")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="self-supervised training on the train split")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("probe", help="linear-probe top-1 on frozen features")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--label-fraction", type=float, default=1.0)
    s.add_argument("--export-features", metavar="FILE", help="also write the feature table")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("retrieve", help="Rank-1 / Rank-5 / mAP on the test split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--metric", choices=("cosine", "euclidean"), default="cosine")
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--component", choices=COMPONENTS, default="total")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("diagnose", help="glyph gradient-concentration report")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--objective", choices=OBJECTIVES, required=True)
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--out", help="directory for report-diagnose-<objective>.csv")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("ablate", help="component and lambda1 ablation grid")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="directory for report-ablate.csv")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CMDError, FileNotFoundError) as e:
        print(f"cmdistill {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
