"""Command-line front-end: generate, analyze, train, decode, evaluate, pipeline.

Each command is a thin wrapper over the library; output files are exactly
what the corresponding library calls produce. Errors map to exit codes
2 (config/validation), 3 (data/dimensions), 4 (numeric) and 5 (incomplete
input).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence


from . import __version__
from .analysis import RidgeConfig, fmri_auto_rsa, ridge_offset_analysis, ridge_random_baseline, rsa_over_sessions
from .core import SplitConfig, build_windows, carve_validation, file_sha256, load_dataset, save_dataset, split_contamination_free
from .decode import build_bank, decode_records, read_jsonl, write_jsonl
from .errors import ConfigError, DimensionMismatchError, MemtangleError
from .evaluation import evaluate_run, format_table, write_report_csv
from .model import (
    TrainConfig,
    batch_from_windows,
    config_dict,
    load_checkpoint,
    predict,
    save_checkpoint,
    train_disentangled,
    train_straightforward,
    write_trace,
)
from .synthgen import GenConfig, generate

MODES = ("ridge", "rsa", "auto-rsa")


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    tmp.replace(path)


def _load_json(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def _g9(x: float) -> str:
    return f"{x:.9g}"


def _max_jobs() -> int:
    raw = os.environ.get("MEMTANGLE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MEMTANGLE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"MEMTANGLE_THREADS must be >= 1, got {n}")
    return n


@dataclass
class RunManifest:
    command: str
    config: dict
    dataset_sha256: str | None = None
    seeds: list[int] = field(default_factory=list)
    outputs: dict[str, str] = field(default_factory=dict)
    output_sha256: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    version: str = __version__

    def write(self, path: str | Path) -> None:
        for name, p in sorted(self.outputs.items()):
            if Path(p).is_file():
                self.output_sha256[name] = file_sha256(p)
        _atomic_write_text(Path(path), json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


# -- generate ---------------------------------------------------------------


def run_generate(cfg: GenConfig, out: Path) -> tuple[str, float]:
    t0 = time.perf_counter()
    digest = save_dataset(generate(cfg), out)
    return digest, time.perf_counter() - t0


def cmd_generate(args) -> int:
    data = _load_json(args.config) if args.config else {}
    for key in ("n_sessions", "n_images", "seed"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    if "n_images" not in data and "n_sessions" in data:
        cfg = GenConfig.nsd_like(**{k: v for k, v in data.items() if k != "n_images"})
    else:
        cfg = GenConfig.from_dict(data)
    cfg.validate()
    out = Path(args.out)
    digest, elapsed = run_generate(cfg, out)
    manifest = RunManifest(
        command="generate",
        config={"generate": asdict(cfg)},
        dataset_sha256=digest,
        seeds=[int(cfg.seed)],
        outputs={"dataset": str(out)},
        timings={"generate": elapsed},
    )
    manifest.write(out.with_name(out.name + ".manifest.json"))
    print(f"wrote {out} sha256={digest}")
    return 0


# -- analyze ----------------------------------------------------------------


def run_analysis(dataset, mode: str, max_k: int, lam: float, seed: int, m: int) -> dict:
    """Library calls behind ``analyze``; returns the JSON summary."""
    if mode == "ridge":
        rcfg = RidgeConfig(lam=lam, max_k=max_k)
        split = SplitConfig(m=m, seed=seed)
        curve = ridge_offset_analysis(dataset, rcfg, split)
        baseline = ridge_random_baseline(dataset, rcfg, split)
        return {"mode": mode, "max_k": max_k, "lambda": lam, "seed": seed, "m": m,
                "curve": [[k, v] for k, v in curve], "baseline": baseline}
    if mode == "rsa":
        res = rsa_over_sessions(dataset, max_k)
    elif mode == "auto-rsa":
        res = fmri_auto_rsa(dataset, max_k)
    else:
        raise ConfigError(f"unknown analysis mode {mode!r}; choose from {', '.join(MODES)}")
    return {"mode": mode, "max_k": max_k, "curve": [[k, v] for k, v in zip(res.ks, res.per_k)]}


def write_analysis(summary: dict, out_dir: Path) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = summary["mode"].replace("-", "_")
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if summary["mode"] == "ridge":
            b = summary["baseline"]
            w.writerow(["k", "score", "baseline"])
            for k, v in summary["curve"]:
                w.writerow([k, _g9(v), _g9(b)])
            w.writerow(["rand", _g9(b), _g9(b)])
        else:
            w.writerow(["k", "rho_ave"])
            for k, v in summary["curve"]:
                w.writerow([k, _g9(v)])
    _atomic_write_text(json_path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {f"{stem}_csv": csv_path, f"{stem}_json": json_path}


def cmd_analyze(args) -> int:
    dataset = load_dataset(args.dataset)
    summary = run_analysis(dataset, args.mode, args.max_k, args.lam, args.seed, args.m)
    paths = write_analysis(summary, Path(args.out_dir))
    for p in paths.values():
        print(f"wrote {p}")
    return 0


# -- train ------------------------------------------------------------------


def run_tag(method: str, alpha: float | None, seed: int) -> str:
    if method == "sf":
        return f"sf_s{seed}"
    return f"dis_a{alpha:g}_s{seed}"


def split_for_seed(dataset, m: int, seed: int):
    """Per-seed test draw, then a validation carve of the same size."""
    windows = build_windows(dataset)
    train, test = split_contamination_free(windows, SplitConfig(m=m, seed=seed))
    train, val = carve_validation(train, m, seed)
    return train, val, test


def train_one(dataset_path: str, method: str, alpha: float | None, seed: int, m: int, train_cfg: dict, out_dir: str) -> dict[str, str]:
    """Train one seed and write its checkpoint and loss trace."""
    dataset = load_dataset(dataset_path)
    cfg = TrainConfig.from_dict({**train_cfg, "seed": seed, "alpha": 0.0 if alpha is None else alpha})
    train, val, _ = split_for_seed(dataset, m, seed)
    dtype = cfg.np_dtype
    tb = batch_from_windows(train, dtype)
    vb = batch_from_windows(val, dtype)
    if method == "sf":
        model, trace = train_straightforward(tb, cfg, vb)
    elif method == "dis":
        model, trace = train_disentangled(tb, cfg, vb)
    else:
        raise ConfigError(f"unknown method {method!r}; choose sf or dis")
    tag = run_tag(method, alpha, seed)
    out = Path(out_dir)
    ckpt = out / f"{tag}.mdmw"
    trace_path = out / f"{tag}.trace.csv"
    extra = {
        "train_config": config_dict(cfg),
        "method": method,
        "alpha": alpha,
        "split": {"m": m, "seed": seed},
        "dataset_sha256": file_sha256(dataset_path),
    }
    save_checkpoint(model, ckpt, extra)
    write_trace(trace, trace_path)
    return {f"{tag}_checkpoint": str(ckpt), f"{tag}_trace": str(trace_path)}


def run_training(dataset_path: str, jobs: Sequence[tuple[str, float | None, int]], m: int, train_cfg: dict, out_dir: Path) -> dict[str, str]:
    out_dir.mkdir(parents=True, exist_ok=True)
    n = min(_max_jobs(), len(jobs))
    args = [(str(dataset_path), meth, a, s, m, train_cfg, str(out_dir)) for meth, a, s in jobs]
    outputs: dict[str, str] = {}
    if n <= 1:
        results = [train_one(*a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(train_one, *zip(*args)))
    for r in results:
        outputs.update(r)
    return outputs


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds needs at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"--seeds contains duplicates: {text}")
    return seeds


def _train_overrides(args) -> dict:
    data = _load_json(args.config) if args.config else {}
    data = dict(data.get("train", data))
    for key in ("epochs", "batch_size", "lr", "weight_decay", "tau", "d_h", "out_gain", "dtype"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    if args.hidden is not None:
        data["hidden"] = [int(h) for h in args.hidden.split(",") if h.strip()]
    TrainConfig.from_dict(data)  # validate before any work starts
    return data


def cmd_train(args) -> int:
    seeds = _parse_seeds(args.seeds)
    train_cfg = _train_overrides(args)
    alpha = None if args.method == "sf" else args.alpha
    out_dir = Path(args.out_dir)
    t0 = time.perf_counter()
    outputs = run_training(args.dataset, [(args.method, alpha, s) for s in seeds], args.m, train_cfg, out_dir)
    manifest = RunManifest(
        command="train",
        config={"train": train_cfg, "method": args.method, "alpha": alpha, "m": args.m},
        dataset_sha256=file_sha256(args.dataset),
        seeds=seeds,
        outputs=outputs,
        timings={"train": time.perf_counter() - t0},
    )
    manifest.write(out_dir / f"train_{args.method}{'' if alpha is None else f'_a{alpha:g}'}.manifest.json")
    for p in outputs.values():
        print(f"wrote {p}")
    return 0


# -- decode -----------------------------------------------------------------


def decode_checkpoint(ckpt_path: str | Path, dataset, split_seed: int | None = None, m: int | None = None) -> list[dict]:
    model, header = load_checkpoint(ckpt_path)
    arch = header["architecture"]
    if arch["d_f"] != dataset.d_f or arch["d_c"] != dataset.d_c:
        raise DimensionMismatchError(
            f"checkpoint expects d_f={arch['d_f']}, d_c={arch['d_c']} but dataset has d_f={dataset.d_f}, d_c={dataset.d_c}"
        )
    split = header.get("split", {})
    seed = split.get("seed") if split_seed is None else split_seed
    m = split.get("m", 500) if m is None else m
    if seed is None:
        raise ConfigError("checkpoint records no split seed; pass --split-seed")
    train, _, test = split_for_seed(dataset, m, seed)
    bank = build_bank(dataset, train)
    preds = predict(model, batch_from_windows(test))
    return decode_records(preds, test, dataset, bank, header.get("method", arch["method"]), header.get("alpha"), seed)


def cmd_decode(args) -> int:
    dataset = load_dataset(args.dataset)
    records = decode_checkpoint(args.checkpoint, dataset, args.split_seed, args.m)
    write_jsonl(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


# -- evaluate ---------------------------------------------------------------


def run_evaluate(paths: Sequence[str | Path], csv_out: Path, table_out: Path | None, seeds: Sequence[int] | None = None):
    records = [rec for p in paths for rec in read_jsonl(p)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = evaluate_run(records, expected_seeds=seeds)
    for msg in report.warnings:
        print(f"warning: {msg}", file=sys.stderr)
    write_report_csv(report, csv_out)
    table = format_table(report)
    if table_out is not None:
        _atomic_write_text(table_out, table)
    return report, table


def cmd_evaluate(args) -> int:
    seeds = _parse_seeds(args.seeds) if args.seeds else None
    _, table = run_evaluate(args.decoded, Path(args.out), Path(args.table) if args.table else None, seeds)
    print(table, end="")
    return 0


# -- pipeline ---------------------------------------------------------------


PIPELINE_KEYS = {"out_dir", "generate", "analyze", "split", "train", "alphas", "seeds", "methods"}


@dataclass
class PipelineConfig:
    out_dir: str
    generate: dict
    analyze: dict = field(default_factory=lambda: {"max_k": 9, "lambda": 1.0, "seed": 0, "m": 500})
    split: dict = field(default_factory=lambda: {"m": 500})
    train: dict = field(default_factory=dict)
    methods: list[str] = field(default_factory=lambda: ["sf", "dis"])
    alphas: list[float] = field(default_factory=lambda: [0.0, 0.01, 0.1])
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])

    @classmethod
    def from_dict(cls, data: dict, base: Path | None = None) -> "PipelineConfig":
        unknown = sorted(set(data) - PIPELINE_KEYS)
        if unknown:
            raise ConfigError(f"unknown pipeline field(s): {', '.join(unknown)}")
        if "generate" not in data:
            raise ConfigError("pipeline config needs a 'generate' section")
        cfg = cls(**{"out_dir": "pipeline_out", **data})
        if base is not None and not Path(cfg.out_dir).is_absolute():
            cfg.out_dir = str(base / cfg.out_dir)
        bad = [m for m in cfg.methods if m not in ("sf", "dis")]
        if bad:
            raise ConfigError(f"methods must be sf and/or dis, got {bad}")
        if not cfg.seeds or len(set(cfg.seeds)) != len(cfg.seeds):
            raise ConfigError(f"seeds must be a non-empty list of distinct integers, got {cfg.seeds}")
        extra = sorted(set(cfg.analyze) - {"max_k", "lambda", "seed", "m"})
        if extra:
            raise ConfigError(f"unknown analyze field(s): {', '.join(extra)}")
        extra = sorted(set(cfg.split) - {"m"})
        if extra:
            raise ConfigError(f"unknown split field(s): {', '.join(extra)}")
        TrainConfig.from_dict(cfg.train)
        gen = GenConfig.from_dict(cfg.generate)
        gen.validate()
        return cfg

    def jobs(self) -> list[tuple[str, float | None, int]]:
        out = []
        for method in self.methods:
            for alpha in ([None] if method == "sf" else [float(a) for a in self.alphas]):
                out.extend((method, alpha, int(s)) for s in self.seeds)
        return out


class StageError(MemtangleError):
    def __init__(self, stage: str, exc: MemtangleError):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.exit_code = exc.exit_code


def run_pipeline(cfg: PipelineConfig) -> RunManifest:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    if manifest_path.exists():
        manifest_path.unlink()
    manifest = RunManifest(command="pipeline", config=asdict(cfg), seeds=[int(s) for s in cfg.seeds])
    stage = "generate"
    try:
        gen = GenConfig.from_dict(cfg.generate)
        data_path = out / "dataset.mdst"
        manifest.dataset_sha256, manifest.timings["generate"] = run_generate(gen, data_path)
        manifest.outputs["dataset"] = str(data_path)
        dataset = load_dataset(data_path)

        stage = "analyze"
        t0 = time.perf_counter()
        a = cfg.analyze
        for mode in MODES:
            summary = run_analysis(dataset, mode, int(a.get("max_k", 9)), float(a.get("lambda", 1.0)),
                                   int(a.get("seed", 0)), int(a.get("m", 500)))
            manifest.outputs.update({k: str(v) for k, v in write_analysis(summary, out / "analysis").items()})
        manifest.timings["analyze"] = time.perf_counter() - t0

        stage = "train"
        t0 = time.perf_counter()
        m = int(cfg.split.get("m", 500))
        manifest.outputs.update(run_training(str(data_path), cfg.jobs(), m, cfg.train, out / "runs"))
        manifest.timings["train"] = time.perf_counter() - t0

        stage = "decode"
        t0 = time.perf_counter()
        decoded = []
        for method, alpha, seed in cfg.jobs():
            tag = run_tag(method, alpha, seed)
            path = out / "decoded" / f"{tag}.jsonl"
            path.parent.mkdir(exist_ok=True)
            write_jsonl(decode_checkpoint(out / "runs" / f"{tag}.mdmw", dataset), path)
            manifest.outputs[f"{tag}_decoded"] = str(path)
            decoded.append(path)
        manifest.timings["decode"] = time.perf_counter() - t0

        stage = "evaluate"
        t0 = time.perf_counter()
        report_csv, report_txt = out / "report.csv", out / "report.txt"
        run_evaluate(decoded, report_csv, report_txt, cfg.seeds)
        manifest.outputs.update({"report_csv": str(report_csv), "report_table": str(report_txt)})
        manifest.timings["evaluate"] = time.perf_counter() - t0
    except MemtangleError as exc:
        raise StageError(stage, exc) from exc
    manifest.write(manifest_path)
    return manifest


def cmd_pipeline(args) -> int:
    path = Path(args.config)
    data = _load_json(path)
    if args.out_dir:
        data["out_dir"] = args.out_dir
    cfg = PipelineConfig.from_dict(data, base=Path.cwd())
    manifest = run_pipeline(cfg)
    print(f"pipeline finished; manifest at {Path(cfg.out_dir) / 'manifest.json'}")
    for stage, secs in manifest.timings.items():
        print(f"  {stage:<9} {secs:8.1f} s")
    return 0


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memtangle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"memtangle {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--config", help="GenConfig JSON")
    p.add_argument("--out", required=True, help="output .mdst path")
    p.add_argument("--n-sessions", dest="n_sessions", type=int)
    p.add_argument("--n-images", dest="n_images", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze", help="retention curves (ridge, RSA, auto-RSA)")
    p.add_argument("dataset")
    p.add_argument("--mode", choices=MODES, required=True)
    p.add_argument("--max-k", dest="max_k", type=int, default=9)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--m", type=int, default=500, help="test windows for the ridge split")
    p.add_argument("--out-dir", dest="out_dir", default=".")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train decoders, one checkpoint per seed")
    p.add_argument("dataset")
    p.add_argument("--method", choices=("sf", "dis"), required=True)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--m", type=int, default=500, help="test and validation size")
    p.add_argument("--config", help="TrainConfig JSON (or a pipeline config with a 'train' section)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--d-h", dest="d_h", type=int)
    p.add_argument("--hidden", help="comma-separated hidden widths, empty for linear")
    p.add_argument("--out-gain", dest="out_gain", type=float)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--out-dir", dest="out_dir", default="runs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="caption the test windows of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split-seed", dest="split_seed", type=int, help="defaults to the seed stored in the checkpoint")
    p.add_argument("--m", type=int, help="defaults to the m stored in the checkpoint")
    p.add_argument("--out", required=True, help="output .jsonl path")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="CIDEr / METEOR-lite / top-1 report")
    p.add_argument("decoded", nargs="+", help="decoded .jsonl files")
    p.add_argument("--seeds", help="expected seeds; missing cells are an error")
    p.add_argument("--out", default="report.csv")
    p.add_argument("--table", help="also write the text table here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="generate, analyze, train, decode and evaluate")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except MemtangleError as exc:
        print(f"memtangle {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # argument-level problems raised by library pre-condition checks
        print(f"memtangle {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        # unreadable inputs count as data errors
        print(f"memtangle {args.command}: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
