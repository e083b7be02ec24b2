"""Command-line entry point: ``qsparse <command> ...``.

Exit codes: 0 success, 2 input or config error, 3 runtime or numerical failure.
Every command that writes to ``--out-dir`` also writes ``manifest.json``, and
``qsparse rerun`` replays a manifest.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import metrics, scaling_law, svg
from .config import FIELDS, ConfigError, RunConfig, from_flat, load_config
from .model import CheckpointError, ModelConfig, Transformer
from .sparse_ops import Mode
from .training import Batches, CorpusError, TrainingError, load_corpus, synthetic_corpus, train

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3
MANIFEST = "manifest.json"

log = logging.getLogger("qsparse")


class InputError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_text(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def write_manifest(out_dir: Path, command: str, config: Optional[RunConfig], inputs: dict, options: dict, outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "config": config.to_flat() if config is not None else None,
        "seed": config.seed if config is not None else None,
        "inputs": {k: {"path": str(Path(v).resolve()), "sha256": sha256(v)} for k, v in sorted(inputs.items())},
        "options": options,
        "outputs": {p.name: sha256(p) for p in sorted(outputs)},
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _overrides(extra: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"unrecognised argument {item!r} (overrides take the form --key=value)")
        key, value = item[2:].split("=", 1)
        if key not in FIELDS:
            raise ConfigError(f"{key}: unknown config key")
        out[key] = value
    return out


def _corpus(path) -> np.ndarray:
    try:
        return load_corpus(path)
    except OSError as exc:
        raise InputError(f"{path}: cannot read corpus ({exc.strerror})") from exc
    except CorpusError as exc:
        raise InputError(str(exc)) from exc


# train


def _loss_chart(runs: dict[str, list], key: str, ylabel: str, title: str) -> str:
    series = {name: [(r.step, getattr(r, key)) for r in steps] for name, steps in runs.items()}
    return svg.line_chart(series, title=title, xlabel="step", ylabel=ylabel)


def run_training(cfg: RunConfig, tokens: np.ndarray, out_dir: Path, prefix: str = "") -> tuple[list[Path], object]:
    model = Transformer.init(cfg.model_config(), seed=cfg.seed)
    try:
        run = train(model, tokens, cfg.train_config())
    except TrainingError as exc:
        if exc.run_log is not None:
            exc.run_log.write(out_dir, prefix)
        raise RuntimeFailure(f"training failed: {exc}") from exc
    except CorpusError as exc:
        raise InputError(str(exc)) from exc
    paths = list(run.write(out_dir, prefix).values())
    ckpt = out_dir / f"{prefix}checkpoint.bin"
    model.save(ckpt)
    paths.append(ckpt)
    return paths, run


def cmd_train(config_path, corpus_path, out_dir, overrides: Optional[dict] = None) -> list[Path]:
    cfg = load_config(config_path, overrides)
    tokens = _corpus(corpus_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths, run = run_training(cfg, tokens, out)
    paths.append(write_text(out / "config.txt", cfg.dumps()))
    paths.append(write_text(out / "loss.svg", _loss_chart({"train": run.steps}, "loss", "loss", "training loss")))
    write_manifest(out, "train", cfg, {"corpus": corpus_path}, {}, paths)
    return paths


# ablate

ABLATION_VARIANTS = ("topk_ste", "topk_no_ste", "relu", "dense")


def ablation_configs(cfg: RunConfig) -> dict[str, RunConfig]:
    keep = cfg.values["sparsity.keep"]
    base = {"sparsity.keep": keep}
    return {
        "topk_ste": cfg.with_overrides({**base, "sparsity.mode": "topk", "sparsity.ste": "true"}),
        "topk_no_ste": cfg.with_overrides({**base, "sparsity.mode": "topk", "sparsity.ste": "false"}),
        "relu": cfg.with_overrides({"sparsity.mode": "relu"}),
        "dense": cfg.with_overrides({"sparsity.mode": "dense"}),
    }


def cmd_ablate(config_path, corpus_path, out_dir, overrides: Optional[dict] = None) -> list[Path]:
    cfg = load_config(config_path, overrides)
    tokens = _corpus(corpus_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    runs = {}
    for name, vcfg in ablation_configs(cfg).items():
        vcfg.validate()
        p, run = run_training(vcfg, tokens, out, prefix=f"{name}_")
        paths.extend(p)
        runs[name] = run
    comparison = out / "comparison.csv"
    with open(comparison, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "variant", "loss", "overall_sparsity"])
        for name, run in runs.items():
            for r in run.steps:
                w.writerow([r.step, name, repr(r.loss), repr(r.overall_sparsity)])
    paths.append(comparison)
    steps = {name: run.steps for name, run in runs.items()}
    paths.append(write_text(out / "loss.svg", _loss_chart(steps, "loss", "loss", "training loss by sparsifier")))
    paths.append(
        write_text(out / "sparsity.svg", _loss_chart(steps, "overall_sparsity", "overall sparsity", "overall sparsity"))
    )
    for name in ("topk_ste", "relu"):
        by_class: dict[str, dict[int, list]] = defaultdict(lambda: defaultdict(list))
        for step, _layer, proj, value in runs[name].sparsity:
            by_class[metrics.PROJECTION_CLASS[proj]][step].append(value)
        series = {c: [(s, float(np.mean(v))) for s, v in sorted(by_class[c].items())] for c in metrics.REPORT_CLASSES}
        paths.append(
            write_text(
                out / f"{name}_components.svg",
                svg.line_chart(series, title=f"per-component sparsity ({name})", xlabel="step", ylabel="sparsity"),
            )
        )
    paths.append(write_text(out / "config.txt", cfg.dumps()))
    write_manifest(out, "ablate", cfg, {"corpus": corpus_path}, {}, paths)
    return paths


# probe


def cmd_probe(checkpoint, corpus_path, out_dir, config_path=None, overrides=None, n_batches: int = 8, keep_fraction: float = 0.5) -> list[Path]:
    try:
        model = Transformer.load(checkpoint)
    except OSError as exc:
        raise InputError(f"{checkpoint}: cannot read checkpoint ({exc.strerror})") from exc
    except CheckpointError as exc:
        raise InputError(str(exc)) from exc
    cfg = RunConfig()
    if config_path is not None or overrides:
        cfg = load_config(config_path, overrides)
        if config_path is not None and cfg.model_config() != model.cfg:
            raise InputError(f"{checkpoint}: checkpoint model config does not match {config_path}")
    tokens = _corpus(corpus_path)
    tcfg = cfg.train_config()
    try:
        data = Batches(tokens, model.cfg.seq_length, max(1, tcfg.batch_size_tokens // model.cfg.seq_length), cfg.seed)
    except CorpusError as exc:
        raise InputError(str(exc)) from exc
    batches = data.eval_batches(n_batches)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []

    report = metrics.measure_sparsity(model, batches)
    sp_csv = out / "sparsity.csv"
    report.write_csv(sp_csv)
    paths.append(sp_csv)
    summary = out / "summary.json"
    metrics.write_summary(summary, report, metrics.flops_per_token(model.cfg, report))
    paths.append(summary)
    paths.append(write_text(out / "sparsity.svg", svg.bar_chart(report.ratios, title="input sparsity by projection", ylabel="sparsity")))

    probes = metrics.probe_gradients(model, batches, keep_fraction=keep_fraction)
    grad_csv = out / "gradients.csv"
    with open(grad_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "projection", "layer", "value"])
        for variant, probe in probes.items():
            for (layer, proj), value in sorted(probe.norms.items()):
                w.writerow([variant, proj, layer, repr(value)])
    paths.append(grad_csv)
    paths.extend(render_probe_svgs(grad_csv, out))
    write_manifest(
        out, "probe", cfg, {"checkpoint": checkpoint, "corpus": corpus_path},
        {"n_batches": n_batches, "keep_fraction": keep_fraction, "config_given": config_path is not None}, paths,
    )
    return paths


def render_probe_svgs(grad_csv: Path, out: Path) -> list[Path]:
    """One chart per projection: mean gradient norm against layer, a series per variant."""
    data: dict[str, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    with open(grad_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            data[row["projection"]][row["variant"]].append((int(row["layer"]), float(row["value"])))
    paths = []
    for proj in ("q", "k", "v", "out", "gate", "up", "down"):
        series = {v: sorted(pts) for v, pts in data[proj].items()}
        p = out / f"grad_{proj}.svg"
        p.write_text(svg.line_chart(series, title=f"{proj} projection gradient norm", xlabel="layer", ylabel="mean L2 norm"))
        paths.append(p)
    return paths


# fit / optimal


def cmd_fit(observations_csv, out_dir, delta: float = scaling_law.DEFAULT_DELTA) -> list[Path]:
    try:
        obs = scaling_law.read_observations(observations_csv)
    except OSError as exc:
        raise InputError(f"{observations_csv}: cannot read ({exc.strerror})") from exc
    except scaling_law.ObservationFileError as exc:
        raise InputError(str(exc)) from exc
    try:
        result = scaling_law.fit(obs, delta=delta)
    except scaling_law.FitError as exc:
        table = "\n".join(
            f"  start {d.index}: objective={d.objective!r} iterations={d.iterations} {d.message}" for d in exc.diagnostics
        )
        raise RuntimeFailure(f"fit failed: {exc}\n{table}".rstrip()) from exc
    optimum = scaling_law.solve_optimal_sparsity(result.params)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        **result.to_json(),
        "delta": delta,
        "s_star": optimum.s_star,
        "n_params_ratio": optimum.n_params_ratio,
        "boundary": optimum.boundary,
    }
    params_json = out / "params.json"
    params_json.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    paths = [params_json]
    charts = {
        "n": ("model size N", True, "loss vs N at fixed sparsity"),
        "s": ("sparsity S", False, "loss vs S at fixed N"),
        "optimal": ("activated parameters N_a", True, "inference-optimal scaling"),
    }
    for axis, (xlabel, log_x, title) in charts.items():
        rows = scaling_law.emit_curves(result.params, axis)
        csv_path = out / f"curve_{axis}.csv"
        scaling_law.write_curve_csv(csv_path, rows)
        series: dict[str, list] = defaultdict(list)
        for name, x, y in rows:
            series[name].append((x, y))
        svg_path = write_text(out / f"curve_{axis}.svg", svg.line_chart(series, title=title, xlabel=xlabel, ylabel="predicted loss", log_x=log_x))
        paths += [csv_path, svg_path]
    write_manifest(out, "fit", None, {"observations": observations_csv}, {"delta": delta}, paths)
    return paths


def load_params(path) -> scaling_law.ScalingLawParams:
    try:
        raw = json.loads(Path(path).read_text())
        return scaling_law.ScalingLawParams(*(float(raw[k]) for k in scaling_law.PARAM_NAMES))
    except OSError as exc:
        raise InputError(f"{path}: cannot read ({exc.strerror})") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: invalid params JSON ({exc})") from exc


def cmd_optimal(params_json, out_dir=None, n_activated: float = 1e9) -> dict:
    params = load_params(params_json)
    if params.c_dense <= 0 or params.beta <= 0 or params.alpha <= 0:
        log.warning("degenerate parameters (C, beta or alpha not positive); expect a boundary result")
    result = scaling_law.solve_optimal_sparsity(params)
    payload = result.to_json(params, n_activated)
    if result.boundary:
        log.warning("no interior optimum: minimiser sits at S=%s", result.s_star)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        p = out / "optimal.json"
        p.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        write_manifest(out, "optimal", None, {"params": params_json}, {"n_activated": n_activated}, [p])
    return payload


# rerun


def cmd_rerun(manifest_path, out_dir) -> tuple[bool, dict]:
    try:
        manifest = json.loads(Path(manifest_path).read_text())
        command = manifest["command"]
        inputs = {k: v["path"] for k, v in manifest["inputs"].items()}
        options = manifest.get("options", {})
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{manifest_path}: invalid manifest ({exc})") from exc
    for name, entry in manifest["inputs"].items():
        if not Path(entry["path"]).exists() or sha256(entry["path"]) != entry["sha256"]:
            raise InputError(f"{manifest_path}: input {name} changed or missing ({entry['path']})")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_file = None
    if manifest.get("config") is not None:
        cfg_file = out / ".rerun_config.txt"
        cfg_file.write_text(from_flat(manifest["config"]).dumps())
    try:
        if command == "train":
            cmd_train(cfg_file, inputs["corpus"], out)
        elif command == "ablate":
            cmd_ablate(cfg_file, inputs["corpus"], out)
        elif command == "probe":
            cmd_probe(
                inputs["checkpoint"], inputs["corpus"], out,
                config_path=cfg_file if options.get("config_given") else None,
                overrides=None if options.get("config_given") else manifest["config"],
                n_batches=options["n_batches"], keep_fraction=options["keep_fraction"],
            )
        elif command == "fit":
            cmd_fit(inputs["observations"], out, delta=options["delta"])
        elif command == "optimal":
            cmd_optimal(inputs["params"], out, n_activated=options["n_activated"])
        else:
            raise InputError(f"{manifest_path}: unknown command {command!r}")
    finally:
        if cfg_file is not None:
            cfg_file.unlink(missing_ok=True)
    fresh = json.loads((out / MANIFEST).read_text())["outputs"]
    diffs = {k: (v, fresh.get(k)) for k, v in manifest["outputs"].items() if fresh.get(k) != v}
    return not diffs, diffs


# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsparse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("train", "train one model"), ("ablate", "top-K/STE/ReLU/dense ablation")):
        p = sub.add_parser(name, help=help_text, description="Extra --section.key=value flags override the config.")
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--corpus", required=True, help="raw text file (byte-level tokens)")
        p.add_argument("--out-dir", required=True)

    p = sub.add_parser("probe", help="gradient and sparsity probes of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--batches", type=int, default=8)
    p.add_argument("--keep", type=float, default=0.5, help="keep fraction for probing a dense checkpoint")

    p = sub.add_parser("fit", help="fit the sparsity scaling law to observations")
    p.add_argument("observations", help="CSV with n_params,sparsity,loss")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--delta", type=float, default=scaling_law.DEFAULT_DELTA)

    p = sub.add_parser("optimal", help="inference-optimal sparsity for fitted parameters")
    p.add_argument("params", help="JSON with e_irreducible,b_sparse,c_dense,alpha,beta")
    p.add_argument("--out-dir")
    p.add_argument("--n-activated", type=float, default=1e9)

    p = sub.add_parser("rerun", help="replay a manifest and check outputs match")
    p.add_argument("manifest")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("corpus", help="write a deterministic synthetic text corpus")
    p.add_argument("output")
    p.add_argument("--bytes", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if extra and args.command not in ("train", "ablate", "probe"):
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        overrides = _overrides(extra) if extra else None
        if args.command == "train":
            cmd_train(args.config, args.corpus, args.out_dir, overrides)
        elif args.command == "ablate":
            cmd_ablate(args.config, args.corpus, args.out_dir, overrides)
        elif args.command == "probe":
            cmd_probe(args.checkpoint, args.corpus, args.out_dir, args.config, overrides, args.batches, args.keep)
        elif args.command == "fit":
            cmd_fit(args.observations, args.out_dir, args.delta)
        elif args.command == "optimal":
            print(json.dumps(cmd_optimal(args.params, args.out_dir, args.n_activated), indent=2, sort_keys=True))
        elif args.command == "rerun":
            same, diffs = cmd_rerun(args.manifest, args.out_dir)
            if not same:
                for name, (old, new) in sorted(diffs.items()):
                    print(f"mismatch: {name} {old} != {new}", file=sys.stderr)
                return EXIT_RUNTIME
            print("all outputs reproduced")
        elif args.command == "corpus":
            Path(args.output).write_bytes(synthetic_corpus(args.bytes, args.seed))
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RuntimeFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
