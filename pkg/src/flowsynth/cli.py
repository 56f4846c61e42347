"""Command-line pipeline: encode, train, sample, eval, pca, bench.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training
divergence, 4 evaluation non-convergence. Flags beat --config file
values, which beat built-in defaults. All randomness derives from one
--seed via labeled sub-seeds.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bench as bench_mod
from .codec import (
    BINNING_MODES,
    codebook_schema_hints,
    encode,
    fit_codebook,
    load_codebook,
    load_symbol_dataset,
    save_codebook,
    save_symbol_dataset,
)
from .errors import ConvergenceError, DivergenceError, FlowsynthError, UsageError
from .evaluation import evaluate
from .ingest import clean, load_csv, parse_schema_hints, pca_explained_variance
from .models import ARCHITECTURES, ModelConfig, TRANSFORMER, count_params
from .rng import Rng, derive_seed
from .sampling import generate_flows
from .training import TrainConfig, load_checkpoint, save_checkpoint, train, write_loss_csv


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise UsageError(message)


def _load_config_file(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such config file: {path}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _resolve(args, config: dict[str, str], name: str, default, cast):
    """Flag > config file > default."""
    flag = getattr(args, name.replace("-", "_"))
    if flag is not None:
        return flag
    if name in config:
        try:
            return cast(config[name])
        except ValueError:
            raise UsageError(f"config value {name}={config[name]!r} is not a valid {cast.__name__}") from None
    return default


def _parse_features(spec: str) -> list[str]:
    if spec.startswith("@"):
        path = Path(spec[1:])
        if not path.exists():
            raise UsageError(f"no such feature list file: {path}")
        return [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    return [f.strip() for f in spec.split(",") if f.strip()]


def _load_hints(args) -> dict[str, str]:
    return parse_schema_hints(args.schema_hints) if getattr(args, "schema_hints", None) else {}


def _load_table(path: str, hints: dict[str, str]):
    table = load_csv(path, schema_hint=hints or None)
    table, stats = clean(table)
    if not stats.empty or table.dropped_rows:
        print(stats.to_text(), file=sys.stderr)
        if table.dropped_rows:
            print(f"  rows dropped while parsing: {table.dropped_rows}", file=sys.stderr)
    return table


def cmd_encode(args, config: dict[str, str]) -> int:
    k = _resolve(args, config, "k", 49, int)
    mode = _resolve(args, config, "mode", "equalfreq", str)
    if k < 2:
        raise UsageError(f"alphabet size K must be >= 2, got {k}")
    if mode not in BINNING_MODES:
        raise UsageError(f"unknown mode {mode!r}; pick one of {BINNING_MODES}")
    table = _load_table(args.input, _load_hints(args))
    features = _parse_features(args.features)
    codebook = fit_codebook(table, features, k=k, mode=mode)
    dataset = encode(table, codebook)
    save_codebook(codebook, args.out_codebook)
    save_symbol_dataset(dataset, args.out_data)
    print(
        f"encoded {dataset.n_sequences} rows x {len(features)} features -> "
        f"sequences of length {dataset.sequence_length} over {dataset.vocab_size} symbols"
    )
    return 0


def cmd_train(args, config: dict[str, str]) -> int:
    dataset = load_symbol_dataset(args.data)
    arch = args.arch
    seed = _resolve(args, config, "seed", 0, int)
    tcfg = TrainConfig(
        max_steps=_resolve(args, config, "steps", 2000, int),
        batch_size=_resolve(args, config, "batch", 64, int),
        optimizer=_resolve(args, config, "opt", "adam", str),
        learning_rate=_resolve(args, config, "lr", 0.0, float),
        seed=seed,
    )
    model_config = ModelConfig(
        arch=arch,
        vocab_size=dataset.vocab_size,
        context_length=dataset.sequence_length - 1,
    )
    banner = f"train: arch={arch} params={count_params(model_config)} steps={tcfg.max_steps} opt={tcfg.optimizer} lr={tcfg.learning_rate} seed={seed}"
    if arch == TRANSFORMER:
        banner += (
            f" blocks={model_config.n_blocks} heads={model_config.n_heads}"
            f" embed={model_config.embed_dim}"
        )
    print(banner)
    params, report = train(model_config, dataset, tcfg)
    save_checkpoint(params, model_config, args.out)
    if args.loss_log:
        write_loss_csv(args.loss_log, enumerate(report.train_losses))
    if args.holdout_log:
        write_loss_csv(args.holdout_log, report.holdout_losses)
    print(
        f"step-0 loss {report.step0_loss:.4f} | final train loss {report.final_train_loss:.4f}"
        f" | final holdout loss {report.final_holdout_loss:.4f} | {report.wall_time_s:.1f}s"
    )
    return 0


def cmd_sample(args, config: dict[str, str]) -> int:
    model_config, params = load_checkpoint(args.ckpt)
    codebook = load_codebook(args.codebook)
    n = _resolve(args, config, "n", 30_000, int)
    temperature = _resolve(args, config, "temp", 1.0, float)
    seed = _resolve(args, config, "seed", 0, int)
    if n < 0:
        raise UsageError("--n must be >= 0")
    table = generate_flows(
        model_config,
        params,
        codebook,
        n,
        temperature,
        Rng(derive_seed(seed, "sample")),
        out_path=args.out,
    )
    print(f"sampled {table.n_rows} synthetic flows -> {args.out}")
    return 0


def cmd_eval(args, config: dict[str, str]) -> int:
    codebook = load_codebook(args.codebook)
    hints = codebook_schema_hints(codebook)
    hints.update(_load_hints(args))
    real = _load_table(args.real, hints)
    synth = _load_table(args.synth, hints)
    nu = _resolve(args, config, "nu", 0.1, float)
    seed = _resolve(args, config, "seed", 0, int)
    report = evaluate(real, synth, codebook, nu=nu, seed=seed)
    report.save(args.out)
    csv_path = args.csv or (args.out + ".csv")
    Path(csv_path).write_text(report.csv_header() + "\n" + report.csv_row() + "\n", encoding="utf-8")
    print(report.to_text())
    return 0


def cmd_pca(args, config: dict[str, str]) -> int:
    table = _load_table(args.input, _load_hints(args))
    components = _resolve(args, config, "components", None, int)
    result = pca_explained_variance(table)
    ratios = result.explained_variance_ratio
    cumulative = result.cumulative
    if components is not None:
        if components < 1:
            raise UsageError("--components must be >= 1")
        ratios, cumulative = ratios[:components], cumulative[:components]
    with Path(args.out).open("w", encoding="utf-8") as fh:
        fh.write("component,explained_variance_ratio,cumulative\n")
        for i, (r, c) in enumerate(zip(ratios, cumulative)):
            fh.write(f"{i},{format(float(r), '.9g')},{format(float(c), '.9g')}\n")
    print(f"pca: {len(ratios)} components written to {args.out}")
    return 0


def cmd_bench(args, config: dict[str, str]) -> int:
    seed = _resolve(args, config, "seed", 7, int)
    steps = {a: args.steps for a in ARCHITECTURES} if args.steps else None
    result = bench_mod.run_bench(
        args.out,
        seed=seed,
        n_rows=_resolve(args, config, "rows", bench_mod.N_ROWS, int),
        sample_n=_resolve(args, config, "sample_n", bench_mod.SAMPLE_N, int),
        steps=steps,
    )
    print(result.summary_text(), end="")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="flowsynth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="fit a codebook and encode a flow CSV into symbols")
    p.add_argument("--input", required=True)
    p.add_argument("--features", required=True, help="comma list or @file with one name per line")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--mode", choices=list(BINNING_MODES), default=None)
    p.add_argument("--out-codebook", required=True)
    p.add_argument("--out-data", required=True)
    p.add_argument("--schema-hints")
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("train", help="train one architecture on an encoded dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", choices=list(ARCHITECTURES), required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--opt", choices=["adam", "sgd"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-log")
    p.add_argument("--holdout-log")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate synthetic flows from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--temp", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="score synthetic flows against real ones")
    p.add_argument("--real", required=True)
    p.add_argument("--synth", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--nu", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="one-row CSV path (default: <out>.csv)")
    p.add_argument("--schema-hints")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pca", help="explained-variance ratios of a flow CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--components", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--schema-hints")
    p.set_defaults(fn=cmd_pca)

    p = sub.add_parser("bench", help="end-to-end benchmark on the bundled synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--rows", type=int, default=None)
    p.add_argument("--sample-n", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="override the per-model training budget")
    p.set_defaults(fn=cmd_bench)

    for sp in sub.choices.values():
        sp.add_argument("--config", help="key=value defaults file; flags win")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = _load_config_file(args.config)
        return args.fn(args, config)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except ConvergenceError as exc:
        print(f"evaluation did not converge: {exc}", file=sys.stderr)
        return 4
    except FlowsynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
