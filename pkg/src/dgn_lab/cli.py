from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Callable

from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, ExperimentConfig, config_hash, load_config
from .data import SpikeDataset, load_dataset, save_dataset, synth_event_dataset, synth_pattern_dataset
from .errors import ConfigError, DatasetFormatError, DgnError, TrainingCancelledError
from .gradients import GradientSet, run_gradcheck
from .output import (
    render_gradcheck_json,
    render_gradcheck_text,
    render_history_csv,
    render_json,
    render_robustness_csv,
    render_robustness_json,
    render_stability_csv,
    render_stability_json,
    render_trajectories_csv,
    stability_row,
)
from .parallel import resolve_threads
from .perturbation import evaluate_under, reference_points_specs, sweep_specs
from .stability import (
    SdeMode,
    StabilityConfig,
    compare_dgn_lif,
    milstein_cross_check,
    random_sweep_configs,
)
from .training import Trainer, TrainProgress, evaluate, init_network

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

COMMANDS = ("train", "eval", "perturb", "stability", "gradcheck", "synth")


class UsageError(Exception):
    """Bad input the user can fix: missing files, empty splits."""


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Experiment config file (JSON)")
    common.add_argument(
        "--preset",
        choices=sorted(PRESETS),
        help="Named defaults applied before the config file",
    )
    common.add_argument("--seed", type=int, help="Global seed (overrides the config)")
    common.add_argument("--out", type=Path, help="Output directory (default: runs)")
    common.add_argument("--checkpoint", type=Path, help="Checkpoint to write (train) or read")
    common.add_argument(
        "--threads",
        type=int,
        help="Worker threads (default: $DGN_THREADS, else 1)",
    )
    common.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Log more; repeat for debug output",
    )

    parser = argparse.ArgumentParser(
        prog="dgn-lab",
        description=(
            "Train, attack and analyse spiking networks of dynamic gated neurons."
        ),
    )
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "train": "Train a network and write a checkpoint plus its history",
        "eval": "Clean accuracy and loss of a checkpoint",
        "perturb": "Accuracy of a checkpoint under noise and adversarial attacks",
        "stability": "Membrane-variance study of DGN against LIF",
        "gradcheck": "Cross-check the BPTT implementations on random networks",
        "synth": "Write the synthetic pattern dataset in event format",
    }
    for name in COMMANDS:
        commands.add_parser(name, parents=[common], help=helps[name])
    return parser.parse_args(argv)


def _overrides(args: argparse.Namespace) -> dict:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["train"] = {"seed": args.seed}
    if args.out is not None:
        overrides["out"] = str(args.out)
    if args.checkpoint is not None:
        overrides["checkpoint"] = str(args.checkpoint)
    if args.threads is not None:
        overrides["threads"] = args.threads
    return overrides


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_path(config: ExperimentConfig) -> Path:
    if config.checkpoint is not None:
        return Path(config.checkpoint)
    return Path(config.out) / "checkpoint.json"


def _load_net(config: ExperimentConfig):
    path = _checkpoint_path(config)
    if not path.is_file():
        raise UsageError(f"Checkpoint not found: {path}")
    return load_checkpoint(path)


def _load_data(config: ExperimentConfig) -> SpikeDataset:
    data = config.data
    if data.manifest is None:
        return synth_pattern_dataset(data.synthetic, config.seed)
    manifest = Path(data.manifest)
    if not manifest.is_file():
        raise UsageError(f"Dataset manifest not found: {manifest}")
    return load_dataset(manifest).to_spike_dataset(data.bin_ms, data.max_steps, data.binning)


def _split(dataset: SpikeDataset, name: str) -> SpikeDataset:
    subset = dataset.split(name)
    if len(subset) == 0:
        raise UsageError(f"Dataset {dataset.name!r} has no samples in split {name!r}")
    return subset


def _print_progress(progress: TrainProgress) -> None:
    loss = f"{progress.last_loss:.4f}" if progress.last_loss is not None else "-"
    print(
        f"\rEpoch {progress.epoch}: {progress.samples_seen} samples seen, loss {loss}",
        end="",
        file=sys.stderr,
        flush=True,
    )


def cmd_train(config: ExperimentConfig, threads: int) -> int:
    dataset = _load_data(config)
    train_set = _split(dataset, config.data.train_split)
    eval_set = dataset.split(config.data.eval_split)
    net = init_network(
        config.model,
        input_channels=dataset.channels,
        classes=dataset.num_classes,
        init=config.train.init,
        seed=config.seed,
    )
    trainer = Trainer(config.train, threads=threads)
    trainer.set_progress_callback(_print_progress)
    try:
        trained, history = trainer.train(net, train_set, eval_set if len(eval_set) else None)
    finally:
        print(file=sys.stderr)

    out = _out_dir(config)
    checksum = save_checkpoint(trained, _checkpoint_path(config))
    (out / "history.csv").write_text(render_history_csv(history), encoding="utf-8")
    final = history.final
    summary = {
        "command": "train",
        "config_hash": config_hash(config),
        "seed": config.seed,
        "dataset": dataset.name,
        "train_samples": len(train_set),
        "eval_samples": len(eval_set),
        "epochs": len(history),
        "final_train_loss": final.train_loss if final else None,
        "final_train_acc": final.train_acc if final else None,
        "final_eval_acc": final.eval_acc if final else None,
        "checkpoint_checksum": checksum,
    }
    (out / "summary.json").write_text(render_json(summary), encoding="utf-8")
    print(f"Train accuracy {summary['final_train_acc']}, eval accuracy {summary['final_eval_acc']}")
    return EXIT_OK


def cmd_eval(config: ExperimentConfig, threads: int) -> int:
    net = _load_net(config)
    eval_set = _split(_load_data(config), config.data.eval_split)
    evaluation = evaluate(net, eval_set, threads)
    out = _out_dir(config)
    payload = {
        "command": "eval",
        "config_hash": config_hash(config),
        "seed": config.seed,
        "split": config.data.eval_split,
        "samples": len(eval_set),
        "accuracy": evaluation.accuracy,
        "loss": evaluation.loss,
    }
    (out / "eval.json").write_text(render_json(payload), encoding="utf-8")
    print(f"Accuracy {evaluation.accuracy:.4f} on {len(eval_set)} samples")
    return EXIT_OK


def cmd_perturb(config: ExperimentConfig, threads: int) -> int:
    net = _load_net(config)
    section = config.perturb
    eval_set = _split(_load_data(config), section.split)
    specs = []
    for sweep in section.sweeps:
        specs.extend(
            sweep_specs(
                sweep.kind,
                sweep.strengths,
                alpha=sweep.alpha,
                k=sweep.k,
                mixed_factor=sweep.mixed_factor,
                seed=config.seed,
            )
        )
    if section.reference_points:
        specs.extend(reference_points_specs(config.seed))
    table = evaluate_under(net, eval_set, specs, threads, section.include_c_path)

    out = _out_dir(config)
    digest = config_hash(config)
    (out / "robustness.csv").write_text(
        render_robustness_csv(table, digest, config.seed), encoding="utf-8"
    )
    (out / "robustness.json").write_text(
        render_robustness_json(table, digest, config.seed), encoding="utf-8"
    )
    for kind, kind_table in table.by_kind().items():
        (out / f"robustness_{kind}.csv").write_text(
            render_robustness_csv(kind_table, digest, config.seed), encoding="utf-8"
        )
    print(f"Clean accuracy {table.clean_accuracy:.4f}, {len(table.rows) - 1} perturbation rows")
    return EXIT_OK


def _stability_configs(config: ExperimentConfig) -> list[StabilityConfig]:
    section = config.stability
    common = {
        "trials": section.trials,
        "mode": section.mode,
        "burn_in": section.burn_in,
        "record_trajectories": section.record_trajectories,
    }
    if section.cases:
        return [
            StabilityConfig(
                mu=case.mu,
                sigma=case.sigma,
                W=case.W,
                C=case.C,
                g_l=case.g_l,
                seed=config.seed,
                **common,
            )
            for case in section.cases
        ]
    # The sweep's structure follows sweep_seed; the global seed only drives the noise.
    configs = random_sweep_configs(
        section.sweep,
        section.sweep_seed,
        channels=section.channels,
        g0_range=(section.g0_min, section.g0_max),
        proportional=section.proportional,
        **common,
    )
    return [dataclasses.replace(cfg, seed=config.seed) for cfg in configs]


def cmd_stability(config: ExperimentConfig, threads: int) -> int:
    section = config.stability
    configs = _stability_configs(config)
    reports = []
    for index, cfg in enumerate(configs):
        report = compare_dgn_lif(cfg, monte_carlo=section.monte_carlo, threads=threads)
        reports.append((index, cfg.G0, report))

    milstein_rows = []
    if section.milstein_check:
        if section.mode is SdeMode.FULL_NONLINEAR:
            for index, cfg in enumerate(configs):
                euler, milstein = milstein_cross_check(cfg, threads)
                milstein_rows.append(
                    {
                        "case": index,
                        "euler_variance": euler.variance,
                        "milstein_variance": milstein.variance,
                        "euler_variance_se": euler.variance_se,
                    }
                )
        else:
            logger.warning("Milstein cross-check only applies to full_nonlinear mode; skipped")

    out = _out_dir(config)
    digest = config_hash(config)
    rows = [stability_row(index, G0, report) for index, G0, report in reports]
    (out / "stability.csv").write_text(
        render_stability_csv(rows, digest, config.seed), encoding="utf-8"
    )
    (out / "stability.json").write_text(
        render_stability_json(reports, digest, config.seed), encoding="utf-8"
    )
    if milstein_rows:
        (out / "milstein.json").write_text(
            render_json({"config_hash": digest, "seed": config.seed, "cases": milstein_rows}),
            encoding="utf-8",
        )
    if section.record_trajectories:
        for index, _, report in reports:
            if report.mc_dgn is not None and report.mc_dgn.trajectories is not None:
                (out / f"trajectories_case{index}.csv").write_text(
                    render_trajectories_csv(report.mc_dgn), encoding="utf-8"
                )

    status = EXIT_OK
    if section.monte_carlo and section.mode is SdeMode.LINEARIZED:
        for index, _, report in reports:
            error = report.mc_relative_error
            if error is not None and error > section.tolerance:
                print(
                    f"Case {index}: Monte Carlo variance {report.mc_dgn.variance:.6g} differs "
                    f"from analytic {report.analytic_var_dgn:.6g} by {error:.2%}",
                    file=sys.stderr,
                )
                status = EXIT_FAILURE
    lower = sum(report.dgn_lower for _, _, report in reports)
    print(f"DGN variance below LIF in {lower} of {len(reports)} cases")
    return status


def cmd_gradcheck(
    config: ExperimentConfig,
    threads: int,
    mutate: Callable[[GradientSet], GradientSet] | None = None,
) -> int:
    section = config.gradcheck
    report = run_gradcheck(
        seed=config.seed,
        cases=section.cases,
        fd_cases=section.fd_cases,
        h=section.h,
        dual_tolerance=section.dual_tolerance,
        fd_tolerance=section.fd_tolerance,
        mutate=mutate,
    )
    out = _out_dir(config)
    (out / "gradcheck.json").write_text(
        render_gradcheck_json(report, config_hash(config), config.seed), encoding="utf-8"
    )
    sys.stdout.write(render_gradcheck_text(report))
    return EXIT_OK if report.passed else EXIT_FAILURE


def cmd_synth(config: ExperimentConfig, threads: int) -> int:
    spec = config.data.synthetic
    events, splits = synth_event_dataset(spec, config.seed, bin_ms=config.data.bin_ms)
    manifest = save_dataset(
        events,
        _out_dir(config) / "dataset",
        name="synthetic",
        num_classes=spec.classes,
        splits=splits,
    )
    print(f"Wrote {len(events)} samples to {manifest}")
    return EXIT_OK


HANDLERS: dict[str, Callable[[ExperimentConfig, int], int]] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "perturb": cmd_perturb,
    "stability": cmd_stability,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=max(logging.DEBUG, logging.WARNING - 10 * args.verbose),
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        config = load_config(args.config, args.preset, _overrides(args))
        threads = resolve_threads(config.threads)
    except (ConfigError, ValueError) as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        return HANDLERS[args.command](config, threads)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except TrainingCancelledError:
        print("Training cancelled", file=sys.stderr)
        return EXIT_FAILURE
    except KeyboardInterrupt:
        print("\nInterrupted", file=sys.stderr)
        return EXIT_FAILURE
    except DatasetFormatError as exc:
        print(f"Invalid dataset: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DgnError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except ValueError as exc:
        print(f"Invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
