"""Command-line entry point.

Subcommands mirror the experiment recipes: oracle, train, meta-train,
meta-test, bench, robustness. Global flags: --config (JSON experiment
document), --seed, --out. Every run writes config.echo.json plus its
delimited results and figures under --out; identical config and seed
reproduce identical CSVs (wall-time columns aside).
"""

from __future__ import annotations

import sys

import click

from . import experiments


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON experiment configuration.")
@click.option("--seed", type=int, default=0, show_default=True,
              help="Root seed for every random stream (no wall-clock seeding).")
@click.option("--out", "out_dir", type=click.Path(), default="out",
              show_default=True, help="Output directory.")
@click.pass_context
def main(ctx, config_path, seed, out_dir):
    """Bandwidth allocation for sliced wireless networks."""
    try:
        ctx.obj = experiments.load_config(config_path, seed, out_dir)
    except (OSError, ValueError) as err:
        raise click.UsageError(f"bad config: {err}")


def _run(runner, cfg):
    try:
        path = runner(cfg)
    except FileNotFoundError as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(3)
    except (ValueError, KeyError) as err:
        click.echo(f"error: {err}", err=True)
        sys.exit(2)
    click.echo(f"wrote {path}")


@main.command()
@click.option("--samples", type=int, default=None,
              help="Number of evaluation samples.")
@click.pass_obj
def oracle(cfg, samples):
    """Run the iterative optimal allocator over channel samples."""
    if samples is not None:
        cfg["samples"] = samples
    _run(experiments.run_oracle, cfg)


@main.command()
@click.option("--epochs", type=int, default=None, help="Training epochs.")
@click.pass_obj
def train(cfg, epochs):
    """Train the GNN on one task by unsupervised gradient ascent."""
    if epochs is not None:
        cfg["train"]["epochs"] = epochs
    _run(experiments.run_train, cfg)


@main.command("meta-train")
@click.option("--variant",
              type=click.Choice(["hml", "maml", "mtl", "random"]),
              default=None, help="Meta-training variant or baseline.")
@click.option("--meta-epochs", type=int, default=None)
@click.pass_obj
def meta_train(cfg, variant, meta_epochs):
    """Meta-train initial GNN parameters (HML, MAML, or baselines)."""
    if variant is not None:
        cfg["meta"]["variant"] = variant
    if meta_epochs is not None:
        cfg["meta"]["meta_epochs"] = meta_epochs
    _run(experiments.run_meta_train, cfg)


@main.command("meta-test")
@click.option("--fine-tune-epochs", type=int, default=None)
@click.option("--checkpoint", "checkpoints", multiple=True,
              metavar="METHOD=PATH",
              help="Checkpoint for a method, e.g. hml=out/hml/params.json.")
@click.pass_obj
def meta_test(cfg, fine_tune_epochs, checkpoints):
    """Fine-tune checkpoints on the unseen task and compare to oracle."""
    if fine_tune_epochs is not None:
        cfg["meta_test"]["fine_tune_epochs"] = fine_tune_epochs
    for spec in checkpoints:
        method, _, path = spec.partition("=")
        if not path:
            raise click.UsageError(f"expected METHOD=PATH, got {spec!r}")
        cfg["meta_test"]["checkpoints"][method] = path
        if method not in cfg["meta_test"]["methods"]:
            cfg["meta_test"]["methods"].append(method)
    _run(experiments.run_meta_test, cfg)


@main.command()
@click.pass_obj
def bench(cfg):
    """Report analytic operation counts and measured timing ratios."""
    _run(experiments.run_bench, cfg)


@main.command()
@click.pass_obj
def robustness(cfg):
    """Sweep eavesdropper-gain underestimation for oracle and GNN."""
    _run(experiments.run_robustness, cfg)


if __name__ == "__main__":
    main()
