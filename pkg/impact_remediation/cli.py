import functools
import logging
import sys
from pathlib import Path
from typing import Dict, Optional

import click

from impact_remediation.config import (
    DIP_OBJECTIVE_CHOICES,
    MODE_CHOICES,
    OBJECTIVE_CHOICES,
    SOLVER_CHOICES,
    RunConfig,
    configure_logging,
    load_run_config,
)
from impact_remediation.constraint import CounterfactualPrivilege
from impact_remediation.milp import export_milp
from impact_remediation.objective import ObjectiveSpec
from impact_remediation.pipeline import (
    COMPARE_VARIANTS,
    EXIT_ERROR,
    EXIT_INFEASIBLE,
    base_constraints,
    objective_spec,
    prepare,
    run_compare,
    run_solve,
)
from impact_remediation.save_data import COMPARE_TEXT, SUMMARY_FILE
from impact_remediation.scenario import group_totals, load_scenario, observed_disparity, write_scenario
from impact_remediation.scm import save_model
from impact_remediation.solve import min_feasible_tau, solve_min_budget
from impact_remediation.synth import GroundTruth, gen_random, gen_toy_career_fair

logger = logging.getLogger(__name__)

MODEL_FILE = "model.csv"
AGGREGATE_MODEL_FILE = "aggregate_model.csv"


class ImpactRemediationGroup(click.Group):
    """Usage errors exit with 1; 2 is reserved for infeasible solves."""

    def make_context(self, *args, **kwargs):
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as e:
            e.exit_code = EXIT_ERROR
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as e:
            e.exit_code = EXIT_ERROR
            raise


def handle_errors(command):
    """Turns data and configuration errors into a message and exit status 1."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (ValueError, RuntimeError, OSError) as e:
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_ERROR)

    return wrapper


def scenario_options(command):
    options = [
        click.option("--config", "config_file", type=click.Path(dir_okay=False), help="Key/value config file"),
        click.option("--sets", type=click.Path(dir_okay=False), help="sets.csv"),
        click.option("--slices", type=click.Path(dir_okay=False), help="slices.csv"),
        click.option("--neighbor-k", type=int, help="Neighbors per set (K)"),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def run_options(command):
    options = [
        click.option("--objective", type=click.Choice(OBJECTIVE_CHOICES), help="Disparity measure or aggregate"),
        click.option("--budget", type=int, help="At most this many interventions"),
        click.option("--solver", type=click.Choice(SOLVER_CHOICES), help="enumerate, bnb or local"),
        click.option("--seed", type=int, help="Local-search seed"),
        click.option("--out", type=click.Path(file_okay=False), help="Output directory"),
        click.option("--mode", type=click.Choice(MODE_CHOICES, case_sensitive=False), help="IR or DIP"),
        click.option("--dip-objective", type=click.Choice(DIP_OBJECTIVE_CHOICES),
                     help="Score DIP with the aggregate model or the disaggregated one"),
        click.option("--tau", help="Counterfactual privilege bound, or 'min'"),
        click.option("--kappa", type=float, help="Threshold for threshold objectives"),
        click.option("--eta", type=float, help="Add a no-harm constraint across groups with this eta"),
        click.option("--model", "model_path", type=click.Path(dir_okay=False), help="Use this model instead of fitting"),
        click.option("--constraint", "constraints", multiple=True, help="type:param=value,... (repeatable)"),
        click.option("--workers", type=int, help="Threads for enumeration"),
    ]
    for option in reversed(options):
        command = option(command)
    return scenario_options(command)


def build_config(config_file: Optional[str], **flags) -> RunConfig:
    overrides: Dict[str, object] = {key: value for key, value in flags.items() if value not in (None, ())}
    if "constraints" in overrides:
        overrides["constraints"] = list(overrides["constraints"])
    return load_run_config(config_file, overrides)


@click.group(cls=ImpactRemediationGroup)
@click.option("--verbose", is_flag=True, help="Debug logging")
def cli(verbose: bool):
    """Budgeted interventions that reduce disparity between groups."""
    configure_logging(verbose)


@cli.command()
@scenario_options
@handle_errors
def validate(config_file, sets, slices, neighbor_k):
    """Load a scenario and report its size, totals and observed disparity."""
    config = build_config(config_file, sets=sets, slices=slices, neighbor_k=neighbor_k).validate()
    scenario = load_scenario(config.sets, config.slices, config.scenario)
    totals = group_totals(scenario)
    click.echo(f"sets: {scenario.m}")
    click.echo(f"groups: {scenario.r} ({', '.join(scenario.groups)})")
    for group, total in zip(scenario.groups, totals.per_group):
        click.echo(f"  {group}: {total}")
    if all(totals.per_group > 0):
        click.echo(f"observed disparity (across): {observed_disparity(scenario, ObjectiveSpec.across()):.6f}")


@cli.command()
@scenario_options
@click.option("--out", type=click.Path(file_okay=False), help="Output directory")
@handle_errors
def fit(config_file, sets, slices, neighbor_k, out):
    """Fit the disaggregated and aggregate models and write them to OUT."""
    config = build_config(config_file, sets=sets, slices=slices, neighbor_k=neighbor_k, out=out).validate()
    config.model_path = config.aggregate_model_path = None
    fitted = prepare(config, aggregate=True)
    out_dir = Path(config.out)
    save_model(fitted.model, out_dir / MODEL_FILE)
    save_model(fitted.aggregate_model, out_dir / AGGREGATE_MODEL_FILE)
    for model in (fitted.model, fitted.aggregate_model):
        for outcome, diag in zip(model.outcomes, model.diagnostics):
            click.echo(f"{model.kind} {outcome}: rss={diag.rss:.6g} rank={diag.rank} cond={diag.condition:.3g}")


@cli.command()
@run_options
@handle_errors
def solve(config_file, **flags):
    """Solve one IR (or DIP) problem and write result, report, summary and GeoJSON."""
    config = build_config(config_file, **flags)
    code, _ = run_solve(config)
    click.echo((Path(config.out) / SUMMARY_FILE).read_text(), nl=False)
    sys.exit(code)


@cli.command()
@run_options
@click.option("--variant", "variants", multiple=True, type=click.Choice(COMPARE_VARIANTS),
              help="Variants to compare (default: all)")
@handle_errors
def compare(config_file, variants, **flags):
    """Solve IR, IR+no-harm, DIP(tau) and unconstrained DIP on the same models."""
    config = build_config(config_file, **flags)
    code, _ = run_compare(config, variants or COMPARE_VARIANTS)
    click.echo((Path(config.out) / COMPARE_TEXT).read_text(), nl=False)
    sys.exit(code)


@cli.command("min-budget")
@run_options
@click.option("--target", type=float, required=True, help="Largest acceptable disparity")
@handle_errors
def min_budget(config_file, target, **flags):
    """Find the smallest budget whose optimal disparity reaches TARGET."""
    config = build_config(config_file, **flags).validate()
    fitted = prepare(config)
    b, result = solve_min_budget(fitted.model, fitted.scenario, fitted.neighbors, objective_spec(config),
                                 base_constraints(config), target, solver=config.solver,
                                 limit=config.enumeration_limit)
    if b is None:
        click.echo(f"no budget reaches disparity <= {target}; best at b={fitted.scenario.m} is {result.objective_value:.6f}")
        sys.exit(EXIT_INFEASIBLE)
    click.echo(f"minimum budget: {b}")
    click.echo(f"disparity: {result.objective_value:.6f}")
    click.echo(f"selected: {', '.join(result.selected_ids) or '-'}")


@cli.command("export-milp")
@run_options
@click.option("--lp", "lp_path", type=click.Path(dir_okay=False), help="LP file to write (default OUT/model.lp)")
@handle_errors
def export_milp_command(config_file, lp_path, **flags):
    """Write the problem as a CPLEX LP file for an external MILP solver."""
    config = build_config(config_file, **flags).validate()
    dip = config.mode == "DIP"
    fitted = prepare(config, aggregate=dip)
    constraints = base_constraints(config)
    if dip and config.tau is not None:
        tau = config.tau if config.tau != "min" else min_feasible_tau(
            fitted.model, fitted.scenario, fitted.neighbors, constraints, fitted.aggregate_model,
            limit=config.enumeration_limit)
        constraints.append(CounterfactualPrivilege(float(tau)))
    objective = ObjectiveSpec.aggregate() if dip else objective_spec(config)
    path = export_milp(fitted.model, fitted.scenario, fitted.neighbors, objective, constraints,
                       lp_path or Path(config.out) / "model.lp", aggregate_model=fitted.aggregate_model,
                       aggregate_objective=dip and config.dip_objective == "aggregate")
    click.echo(f"wrote {path}")


def _write_ground_truth(truth: GroundTruth, out: str) -> None:
    out_dir = Path(out)
    paths = write_scenario(truth.scenario, out_dir, extra_config={"MODEL_PATH": MODEL_FILE})
    save_model(truth.model, out_dir / MODEL_FILE)
    click.echo(f"wrote scenario to {out_dir} (load with --config {paths['config']})")


@cli.command("gen-toy")
@click.option("--out", type=click.Path(file_okay=False), default="toy", show_default=True)
@handle_errors
def gen_toy(out):
    """Write the two-university career-fair scenario and its generating model."""
    _write_ground_truth(gen_toy_career_fair(), out)


@cli.command("gen-random")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--m", "m", type=int, default=20, show_default=True, help="Number of intervention sets")
@click.option("--r", "r", type=int, default=3, show_default=True, help="Number of groups")
@click.option("--neighbor-k", type=int, default=5, show_default=True)
@click.option("--noise-sd", type=float, default=0.0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default="random", show_default=True)
@handle_errors
def gen_random_command(seed, m, r, neighbor_k, noise_sd, out):
    """Write a seeded random scenario and the coefficients that generated it."""
    truth = gen_random(seed, m, r, neighbor_k=neighbor_k, noise_sd=noise_sd)
    _write_ground_truth(truth, out)
    if truth.truncated:
        click.echo(f"warning: {truth.truncated} outcome rate(s) truncated into [0, 1]", err=True)


def main():
    cli()


if __name__ == "__main__":
    main()
