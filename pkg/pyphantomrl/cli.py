"""Command-line interface for phantom RL fine-tuning."""

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import typer

try:
    from typer import _click as click
except ImportError:
    import click
from rich.console import Console
from rich.progress import BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn
from rich.table import Table
from typing_extensions import Annotated

from . import pipeline
from .config import Config
from .constants import ExitCode
from .exceptions import PhantomRLError
from .models import MetricReport, StepStats
from .numcore import set_precision
from .rewards import summarize_reports
from .utils import output_lock

app = typer.Typer(
    name="pyphantomrl",
    help="Reinforcement-learning fine-tuning of a report-conditioned phantom X-ray generator",
    add_completion=False,
)
console = Console()
logger = logging.getLogger(__name__)

# Configure logging
logging.basicConfig(
    level=logging.WARNING,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)

ConfigOption = Annotated[Optional[Path], typer.Option("--config", "-c", help="key=value configuration file")]
OverridesArgument = Annotated[Optional[List[str]], typer.Argument(help="key=value overrides", show_default=False)]
VerboseOption = Annotated[bool, typer.Option("--verbose", "-v", help="Show verbose output")]


def setup_logging(verbose: bool) -> None:
    """Setup logging based on verbosity."""
    if verbose:
        logging.getLogger("pyphantomrl").setLevel(logging.DEBUG)


def load_config(config: Optional[Path], overrides: Optional[Sequence[str]]) -> Config:
    """Config file (or defaults) with command-line overrides applied."""
    cfg = Config.from_file(config) if config is not None else Config()
    return cfg.with_overrides(overrides or [])


@contextmanager
def stage(config: Optional[Path], overrides: Optional[Sequence[str]], verbose: bool) -> Iterator[Config]:
    """Resolve the config, lock the output directory and map failures to exit codes."""
    setup_logging(verbose)
    try:
        cfg = load_config(config, overrides)
        set_precision(cfg.precision)
        with output_lock(cfg.output_path):
            yield cfg
    except PhantomRLError as e:
        logger.error(f"{type(e).__name__}: {e}")
        console.print(f"[red]Error: {e}[/red]")
        raise typer.Exit(e.exit_code)
    except KeyboardInterrupt:
        console.print("\n[yellow]Operation cancelled by user.[/yellow]")
        raise typer.Exit(130)


def _progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        console=console,
        transient=True,
    )


def _metrics_table(title: str, reports: Sequence[MetricReport]) -> Table:
    table = Table(title=title, show_header=True)
    table.add_column("Name", style="cyan")
    table.add_column("r_align", justify="right")
    table.add_column("Macro AUROC", justify="right")
    table.add_column("Similarity", justify="right")
    table.add_column("Frechet", justify="right")
    table.add_column("SSIM", justify="right")
    for report in reports:
        table.add_row(
            report.name,
            f"{report.mean_r_align:.4f}",
            f"{report.macro_auroc:.4f}",
            f"{report.mean_similarity:.4f}",
            f"{report.frechet_distance:.4f}",
            f"{report.ssim_diversity:.4f}",
        )
    return table


@app.command("phantom-gen")
def phantom_gen(
    overrides: OverridesArgument = None,
    config: ConfigOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Render the synthetic phantom dataset."""
    with stage(config, overrides, verbose) as cfg:
        with _progress() as progress:
            progress.add_task("Rendering phantoms...", total=None)
            manifest = pipeline.generate_dataset(cfg)
        console.print(
            f"[green]Dataset written to {pipeline.paths_for(cfg).dataset}[/green] "
            f"({manifest.n_train} train, {manifest.n_test} test, hash {manifest.dataset_hash})"
        )


@app.command("pretrain")
def pretrain(
    overrides: OverridesArgument = None,
    config: ConfigOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Pretrain the report-conditioned denoiser."""
    with stage(config, overrides, verbose) as cfg:
        with _progress() as progress:
            task = progress.add_task("Pretraining...", total=cfg.pretrain_steps)

            def on_step(step: int, loss: float) -> None:
                progress.update(task, completed=step + 1, description=f"Pretraining (loss {loss:.4f})...")

            generator = pipeline.run_pretrain(cfg, on_step=on_step)
        final = f"{generator.losses[-1]:.5f}" if generator.losses else "-"
        console.print(f"[green]Generator saved to {pipeline.paths_for(cfg).generator}[/green] (final loss {final})")


@app.command("fit-rewards")
def fit_rewards(
    overrides: OverridesArgument = None,
    config: ConfigOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Fit the posture, classifier and dual-encoder reward models."""
    with stage(config, overrides, verbose) as cfg:
        with _progress() as progress:
            progress.add_task("Fitting reward models...", total=None)
            models = pipeline.run_fit_rewards(cfg)

        table = Table(title="Reward Models (held-out)", show_header=True)
        table.add_column("Model", style="cyan")
        table.add_column("Metrics", style="white")
        table.add_column("Gate", style="yellow")
        for name, metrics, passed in summarize_reports(models):
            table.add_row(name, metrics, "[green]passed[/green]" if passed else "[yellow]below gate[/yellow]")
        console.print(table)
        console.print(f"[green]Reward models saved to {pipeline.paths_for(cfg).rewards}[/green]")


@app.command("finetune")
def finetune(
    overrides: OverridesArgument = None,
    config: ConfigOption = None,
    resume: Annotated[bool, typer.Option("--resume", help="Continue from the last policy checkpoint")] = False,
    verbose: VerboseOption = False,
) -> None:
    """Fine-tune the generator with reward feedback."""
    with stage(config, overrides, verbose) as cfg:
        with _progress() as progress:
            task = progress.add_task("Fine-tuning...", total=cfg.rl_steps)

            def on_step(stats: StepStats) -> None:
                progress.update(
                    task, completed=stats.step + 1, description=f"Fine-tuning (reward {stats.mean_total:.4f})..."
                )

            history = pipeline.run_finetune(cfg, resume=resume, on_step=on_step)

        if history:
            last = history[-1]
            console.print(
                f"Step {last.step}: align {last.mean_r_align:.4f}, diag {last.mean_r_diag:.4f}, "
                f"consist {last.mean_r_consist:.4f}, total {last.mean_total:.4f}"
            )
        console.print(f"[green]Policy saved to {pipeline.paths_for(cfg).policy}[/green]")


@app.command("sample")
def sample(
    overrides: OverridesArgument = None,
    report: Annotated[List[str], typer.Option("--report", "-r", help="Report text; repeat for several images")] = [],
    model: Annotated[str, typer.Option("--model", "-m", help="policy or anchor")] = "policy",
    config: ConfigOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Generate one image per report."""
    if model not in ["policy", "anchor"]:
        console.print(f"[red]Invalid model: {model}. Use 'policy' or 'anchor'.[/red]")
        raise typer.Exit(ExitCode.USAGE)
    if not report:
        console.print("[red]Give at least one --report.[/red]")
        raise typer.Exit(ExitCode.USAGE)

    with stage(config, overrides, verbose) as cfg:
        with _progress() as progress:
            progress.add_task("Sampling...", total=None)
            written = pipeline.run_sample(cfg, report, which=model)
        for path, text in zip(written, report):
            console.print(f"[green]{path}[/green]  {text}")


@app.command("score")
def score(
    overrides: OverridesArgument = None,
    config: ConfigOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Per-report rewards of the fine-tuned policy."""
    with stage(config, overrides, verbose) as cfg:
        with _progress() as progress:
            progress.add_task("Scoring...", total=None)
            breakdowns = pipeline.run_score(cfg)

        n = len(breakdowns)
        table = Table(title=f"Mean rewards over {n} reports", show_header=False, box=None)
        table.add_column("Reward", style="cyan", width=12)
        table.add_column("Value", style="white")
        table.add_row("r_align", f"{sum(b.r_align for b in breakdowns) / n:.4f}")
        table.add_row("r_diag", f"{sum(b.r_diag for b in breakdowns) / n:.4f}")
        table.add_row("r_consist", f"{sum(b.r_consist for b in breakdowns) / n:.4f}")
        table.add_row("total", f"{sum(b.total for b in breakdowns) / n:.4f}")
        console.print(table)
        console.print(f"[green]Scores written to {pipeline.paths_for(cfg).scores}[/green]")


@app.command("eval")
def evaluate(
    overrides: OverridesArgument = None,
    config: ConfigOption = None,
    force: Annotated[bool, typer.Option("--force", help="Evaluate despite dataset hash mismatches")] = False,
    verbose: VerboseOption = False,
) -> None:
    """Evaluate anchor and fine-tuned generators into metrics.csv."""
    with stage(config, overrides, verbose) as cfg:
        with _progress() as progress:
            progress.add_task("Evaluating...", total=None)
            result = pipeline.run_eval(cfg, force=force)

        console.print(_metrics_table("Generator metrics", result.reports))
        for name, p in result.p_values.items():
            console.print(f"{name} improvement: one-sided p = {p:.3g}")
        console.print(f"[green]Metrics written to {pipeline.paths_for(cfg).metrics}[/green]")


@app.command("ablate")
def ablate(
    overrides: OverridesArgument = None,
    config: ConfigOption = None,
    variants: Annotated[bool, typer.Option("--variants", help="Add the w/o ACE and w/o comparative rows")] = False,
    verbose: VerboseOption = False,
) -> None:
    """Fine-tune once per reward mask and tabulate the results."""
    with stage(config, overrides, verbose) as cfg:
        with _progress() as progress:
            progress.add_task("Running ablation...", total=None)
            reports = pipeline.run_ablate(cfg, variants=variants)
        console.print(_metrics_table("Reward ablation", reports))
        console.print(f"[green]Ablation written to {pipeline.paths_for(cfg).ablation}[/green]")


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI without exiting the interpreter and return the exit code."""
    try:
        result = app(args=list(argv) if argv is not None else None, standalone_mode=False)
    except click.exceptions.UsageError as e:
        e.show()
        return int(ExitCode.USAGE)
    except click.exceptions.Abort:
        return 130
    return int(result) if isinstance(result, int) else int(ExitCode.OK)


def main():
    """Main entry point for the CLI."""
    app()


if __name__ == "__main__":
    main()
