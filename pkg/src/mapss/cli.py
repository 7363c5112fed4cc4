"""Command-line entry points: evaluation, delay sweep, bank audit, demo."""

import logging

import click

from .demo import make_demo
from .pipeline import RunConfig, dump_bank, misalignment_sweep, run_evaluation


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Enable info logging.")
def main(verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(config_path, embeddings, mos, resume, seed, bank_seed):
    cfg = RunConfig.from_yaml(config_path)
    if embeddings:
        cfg.encoder = "file"
        cfg.embeddings = {"PS": embeddings, "PM": embeddings}
    if mos:
        cfg.mos = mos
    if resume:
        cfg.resume = True
    if seed is not None:
        cfg.seed = seed
        cfg.bank_seed = seed if bank_seed is None else bank_seed
    elif bank_seed is not None:
        cfg.bank_seed = bank_seed
    return cfg


@main.command("eval")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True), help="Run configuration YAML.")
@click.option("--embeddings", type=click.Path(exists=True), default=None,
              help="Pre-computed .mapssemb file (used for both variants).")
@click.option("--encoder", type=click.Choice(["raw", "file"]), default=None,
              help="Override the configured encoder.")
@click.option("--mos", type=click.Path(exists=True), default=None,
              help="Listener ratings CSV (trial,system,source,mos).")
@click.option("--resume", is_flag=True, help="Skip frames already on disk.")
@click.option("--seed", type=int, default=None)
@click.option("--bank-seed", type=int, default=None)
@click.option("--delta", type=float, default=None, help="Confidence budget.")
@click.option("--plots", is_flag=True, help="Also write SVG plots.")
def eval_cmd(config_path, embeddings, encoder, mos, resume, seed, bank_seed,
             delta, plots):
    """Evaluate separation outputs against references."""
    cfg = _load_config(config_path, embeddings, mos, resume, seed, bank_seed)
    if encoder is not None:
        cfg.encoder = encoder
    if delta is not None:
        cfg.delta = delta
    if plots:
        cfg.plots = True
    report = run_evaluation(cfg)
    click.echo(f"report written to {cfg.out_dir}")
    for row in report["utterances"]:
        ps = row.get("ps_utt_01")
        pm = row.get("pm_utt")
        click.echo(f"  {row['system']} source {row['source']}: "
                   f"PS={ps:.3f} PM={pm:.3f}" if ps is not None and pm is not None
                   else f"  {row['system']} source {row['source']}: incomplete")


@main.command("sweep-delay")
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True))
@click.option("--delays", default="0,20,50,100",
              help="Comma-separated delays in milliseconds.")
@click.option("--mos", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
def sweep_cmd(config_path, delays, mos, seed):
    """Re-run the evaluation under artificial output misalignment."""
    cfg = _load_config(config_path, None, mos, False, seed, None)
    delay_list = [float(d) for d in delays.split(",")]
    table = misalignment_sweep(cfg, delay_list)
    for row in table:
        click.echo(f"  {row['delay_ms']:g} ms: mean PS={row['mean_ps']:.3f} "
                   f"mean PM={row['mean_pm']:.3f}")


@main.command("bank")
@click.option("--ref", "ref_path", required=True, type=click.Path(exists=True),
              help="Reference WAV to distort.")
@click.option("--variant", type=click.Choice(["PS", "PM"]), required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--bank-seed", type=int, default=0)
@click.option("--bank-config", type=click.Path(exists=True), default=None)
def bank_cmd(ref_path, variant, out_dir, bank_seed, bank_config):
    """Dump the distortion bank of one reference for auditing."""
    written = dump_bank(ref_path, variant, bank_seed, out_dir,
                        bank_config=bank_config)
    click.echo(f"wrote {len(written)} distorted copies to {out_dir}")


@main.command("demo")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=0)
@click.option("--systems", "n_systems", type=int, default=4,
              help="Number of synthetic separation systems (1-4).")
def demo_cmd(out_dir, seed, n_systems):
    """Generate the bundled synthetic two-source demo."""
    config_path = make_demo(out_dir, seed=seed, n_systems=n_systems)
    click.echo(f"demo written; run: mapss eval --config {config_path}")


if __name__ == "__main__":
    main()
