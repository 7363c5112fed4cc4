"""Command-line entry point for the embedding exporter."""

import click

from .exporter import ExportConfig, export_embeddings, read_manifest


@click.command()
@click.option("--manifest", required=True, type=click.Path(exists=True),
              help="YAML listing per-source output/reference/distortion WAVs.")
@click.option("--checkpoint", required=True,
              help="Pretrained checkpoint id or local path.")
@click.option("--layer", required=True, type=int,
              help="Transformer layer to export (0 = pre-transformer).")
@click.option("--scenario", default="english",
              type=click.Choice(["english", "spanish", "music"]))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--frame-ms", type=float, default=None)
@click.option("--hop-ms", type=float, default=None)
def main(manifest, checkpoint, layer, scenario, out_path, frame_ms, hop_ms):
    """Export frame-aligned hidden states into a .mapssemb file."""
    cfg = ExportConfig(checkpoint=checkpoint, layer=layer, scenario=scenario,
                       frame_ms=frame_ms, hop_ms=hop_ms)
    sources = read_manifest(manifest)
    n_frames = export_embeddings(sources, cfg, out_path)
    click.echo(f"wrote {n_frames} frames to {out_path}")


if __name__ == "__main__":
    main()
