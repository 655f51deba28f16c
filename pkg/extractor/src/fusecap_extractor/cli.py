"""CLI: extract embeddings from a directory of images or a JSONL of texts."""

from __future__ import annotations

import logging
import sys

import click

from fusecap_extractor.encoders import SUPPORTED_FAMILIES, EncoderError
from fusecap_extractor.extract import ExtractionError, ExtractorJob, run_job


@click.command()
@click.option("--model", "model_name", required=True,
              type=click.Choice(sorted(SUPPORTED_FAMILIES)),
              help="Encoder family (toy-* need no model weights).")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True),
              help="Image directory, or JSONL of {id, text} for text models.")
@click.option("--out", "output_path", required=True, type=click.Path())
@click.option("--normalize", is_flag=True, help="Unit-normalize rows before writing.")
@click.option("--batch-size", type=int, default=16, show_default=True)
@click.option("--device", default="cpu", show_default=True)
@click.option("--checkpoint", default=None, help="Override the pinned checkpoint.")
@click.option("--verbose", is_flag=True)
def main(model_name, input_path, output_path, normalize, batch_size, device,
         checkpoint, verbose) -> None:
    """Export embeddings in the engine's binary format (plus a manifest)."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        job = ExtractorJob(
            model_name=model_name,
            input_path=input_path,
            output_path=output_path,
            batch_size=batch_size,
            device=device,
            normalize=normalize,
            checkpoint=checkpoint,
        )
        result = run_job(job)
    except (ExtractionError, EncoderError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    click.echo(
        f"wrote {result.count} embeddings (dim {result.dim}) to {result.output_path}; "
        f"{len(result.skipped)} skipped; manifest {result.manifest_path}"
    )


if __name__ == "__main__":
    main()
