"""Command-line surface: fingerprint, compare, matrix, curves, registry, synth.

Exit codes are a stable contract: 0 success, 2 usage/I-O/format errors,
3 config or tensor-name resolution errors, 4 degenerate-numerics errors.
Machine outputs (JSON/CSV) are byte-deterministic; timestamps appear only in
the run manifests written next to each output.
"""

from __future__ import annotations

import functools
import os
import sys
from pathlib import Path

import click

from . import __version__
from .arch_map import ProjectionKind, load_config, load_mapping_rules
from .compare import (
    DEFAULT_T_HIGH,
    DEFAULT_T_LOW,
    compare_fingerprints,
    grid_to_csv,
    matrix_to_doc,
    pairwise_matrix,
    report_to_csv,
    report_to_doc,
    report_to_text,
)
from .errors import TpfpError
from .fingerprint import (
    MoeMode,
    canonical_dumps,
    extract_fingerprint,
    format_float,
    normalize_values,
    read_fingerprint,
    serialize_fingerprint,
)
from .manifest import RunRecorder, manifest_path_for
from .registry import Registry
from .synth import generate_checkpoint, load_synth_spec
from .tensor_store import open_checkpoint

REGISTRY_ENV_VAR = "TPFP_REGISTRY"


def _parse_kinds(ctx, param, value):
    if value is None:
        return None
    kinds = []
    for token in value.split(","):
        token = token.strip().upper()
        if not token:
            continue
        try:
            kinds.append(ProjectionKind(token))
        except ValueError:
            raise click.BadParameter(f"unknown projection kind {token!r}") from None
    if not kinds:
        raise click.BadParameter("no projection kinds given")
    return tuple(kinds)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except TpfpError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)
        except OSError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)

    return wrapper


def _info(ctx, message: str) -> None:
    if not ctx.obj.get("quiet"):
        click.echo(message, err=True)


def _write_atomic(path: Path, data: bytes) -> None:
    # no partial output files on failure
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _checkpoint_inputs(ckpt, ckpt_dir: Path) -> list[Path]:
    inputs = list(ckpt.shards)
    cfg = ckpt_dir / "config.json"
    if cfg.is_file():
        inputs.append(cfg)
    return inputs


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--workers", type=click.IntRange(1, 256), default=1, show_default=True,
              help="Parallel tensor readers during extraction.")
@click.option("--quiet", is_flag=True, help="Suppress informational messages.")
@click.version_option(__version__, prog_name="tpfp")
@click.pass_context
def main(ctx, workers, quiet):
    """Weight-distribution fingerprinting and lineage comparison for checkpoints."""
    ctx.obj = {"workers": workers, "quiet": quiet}


@main.command("fingerprint")
@click.argument("ckpt_dir", type=click.Path(path_type=Path))
@click.option("--kinds", default="Q,K,V,O", show_default=True, callback=_parse_kinds,
              help="Comma-separated projection kinds (Q,K,V,O,GATE,UP,DOWN).")
@click.option("--moe-mode", type=click.Choice(["pooled", "per-expert-mean"]),
              default="pooled", show_default=True,
              help="Expert FFN aggregation: pool all experts or average per-expert stds.")
@click.option("--map-file", type=click.Path(path_type=Path),
              help="JSON rule table replacing the built-in name patterns.")
@click.option("--out", type=click.Path(path_type=Path), help="Fingerprint output path.")
@click.option("--registry", "registry_dir", type=click.Path(path_type=Path),
              envvar=REGISTRY_ENV_VAR, help="Store the fingerprint in this registry instead.")
@click.pass_context
@_guarded
def cmd_fingerprint(ctx, ckpt_dir, kinds, moe_mode, map_file, out, registry_dir):
    """Extract a fingerprint from a checkpoint directory."""
    if (out is None) == (registry_dir is None):
        raise click.UsageError("exactly one of --out or --registry is required")
    recorder = RunRecorder("fingerprint", sys.argv[1:])
    ckpt = open_checkpoint(ckpt_dir)
    cfg = load_config(ckpt_dir, ckpt)
    rules = load_mapping_rules(map_file) if map_file else None
    fp = extract_fingerprint(
        ckpt, cfg, kinds,
        moe_mode=MoeMode.POOLED if moe_mode == "pooled" else MoeMode.PER_EXPERT_MEAN,
        rules=rules,
        workers=ctx.obj["workers"],
    )
    data = serialize_fingerprint(fp)
    recorder.add_inputs(*_checkpoint_inputs(ckpt, Path(ckpt_dir)))
    if map_file:
        recorder.add_inputs(map_file)
    if out is not None:
        _write_atomic(out, data)
        dest = out
    else:
        dest = Registry(registry_dir).add_serialized(data)
    recorder.add_outputs(dest)
    recorder.write(manifest_path_for(dest))
    _info(ctx, f"wrote {dest} ({fp.model_id}, {fp.num_layers} layers)")


@main.command("compare")
@click.argument("fp_a", type=click.Path(path_type=Path))
@click.argument("fp_b", type=click.Path(path_type=Path))
@click.option("--kinds", callback=_parse_kinds,
              help="Kinds to compare [default: all kinds present in both].")
@click.option("--t-high", type=float, default=DEFAULT_T_HIGH, show_default=True,
              help="Aggregate at or above this is LIKELY_LINEAGE.")
@click.option("--t-low", type=float, default=DEFAULT_T_LOW, show_default=True,
              help="Aggregate at or below this is LIKELY_INDEPENDENT.")
@click.option("--format", "fmt", type=click.Choice(["text", "json", "csv"]),
              default="text", show_default=True)
@click.option("--out", type=click.Path(path_type=Path), help="Write report here instead of stdout.")
@click.pass_context
@_guarded
def cmd_compare(ctx, fp_a, fp_b, kinds, t_high, t_low, fmt, out):
    """Compare two fingerprint files."""
    if t_high < t_low:
        raise click.UsageError(f"--t-high {t_high} must be >= --t-low {t_low}")
    recorder = RunRecorder("compare", sys.argv[1:])
    a = read_fingerprint(fp_a)
    b = read_fingerprint(fp_b)
    report = compare_fingerprints(a, b, kinds, thresholds=(t_high, t_low))
    if fmt == "json":
        rendered = canonical_dumps(report_to_doc(report), indent=2) + "\n"
    elif fmt == "csv":
        rendered = report_to_csv(report)
    else:
        rendered = report_to_text(report)
    if out is not None:
        _write_atomic(out, rendered.encode("utf-8"))
        recorder.add_inputs(fp_a, fp_b)
        recorder.add_outputs(out)
        recorder.write(manifest_path_for(out))
        _info(ctx, f"wrote {out}")
    else:
        click.echo(rendered, nl=False)


@main.command("matrix")
@click.argument("fp_files", nargs=-1, type=click.Path(path_type=Path))
@click.option("--registry", "registry_dir", type=click.Path(path_type=Path),
              envvar=REGISTRY_ENV_VAR, help="Take fingerprints from this registry.")
@click.option("--kinds", callback=_parse_kinds,
              help="Kinds to grid [default: kinds present in every fingerprint].")
@click.option("--out-dir", type=click.Path(path_type=Path), default=Path("."),
              show_default=True)
@click.option("--skip-errors", is_flag=True,
              help="Emit empty cells for failing pairs instead of aborting.")
@click.pass_context
@_guarded
def cmd_matrix(ctx, fp_files, registry_dir, kinds, out_dir, skip_errors):
    """Pairwise correlation grids over a set of fingerprints."""
    recorder = RunRecorder("matrix", sys.argv[1:])
    sources = list(fp_files)
    fps = [read_fingerprint(p) for p in sources]
    if registry_dir is not None:
        reg = Registry(registry_dir)
        for entry in reg.entries():
            sources.append(reg.root / entry.file_name)
            fps.append(read_fingerprint(reg.root / entry.file_name))
    if len(fps) < 2:
        raise click.UsageError("need at least 2 fingerprints (files and/or --registry)")
    matrix = pairwise_matrix(fps, kinds, skip_errors=skip_errors)

    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, grid in matrix.per_kind.items():
        path = out_dir / f"matrix_{kind.value}.csv"
        _write_atomic(path, grid_to_csv(matrix.model_ids, grid).encode("utf-8"))
        written.append(path)
    overall_path = out_dir / "matrix_overall.csv"
    _write_atomic(overall_path, grid_to_csv(matrix.model_ids, matrix.overall).encode("utf-8"))
    written.append(overall_path)
    json_path = out_dir / "matrix.json"
    _write_atomic(json_path, (canonical_dumps(matrix_to_doc(matrix), indent=2) + "\n").encode())
    written.append(json_path)

    recorder.add_inputs(*sources)
    recorder.add_outputs(*written)
    recorder.write(out_dir / "manifest.json")
    _info(ctx, f"wrote {len(written)} grid files to {out_dir}")


@main.command("curves")
@click.argument("fp_files", nargs=-1, required=True, type=click.Path(path_type=Path))
@click.option("--normalize/--raw", "do_normalize", default=True, show_default=True,
              help="Emit zero-mean unit-std sequences or the raw stds.")
@click.option("--out", type=click.Path(path_type=Path), help="CSV output path (default stdout).")
@click.pass_context
@_guarded
def cmd_curves(ctx, fp_files, do_normalize, out):
    """Per-layer curve data (long CSV) for external overlay plots."""
    recorder = RunRecorder("curves", sys.argv[1:])
    lines = ["model_id,kind,layer,value"]
    for path in fp_files:
        fp = read_fingerprint(path)
        for kind in ProjectionKind:
            if kind not in fp.kinds:
                continue
            values = fp.kinds[kind].values
            if do_normalize:
                values = normalize_values(values)
            for layer, value in enumerate(values):
                lines.append(f"{fp.model_id},{kind.value},{layer},{format_float(float(value))}")
    rendered = "\n".join(lines) + "\n"
    if out is not None:
        _write_atomic(out, rendered.encode("utf-8"))
        recorder.add_inputs(*fp_files)
        recorder.add_outputs(out)
        recorder.write(manifest_path_for(out))
        _info(ctx, f"wrote {out}")
    else:
        click.echo(rendered, nl=False)


@main.group("registry")
def cmd_registry():
    """Manage a fingerprint registry directory."""


def _registry_dir(explicit: Path | None) -> Path:
    if explicit is not None:
        return explicit
    env = os.environ.get(REGISTRY_ENV_VAR)
    if env:
        return Path(env)
    raise click.UsageError(f"give a registry directory or set {REGISTRY_ENV_VAR}")


@cmd_registry.command("add")
@click.argument("registry_dir", required=False, type=click.Path(path_type=Path))
@click.argument("fp_file", type=click.Path(path_type=Path))
@click.pass_context
@_guarded
def registry_add(ctx, registry_dir, fp_file):
    """Copy and index a fingerprint file."""
    recorder = RunRecorder("registry add", sys.argv[1:])
    dest = Registry(_registry_dir(registry_dir)).add(fp_file)
    recorder.add_inputs(fp_file)
    recorder.add_outputs(dest)
    recorder.write(manifest_path_for(dest))
    _info(ctx, f"added {dest}")


@cmd_registry.command("list")
@click.argument("registry_dir", required=False, type=click.Path(path_type=Path))
@_guarded
def registry_list(registry_dir):
    """List stored fingerprints: model id, layers, kinds, content hash."""
    entries = Registry(_registry_dir(registry_dir)).entries()
    for e in entries:
        kinds = ",".join(e.kinds)
        click.echo(f"{e.model_id}\t{e.num_layers}\t{kinds}\t{e.content_hash}")
    if not entries:
        click.echo("registry is empty", err=True)


@cmd_registry.command("verify")
@click.argument("registry_dir", required=False, type=click.Path(path_type=Path))
@_guarded
def registry_verify(registry_dir):
    """Recompute all stored content hashes."""
    entries = Registry(_registry_dir(registry_dir)).verify()
    click.echo(f"verified {len(entries)} fingerprint(s)")


@main.command("synth")
@click.argument("spec_file", type=click.Path(path_type=Path))
@click.argument("out_dir", type=click.Path(path_type=Path))
@click.pass_context
@_guarded
def cmd_synth(ctx, spec_file, out_dir):
    """Generate a synthetic checkpoint from a spec file."""
    recorder = RunRecorder("synth", sys.argv[1:])
    spec = load_synth_spec(spec_file)
    generate_checkpoint(spec, out_dir)
    written = sorted(
        p for p in Path(out_dir).iterdir() if p.is_file() and p.name != "manifest.json"
    )
    recorder.add_inputs(spec_file)
    recorder.add_outputs(*written)
    recorder.write(Path(out_dir) / "manifest.json")
    _info(ctx, f"generated {spec.model_id} in {out_dir} ({len(written)} files)")


if __name__ == "__main__":
    main()
