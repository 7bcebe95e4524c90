"""Command-line surface.

Exit codes are stable: 0 success, 1 validation failure, 2 usage error,
3 I/O error. Every command supports ``--format json``.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .captioning import DEFAULT_POLICY, SeverityPolicy, findings_to_dicts
from .errors import (
    PromptParseError,
    ToolkitError,
    UnreadableFile,
)
from .grammar import PromptSpec, render
from .masks import RasterMask, load_image, load_masks_dir, load_organ_map
from .matching import (
    LOCATION_MAJOR_EQUIVALENT,
    LOCATION_STRICT,
    SEVERITY_OFF,
    SEVERITY_STRICT,
    MatchPolicy,
    recaption_and_match,
)
from .metrics import (
    RatingMatrix,
    binarize_realism,
    dice,
    fleiss_kappa,
    frechet_distance,
    gaussian_stats,
    icc_2_1,
    iou,
    load_feature_vectors,
    ms_ssim,
)
from .pipeline import (
    ExternalCommandTextToMask,
    StubMaskToImage,
    StubTextToMask,
    build_dataset,
    scorer_from_spec,
)
from . import captioning as _captioning

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _load_policy(path: str | None) -> SeverityPolicy:
    if path is None:
        return DEFAULT_POLICY
    return SeverityPolicy.from_file(path)


def handle_errors(fn):
    """Map toolkit failures to the stable exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (UnreadableFile, FileNotFoundError, PermissionError, IsADirectoryError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_IO)
        except OSError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_IO)
        except PromptParseError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_USAGE)
        except (ToolkitError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)

    return wrapper


@click.group()
@click.version_option(version=__version__, prog_name="cxrsynth")
def main() -> None:
    """Chest X-ray synthesis toolkit."""


@main.command("caption")
@click.option("--organ", "organ_path", required=True, type=click.Path(), help="Organ map PNG.")
@click.option("--masks-dir", required=True, type=click.Path(), help="Directory of <id>__<Class>.png masks.")
@click.option("--policy", "policy_path", type=click.Path(), envvar="AURAD_POLICY", default=None,
              help="Severity policy JSON (or AURAD_POLICY env var).")
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text")
@handle_errors
def cmd_caption(organ_path: str, masks_dir: str, policy_path: str | None, fmt: str) -> None:
    """Caption a scene: organ map + pathology masks -> structured prompt."""
    organ = load_organ_map(organ_path)
    annotations = load_masks_dir(masks_dir, organ)
    policy = _load_policy(policy_path)
    findings = _captioning.caption(organ, annotations, policy)
    if fmt == "json":
        click.echo(json.dumps({
            "prompt": render(findings),
            "findings": findings_to_dicts(findings),
        }, sort_keys=True))
    else:
        click.echo(render(findings))


@main.command("validate")
@click.option("--prompt", "prompt_text", required=True, help="Requested structured prompt.")
@click.option("--organ", "organ_path", required=True, type=click.Path())
@click.option("--masks-dir", required=True, type=click.Path())
@click.option("--policy", "policy_path", type=click.Path(), envvar="AURAD_POLICY", default=None)
@click.option("--severity-mode", type=click.Choice([SEVERITY_STRICT, SEVERITY_OFF]),
              default=SEVERITY_STRICT)
@click.option("--location-mode", type=click.Choice([LOCATION_STRICT, LOCATION_MAJOR_EQUIVALENT]),
              default=LOCATION_STRICT)
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="json")
@handle_errors
def cmd_validate(prompt_text: str, organ_path: str, masks_dir: str, policy_path: str | None,
                 severity_mode: str, location_mode: str, fmt: str) -> None:
    """Re-caption masks and compare to the prompt; exit 0 iff matched."""
    prompt = PromptSpec.from_text(prompt_text)
    organ = load_organ_map(organ_path)
    annotations = load_masks_dir(masks_dir, organ)
    policy = MatchPolicy(severity_mode=severity_mode, location_mode=location_mode)
    report = recaption_and_match(prompt, annotations, organ,
                                 policy, _load_policy(policy_path))
    if fmt == "json":
        click.echo(json.dumps(report.to_dict(), sort_keys=True))
    else:
        click.echo("matched" if report.matched else "mismatch")
        for f in report.missing:
            click.echo(f"missing: {f.severity.token} {f.disease.token} on {f.location.token}")
        for f in report.extra:
            click.echo(f"extra: {f.severity.token} {f.disease.token} on {f.location.token}")
        for requested, got in report.severity_mismatches:
            click.echo(
                f"severity: requested {requested.severity.token}, "
                f"re-captioned {got.severity.token} "
                f"({requested.disease.token} on {requested.location.token})"
            )
    if not report.matched:
        sys.exit(EXIT_VALIDATION)


def _load_mask_file(path: str) -> RasterMask:
    from .masks import FOREGROUND_THRESHOLD, _open_raster

    img = _open_raster(path)
    if img.mode != "L":
        img = img.convert("L")
    return RasterMask(np.asarray(img, dtype=np.uint8) > FOREGROUND_THRESHOLD)


def _load_ratings(path: str) -> RatingMatrix:
    try:
        values = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError:
        values = np.loadtxt(path, ndmin=2)
    return RatingMatrix(values)


@main.command("metrics")
@click.option("--task", required=True,
              type=click.Choice(["dice", "iou", "msssim", "fid", "agreement"]))
@click.option("--mask-a", type=click.Path(), default=None)
@click.option("--mask-b", type=click.Path(), default=None)
@click.option("--image-a", type=click.Path(), default=None)
@click.option("--image-b", type=click.Path(), default=None)
@click.option("--features-a", type=click.Path(), default=None)
@click.option("--features-b", type=click.Path(), default=None)
@click.option("--ratings", type=click.Path(), default=None,
              help="Comma- or whitespace-separated items x raters grid.")
@click.option("--categories", type=int, default=None)
@click.option("--binarize", is_flag=True, help="Binarize 1-5 ratings at >= 4 before kappa.")
@click.option("--scales", type=int, default=5)
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="json")
@handle_errors
def cmd_metrics(task: str, mask_a, mask_b, image_a, image_b, features_a, features_b,
                ratings, categories, binarize, scales, fmt) -> None:
    """Compute evaluation metrics; results printed as JSON."""
    def need(value, flag: str):
        if value is None:
            raise click.UsageError(f"--task {task} requires {flag}")
        return value

    if task in ("dice", "iou"):
        a = _load_mask_file(need(mask_a, "--mask-a"))
        b = _load_mask_file(need(mask_b, "--mask-b"))
        out = {task: (dice if task == "dice" else iou)(a, b)}
    elif task == "msssim":
        x = load_image(need(image_a, "--image-a"))
        y = load_image(need(image_b, "--image-b"))
        out = {"msssim": ms_ssim(x, y, scales=scales)}
    elif task == "fid":
        fa = load_feature_vectors(need(features_a, "--features-a"))
        fb = load_feature_vectors(need(features_b, "--features-b"))
        out = {"fid": frechet_distance(gaussian_stats(fa), gaussian_stats(fb))}
    else:
        matrix = _load_ratings(need(ratings, "--ratings"))
        out = {}
        icc_stats = icc_2_1(matrix)
        out["icc"] = icc_stats.icc
        out["ms_r"] = icc_stats.ms_r
        out["ms_e"] = icc_stats.ms_e
        kappa_matrix = matrix
        if binarize:
            binary = np.array([
                binarize_realism([int(v) for v in row]) for row in matrix.values
            ])
            kappa_matrix = RatingMatrix(binary)
            categories = 2
        kappa_stats = fleiss_kappa(kappa_matrix, categories)
        out["fleiss_kappa"] = kappa_stats.fleiss_kappa
        out["p_bar"] = kappa_stats.p_bar
        out["p_bar_e"] = kappa_stats.p_bar_e
    if fmt == "json":
        click.echo(json.dumps(out, sort_keys=True))
    else:
        for key in sorted(out):
            click.echo(f"{key}: {out[key]}")


def _read_requests(path: str) -> list[PromptSpec]:
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        return [PromptSpec.from_text(entry) for entry in json.loads(text)]
    return [
        PromptSpec.from_text(line.strip())
        for line in text.splitlines()
        if line.strip()
    ]


@main.command("build")
@click.option("--requests", "requests_path", required=True, type=click.Path(),
              help="Prompt list: one per line, or a JSON array.")
@click.option("--organs", "organs_path", required=True, type=click.Path(),
              help="Organ map PNG or a directory of them.")
@click.option("--backend", type=click.Choice(["stub", "external-command"]), default="stub")
@click.option("--backend-cmd", default=None,
              help="Command for --backend external-command (shell-split).")
@click.option("--filters", "filter_specs", default="",
              help="Comma list: always-pass, always-fail, min-dynamic-range:<n>.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=0)
@click.option("--max-attempts", type=int, default=5, help="Per-stage retry budget.")
@click.option("--max-attempts-stage2", type=int, default=None,
              help="Override the image-stage budget.")
@click.option("--severity-mode", type=click.Choice([SEVERITY_STRICT, SEVERITY_OFF]),
              default=SEVERITY_STRICT)
@click.option("--policy", "policy_path", type=click.Path(), envvar="AURAD_POLICY", default=None)
@click.option("--workers", type=int, default=1)
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text")
@handle_errors
def cmd_build(requests_path, organs_path, backend, backend_cmd, filter_specs, out_dir,
              seed, max_attempts, max_attempts_stage2, severity_mode, policy_path,
              workers, fmt) -> None:
    """Generate (prompt, mask set, image) triplets and write a manifest."""
    requests = _read_requests(requests_path)
    organs = Path(organs_path)
    if organs.is_dir():
        organ_paths = sorted(organs.glob("*.png"))
        if not organ_paths:
            raise UnreadableFile(f"no organ maps found in {organs}")
    else:
        organ_paths = [organs]

    severity_policy = _load_policy(policy_path)
    if backend == "external-command":
        if not backend_cmd:
            raise click.UsageError("--backend external-command requires --backend-cmd")
        import shlex

        t2m = ExternalCommandTextToMask(shlex.split(backend_cmd))
    else:
        t2m = StubTextToMask(severity_policy)
    m2i = StubMaskToImage()
    filters = [
        scorer_from_spec(spec.strip())
        for spec in filter_specs.split(",")
        if spec.strip()
    ]

    manifest = build_dataset(
        requests,
        organ_paths,
        t2m,
        m2i,
        filters,
        out_dir=out_dir,
        seed=seed,
        max_attempts_stage1=max_attempts,
        max_attempts_stage2=(
            max_attempts if max_attempts_stage2 is None else max_attempts_stage2
        ),
        match_policy=MatchPolicy(severity_mode=severity_mode),
        severity_policy=severity_policy,
        workers=workers,
    )
    manifest_path = str(Path(out_dir) / "manifest.json")
    if fmt == "json":
        click.echo(json.dumps({
            "manifest": manifest_path,
            "counts": manifest["counts"],
        }, sort_keys=True))
    else:
        click.echo(manifest_path)


@main.group("study")
def cmd_study() -> None:
    """Reader-study service and export."""


@cmd_study.command("serve")
@click.option("--items", "items_path", required=True, type=click.Path(),
              help="Study items JSON file.")
@click.option("--port", type=int, default=8080)
@click.option("--host", default="127.0.0.1")
@click.option("--seed", type=int, default=0)
@click.option("--journal", "journal_path", type=click.Path(), default=None,
              help="Append-only response journal (ndjson).")
@click.option("--raters", default=None, help="Comma list restricting rater ids.")
@handle_errors
def cmd_study_serve(items_path, port, host, seed, journal_path, raters) -> None:
    """Serve the blinded reader study over HTTP."""
    import uvicorn

    from .study import StudyState, create_app, load_items

    items = load_items(items_path)
    journal = journal_path or str(Path(items_path).parent / "responses.ndjson")
    state = StudyState(
        items,
        seed=seed,
        journal_path=journal,
        raters=None if raters is None else [r.strip() for r in raters.split(",")],
    )
    uvicorn.run(create_app(state), host=host, port=port)


@cmd_study.command("export")
@click.option("--items", "items_path", required=True, type=click.Path())
@click.option("--journal", "journal_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text")
@handle_errors
def cmd_study_export(items_path, journal_path, seed, out_path, fmt) -> None:
    """Derive the response CSV (with sources revealed) from a journal."""
    from .study import StudyState, load_items

    state = StudyState(load_items(items_path), seed=seed, journal_path=journal_path)
    csv_text = state.export_csv()
    Path(out_path).write_text(csv_text, encoding="utf-8")
    rows = max(csv_text.count("\n") - 1, 0)
    if fmt == "json":
        click.echo(json.dumps({"csv": out_path, "rows": rows}, sort_keys=True))
    else:
        click.echo(out_path)


if __name__ == "__main__":
    main()
