"""Versioned on-disk formats: dataset directories, fit artifacts, posteriors.

Everything is JSON plus headered CSV.  CSV numerics are written with 17
significant digits so double-precision values round-trip exactly; writing,
reading, and re-writing an artifact is byte-identical.
"""

import json
import subprocess
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import ValidationError
from .inference import FitConfig, FitReport
from .kernels import GPPrior, KernelSpec
from .model import LatentPosterior, ModelParams, SpikeData

DATASET_FORMAT = "vlgp-dataset"
FIT_FORMAT = "vlgp-fit"
POSTERIOR_FORMAT = "vlgp-posterior"
FORMAT_VERSION = 1


def version_string():
    """Package version, with git description when running from a checkout."""
    base = f"vlgp-{__version__}"
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).parent,
        )
        if described.returncode == 0 and described.stdout.strip():
            return f"{base}+{described.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


def write_csv(path, array, columns):
    array = np.atleast_2d(np.asarray(array, dtype=float))
    if array.shape[1] != len(columns):
        raise ValidationError(f"{path}: {len(columns)} columns expected, got {array.shape[1]}")
    np.savetxt(path, array, delimiter=",", fmt="%.17g", header=",".join(columns), comments="")


def read_csv(path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"missing file {path}")
    with open(path) as fh:
        columns = fh.readline().strip().split(",")
    array = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return array, columns


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path, expected_format):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"missing file {path}")
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != expected_format:
        raise ValidationError(
            f"{path}: expected format {expected_format!r}, found {payload.get('format')!r}"
        )
    if payload.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"{path}: unsupported {expected_format} version {payload.get('format_version')!r}"
        )
    return payload


def _neuron_columns(n):
    return [f"n{i:03d}" for i in range(n)]


def _latent_columns(n, prefix="z"):
    return [f"{prefix}{i}" for i in range(n)]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def write_dataset(out_dir, data, truth=None, generator=None, seed=None):
    """Write a dataset directory (manifest + per-trial CSVs)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = truth or {}
    latents = truth.get("latents")
    manifest = {
        "format": DATASET_FORMAT,
        "format_version": FORMAT_VERSION,
        "version": version_string(),
        "n_neurons": data.n_neurons,
        "history_order": data.history_order,
        "bin_width": data.bin_width,
        "latent_dim_true": int(latents[0].shape[1]) if latents else None,
        "seed": seed,
        "generator": generator,
        "trials": [],
    }
    for m, y in enumerate(data.trials):
        counts_name = f"trial_{m:03d}_counts.csv"
        write_csv(out / counts_name, y, _neuron_columns(data.n_neurons))
        entry = {"counts": counts_name, "n_bins": int(y.shape[0]), "latents": None}
        if latents:
            latents_name = f"trial_{m:03d}_latents.csv"
            write_csv(out / latents_name, latents[m], _latent_columns(latents[m].shape[1]))
            entry["latents"] = latents_name
        manifest["trials"].append(entry)
    if truth.get("loading") is not None:
        write_csv(
            out / "true_loading.csv",
            truth["loading"],
            _latent_columns(truth["loading"].shape[1], "l"),
        )
        manifest["true_loading"] = "true_loading.csv"
    if truth.get("bias") is not None:
        write_csv(out / "true_bias.csv", np.asarray(truth["bias"])[:, None], ["bias"])
        manifest["true_bias"] = "true_bias.csv"
    _write_json(out / "manifest.json", manifest)
    return out


def read_dataset(path):
    """Read a dataset directory back into (SpikeData, truth, manifest)."""
    root = Path(path)
    manifest = _read_json(root / "manifest.json", DATASET_FORMAT)
    trials = []
    latents = []
    for entry in manifest["trials"]:
        y, _ = read_csv(root / entry["counts"])
        if y.shape != (entry["n_bins"], manifest["n_neurons"]):
            raise ValidationError(
                f"{entry['counts']}: shape {y.shape} does not match the manifest"
            )
        trials.append(y)
        if entry.get("latents"):
            x, _ = read_csv(root / entry["latents"])
            if x.shape[0] != entry["n_bins"]:
                raise ValidationError(f"{entry['latents']}: latent length mismatch")
            latents.append(x)
    data = SpikeData(
        trials=trials,
        bin_width=manifest["bin_width"],
        history_order=manifest["history_order"],
    )
    truth = {}
    if latents:
        if len(latents) != data.n_trials:
            raise ValidationError("latents present for only part of the trials")
        truth["latents"] = latents
    if manifest.get("true_loading"):
        truth["loading"], _ = read_csv(root / manifest["true_loading"])
    if manifest.get("true_bias"):
        bias, _ = read_csv(root / manifest["true_bias"])
        truth["bias"] = bias[:, 0]
    return data, truth, manifest


# ---------------------------------------------------------------------------
# fit artifacts
# ---------------------------------------------------------------------------


def _trace_table(report):
    columns = ["iteration", "elbo", "wall_time"]
    rows = [
        np.arange(1, len(report.elbo_trace) + 1, dtype=float),
        np.asarray(report.elbo_trace, dtype=float),
        np.asarray(report.wall_time, dtype=float),
    ]
    if report.rank_corr_trace:
        columns.append("rank_corr")
        rows.append(np.asarray(report.rank_corr_trace, dtype=float))
    return np.column_stack(rows), columns


def write_fit(out_dir, params, posterior, prior, report, config, dataset=None, train_trials=None):
    """Write a fit artifact directory; returns its path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_latents = params.n_latents
    write_csv(out / "alpha.csv", params.alpha, _latent_columns(n_latents, "l"))
    write_csv(
        out / "beta.csv",
        params.beta,
        ["bias"] + [f"lag{k}" for k in range(params.history_order, 0, -1)],
    )
    posterior_entries = []
    for m in range(posterior.n_trials):
        entry = {}
        for name, arrays in (("mu", posterior.mu), ("w", posterior.w), ("v", posterior.v)):
            fname = f"trial_{m:03d}_{name}.csv"
            write_csv(out / fname, arrays[m], _latent_columns(n_latents))
            entry[name] = fname
        posterior_entries.append(entry)
    trace, trace_columns = _trace_table(report)
    write_csv(out / "trace.csv", trace, trace_columns)

    manifest = {
        "format": FIT_FORMAT,
        "format_version": FORMAT_VERSION,
        "version": version_string(),
        "config": config,
        "dataset": str(dataset) if dataset is not None else None,
        "train_trials": list(train_trials) if train_trials is not None else None,
        "n_neurons": params.n_neurons,
        "n_latents": n_latents,
        "history_order": params.history_order,
        "hyperparameters": [
            {"sigma2": prior.spec(l).sigma2, "omega": prior.spec(l).omega}
            for l in range(prior.n_latents)
        ],
        "ichol": {"tol_scale": prior.tol_scale, "max_rank": prior.max_rank},
        "files": {
            "alpha": "alpha.csv",
            "beta": "beta.csv",
            "trace": "trace.csv",
            "posterior": posterior_entries,
        },
        "report": {
            "converged": report.converged,
            "iterations": report.iterations,
            "clamp_count": report.clamp_count,
            "step_fallbacks": report.step_fallbacks,
            "hyper_trace": report.hyper_trace,
            "notes": report.notes,
        },
    }
    _write_json(out / "fit.json", manifest)
    return out


def read_fit(path):
    """Read a fit artifact into (params, posterior, prior, report, manifest)."""
    root = Path(path)
    manifest = _read_json(root / "fit.json", FIT_FORMAT)
    alpha, _ = read_csv(root / manifest["files"]["alpha"])
    beta, _ = read_csv(root / manifest["files"]["beta"])
    params = ModelParams(alpha=alpha, beta=beta)
    mu, w, v = [], [], []
    for entry in manifest["files"]["posterior"]:
        mu.append(read_csv(root / entry["mu"])[0])
        w.append(read_csv(root / entry["w"])[0])
        v.append(read_csv(root / entry["v"])[0])
    posterior = LatentPosterior(mu=mu, w=w, v=v)
    specs = [
        KernelSpec(h["sigma2"], h["omega"]) for h in manifest["hyperparameters"]
    ]
    prior = GPPrior(
        specs,
        tol_scale=manifest["ichol"]["tol_scale"],
        max_rank=manifest["ichol"]["max_rank"],
    )
    trace, trace_columns = read_csv(root / manifest["files"]["trace"])
    report = FitReport(
        elbo_trace=list(trace[:, trace_columns.index("elbo")]),
        wall_time=list(trace[:, trace_columns.index("wall_time")]),
        rank_corr_trace=(
            list(trace[:, trace_columns.index("rank_corr")])
            if "rank_corr" in trace_columns
            else []
        ),
        converged=manifest["report"]["converged"],
        iterations=manifest["report"]["iterations"],
        clamp_count=manifest["report"]["clamp_count"],
        step_fallbacks=manifest["report"]["step_fallbacks"],
        hyper_trace=manifest["report"]["hyper_trace"],
        notes=list(manifest["report"]["notes"]),
    )
    return params, posterior, prior, report, manifest


def fit_config_from_dict(payload, n_neurons=None):
    """FitConfig from a JSON-style dict, rejecting unknown keys."""
    known = set(FitConfig.__dataclass_fields__)
    extra = set(payload) - known
    if extra:
        raise ValidationError(f"unknown fit-config fields: {sorted(extra)}")
    if "n_latents" not in payload:
        raise ValidationError("fit config needs n_latents")
    return FitConfig(**payload)


# ---------------------------------------------------------------------------
# standalone posteriors
# ---------------------------------------------------------------------------


def write_posterior(out_dir, posterior, meta=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for m in range(posterior.n_trials):
        entry = {}
        for name, arrays in (("mu", posterior.mu), ("w", posterior.w), ("v", posterior.v)):
            fname = f"trial_{m:03d}_{name}.csv"
            write_csv(out / fname, arrays[m], _latent_columns(posterior.n_latents))
            entry[name] = fname
        entries.append(entry)
    manifest = {
        "format": POSTERIOR_FORMAT,
        "format_version": FORMAT_VERSION,
        "version": version_string(),
        "meta": meta or {},
        "trials": entries,
    }
    _write_json(out / "posterior.json", manifest)
    return out


def read_posterior(path):
    root = Path(path)
    manifest = _read_json(root / "posterior.json", POSTERIOR_FORMAT)
    mu, w, v = [], [], []
    for entry in manifest["trials"]:
        mu.append(read_csv(root / entry["mu"])[0])
        w.append(read_csv(root / entry["w"])[0])
        v.append(read_csv(root / entry["v"])[0])
    return LatentPosterior(mu=mu, w=w, v=v), manifest
