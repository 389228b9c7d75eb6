"""Batch command line: simulate | fit | infer | lono | evaluate.

Every command takes a JSON config and an output directory; dataset and
artifact paths live inside the config.  Exit codes: 0 success, 2 validation
error, 3 numerical failure.  Heavy imports happen after argument parsing so
``--threads`` can cap the BLAS pools.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path


def _setup_logging():
    level = os.environ.get("VLGP_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def _load_config(path):
    from .exceptions import ValidationError

    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file {path} does not exist")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc


def _check_keys(config, allowed, where):
    from .exceptions import ValidationError

    extra = set(config) - set(allowed)
    if extra:
        raise ValidationError(f"unknown {where} config fields: {sorted(extra)}")


def _simspec_from_config(config, seed_override=None):
    import numpy as np

    from .exceptions import ValidationError
    from .kernels import KernelSpec
    from .simulate import DEFAULT_HISTORY_FILTER, LDSParams, SimSpec, random_lds

    allowed = {
        "kind",
        "n_neurons",
        "n_trials",
        "n_bins",
        "latent_dim",
        "sigma2",
        "omega",
        "bin_width",
        "seed",
        "history_filter",
        "bias_mean",
        "bias_std",
        "lorenz_dt",
        "lds",
    }
    _check_keys(config, allowed, "simulate")
    kind = config.get("kind", "gp")
    seed = seed_override if seed_override is not None else config.get("seed", 0)

    kwargs = dict(
        latent_kind=kind,
        n_neurons=int(config.get("n_neurons", 50)),
        n_trials=int(config.get("n_trials", 10)),
        n_bins=int(config.get("n_bins", 1000)),
        bin_width=float(config.get("bin_width", 0.001)),
        seed=int(seed),
    )
    hist = config.get("history_filter", "default")
    if hist == "default" or hist is None:
        kwargs["history_filter"] = DEFAULT_HISTORY_FILTER
    else:
        kwargs["history_filter"] = tuple(float(f) for f in hist)
    for key in ("bias_mean", "bias_std", "lorenz_dt"):
        if key in config:
            kwargs[key] = float(config[key])

    if kind == "gp":
        kwargs["latent_dim"] = int(config.get("latent_dim", 2))
        kwargs["kernel"] = KernelSpec(
            float(config.get("sigma2", 1.0)), float(config.get("omega", 0.01))
        )
    elif kind == "lorenz":
        pass
    elif kind == "lds":
        lds_cfg = config.get("lds")
        if lds_cfg is None:
            raise ValidationError("simulate config field 'lds' is required for kind=lds")
        if lds_cfg.get("random"):
            kwargs["lds"] = random_lds(
                n_latents=int(lds_cfg.get("latent_dim", 3)),
                n_neurons=kwargs["n_neurons"],
                seed=int(seed),
                spectral_radius=float(lds_cfg.get("spectral_radius", 0.95)),
                obs_bias=float(lds_cfg.get("obs_bias", -4.0)),
            )
        else:
            needed = {"A", "b", "Q", "mu0", "Q0", "C", "d"}
            missing = needed - set(lds_cfg)
            if missing:
                raise ValidationError(f"lds config missing fields: {sorted(missing)}")
            kwargs["lds"] = LDSParams(
                **{k: np.asarray(lds_cfg[k], dtype=float) for k in needed}
            )
    else:
        raise ValidationError(f"unknown simulate kind {kind!r}")
    return SimSpec(**kwargs), seed


def cmd_simulate(config, out_dir, seed=None):
    from . import io

    spec, seed_used = _simspec_from_config(config, seed)
    from .simulate import simulate_dataset

    data, truth = simulate_dataset(spec)
    echo = dict(config)
    echo["seed"] = seed_used
    io.write_dataset(out_dir, data, truth=truth, generator=echo, seed=seed_used)
    print(f"dataset written to {out_dir}")
    return 0


def _select_trials(data, truth, trials):
    from .exceptions import ValidationError
    from .model import SpikeData

    if trials is None:
        return data, truth, list(range(data.n_trials))
    trials = [int(t) for t in trials]
    bad = [t for t in trials if not 0 <= t < data.n_trials]
    if bad:
        raise ValidationError(f"trial indices out of range: {bad}")
    sub = SpikeData(
        [data.trials[t] for t in trials],
        bin_width=data.bin_width,
        history_order=data.history_order,
    )
    sub_truth = dict(truth)
    if "latents" in truth:
        sub_truth["latents"] = [truth["latents"][t] for t in trials]
    return sub, sub_truth, trials


def cmd_fit(config, out_dir, seed=None):
    from . import io
    from .inference import fit

    _check_keys(
        config,
        {"dataset", "trials"} | set(io.FitConfig.__dataclass_fields__),
        "fit",
    )
    dataset_path = config.get("dataset")
    if dataset_path is None:
        from .exceptions import ValidationError

        raise ValidationError("fit config needs a 'dataset' path")
    data, truth, _ = io.read_dataset(dataset_path)
    trials = config.get("trials")
    data, truth, train_trials = _select_trials(data, truth, trials)

    fit_fields = {
        k: v for k, v in config.items() if k in io.FitConfig.__dataclass_fields__
    }
    if seed is not None:
        fit_fields["seed"] = seed
    fit_config = io.fit_config_from_dict(fit_fields)
    params, posterior, prior, report = fit(
        data, fit_config, true_latents=truth.get("latents")
    )
    echo = dict(config)
    if seed is not None:
        echo["seed"] = seed
    io.write_fit(
        out_dir,
        params,
        posterior,
        prior,
        report,
        config=echo,
        dataset=dataset_path,
        train_trials=train_trials,
    )
    print(
        f"fit written to {out_dir} "
        f"(iterations={report.iterations}, converged={report.converged})"
    )
    return 0


def _load_fit_inputs(config, where):
    from . import io
    from .exceptions import ValidationError

    for key in ("dataset", "artifact"):
        if key not in config:
            raise ValidationError(f"{where} config needs a '{key}' path")
    data, truth, _ = io.read_dataset(config["dataset"])
    params, posterior, prior, report, manifest = io.read_fit(config["artifact"])
    if params.n_neurons != data.n_neurons:
        raise ValidationError(
            f"artifact has {params.n_neurons} neurons but the dataset has {data.n_neurons}"
        )
    return data, truth, params, posterior, prior, report, manifest


def _fit_config_from_manifest(manifest, overrides=None):
    from . import io

    payload = {
        k: v
        for k, v in (manifest.get("config") or {}).items()
        if k in io.FitConfig.__dataclass_fields__
    }
    payload["n_latents"] = manifest["n_latents"]
    payload["history_order"] = manifest["history_order"]
    payload.update(overrides or {})
    return io.FitConfig(**payload)


def cmd_infer(config, out_dir, seed=None):
    import numpy as np

    from . import io
    from .exceptions import ValidationError
    from .inference import infer_posterior

    _check_keys(config, {"dataset", "artifact", "exclude_neurons", "trials"}, "infer")
    data, truth, params, _, prior, _, manifest = _load_fit_inputs(config, "infer")
    data, truth, trials = _select_trials(data, truth, config.get("trials"))
    mask = None
    excluded = config.get("exclude_neurons")
    if excluded:
        excluded = [int(n) for n in excluded]
        bad = [n for n in excluded if not 0 <= n < data.n_neurons]
        if bad:
            raise ValidationError(f"excluded neuron indices out of range: {bad}")
        mask = np.ones(data.n_neurons, dtype=bool)
        mask[excluded] = False
    fit_config = _fit_config_from_manifest(manifest)
    posterior = infer_posterior(data, params, prior, fit_config, neuron_mask=mask)
    io.write_posterior(
        out_dir,
        posterior,
        meta={
            "dataset": config["dataset"],
            "artifact": config["artifact"],
            "trials": trials,
            "excluded_neurons": excluded or [],
            "config": dict(config),
        },
    )
    print(f"posterior written to {out_dir}")
    return 0


def _lono_metrics(config, where):
    from . import evaluate, io
    from .exceptions import ValidationError

    data, truth, params, _, prior, _, manifest = _load_fit_inputs(config, where)
    test_trials = config.get("test_trials")
    if not test_trials:
        raise ValidationError(f"{where} config needs non-empty 'test_trials'")
    train = manifest.get("train_trials")
    if train is None:
        train = list(range(data.n_trials))
    overlap = sorted(set(int(t) for t in test_trials) & set(train))
    if overlap:
        raise ValidationError(
            f"test trials {overlap} were used for training; train and test must be disjoint"
        )
    test_data, test_truth, _ = _select_trials(data, truth, test_trials)
    fit_config = _fit_config_from_manifest(manifest)
    pred = evaluate.lono_predict(test_data, params, prior, fit_config)
    return pred, test_data, test_truth, manifest


def cmd_lono(config, out_dir, seed=None):
    import numpy as np

    from . import evaluate, io

    _check_keys(config, {"dataset", "artifact", "test_trials"}, "lono")
    pred, test_data, _, manifest = _lono_metrics(config, "lono")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for m, lam in enumerate(pred.rates):
        io.write_csv(
            out / f"lono_trial_{m:03d}_rates.csv",
            lam,
            [f"n{i:03d}" for i in range(lam.shape[1])],
        )
    metrics = {
        "version": io.version_string(),
        "config": dict(config),
        "pll_bits_per_spike": evaluate.pll(pred),
        "predictive_r2": evaluate.predictive_r2(
            np.concatenate([y.ravel() for y in pred.counts]),
            np.concatenate([e.ravel() for e in pred.linear]),
        ),
        "n_spikes": float(sum(y.sum() for y in pred.counts)),
        "baseline_rate": pred.baseline,
    }
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"LONO metrics written to {out}: PLL={metrics['pll_bits_per_spike']:.4f} bits/spike")
    return 0


def cmd_evaluate(config, out_dir, seed=None):
    import numpy as np

    from . import evaluate, io
    from .exceptions import ValidationError

    allowed = {"dataset", "artifact", "test_trials", "n_sims", "bin_group"}
    _check_keys(config, allowed, "evaluate")
    data, truth, params, posterior, prior, report, manifest = _load_fit_inputs(
        config, "evaluate"
    )
    train = manifest.get("train_trials")
    if train is None:
        train = list(range(data.n_trials))
    train_data, train_truth, _ = _select_trials(data, truth, train)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {"version": io.version_string(), "config": dict(config)}
    unavailable = {}

    # truth-dependent metrics
    if train_truth.get("latents"):
        metrics["rank_correlation"] = evaluate.rank_correlation(
            np.concatenate(train_truth["latents"]), np.concatenate(posterior.mu)
        )
    else:
        metrics["rank_correlation"] = None
        unavailable["rank_correlation"] = "dataset has no true latents"
    if train_truth.get("loading") is not None:
        if train_truth["loading"].shape[1] == params.n_latents:
            metrics["subspace_angle_rad"] = evaluate.subspace_angle(
                train_truth["loading"], params.alpha
            )
        else:
            metrics["subspace_angle_rad"] = None
            unavailable["subspace_angle_rad"] = (
                "true loading dimension differs from the fitted one"
            )
    else:
        metrics["subspace_angle_rad"] = None
        unavailable["subspace_angle_rad"] = "dataset has no true loading"

    # goodness of fit on the training trials (trials treated as repeats)
    lengths = {y.shape[0] for y in train_data.trials}
    if len(lengths) == 1 and train_data.n_trials >= 2:
        from .model import firing_rates, history_predictor

        fitted = []
        ll_model = 0.0
        for m in range(train_data.n_trials):
            hb = history_predictor(train_data.history(m), params.beta)
            lam, _ = firing_rates(posterior.mu[m], posterior.v[m], params.alpha, hb)
            fitted.append(lam)
            ll_model += float(
                np.sum(train_data.trials[m] * np.log(lam) - lam)
            )
        ll_null, ll_sat = evaluate.null_and_saturated_loglik(train_data.trials)
        metrics["pseudo_r2"] = evaluate.pseudo_r2(ll_model, ll_null, ll_sat)
        bin_group = int(config.get("bin_group", 50))
        n_sims = int(config.get("n_sims", 50))
        try:
            c_true = evaluate.noise_corr_empirical(train_data, bin_group=bin_group)
            c_model = evaluate.noise_corr_from_model(
                params,
                posterior,
                train_data,
                n_sims=n_sims,
                bin_group=bin_group,
                seed=seed if seed is not None else 0,
            )
            metrics["noise_corr_power"] = evaluate.noise_corr_power(c_model, c_true)
        except ValidationError as exc:
            metrics["noise_corr_power"] = None
            unavailable["noise_corr_power"] = str(exc)
    else:
        for key in ("pseudo_r2", "noise_corr_power"):
            metrics[key] = None
            unavailable[key] = "needs ≥ 2 equal-length training trials"

    # held-out prediction metrics
    if config.get("test_trials"):
        pred, _, _, _ = _lono_metrics(config, "evaluate")
        metrics["pll_bits_per_spike"] = evaluate.pll(pred)
        metrics["predictive_r2"] = evaluate.predictive_r2(
            np.concatenate([y.ravel() for y in pred.counts]),
            np.concatenate([e.ravel() for e in pred.linear]),
        )
    else:
        for key in ("pll_bits_per_spike", "predictive_r2"):
            metrics[key] = None
            unavailable[key] = "no test_trials configured"

    metrics["unavailable"] = unavailable

    # plot-ready CSVs
    trace, trace_columns = io.read_csv(Path(config["artifact"]) / "trace.csv")
    io.write_csv(out / "trace.csv", trace, trace_columns)
    rotated = evaluate.orthogonalize_latents(posterior.mu, loading=params.alpha)
    for m, mu in enumerate(posterior.mu):
        cols = [f"mu{j}" for j in range(mu.shape[1])]
        cols += [f"v{j}" for j in range(mu.shape[1])]
        block = [mu, posterior.v[m]]
        if train_truth.get("latents"):
            x = train_truth["latents"][m]
            cols += [f"true{j}" for j in range(x.shape[1])]
            block.append(x)
        io.write_csv(out / f"latent_trial_{m:03d}.csv", np.column_stack(block), cols)
    n_pc = min(3, params.n_latents)
    pc_rows = []
    for m, mu in enumerate(rotated["mu"]):
        idx = np.arange(mu.shape[0], dtype=float)
        pc_rows.append(
            np.column_stack([np.full(mu.shape[0], float(m)), idx, mu[:, :n_pc]])
        )
    io.write_csv(
        out / "pc_projection.csv",
        np.concatenate(pc_rows, axis=0),
        ["trial", "bin"] + [f"pc{j}" for j in range(n_pc)],
    )

    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    shown = {
        k: v
        for k, v in metrics.items()
        if k not in ("version", "config", "unavailable") and v is not None
    }
    print(f"metrics written to {out}: " + json.dumps(shown, sort_keys=True))
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "infer": cmd_infer,
    "lono": cmd_lono,
    "evaluate": cmd_evaluate,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="vlgp",
        description="Simulate, fit, and evaluate latent-trajectory models of spike trains.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="JSON config file")
        cmd.add_argument("--out", required=True, help="output directory")
        cmd.add_argument("--seed", type=int, default=None, help="seed override")
        cmd.add_argument(
            "--threads", type=int, default=None, help="BLAS thread-pool cap"
        )
    args = parser.parse_args(argv)

    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    _setup_logging()

    from .exceptions import NumericalError, ValidationError

    try:
        config = _load_config(args.config)
        return _COMMANDS[args.command](config, args.out, seed=args.seed)
    except ValidationError as exc:
        print(f"vlgp {args.command}: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"vlgp {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
