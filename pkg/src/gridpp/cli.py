"""Command-line entry point: ``gridpp <subcommand> [flags]``.

Directory layout produced by ``generate`` and consumed downstream::

    RUN/analysis/<time>_<lead>h.fld   verifying analyses
    RUN/forecast/<time>_<lead>h.fld   raw forecasts, one per valid time
    RUN/scenario.json, RUN/manifest.json
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import DEFAULT_BLUR_SIGMA, blur_baseline, decay_subtract, linear_mos_apply, linear_mos_fit
from .grid import GridError, cos_lat_weights
from .nn import ConfigError, ModelConfig, TrainingError, load_model, postprocess, save_model, train
from .pipeline import build_samples, split_samples
from .predictors import DEFAULT_LAGS, DEFAULT_W, BiasState, forecast_error
from .store import (
    FeatureManifest,
    FieldStoreError,
    ManifestError,
    _atomic_write,
    format_time,
    parse_time,
    read_container,
    read_series,
    write_series,
)
from .synth import ScenarioConfig, synth_pair_series
from .verification import acc, build_climatology, clsds, fss, rmse, skill_card

log = logging.getLogger("gridpp")

REGIMES = {"global": "global", "latw": "lat_weighted", "triregion": "tri_region"}
LOSSES = {"mse": "mse", "mae": "mae", "logcosh": "logcosh", "cossim": "cosine_similarity", "fss": "fractions"}


class CliError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


# ---------------------------------------------------------------- helpers


def _write_text(path, text: str):
    _atomic_write(Path(path), text.encode("utf-8"))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    wr.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return "nan" if x is None or not np.isfinite(x) else repr(float(x))


def _load_manifest(path) -> FeatureManifest | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise CliError("missing file", f"{p}: manifest not found")
    try:
        return FeatureManifest.from_dict(json.loads(p.read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CliError("manifest", f"{p}: unreadable manifest ({exc})") from exc


def _series(path, expected: FeatureManifest | None, what: str):
    p = Path(path)
    if not p.is_dir():
        raise CliError("missing file", f"{p}: {what} directory not found")
    series = read_series(p)
    if not series:
        raise CliError("missing file", f"{p}: no field files")
    first = series[0].manifest
    for fs in series[1:]:
        series[0].check_compatible(fs, what)
    if expected is not None and not (expected.compatible(first) and expected.grid == first.grid):
        raise ManifestError(f"{what}: features or grid differ from --manifest")
    for fs in series:
        if not np.all(np.isfinite(fs.values)):
            raise CliError("nan", f"{what}: non-finite values at {format_time(fs.time)}")
    return series


def _run_dirs(run: Path):
    return run / "analysis", run / "forecast"


def _lead_steps(forecasts) -> int:
    lead = forecasts[0].manifest.lead_hours
    if len(forecasts) < 2:
        return 1
    step = (forecasts[1].time - forecasts[0].time).total_seconds() / 3600.0
    steps = lead / step
    if steps != int(steps) or steps < 1:
        raise ManifestError(f"lead {lead} h is not a positive multiple of the {step} h step")
    return int(steps)


def _biases_for(forecasts, bias_dir):
    """Bias fields from ``bias_dir`` aligned with ``forecasts`` (None where absent)."""
    by_time = {b.time: b for b in read_series(bias_dir)}
    return [by_time.get(f.time) for f in forecasts]


def _samples(args, manifest):
    analyses = _series(_run_dirs(Path(args.inp))[0], manifest, "analyses")
    forecasts = _series(_run_dirs(Path(args.inp))[1], manifest, "forecasts")
    biases = None
    if args.bias is not None:
        if not Path(args.bias).is_dir():
            raise CliError("missing file", f"{args.bias}: bias directory not found")
        by_time = {a.time for a in analyses}
        aligned = [f for f in forecasts if f.time in by_time]
        biases = _biases_for(aligned, args.bias)
    samples = build_samples(analyses, forecasts, args.w, args.lags, _lead_steps(forecasts),
                            warmup=args.warmup, biases=biases)
    if len(samples) < 2:
        raise CliError("data", f"only {len(samples)} usable samples")
    return analyses, split_samples(samples, args.split)


def _check_finite(series, what):
    for fs in series:
        if not np.all(np.isfinite(fs.values)):
            raise CliError("nan", f"{what} produced non-finite values at {format_time(fs.time)}")


# ---------------------------------------------------------------- subcommands


def cmd_generate(args):
    cfg = ScenarioConfig.from_file(args.scenario) if args.scenario else ScenarioConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    manifest = _load_manifest(args.manifest)
    if manifest is not None:
        cfg.features = [f.__dict__ for f in manifest.features]
        cfg.n_features = manifest.n_features
    analyses, forecasts = synth_pair_series(cfg)
    out = Path(args.out)
    a_dir, f_dir = _run_dirs(out)
    write_series(a_dir, analyses)
    write_series(f_dir, forecasts)
    _write_text(out / "scenario.json", cfg.to_json() + "\n")
    _write_text(out / "manifest.json", json.dumps(forecasts[0].manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    log.info("wrote %d analysis/forecast pairs to %s", len(analyses), out)


def cmd_bias(args):
    manifest = _load_manifest(args.manifest)
    analyses = _series(_run_dirs(Path(args.inp))[0], manifest, "analyses")
    forecasts = _series(_run_dirs(Path(args.inp))[1], manifest, "forecasts")
    by_time = {a.time: a for a in analyses}
    errors = [forecast_error(f, by_time[f.time]) for f in forecasts if f.time in by_time]
    if not errors:
        raise CliError("data", "no forecast has a verifying analysis")
    lead = forecasts[0].manifest.lead_hours
    if args.resume:
        if not Path(args.resume).is_file():
            raise CliError("missing file", f"{args.resume}: bias state not found")
        state, _ = BiasState.load(args.resume)
        if state.w != args.w or state.n_lags != args.lags:
            raise CliError("config", "resumed state uses a different --w or --lags")
        resume_time = _state_time(args.resume)
        errors = [e for e in errors if resume_time is None or e.time > resume_time]
    else:
        state = BiasState(errors[0].values.shape, args.w, args.lags)
        resume_time = None
    out = Path(args.out)
    written, k, last_time = [], 0, resume_time
    for f in forecasts:
        issue = f.time.timestamp() - lead * 3600
        if resume_time is not None and issue < resume_time.timestamp():
            continue  # issued before the checkpoint; its bias is no longer recoverable
        while k < len(errors) and errors[k].time.timestamp() <= issue:
            state.update(errors[k])
            last_time = errors[k].time
            k += 1
        if state.count:
            written.append(f.with_values(state.bias()))
    while k < len(errors):
        state.update(errors[k])
        last_time = errors[k].time
        k += 1
    _check_finite(written, "bias")
    write_series(out, written, dtype="<f8")
    state.save(out / "state.fld", forecasts[0].manifest, last_time)
    log.info("wrote %d bias fields and state to %s", len(written), out)


def _state_time(path):
    meta, _ = read_container(path)
    return None if meta.get("time") is None else parse_time(meta["time"])


def _model_config(args, n_in, n_out) -> ModelConfig:
    return ModelConfig(
        n_in, n_out, tuple(args.widths), seed=args.seed or 0, loss=LOSSES[args.loss],
        regime=REGIMES[args.regime], learning_rate=args.lr, tile_size=args.tile_size,
        lr_schedule=args.lr_schedule,
    )


def cmd_train(args):
    manifest = _load_manifest(args.manifest)
    _, (train_s, _) = _samples(args, manifest)
    dataset = [(s.features, s.error) for s in train_s]
    cfg = _model_config(args, train_s[0].features.n_channels, train_s[0].error.values.shape[0])
    result = train(cfg, dataset, epochs=args.epochs)
    out = Path(args.out)
    save_model(result.model, out / "model.fld")
    if cfg.regime == "tri_region":
        rows = [(e, name, _fmt(v)) for name, tr in zip(("north", "tropics", "south"), result.trace)
                for e, v in enumerate(tr)]
        header = ("epoch", "region", "loss")
    else:
        rows = [(e, _fmt(v)) for e, v in enumerate(result.trace)]
        header = ("epoch", "loss")
    _write_text(out / "loss_trace.csv", _csv_text(header, rows))
    log.info("trained on %d samples; checkpoint in %s", len(train_s), out)


def cmd_postprocess(args):
    manifest = _load_manifest(args.manifest)
    analyses, (train_s, test_s) = _samples(args, manifest)
    if not test_s:
        raise CliError("data", "no samples left after the training split")
    method = args.method
    if method == "nn":
        if args.model is None:
            raise CliError("config", "--method nn needs --model")
        path = Path(args.model)
        path = path / "model.fld" if path.is_dir() else path
        if not path.is_file():
            raise CliError("missing file", f"{path}: model checkpoint not found")
        model = load_model(path)
        out = [postprocess(model, s.forecast, s.features) for s in test_s]
    elif method == "linear":
        clim = build_climatology(analyses)
        history = [(s.error, s.bias, s.forecast) for s in train_s]
        model = linear_mos_fit(history, [clim.at(s.time) for s in train_s])
        out = [linear_mos_apply(model, s.forecast, s.bias, clim.at(s.time)) for s in test_s]
    elif method == "decay":
        out = [decay_subtract(s.forecast, s.bias) for s in test_s]
    elif method == "blur":
        out = [blur_baseline(s.forecast, args.sigma) for s in test_s]
    else:
        out = [s.forecast for s in test_s]
    _check_finite(out, f"postprocess ({method})")
    write_series(Path(args.out), out)
    log.info("wrote %d corrected forecasts to %s", len(out), args.out)


def _weights(args, fs):
    return cos_lat_weights(fs.grid) if args.lat_weighted == "on" else None


def cmd_evaluate(args):
    manifest = _load_manifest(args.manifest)
    cand = _series(args.inp, manifest, "candidate")
    truth = _series(args.truth, manifest, "truth")
    by_time = {t.time: t for t in truth}
    missing = [format_time(c.time) for c in cand if c.time not in by_time]
    if missing:
        raise ManifestError(f"truth missing for valid times {missing[:3]}")
    clim = None
    clim_src = _series(args.climatology, manifest, "climatology") if args.climatology else truth
    try:
        clim = build_climatology(clim_src)
    except ValueError as exc:
        log.warning("ACC skipped: %s", exc)
    pairs = [(c, by_time[c.time]) for c in cand]
    F = cand[0].values.shape[0]
    thresholds = np.quantile(np.stack([t.values for _, t in pairs]), args.fss_quantile, axis=(0, 2, 3))
    per_lead: dict[int, list] = {}
    for c, t in pairs:
        c.check_compatible(t, "evaluate")
        w = _weights(args, c)
        r = rmse(c, t, w)
        a = acc(c, t, clim, c.time, w) if clim is not None and clim.covered(c.time.timetuple().tm_yday) \
            else np.full(F, np.nan)
        f = np.array([fss(c.values[i], t.values[i], thresholds[i], args.fss_window) for i in range(F)])
        s = np.array([clsds(c.values[i], t.values[i]) for i in range(F)])
        per_lead.setdefault(c.manifest.lead_hours, []).append(np.stack([r, a, f, s]))
    rows = []
    feats = cand[0].manifest.features
    for lead in sorted(per_lead):
        stack = np.array(per_lead[lead])  # (n, 4, F)
        n = stack.shape[0]
        for i, feat in enumerate(feats):
            col = stack[:, :, i]
            means = [np.nan if np.all(np.isnan(col[:, m])) else float(np.nanmean(col[:, m])) for m in range(4)]
            rows.append((lead, feat.variable, feat.level, n, *map(_fmt, means)))
    text = _csv_text(("lead_hours", "variable", "level", "n", "rmse", "acc", "fss", "clsds"), rows)
    _write_text(args.out, text)


def cmd_skillcard(args):
    manifest = _load_manifest(args.manifest)
    cand = _series(args.inp, manifest, "candidate")
    base = _series(args.baseline, manifest, "baseline")
    truth = {t.time: t for t in _series(args.truth, manifest, "truth")}
    if [c.time for c in cand] != [b.time for b in base]:
        raise ManifestError("candidate and baseline valid times differ")
    try:
        truth_runs = [truth[c.time] for c in cand]
    except KeyError as exc:
        raise ManifestError(f"truth missing for valid time {exc}") from None
    clim = build_climatology(list(truth.values())) if args.metric == "acc" else None
    card = skill_card(cand, base, truth_runs, args.metric, clim, _weights(args, cand[0]))
    out = Path(args.out)
    _write_text(out, card.to_csv())
    _write_text(out.with_suffix(".json"), card.to_report() + "\n")


# ---------------------------------------------------------------- parser


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridpp", description="Learn and remove systematic error from gridded forecasts.")
    p.add_argument("--version", action="version", version=f"gridpp {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--manifest", help="feature manifest JSON that inputs must match")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--lat-weighted", choices=("on", "off"), default="on", dest="lat_weighted")

    def sample_flags(sp):
        sp.add_argument("--in", dest="inp", required=True, help="run directory from `generate`")
        sp.add_argument("--bias", help="bias directory from `bias` (recomputed when omitted)")
        sp.add_argument("--w", type=float, default=DEFAULT_W)
        sp.add_argument("--lags", type=int, default=DEFAULT_LAGS)
        sp.add_argument("--warmup", type=int, default=10, help="steps dropped so the bias has history")
        sp.add_argument("--split", type=float, default=0.7, help="chronological training fraction")

    g = sub.add_parser("generate", help="write a synthetic analysis/forecast run")
    common(g)
    g.add_argument("--scenario", help="scenario JSON (defaults when omitted)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bias", help="decay-weighted bias for every forecast")
    common(b)
    b.add_argument("--in", dest="inp", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--w", type=float, default=DEFAULT_W)
    b.add_argument("--lags", type=int, default=DEFAULT_LAGS)
    b.add_argument("--resume", help="bias state checkpoint to continue from")
    b.set_defaults(func=cmd_bias)

    t = sub.add_parser("train", help="fit the pointwise corrector")
    common(t)
    sample_flags(t)
    t.add_argument("--out", required=True, help="output directory for model.fld and loss_trace.csv")
    t.add_argument("--regime", choices=tuple(REGIMES), default="global")
    t.add_argument("--loss", choices=tuple(LOSSES), default="mse")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--widths", type=int, nargs="+", default=[64, 128, 256])
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lr-schedule", choices=("constant", "cosine"), default="constant", dest="lr_schedule")
    t.add_argument("--tile-size", type=int, default=16, dest="tile_size")
    t.set_defaults(func=cmd_train)

    pp = sub.add_parser("postprocess", help="apply a corrector to the held-out forecasts")
    common(pp)
    sample_flags(pp)
    pp.add_argument("--method", choices=("nn", "linear", "decay", "blur", "raw"), required=True)
    pp.add_argument("--model", help="checkpoint file or training output directory")
    pp.add_argument("--sigma", type=float, default=DEFAULT_BLUR_SIGMA)
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_postprocess)

    e = sub.add_parser("evaluate", help="RMSE/ACC/FSS/CLSDS per lead time as CSV")
    common(e)
    e.add_argument("--in", dest="inp", required=True, help="candidate forecast directory")
    e.add_argument("--truth", required=True, help="verifying analysis directory")
    e.add_argument("--climatology", help="analysis directory for the climatology (default: truth)")
    e.add_argument("--fss-window", type=int, default=5, dest="fss_window")
    e.add_argument("--fss-quantile", type=float, default=0.9, dest="fss_quantile")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("skillcard", help="paired comparison of two candidates")
    common(s)
    s.add_argument("--in", dest="inp", required=True, help="candidate A directory")
    s.add_argument("--baseline", required=True, help="candidate B directory")
    s.add_argument("--truth", required=True)
    s.add_argument("--metric", choices=("rmse", "acc"), default="rmse")
    s.add_argument("--out", required=True, help="CSV path; a .json report is written alongside")
    s.set_defaults(func=cmd_skillcard)
    return p


def _thread_limit():
    n = os.environ.get("GRIDPP_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def _error_kind(exc) -> str:
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, FieldStoreError):
        return exc.kind
    if isinstance(exc, FileNotFoundError):
        return "missing file"
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, TrainingError):
        return "nan"
    if isinstance(exc, GridError):
        return "grid"
    return "value"


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:  # usage errors (2) and --help/--version (0)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            args.func(args)
    except (CliError, FieldStoreError, FileNotFoundError, GridError, ValueError, TrainingError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {_error_kind(exc)}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
