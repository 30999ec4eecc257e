"""Command-line pipeline: phantom -> simulate -> train -> infer -> reference
-> compare -> track -> report.

Every command is deterministic under --seed, validates its inputs, writes
its artifacts under --out, and on failure emits a machine-readable JSON
error object on stderr with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import (dataio, defaults, encoder, figures, gridref, metrics,
               phantom as phantom_mod, tracking, training)
from .physics import load_schedule, schedule_from_json
from .posterior import (ParameterBounds, load_posterior_map,
                        save_posterior_map)


class CliError(Exception):
    """Input/validation failure surfaced as exit code 2."""


def _resolve(ns, cfg, name, fallback):
    """Parameter resolution: CLI flag > config file > built-in default."""
    val = getattr(ns, name.replace("-", "_"), None)
    if val is not None:
        return val
    if name in cfg:
        return cfg[name]
    return fallback


def _load_cfg(ns) -> dict:
    if ns.config is None:
        return {}
    with open(ns.config, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise CliError("config file must contain a JSON object")
    return cfg


def _outdir(ns) -> str:
    out = ns.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _parse_shape(text: str) -> tuple:
    try:
        h, w = text.lower().split("x")
        return (int(h), int(w))
    except ValueError as exc:
        raise CliError(f"bad grid/shape spec {text!r}, expected HxW") from exc


def _parse_prefixes(text: str):
    """'a..b' or 'a..b..step' into an inclusive integer range."""
    parts = text.split("..")
    if len(parts) not in (2, 3):
        raise CliError(f"bad prefix range {text!r}, expected a..b[..step]")
    a, b = int(parts[0]), int(parts[1])
    step = int(parts[2]) if len(parts) == 3 else 1
    if a < 1 or b < a or step < 1:
        raise CliError(f"bad prefix range {text!r}")
    return list(range(a, b + 1, step))


def _limit_threads(n):
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=int(n))
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _load_dataset(path) -> dataio.DatasetArchive:
    if not os.path.exists(path):
        raise CliError(f"dataset not found: {path}")
    return dataio.read_archive(path)


def _dataset_context(ds: dataio.DatasetArchive):
    """(schedule, pools, bounds) implied by an archive."""
    schedule, pools = schedule_from_json(ds.schedule_doc)
    if ds.stage == "ssMT":
        bounds = defaults.SSMT_BOUNDS
    elif ds.stage == "APT":
        bounds = defaults.APT_BOUNDS
    else:
        raise CliError(f"unknown stage {ds.stage!r} in archive")
    return schedule, pools, bounds


def _bounds_from_cfg(cfg, fallback: ParameterBounds) -> ParameterBounds:
    if "bounds" in cfg:
        return ParameterBounds.from_json(cfg["bounds"])
    return fallback


def _stage1_norm(ds: dataio.DatasetArchive):
    """Normalized frozen stage-1 inputs for APT archives, or None."""
    fx = ds.extra_meta.get("stage1_frozen")
    if fx is None:
        return None
    raw = np.column_stack([np.asarray(fx["f"], dtype=float).ravel(),
                           np.asarray(fx["k"], dtype=float).ravel()])
    return defaults.SSMT_BOUNDS.normalize(raw)


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(ns):
    cfg = _load_cfg(ns)
    out = _outdir(ns)
    kind = _resolve(ns, cfg, "kind", "brain")
    shape = _parse_shape(_resolve(ns, cfg, "grid", "64x64"))
    seed = _resolve(ns, cfg, "seed", 0)
    if kind == "brain":
        ph = phantom_mod.make_brain_phantom(
            shape=shape,
            jitter=float(_resolve(ns, cfg, "jitter", 0.0)),
            aux_variation=float(_resolve(ns, cfg, "aux-variation", 0.0)),
            seed=seed,
            with_lesion=bool(_resolve(ns, cfg, "lesion", True)))
        ph.check_bounds(defaults.SSMT_BOUNDS)
    elif kind == "vial":
        ph = phantom_mod.make_vial_phantom(shape=shape)
        ph.check_bounds(defaults.APT_BOUNDS)
    else:
        raise CliError(f"unknown phantom kind {kind!r}")
    path = os.path.join(out, "phantom.psvq")
    phantom_mod.write_phantom(path, ph)
    print(f"wrote {path}: {kind} {shape[0]}x{shape[1]}, "
          f"{int(ph.mask.sum())} in-mask voxels")
    return 0


def cmd_simulate(ns):
    cfg = _load_cfg(ns)
    out = _outdir(ns)
    ph_path = _resolve(ns, cfg, "phantom", None)
    if ph_path is None:
        raise CliError("simulate requires --phantom")
    ph = phantom_mod.read_phantom(ph_path)
    sched_path = _resolve(ns, cfg, "schedule", None)
    if sched_path is not None:
        schedule, pools = load_schedule(sched_path)
    else:
        pools, _, schedule = defaults.stage_defaults(ph.stage)
    sigma = _resolve(ns, cfg, "sigma", None)
    ds = phantom_mod.corrupt(
        ph, schedule, pools,
        sigma=None if sigma is None else float(sigma),
        seed=_resolve(ns, cfg, "seed", 0),
        noise_fraction=float(_resolve(ns, cfg, "noise-fraction", 0.01)))
    path = os.path.join(out, "dataset.psvq")
    dataio.write_archive(ds, path)
    print(f"wrote {path}: {len(schedule)} samples, sigma={ds.noise_sigma:.3e}")
    return 0


def _train_defaults(mode: str):
    if mode == "fitting":
        return {"lr": 0.01, "epochs": 1000, "batches": 1}
    if mode == "transfer":
        return {"lr": 0.001, "epochs": 350, "batches": 10}
    raise CliError(f"unknown training mode {mode!r}")


def cmd_train(ns):
    cfg = _load_cfg(ns)
    out = _outdir(ns)
    paths = ns.data or cfg.get("data")
    if not paths:
        raise CliError("train requires at least one --data archive")
    if isinstance(paths, str):
        paths = [paths]
    mode = _resolve(ns, cfg, "mode", "fitting")
    base = _train_defaults(mode)
    datasets = [_load_dataset(p) for p in paths]
    schedule, pools, bounds = _dataset_context(datasets[0])
    for ds in datasets[1:]:
        if ds.schedule_doc != datasets[0].schedule_doc:
            raise CliError("all training archives must share one schedule")

    sig_parts, aux_parts, s1_parts = [], [], []
    has_s1 = _stage1_norm(datasets[0]) is not None
    for ds in datasets:
        m = ds.flat_mask()
        sig_parts.append(ds.flat_signals()[m])
        aux_parts.append(ds.aux_arrays(np.flatnonzero(m)))
        s1 = _stage1_norm(ds)
        if (s1 is not None) != has_s1:
            raise CliError("archives disagree on frozen stage-1 inputs")
        if s1 is not None:
            s1_parts.append(s1[m])
    signals = np.concatenate(sig_parts, axis=0)
    aux = aux_parts[0]
    for extra in aux_parts[1:]:
        aux = _concat_aux(aux, extra)
    s1_norm = np.concatenate(s1_parts, axis=0) if s1_parts else None

    alpha = _resolve(ns, cfg, "alpha", "auto")
    if alpha != "auto":
        alpha = float(alpha)
    config = training.TrainConfig(
        epochs=int(_resolve(ns, cfg, "epochs", base["epochs"])),
        lr=float(_resolve(ns, cfg, "lr", base["lr"])),
        alpha=alpha,
        batches=int(_resolve(ns, cfg, "batches", base["batches"])),
        seed=int(_resolve(ns, cfg, "seed", 0)),
        log_every=int(_resolve(ns, cfg, "log-every", 0)))
    in_dim = signals.shape[1] + 4 + (2 if has_s1 else 0)
    weights = encoder.init_weights(in_dim, bounds, seed=config.seed)
    t0 = time.perf_counter()
    report = training.train(weights, signals, aux, schedule, pools, config,
                            stage1_norm=s1_norm)
    elapsed = time.perf_counter() - t0

    wpath = os.path.join(out, "weights.psvq")
    encoder.save_weights(wpath, weights)
    report.to_csv(os.path.join(out, "train_report.csv"))
    with open(os.path.join(out, "train_meta.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"mode": mode, "alpha": report.alpha,
                   "epochs": config.epochs, "lr": config.lr,
                   "batches": config.batches, "seed": config.seed,
                   "n_voxels": int(signals.shape[0]),
                   "train_s": round(elapsed, 3)},
                  fh, indent=1, sort_keys=True)
    print(f"wrote {wpath}: {config.epochs} epochs on {signals.shape[0]} "
          f"voxels in {elapsed:.1f}s (alpha={report.alpha:.3e})")
    return 0


def _concat_aux(a, b):
    from .engine import AuxArrays
    cat = lambda x, y: (None if x is None else np.concatenate([x, y]))
    return AuxArrays(np.concatenate([a.t1_water, b.t1_water]),
                     np.concatenate([a.t2_water, b.t2_water]),
                     np.concatenate([a.b0_shift, b.b0_shift]),
                     np.concatenate([a.b1_scale, b.b1_scale]),
                     cat(a.fixed_f, b.fixed_f), cat(a.fixed_k, b.fixed_k))


def cmd_infer(ns):
    cfg = _load_cfg(ns)
    out = _outdir(ns)
    ds = _load_dataset(_require(ns, cfg, "data"))
    weights = encoder.load_weights(_require(ns, cfg, "weights"))
    mask = ds.flat_mask()
    t0 = time.perf_counter()
    pmap = training.infer_map(weights, ds.flat_signals(), ds.aux_arrays(),
                              mask, ds.shape, stage1_norm=_stage1_norm(ds))
    elapsed = time.perf_counter() - t0

    path = os.path.join(out, "posterior.bin")
    save_posterior_map(path, pmap)
    _write_map_csv(os.path.join(out, "maps.csv"), pmap, mask)
    h, w = ds.shape
    for arr, name, unit in ((pmap.mu[:, 0], "map_f", "fraction"),
                            (pmap.mu[:, 1], "map_k", "1/s"),
                            (2 * pmap.sigma[:, 0], "ci_half_f", "fraction"),
                            (2 * pmap.sigma[:, 1], "ci_half_k", "1/s")):
        figures.save_heatmap(os.path.join(out, name + ".svg"),
                             arr.reshape(h, w), title=name, units=unit)
    with open(os.path.join(out, "infer_meta.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"n_voxels": int(mask.sum()), "infer_s": round(elapsed, 6),
                   "per_voxel_s": round(elapsed / max(int(mask.sum()), 1), 9)},
                  fh, indent=1, sort_keys=True)
    print(f"wrote {path}: {int(mask.sum())} voxels in {elapsed * 1e3:.1f} ms")
    return 0


def _require(ns, cfg, name):
    val = _resolve(ns, cfg, name, None)
    if val is None:
        raise CliError(f"missing required --{name}")
    return val


def _write_map_csv(path, pmap, mask):
    import csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["voxel", "mu_f", "mu_k", "sigma_f", "sigma_k", "rho"])
        for i in np.flatnonzero(mask):
            w.writerow([int(i)] + [f"{v:.8g}" for v in
                       (*pmap.mu[i], *pmap.sigma[i], pmap.rho[i])])


def cmd_reference(ns):
    cfg = _load_cfg(ns)
    out = _outdir(ns)
    ds = _load_dataset(_require(ns, cfg, "data"))
    schedule, pools, bounds = _dataset_context(ds)
    bounds = _bounds_from_cfg(cfg, bounds)
    counts = _parse_shape(_resolve(ns, cfg, "grid", "100x100"))
    spec = gridref.GridSpec(bounds=bounds, counts=counts)
    mask_idx = np.flatnonzero(ds.flat_mask())
    n_vox = _resolve(ns, cfg, "voxels", None)
    if n_vox is not None:
        rng = np.random.default_rng(
            np.random.Philox(int(_resolve(ns, cfg, "seed", 0))))
        mask_idx = np.sort(rng.permutation(mask_idx)[:int(n_vox)])
    signals = ds.flat_signals()
    aux = ds.aux_arrays()

    t0 = time.perf_counter()
    res = _grouped_reference(signals, aux, mask_idx, spec, schedule, pools)
    elapsed = time.perf_counter() - t0
    per_voxel = elapsed / mask_idx.size

    path = os.path.join(out, "reference.psvq")
    dataio.write_container(
        path, "reference",
        {"spec": spec.to_json(), "grid_shape": list(ds.shape)},
        {"voxel_index": mask_idx.astype(np.int32),
         "mu": res.mu, "cov": res.cov, "map_theta": res.map_theta,
         "sigma_m": res.sigma_m, "nrmse": res.nrmse})
    # timing lives in a sidecar log so the archive itself is run-to-run
    # reproducible
    with open(os.path.join(out, "reference_meta.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"elapsed_s": round(elapsed, 6),
                   "per_voxel_s": round(per_voxel, 9),
                   "n_voxels": int(mask_idx.size)},
                  fh, indent=1, sort_keys=True)
    print(f"wrote {path}: {mask_idx.size} voxels, "
          f"{per_voxel * 1e3:.2f} ms/voxel ({elapsed:.2f}s total)")
    return 0


def _grouped_reference(signals, aux, mask_idx, spec, schedule, pools,
                       cache_dir=None):
    """Slice reference sharing dictionaries between identical-aux voxels."""
    sub = aux.take(mask_idx)
    mu = np.empty((mask_idx.size, 2))
    cov = np.empty((mask_idx.size, 2, 2))
    mapt = np.empty((mask_idx.size, 2))
    sig = np.empty(mask_idx.size)
    nrmse = np.empty(mask_idx.size)
    for aux_p, idx in gridref.group_voxels(sub, pools):
        d = gridref.build_dictionary(spec, aux_p, schedule, pools,
                                     cache_dir=cache_dir)
        r = gridref.reference_for_group(signals[mask_idx[idx]], d)
        mu[idx], cov[idx], mapt[idx] = r.mu, r.cov, r.map_theta
        sig[idx], nrmse[idx] = r.sigma_m, r.nrmse
    return gridref.ReferenceResult(mu=mu, cov=cov, map_theta=mapt,
                                   sigma_m=sig, nrmse=nrmse, spec=spec)


def read_reference(path):
    meta, arrays = dataio.read_container(path, expect_kind="reference")
    res = gridref.ReferenceResult(
        mu=arrays["mu"].astype(float), cov=arrays["cov"].astype(float),
        map_theta=arrays["map_theta"].astype(float),
        sigma_m=arrays["sigma_m"].astype(float),
        nrmse=arrays["nrmse"].astype(float),
        spec=gridref.GridSpec.from_json(meta["spec"]))
    return meta, arrays["voxel_index"].astype(int), res


def cmd_compare(ns):
    cfg = _load_cfg(ns)
    out = _outdir(ns)
    ds = _load_dataset(_require(ns, cfg, "data"))
    schedule, pools, _ = _dataset_context(ds)
    ppath = _require(ns, cfg, "posterior")
    pmap = load_posterior_map(ppath)
    rpath = _require(ns, cfg, "reference")
    ref_meta, voxel_index, ref = read_reference(rpath)

    from .engine import batch_trajectories
    signals = ds.flat_signals()
    aux = ds.aux_arrays()
    s_nn = batch_trajectories(pools, pmap.mu[voxel_index],
                              aux.take(voxel_index), schedule)
    nrmse_nn = metrics.nrmse_fit_batch(signals[voxel_index], s_nn)

    report = metrics.compare_maps(
        pmap, ref, nrmse_nn, voxel_index,
        n_samples=int(_resolve(ns, cfg, "samples", 1000)),
        seed=int(_resolve(ns, cfg, "seed", 0)))

    # amortized-inference vs reference speed, when timing sidecars exist
    meta_path = os.path.join(os.path.dirname(ppath) or ".",
                             "infer_meta.json")
    rmeta_path = os.path.join(os.path.dirname(rpath) or ".",
                              "reference_meta.json")
    if os.path.exists(meta_path) and os.path.exists(rmeta_path):
        with open(meta_path, "r", encoding="utf-8") as fh:
            infer_meta = json.load(fh)
        with open(rmeta_path, "r", encoding="utf-8") as fh:
            ref_timing = json.load(fh)
        ratio = ref_timing["per_voxel_s"] / max(infer_meta["per_voxel_s"],
                                                1e-12)
        report.extra_summary.update({
            "nn_per_voxel_s": infer_meta["per_voxel_s"],
            "ref_per_voxel_s": ref_timing["per_voxel_s"],
            "speed_ratio": round(ratio, 1)})

    report.to_csv(os.path.join(out, "compare.csv"))
    report.to_json(os.path.join(out, "compare.json"))
    s = report.summary()
    print(f"NRMSE NN {s['nrmse_nn_mean_pct']:.2f}% / ref "
          f"{s['nrmse_ref_mean_pct']:.2f}% | CI intersect "
          f"{s['ci_intersect_pct'][0]:.1f}%/{s['ci_intersect_pct'][1]:.1f}% "
          f"| median M1/M2 {s['m1_median']:.2f}/{s['m2_median']:.2f} "
          f"| M2>4 {s['m2_gt4_pct']:.1f}%")
    return 0


def cmd_track(ns):
    cfg = _load_cfg(ns)
    out = _outdir(ns)
    ds = _load_dataset(_require(ns, cfg, "data"))
    schedule, pools, bounds = _dataset_context(ds)
    bounds = _bounds_from_cfg(cfg, bounds)
    counts = _parse_shape(_resolve(ns, cfg, "grid", "100x100"))
    spec = gridref.GridSpec(bounds=bounds, counts=counts)
    n = len(schedule)
    prefixes = _parse_prefixes(_resolve(ns, cfg, "prefixes", f"2..{n}..2"))
    seed = int(_resolve(ns, cfg, "seed", 0))
    n_vox = int(_resolve(ns, cfg, "voxels", 25))
    mask_idx = np.flatnonzero(ds.flat_mask())
    rng = np.random.default_rng(np.random.Philox(seed))
    mask_idx = np.sort(rng.permutation(mask_idx)[:n_vox])

    series = tracking.track(ds.flat_signals()[mask_idx],
                            ds.aux_arrays(mask_idx), schedule, pools, spec,
                            prefixes, voxel_index=mask_idx)
    series.to_csv(os.path.join(out, "track.csv"))
    coverage, scatter = tracking.ci_bound_check(series)
    corr = tracking.ci_error_correlation(series)
    with open(os.path.join(out, "track_meta.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"prefixes": series.prefixes.tolist(),
                   "coverage": coverage.tolist(),
                   "ci_error_r": corr.tolist(),
                   "convergence_n": series.convergence_index(),
                   "n_full": series.n_full},
                  fh, indent=1, sort_keys=True)
    for row in range(min(3, mask_idx.size)):
        figures.save_tracking_strip(
            os.path.join(out, f"track_voxel{row}.svg"), series, row,
            bounds=bounds, title=f"voxel {int(mask_idx[row])}")
    for j, name in enumerate(("f", "k")):
        figures.save_scatter(
            os.path.join(out, f"track_ci_vs_error_{name}.svg"),
            scatter[j, :, 0], scatter[j, :, 1],
            xlabel="CI/2", ylabel="|early-stop error|",
            title=name, diagonal=True)
    print(f"tracked {mask_idx.size} voxels over {series.prefixes.size} "
          f"prefixes; coverage {coverage[0]:.2f}/{coverage[1]:.2f}, "
          f"r {corr[0]:.2f}/{corr[1]:.2f}, "
          f"converged at n={series.convergence_index()}/{series.n_full}")
    return 0


def cmd_report(ns):
    cfg = _load_cfg(ns)
    src = _resolve(ns, cfg, "dir", None) or ns.out or "."
    out = os.path.join(src, "report")
    os.makedirs(out, exist_ok=True)
    made = []

    ppath = os.path.join(src, "posterior.bin")
    if os.path.exists(ppath):
        pmap = load_posterior_map(ppath)
        h, w = pmap.grid_shape
        for arr, name, unit in ((pmap.mu[:, 0], "map_f", "fraction"),
                                (pmap.mu[:, 1], "map_k", "1/s"),
                                (2 * pmap.sigma[:, 0], "ci_half_f",
                                 "fraction"),
                                (2 * pmap.sigma[:, 1], "ci_half_k", "1/s"),
                                (pmap.rho, "rho", "")):
            p = os.path.join(out, name + ".svg")
            figures.save_heatmap(p, np.asarray(arr).reshape(h, w),
                                 title=name, units=unit)
            made.append(p)

        rpath = os.path.join(src, "reference.psvq")
        if os.path.exists(rpath):
            _, voxel_index, ref = read_reference(rpath)
            from .posterior import from_covariance
            pick = voxel_index[:: max(1, voxel_index.size // 4)][:4]
            for i, vi in enumerate(pick):
                row = int(np.flatnonzero(voxel_index == vi)[0])
                overlay = [
                    ("encoder", pmap.voxel(int(vi)), "tab:blue"),
                    ("reference",
                     from_covariance(ref.mu[row], ref.cov[row], pmap.bounds),
                     "tab:red")]
                p = os.path.join(out, f"ellipses_voxel{int(vi)}.svg")
                figures.save_ellipse_overlay(p, overlay,
                                             title=f"voxel {int(vi)}")
                made.append(p)

    tpath = os.path.join(src, "train_report.csv")
    if os.path.exists(tpath):
        rep = training.TrainReport.from_csv(tpath)
        p = os.path.join(out, "training.svg")
        figures.save_training_curves(p, rep, title="training")
        made.append(p)

    if not made:
        raise CliError(f"no artifacts found under {src!r} to report on")
    print(f"wrote {len(made)} figures under {out}")
    return 0


# ---------------------------------------------------------------------------
# argument surface


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="psvq",
        description="Uncertainty-aware saturation-transfer parameter "
                    "mapping: simulation, training, exact reference, "
                    "comparison, and progressive tracking.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config with defaults")
        p.add_argument("--seed", type=int, help="RNG seed (default 0)")
        p.add_argument("--threads", type=int, help="BLAS thread cap")
        p.add_argument("--out", help="output directory (default .)")

    p = sub.add_parser("phantom", help="generate a synthetic ground truth")
    common(p)
    p.add_argument("--kind", choices=["brain", "vial"])
    p.add_argument("--grid", help="phantom shape HxW (default 64x64)")
    p.add_argument("--jitter", type=float)
    p.add_argument("--aux-variation", type=float)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("simulate", help="simulate noisy trajectories")
    common(p)
    p.add_argument("--phantom", help="phantom archive")
    p.add_argument("--schedule", help="schedule JSON (default per stage)")
    p.add_argument("--sigma", type=float, help="absolute noise sigma")
    p.add_argument("--noise-fraction", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the posterior encoder")
    common(p)
    p.add_argument("--data", action="append", help="dataset archive(s)")
    p.add_argument("--mode", choices=["fitting", "transfer"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", help="regularization weight or 'auto'")
    p.add_argument("--batches", type=int)
    p.add_argument("--log-every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="amortized posterior inference")
    common(p)
    p.add_argument("--data")
    p.add_argument("--weights")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("reference", help="exact grid-posterior reference")
    common(p)
    p.add_argument("--data")
    p.add_argument("--grid", help="grid nodes NxM (default 100x100)")
    p.add_argument("--voxels", type=int, help="random voxel subset size")
    p.set_defaults(func=cmd_reference)

    p = sub.add_parser("compare", help="encoder-vs-reference agreement")
    common(p)
    p.add_argument("--data")
    p.add_argument("--posterior", help="posterior map from `infer`")
    p.add_argument("--reference", help="reference archive")
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("track", help="posterior dynamics over prefixes")
    common(p)
    p.add_argument("--data")
    p.add_argument("--grid")
    p.add_argument("--voxels", type=int)
    p.add_argument("--prefixes", help="range a..b[..step]")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("report", help="render figures from prior artifacts")
    common(p)
    p.add_argument("--dir", help="artifact directory (default --out)")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    _limit_threads(ns.threads)
    try:
        return ns.func(ns)
    except (CliError, dataio.ArchiveError, FileNotFoundError, ValueError,
            KeyError, json.JSONDecodeError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc),
                   "command": ns.command}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except training.TrainingError as exc:
        json.dump({"error": "TrainingError", "message": str(exc),
                   "command": ns.command}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
