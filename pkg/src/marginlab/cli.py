"""Command-line front end: data generation, training, margin measurement,
metric evaluation, perturbation decomposition, and capacity sweeps.

Every subcommand is a thin driver over the library modules. Datasets on
disk always hold raw (unnormalized) features; models carry their own
normalization, which ``measure`` and ``sweep`` apply internally. All
tables are CSV with a one-line header, all summaries are single-line JSON
on stdout, and a fixed ``--seed`` reproduces every byte of output.

Exit codes: 0 success, 2 configuration/domain errors, 3 numerical errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from multiprocessing.pool import ThreadPool
from pathlib import Path

import numpy as np

from ._seed import derive_seed
from .advdir import adv_directions, cumulative_share
from .data import (
    BlobConfig,
    Dataset,
    apply_normalization,
    corrupt_inputs_gaussian,
    corrupt_labels,
    gen_blobs,
    load_dataset,
    max_margin,
    normalize,
    save_dataset,
)
from .errors import (
    ConfigError,
    DegenerateGradientError,
    DomainError,
    NumericalError,
    UndefinedMetricError,
    UnreachableSubspaceError,
    WorkbenchError,
)
from .margin import (
    SearchConfig,
    compute_total_variation,
    constrained_deepfool_margin,
    constrained_taylor_margin,
    deepfool_margin,
    deepfool_margin_batch,
    taylor_margin,
)
from .metrics import (
    EvaluatedModel,
    HyperparamConfig,
    cmi_score,
    granulated_kendall,
    kendall_tau,
    mean_granulated,
    r_squared,
)
from .nnet import (
    TrainConfig,
    accuracy,
    forward_batch,
    init_network,
    load_model,
    predict_batch,
    save_model,
    train_sgd,
)
from .pca import fit_pca, load_pca, save_pca, select_components_kneedle

# ---------------------------------------------------------------------------
# output helpers


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_cell(c) for c in row) for row in rows)
    _atomic_write(path, "\n".join(lines) + "\n")


def _print_json(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


# ---------------------------------------------------------------------------
# gen-data / corrupt / train


def _cmd_gen_data(args) -> None:
    ds = gen_blobs(BlobConfig(classes=args.classes,
                              samples_per_class=args.samples_per_class,
                              dim=args.dim, spread=args.spread,
                              seed=args.seed))
    save_dataset(ds, args.out)
    _print_json({"classes": ds.class_count, "features": ds.feature_count,
                 "path": str(args.out), "samples": ds.sample_count})


def _cmd_corrupt(args) -> None:
    ds = load_dataset(args.infile)
    if args.mode == "label":
        out_ds, report = corrupt_labels(ds, args.fraction, args.seed)
    else:
        out_ds, report = corrupt_inputs_gaussian(ds, args.fraction, args.seed)
    save_dataset(out_ds, args.out)
    if args.report:
        payload = {"mode": report.mode,
                   "fraction_requested": float(report.fraction_requested),
                   "seed": int(report.seed),
                   "indices_corrupted": [int(i) for i in
                                         report.indices_corrupted]}
        _atomic_write(args.report, json.dumps(payload, sort_keys=True) + "\n")
    _print_json({"mode": report.mode,
                 "fraction_requested": float(report.fraction_requested),
                 "num_corrupted": len(report.indices_corrupted),
                 "path": str(args.out), "seed": int(report.seed)})


def _parse_hidden(text: str) -> list[int]:
    try:
        widths = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"--hidden expects comma-separated integers, "
                          f"got {text!r}") from exc
    if not widths or any(w < 1 for w in widths):
        raise ConfigError(f"--hidden widths must be positive, got {text!r}")
    return widths


def _cmd_train(args) -> None:
    raw = load_dataset(args.data)
    if args.normalize == "none":
        ds, meta = raw, None
    else:
        ds, meta = normalize(raw, args.normalize)
    hidden = _parse_hidden(args.hidden)
    net = init_network(ds.feature_count, hidden, ds.class_count,
                       seed=derive_seed(args.seed, "init"), norm_meta=meta)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      learning_rate=args.learning_rate,
                      momentum=args.momentum,
                      seed=derive_seed(args.seed, "shuffle"))
    net = train_sgd(net, ds, cfg)
    save_model(net, args.out)
    _print_json({"hidden": hidden, "path": str(args.out),
                 "train_accuracy": float(accuracy(net, ds))})


# ---------------------------------------------------------------------------
# measure


_DEEPFOOL_ESTIMATORS = ("deepfool", "constrained-deepfool")
_ESTIMATORS = ("taylor", "deepfool", "constrained-taylor",
               "constrained-deepfool")


def _resolve_subspace(args, acts0):
    """PCA model and component count for the constrained estimators."""
    if args.pca is None:
        raise ConfigError("constrained estimators need --pca")
    pca = load_pca(args.pca)
    if args.m == "auto":
        m = select_components_kneedle(pca).m
    else:
        try:
            m = int(args.m)
        except ValueError as exc:
            raise ConfigError(f"--m must be an integer or 'auto', "
                              f"got {args.m!r}") from exc
    if acts0.shape[1] != pca.mean.size:
        raise ConfigError("pca feature count does not match the dataset")
    return pca, m


def _cmd_measure(args) -> None:
    if args.estimator not in _ESTIMATORS:
        raise ConfigError(f"unknown estimator {args.estimator!r}")
    constrained = args.estimator.startswith("constrained-")
    if constrained and args.layer != 0:
        raise ConfigError("constrained estimators measure input space only")
    if args.boundary_out and args.estimator not in _DEEPFOOL_ESTIMATORS:
        raise ConfigError("--boundary-out needs a deepfool-family estimator")
    if args.batch and args.estimator != "deepfool":
        raise ConfigError("--batch supports the standard deepfool estimator "
                          "only")

    net = load_model(args.model)
    raw = load_dataset(args.data)
    X = (apply_normalization(raw.features, net.norm_meta)
         if net.norm_meta is not None else np.asarray(raw.features, float))
    cfg = SearchConfig(learning_rate=args.gamma, stop_tolerance=args.tol,
                       max_iters=args.max_iters,
                       equality_threshold=args.epsilon,
                       batch_mode=args.batch)

    predictions = predict_batch(net, X)
    if args.include_misclassified:
        kept = np.arange(raw.sample_count)
    else:
        kept = np.flatnonzero(predictions == raw.labels)
    skipped = int(raw.sample_count - kept.size)

    all_acts = forward_batch(net, X)
    acts = all_acts[args.layer]
    pca = None
    m = None
    if constrained:
        pca, m = _resolve_subspace(args, all_acts[0])

    rows = []
    boundary_rows = []
    margins = []
    degenerate = 0
    if args.estimator == "deepfool" and args.batch:
        results = deepfool_margin_batch(net, args.layer, acts[kept], cfg)
        pairs = zip(kept.tolist(), results)
    else:
        pairs = ((int(idx), None) for idx in kept)

    for idx, ready in pairs:
        if ready is not None:
            res = ready
        else:
            x = acts[idx]
            try:
                if args.estimator == "taylor":
                    res = taylor_margin(net, args.layer, x)
                elif args.estimator == "deepfool":
                    res = deepfool_margin(net, args.layer, x, cfg)
                elif args.estimator == "constrained-taylor":
                    res = constrained_taylor_margin(net, x, pca, m)
                else:
                    res = constrained_deepfool_margin(net, x, pca, m, cfg)
            except UnreachableSubspaceError:
                rows.append((idx, None, None, None, "unreachable",
                             None, None, None))
                degenerate += 1
                continue
            except DegenerateGradientError:
                rows.append((idx, None, None, None, "degenerate",
                             None, None, None))
                degenerate += 1
                continue
        margins.append(res.d_best)
        rows.append((idx, float(res.d_best), float(res.v_best),
                     int(res.steps), res.status.value, res.class_pair[0],
                     res.class_pair[1], bool(res.left_subspace)))
        if args.boundary_out and res.boundary_point is not None:
            boundary_rows.append((idx, *map(float, acts[idx]),
                                  *map(float, res.boundary_point)))

    header = ["sample_index", "margin", "violation", "steps", "status",
              "base_class", "competitor_class", "left_subspace"]
    summary = {"estimator": args.estimator, "layer": int(args.layer),
               "measured": len(margins), "degenerate": degenerate,
               "skipped_misclassified": skipped,
               "mean_margin": _mean(margins)}
    if constrained:
        summary["subspace_dims"] = int(m)
    if args.tv_normalize:
        tv = compute_total_variation(acts)
        header.append("margin_tv")
        rows = [row + ((row[1] / tv) if row[1] is not None else None,)
                for row in rows]
        summary["total_variation"] = float(tv)

    _write_csv(args.out, header, rows)
    if args.boundary_out:
        width = acts.shape[1]
        bheader = (["sample_index"]
                   + [f"orig_{j}" for j in range(width)]
                   + [f"bound_{j}" for j in range(width)])
        _write_csv(args.boundary_out, bheader, boundary_rows)
    _print_json(summary)


# ---------------------------------------------------------------------------
# pca


def _cmd_pca(args) -> None:
    ds = load_dataset(args.data)
    model = fit_pca(ds.features, n_components=args.components)
    save_pca(model, args.out)
    info = {"components": int(model.components.shape[0]),
            "features": int(model.components.shape[1]),
            "explained_ratio_sum": float(model.explained_ratio.sum()),
            "path": str(args.out)}
    if args.knee:
        choice = select_components_kneedle(model)
        info["knee_m"] = int(choice.m)
        info["knee_fallback"] = bool(choice.fallback_used)
    _print_json(info)


# ---------------------------------------------------------------------------
# evaluate


_ENTRY_REQUIRED = {"hyperparams", "train_acc", "test_acc", "measures"}
_ENTRY_ALLOWED = _ENTRY_REQUIRED | {"model_path"}


def _load_models_file(path, measure_col: str) -> list[dict]:
    data = _load_json(path)
    if not isinstance(data, list) or not data:
        raise ConfigError(f"{path}: expected a non-empty JSON list of models")
    for k, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise ConfigError(f"{path}: entry {k} is not an object")
        unknown = sorted(set(entry) - _ENTRY_ALLOWED)
        if unknown:
            raise ConfigError(f"{path}: entry {k} has unknown keys {unknown}")
        missing = sorted(_ENTRY_REQUIRED - set(entry))
        if missing:
            raise ConfigError(f"{path}: entry {k} is missing keys {missing}")
        if measure_col not in entry["measures"]:
            raise ConfigError(f"{path}: entry {k} has no measure "
                              f"{measure_col!r}")
    return data


def _evaluated_models(entries, measure_col, negate=False):
    models = []
    for e in entries:
        value = float(e["measures"][measure_col])
        models.append(EvaluatedModel(
            config=HyperparamConfig(e["hyperparams"]),
            complexity=-value if negate else value,
            gen_gap=float(e["train_acc"]) - float(e["test_acc"]),
            test_accuracy=float(e["test_acc"])))
    return models


def _cmd_evaluate(args) -> None:
    entries = _load_models_file(args.models, args.measure_col)
    values = [float(e["measures"][args.measure_col]) for e in entries]
    accs = [float(e["test_acc"]) for e in entries]
    gaps = [float(e["train_acc"]) - float(e["test_acc"]) for e in entries]

    csv_header: list[str] = []
    csv_rows: list[tuple] = []
    if args.metric == "kendall":
        tau = kendall_tau(list(zip(values, accs)))
        result = {"measure": args.measure_col, "metric": "kendall",
                  "models": len(entries), "target": "test_accuracy",
                  "tau": float(tau)}
        csv_header = ["metric", "measure", "value"]
        csv_rows = [("kendall", args.measure_col, float(tau))]
    elif args.metric == "granulated":
        models = _evaluated_models(entries, args.measure_col)
        axes = sorted(models[0].config.values)
        per_axis = {}
        psis = []
        csv_header = ["axis", "psi", "included_groups", "skipped_groups"]
        for axis in axes:
            try:
                res = granulated_kendall(models, axis,
                                         target="test_accuracy")
            except UndefinedMetricError:
                per_axis[axis] = {"psi": None, "undefined": True}
                csv_rows.append((axis, None, None, None))
                continue
            per_axis[axis] = {"psi": float(res.psi),
                              "included_groups": res.included_groups,
                              "skipped_groups": res.skipped_groups}
            psis.append(res.psi)
            csv_rows.append((axis, float(res.psi), res.included_groups,
                             res.skipped_groups))
        mu = mean_granulated(psis)  # DomainError when no axis is defined
        result = {"mean_psi": float(mu), "measure": args.measure_col,
                  "metric": "granulated", "per_axis": per_axis,
                  "target": "test_accuracy"}
        csv_rows.append(("mean", float(mu), None, None))
    elif args.metric == "cmi":
        models = _evaluated_models(entries, args.measure_col, negate=True)
        score = cmi_score(models)
        per_pair = {f"{a}|{b}": float(v)
                    for (a, b), v in sorted(score.per_pair.items())}
        result = {"final": float(score.final), "measure": args.measure_col,
                  "metric": "cmi", "per_pair": per_pair,
                  "sign": "negated-measure", "target": "gen_gap"}
        csv_header = ["pair", "normalized_cmi"]
        csv_rows = [(name, value) for name, value in per_pair.items()]
        csv_rows.append(("final", float(score.final)))
    elif args.metric == "r2":
        r2 = r_squared(np.array(gaps), np.array(values))
        result = {"measure": args.measure_col, "metric": "r2",
                  "r2": float(r2), "target": "gen_gap"}
        csv_header = ["metric", "measure", "value"]
        csv_rows = [("r2", args.measure_col, float(r2))]
    else:
        raise ConfigError(f"unknown metric {args.metric!r}")

    if args.out:
        _write_csv(args.out, csv_header, csv_rows)
    _print_json(result)


# ---------------------------------------------------------------------------
# advdir


def _read_boundary_csv(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ConfigError(f"{path} is empty")
    header = lines[0].split(",")
    orig_cols = [k for k, name in enumerate(header) if name.startswith("orig_")]
    bound_cols = [k for k, name in enumerate(header)
                  if name.startswith("bound_")]
    if not orig_cols or len(orig_cols) != len(bound_cols):
        raise ConfigError(f"{path} must pair orig_* and bound_* columns")
    X, Xhat = [], []
    for line in lines[1:]:
        cells = line.split(",")
        X.append([float(cells[k]) for k in orig_cols])
        Xhat.append([float(cells[k]) for k in bound_cols])
    if not X:
        raise ConfigError(f"{path} holds no samples")
    return np.array(X), np.array(Xhat)


def _cmd_advdir(args) -> None:
    pca = load_pca(args.pca)
    X, Xhat = _read_boundary_csv(args.boundary_csv)
    share = adv_directions(pca, X, Xhat)
    cum = cumulative_share(share.p_share, pca.explained_ratio)
    rows = [(j + 1, float(pca.explained_ratio[j]), float(share.p_share[j]),
             float(cum.cumulative[j]))
            for j in range(share.p_share.size)]
    _write_csv(args.out, ["component_index", "explained_ratio", "p_share",
                          "cumulative"], rows)
    _print_json({"components": int(share.p_share.size),
                 "dropped_rows": int(share.dropped_rows),
                 "marker_70": int(cum.marker_70),
                 "marker_99": int(cum.marker_99),
                 "path": str(args.out),
                 "samples": int(share.b_adv.shape[0])})


# ---------------------------------------------------------------------------
# sweep


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated description of one capacity-sweep run."""

    blob: BlobConfig | None
    dataset_path: str | None
    test_path: str | None
    corruptions: tuple[tuple[str, float], ...]
    widths: tuple[int, ...]
    seeds: tuple[int, ...]
    epochs: int
    batch_size: int
    learning_rate: float
    momentum: float
    estimator: str
    search: SearchConfig
    normalize: str
    output_dir: str
    seed: int


_TOP_KEYS = {"dataset", "corruptions", "widths", "seeds", "train",
             "estimator", "normalize", "output_dir", "seed"}
_BLOB_KEYS = {"classes", "samples_per_class", "dim", "spread"}
_TRAIN_KEYS = {"epochs", "batch_size", "learning_rate", "momentum"}
_EST_KEYS = {"name", "learning_rate", "stop_tolerance", "max_iters",
             "equality_threshold"}


def _check_keys(obj: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def _load_sweep_config(args) -> ExperimentConfig:
    raw = _load_json(args.config)
    if not isinstance(raw, dict):
        raise ConfigError(f"{args.config}: expected a JSON object")
    _check_keys(raw, _TOP_KEYS, str(args.config))
    for key in ("dataset", "widths", "output_dir"):
        if key not in raw:
            raise ConfigError(f"{args.config}: missing required key {key!r}")

    dataset = raw["dataset"]
    if not isinstance(dataset, dict):
        raise ConfigError("dataset: expected an object")
    blob = None
    dataset_path = None
    test_path = None
    if "path" in dataset:
        _check_keys(dataset, {"path", "test_path"}, "dataset")
        dataset_path = str(dataset["path"])
        if "test_path" not in dataset:
            raise ConfigError("dataset: path mode needs test_path for the "
                              "held-out accuracy")
        test_path = str(dataset["test_path"])
    else:
        _check_keys(dataset, _BLOB_KEYS, "dataset")
        missing = sorted(_BLOB_KEYS - set(dataset))
        if missing:
            raise ConfigError(f"dataset: missing keys {missing}")
        blob = BlobConfig(classes=int(dataset["classes"]),
                          samples_per_class=int(dataset["samples_per_class"]),
                          dim=int(dataset["dim"]),
                          spread=float(dataset["spread"]), seed=0)

    corruptions = []
    for k, entry in enumerate(raw.get("corruptions",
                                      [{"mode": "label", "fraction": 0.2}])):
        if not isinstance(entry, dict):
            raise ConfigError(f"corruptions[{k}]: expected an object")
        _check_keys(entry, {"mode", "fraction"}, f"corruptions[{k}]")
        mode = entry.get("mode")
        if mode not in ("label", "input"):
            raise ConfigError(f"corruptions[{k}]: mode must be 'label' or "
                              f"'input'")
        fraction = float(entry.get("fraction", 0.2))
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(f"corruptions[{k}]: fraction must lie in "
                              f"(0, 1]")
        corruptions.append((mode, fraction))

    widths = raw["widths"]
    if (not isinstance(widths, list) or not widths
            or any(not isinstance(w, int) or w < 1 for w in widths)):
        raise ConfigError("widths: expected a non-empty list of positive "
                          "integers")
    seeds = raw.get("seeds", [0])
    if (not isinstance(seeds, list) or not seeds
            or any(not isinstance(s, int) for s in seeds)):
        raise ConfigError("seeds: expected a non-empty list of integers")

    train = raw.get("train", {})
    _check_keys(train, _TRAIN_KEYS, "train")
    est = raw.get("estimator", {})
    _check_keys(est, _EST_KEYS, "estimator")
    estimator = est.get("name", "deepfool")
    if estimator not in ("deepfool", "taylor"):
        raise ConfigError("estimator: name must be 'deepfool' or 'taylor'")
    search = SearchConfig(
        learning_rate=float(est.get("learning_rate", 0.25)),
        stop_tolerance=float(est.get("stop_tolerance", 0.001)),
        max_iters=int(est.get("max_iters", 100)),
        equality_threshold=float(est.get("equality_threshold", 1e-3)),
        batch_mode=True)

    normalize_scheme = raw.get("normalize", "znorm")
    if normalize_scheme not in ("znorm", "minmax", "none"):
        raise ConfigError("normalize: expected znorm, minmax, or none")

    output_dir = args.output_dir if args.output_dir else raw["output_dir"]
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    return ExperimentConfig(
        blob=blob, dataset_path=dataset_path, test_path=test_path,
        corruptions=tuple(corruptions), widths=tuple(widths),
        seeds=tuple(seeds), epochs=int(train.get("epochs", 40)),
        batch_size=int(train.get("batch_size", 32)),
        learning_rate=float(train.get("learning_rate", 0.05)),
        momentum=float(train.get("momentum", 0.9)), estimator=estimator,
        search=search, normalize=normalize_scheme,
        output_dir=str(output_dir), seed=seed)


def _sweep_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset_path is not None:
        return load_dataset(cfg.dataset_path), load_dataset(cfg.test_path)
    blob = cfg.blob
    rng = np.random.default_rng(derive_seed(cfg.seed, "centers"))
    centers = rng.uniform(-10.0, 10.0, size=(blob.classes, blob.dim))
    train_ds = gen_blobs(BlobConfig(classes=blob.classes,
                                    samples_per_class=blob.samples_per_class,
                                    dim=blob.dim, spread=blob.spread,
                                    seed=derive_seed(cfg.seed, "data"),
                                    centers=centers))
    test_ds = gen_blobs(BlobConfig(classes=blob.classes,
                                   samples_per_class=blob.samples_per_class,
                                   dim=blob.dim, spread=blob.spread,
                                   seed=derive_seed(cfg.seed, "test"),
                                   centers=centers))
    return train_ds, test_ds


def _entry_margins(cfg: ExperimentConfig, net, ds: Dataset) -> np.ndarray:
    """Margins for the correctly classified training samples, NaN elsewhere."""
    values = np.full(ds.sample_count, np.nan)
    kept = np.flatnonzero(predict_batch(net, ds.features) == ds.labels)
    if kept.size == 0:
        return values
    if cfg.estimator == "deepfool":
        results = deepfool_margin_batch(net, 0, ds.features[kept], cfg.search)
        values[kept] = [r.d_best for r in results]
        return values
    for idx in kept:
        try:
            values[idx] = taylor_margin(net, 0, ds.features[idx]).d_best
        except DegenerateGradientError:
            pass
    return values


def _run_sweep_entry(cfg: ExperimentConfig, variant: str, ds: Dataset,
                     meta, test_raw: Dataset, width: int, seed: int) -> dict:
    net = init_network(ds.feature_count, [width], ds.class_count,
                       seed=derive_seed(cfg.seed, "init", variant, width,
                                        seed),
                       norm_meta=meta)
    net = train_sgd(net, ds, TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, momentum=cfg.momentum,
        seed=derive_seed(cfg.seed, "train", variant, width, seed)))
    train_acc = float(accuracy(net, ds))
    X_test = (apply_normalization(test_raw.features, meta)
              if meta is not None else test_raw.features)
    test_acc = float(np.mean(predict_batch(net, X_test) == test_raw.labels))

    values = _entry_margins(cfg, net, ds)
    finite = np.isfinite(values)
    clean_mask = (ds.corrupt_flags == 0) & finite
    corrupt_mask = (ds.corrupt_flags != 0) & finite
    per_sample = [(int(i), int(ds.corrupt_flags[i]),
                   float(values[i]) if finite[i] else None)
                  for i in range(ds.sample_count)]
    return {
        "width": width, "seed": seed, "variant": variant,
        "train_accuracy": train_acc, "test_accuracy": test_acc,
        "margin_clean": _mean(values[clean_mask].tolist()),
        "margin_corrupt": _mean(values[corrupt_mask].tolist()),
        "margin_overall": _mean(values[finite].tolist()),
        "per_sample": per_sample,
    }


def _thread_count() -> int:
    raw = os.environ.get("MW_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"MW_THREADS must be an integer, got {raw!r}") \
            from exc


def run_capacity_sweep(cfg: ExperimentConfig) -> dict:
    """Train the width x seed x variant grid and write the report files.

    Any stage failure removes files already written for this run and
    re-raises with a stage tag, so a partial output directory never looks
    like a finished one.
    """
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    stage = "generate"
    try:
        train_raw, test_raw = _sweep_datasets(cfg)

        stage = "corrupt"
        variants: list[tuple[str, Dataset]] = [("clean", train_raw)]
        for mode, fraction in cfg.corruptions:
            corrupt_seed = derive_seed(cfg.seed, "corrupt", mode, fraction)
            if mode == "label":
                ds, _ = corrupt_labels(train_raw, fraction, corrupt_seed)
            else:
                ds, _ = corrupt_inputs_gaussian(train_raw, fraction,
                                                corrupt_seed)
            variants.append((f"{mode}-corrupted", ds))

        stage = "normalize"
        prepared = []
        for name, ds in variants:
            if cfg.normalize == "none":
                prepared.append((name, ds, None))
            else:
                norm_ds, meta = normalize(ds, cfg.normalize)
                prepared.append((name, norm_ds, meta))

        stage = "train"
        entries = [(width, seed, k)
                   for width in cfg.widths
                   for seed in cfg.seeds
                   for k in range(len(prepared))]

        def run_one(entry):
            width, seed, k = entry
            name, ds, meta = prepared[k]
            return _run_sweep_entry(cfg, name, ds, meta, test_raw, width,
                                    seed)

        threads = _thread_count()
        if threads > 1:
            with ThreadPool(min(threads, len(entries))) as pool:
                rows = pool.map(run_one, entries)
        else:
            rows = [run_one(e) for e in entries]

        stage = "report"
        margin_rows = [(r["width"], r["seed"], r["variant"],
                        r["train_accuracy"], r["test_accuracy"],
                        r["margin_clean"], r["margin_corrupt"],
                        r["margin_overall"]) for r in rows]
        margins_path = out_dir / "margins.csv"
        _write_csv(margins_path,
                   ["width", "seed", "variant", "train_accuracy",
                    "test_accuracy", "margin_clean", "margin_corrupt",
                    "margin_overall"], margin_rows)
        written.append(margins_path)

        sample_rows = [(r["width"], r["seed"], r["variant"], idx, flag, value)
                       for r in rows
                       for idx, flag, value in r["per_sample"]]
        per_sample_path = out_dir / "per_sample_margins.csv"
        _write_csv(per_sample_path,
                   ["width", "seed", "variant", "sample_index", "flag",
                    "margin"], sample_rows)
        written.append(per_sample_path)

        # data-level nearest-other-label distances, one column per variant
        variant_names = [name for name, _, _ in prepared]
        mm_columns = {name: max_margin(ds) for name, ds, _ in prepared}
        mm_rows = [(idx, *(float(mm_columns[name][idx])
                           for name in variant_names))
                   for idx in range(train_raw.sample_count)]
        mm_path = out_dir / "max_margins.csv"
        _write_csv(mm_path,
                   ["sample_index"] + [f"max_margin_{n}"
                                       for n in variant_names], mm_rows)
        written.append(mm_path)

        per_width = {}
        for width in cfg.widths:
            cell = {}
            for name in variant_names:
                sub = [r for r in rows
                       if r["width"] == width and r["variant"] == name]
                for kind, field in (("clean", "margin_clean"),
                                    ("corrupt", "margin_corrupt"),
                                    ("overall", "margin_overall")):
                    value = _mean([r[field] for r in sub])
                    if value is not None:
                        cell[f"{kind}:{name}"] = value
                cell[f"test_accuracy:{name}"] = _mean(
                    [r["test_accuracy"] for r in sub])
            per_width[str(width)] = cell
        summary = {
            "estimator": cfg.estimator,
            "max_margin": {name: float(np.mean(mm_columns[name]))
                           for name in variant_names},
            "per_width": per_width,
            "seed": cfg.seed,
            "seeds": list(cfg.seeds),
            "variants": variant_names,
            "widths": list(cfg.widths),
        }
        summary_path = out_dir / "summary.json"
        _atomic_write(summary_path,
                      json.dumps(summary, sort_keys=True, indent=2) + "\n")
        written.append(summary_path)
    except WorkbenchError as exc:
        for path in written:
            path.unlink(missing_ok=True)
        raise type(exc)(f"stage {stage}: {exc}") from exc

    return {"files": [p.name for p in written],
            "output_dir": str(out_dir)}


def _cmd_sweep(args) -> None:
    cfg = _load_sweep_config(args)
    _print_json(run_capacity_sweep(cfg))


# ---------------------------------------------------------------------------
# parser and entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mw", description="margin measurement workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a Gaussian-blob dataset")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--samples-per-class", type=int, default=100)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("corrupt", help="corrupt labels or inputs")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("label", "input"), required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None,
                   help="optional JSON sidecar with corrupted indices")
    p.set_defaults(func=_cmd_corrupt)

    p = sub.add_parser("train", help="train an MLP classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--hidden", required=True,
                   help="comma-separated hidden widths, e.g. 32,16")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--normalize", choices=("znorm", "minmax", "none"),
                   default="znorm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("measure", help="measure classification margins")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--estimator", choices=_ESTIMATORS, default="deepfool")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--gamma", type=float, default=0.25,
                   help="search learning rate in (0, 1]")
    p.add_argument("--tol", type=float, default=0.01,
                   help="distance-stabilization stopping tolerance")
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--epsilon", type=float, default=1e-3,
                   help="boundary equality threshold for reporting")
    p.add_argument("--batch", action="store_true",
                   help="batched search with mean-distance stopping")
    p.add_argument("--pca", default=None,
                   help="fitted projection file for constrained estimators")
    p.add_argument("--m", default="auto",
                   help="subspace dimension or 'auto' for knee selection")
    p.add_argument("--include-misclassified", action="store_true")
    p.add_argument("--tv-normalize", action="store_true",
                   help="append a margin_tv column scaled by the layer's "
                        "total variation")
    p.add_argument("--out", required=True)
    p.add_argument("--boundary-out", default=None,
                   help="CSV of original and boundary points, for advdir")
    p.set_defaults(func=_cmd_measure)

    p = sub.add_parser("pca", help="fit principal components to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--components", type=int, default=None)
    p.add_argument("--knee", action="store_true",
                   help="also report the knee-selected component count")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pca)

    p = sub.add_parser("evaluate", help="score complexity measures against "
                                        "generalization outcomes")
    p.add_argument("--models", required=True,
                   help="JSON list of evaluated models")
    p.add_argument("--metric", choices=("kendall", "granulated", "cmi", "r2"),
                   required=True)
    p.add_argument("--measure-col", required=True)
    p.add_argument("--out", default=None, help="optional CSV score table")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("advdir", help="decompose boundary perturbations "
                                      "along principal components")
    p.add_argument("--pca", required=True)
    p.add_argument("--boundary-csv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_advdir)

    p = sub.add_parser("sweep", help="train a capacity sweep and report "
                                     "margin statistics")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", default=None,
                   help="override the config's output_dir")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config's seed")
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
