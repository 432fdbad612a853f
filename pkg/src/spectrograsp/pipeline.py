"""End-to-end workflows behind the command-line subcommands.

Each ``run_*`` function takes a plain settings dict (already merged from
defaults, a config file and flags), writes its outputs plus the resolved
settings as ``config.json`` into a directory, and returns a summary dict.

Primary outputs are deterministic functions of the settings. Wall-clock
measurements go to separate ``timing*.json`` files so that reruns can be
compared byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from pathlib import Path

import numpy as np

from . import nmf as nmf_mod
from .belief import DEFAULT_KAPPA, DEFAULT_N_MAX, DecisionPolicy, run_episode
from .classify import (
    LabeledVectors,
    evaluate,
    grid_search_cv,
    model_from_dict,
    model_to_dict,
    split_train_test,
    train,
    within_pair_accuracy,
    write_confusion_csv,
)
from .classify.model import FAMILIES
from .dataset import fmt, grid_hash, read_calibration, read_dataset, read_grid, read_json, write_json
from .errors import ConfigError, DataFormatError
from .inference import FramePipeline
from .parallel import pmap
from .simgrasp import (
    CLASS_BY_NAME,
    MATERIAL_CLASSES,
    GenConfig,
    Renderer,
    generate_dataset,
    generate_episode,
    load_gen_config,
    pair_partner,
)
from .spectra import PreprocessConfig, preprocess_batch, trailing_average

SCHEMA_VERSION = 1

DEFAULT_GRIDS = {
    "rbf-svm": {"C": [1.0, 10.0, 100.0, 1000.0], "gamma": [0.1, 0.3, 1.0, 3.0]},
    "linear-svm": {"C": [0.01, 0.1, 1.0, 10.0]},
    "logistic": {"C": [1.0, 10.0, 100.0, 1000.0]},
    "mlp": {"hidden": [[32], [64], [128], [32, 32], [64, 64], [128, 128]]},
}

GEN_DEFAULTS = {"episodes_per_class": 5, "seed": 42}
TRAIN_DEFAULTS = {
    "families": ["rbf-svm"],
    "k": 10,
    "k_sweep": None,
    "folds": 5,
    "split": 0.8,
    "seed": 42,
    "nmf_max_iter": 500,
    "nmf_tol": 1e-5,
    "grids": None,
    "feature_map": "shape-scale",
    "preprocess": PreprocessConfig().to_dict(),
}
EVAL_DEFAULTS = {"families": None, "timing_calls": 10000}
STREAM_DEFAULTS = {"family": "rbf-svm", "episodes": 500, "kappa": DEFAULT_KAPPA, "n_max": DEFAULT_N_MAX,
                   "seed": None}


def parse_k_sweep(text) -> list:
    """``"5..25"`` -> ``[5, 6, ..., 25]``."""
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [int(k) for k in text]
    try:
        lo, hi = (int(p) for p in str(text).split(".."))
    except ValueError as exc:
        raise ConfigError(f"k sweep must look like LO..HI, got {text!r}") from exc
    if lo < 1 or hi < lo:
        raise ConfigError(f"invalid k sweep range {text!r}")
    return list(range(lo, hi + 1))


def _families(value) -> list:
    if value is None:
        return None
    if isinstance(value, str):
        value = ["all"] if value == "all" else [v.strip() for v in value.split(",") if v.strip()]
    if value == ["all"]:
        return list(FAMILIES)
    for f in value:
        if f not in FAMILIES:
            raise ConfigError(f"unknown model family {f!r}; choose from {', '.join(FAMILIES)}")
    return list(value)


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_resolved(out: Path, command: str, settings: dict):
    write_json(out / "config.json", {"schema_version": SCHEMA_VERSION, "command": command, **settings})


# ---------------------------------------------------------------- gen

def run_gen(settings: dict) -> dict:
    s = {**GEN_DEFAULTS, **settings}
    out = _out_dir(s["out"])
    if s.get("gen_config"):
        cfg = GenConfig.from_dict({**s["gen_config"], "seed": s["seed"],
                                   "episodes_per_class": s["episodes_per_class"]})
    else:
        cfg = GenConfig(episodes_per_class=int(s["episodes_per_class"]), seed=int(s["seed"]))
    if cfg.episodes_per_class < 1:
        raise ConfigError("episodes_per_class must be >= 1")
    ds = generate_dataset(config=cfg, out_dir=out)
    summary = {"classes": len(ds.classes), "episodes": len(np.unique(ds.episode_ids)), "frames": len(ds)}
    _write_resolved(out, "gen", {"out": str(out), "gen_config": cfg.to_dict()})
    return summary


# ---------------------------------------------------------------- shared data prep

def _load_features(data_dir, preprocess: PreprocessConfig):
    ds = read_dataset(Path(data_dir))
    counts = ds.counts
    if preprocess.scan_average > 1:
        order = np.lexsort((ds.frame_index, ds.episode_ids))
        if np.any(order != np.arange(len(order))):
            raise DataFormatError("frames must be stored in episode/frame order for scan averaging",
                                  path=Path(data_dir) / "frames.csv")
        counts = trailing_average(counts, ds.episode_ids, preprocess.scan_average)
    refl = preprocess_batch(counts, ds.calibration, ds.grid, preprocess)
    return ds, refl


def _split_mask(ds, split_info: dict) -> np.ndarray:
    return np.isin(ds.episode_ids, split_info["train_episodes"])


def _cv_rows(family, k, table):
    rows = []
    for r in table:
        rows.append({"family": family, "k": k, "point": r["point"], "mean_accuracy": r["mean_accuracy"],
                     "fold_accuracy": r["fold_accuracy"]})
    return rows


def _write_cv_csv(path, rows):
    lines = ["family,k,hyperparams,mean_accuracy,fold_accuracies"]
    for r in rows:
        hp = ";".join(f"{k}={_fmt_hp(v)}" for k, v in sorted(r["point"].items()))
        folds = ";".join(fmt(a) for a in r["fold_accuracy"])
        lines.append(f"{r['family']},{r['k']},{hp},{fmt(r['mean_accuracy'])},{folds}")
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt_hp(v):
    if isinstance(v, (list, tuple)):
        return "x".join(str(int(x)) for x in v)
    if isinstance(v, float):
        return fmt(v)
    return str(v)


# ---------------------------------------------------------------- train

def run_train(settings: dict) -> dict:
    s = {**TRAIN_DEFAULTS, **{k: v for k, v in settings.items() if v is not None}}
    s["families"] = _families(s["families"])
    s["k_sweep"] = parse_k_sweep(s.get("k_sweep"))
    if not 0 < float(s["split"]) < 1:
        raise ConfigError("split must be a fraction in (0, 1)")
    if int(s["folds"]) < 2:
        raise ConfigError("folds must be >= 2")
    grids = {f: (s["grids"] or {}).get(f, DEFAULT_GRIDS[f]) for f in s["families"]}
    s["grids"] = grids
    pre = PreprocessConfig.from_dict(s["preprocess"])
    s["preprocess"] = pre.to_dict()
    seed = int(s["seed"])
    out = _out_dir(s["out"])

    ds, refl = _load_features(s["data"], pre)
    train_mask = split_train_test(ds.episode_ids, ds.labels, float(s["split"]), seed)
    split_info = {
        "train_episodes": sorted(int(e) for e in np.unique(ds.episode_ids[train_mask])),
        "test_episodes": sorted(int(e) for e in np.unique(ds.episode_ids[~train_mask])),
    }
    ghash = grid_hash(ds.grid)
    Vtr = refl[train_mask]
    y_tr = ds.labels[train_mask]
    ep_tr = ds.episode_ids[train_mask]

    def fit_nmf(k):
        return nmf_mod.nmf_fit(Vtr, int(k), max_iter=int(s["nmf_max_iter"]), tol=float(s["nmf_tol"]), seed=seed)

    sweep_rows = []
    cv_rows = []
    chosen_k = int(s["k"])
    if s["k_sweep"]:
        best = None
        for k in s["k_sweep"]:
            W, _ = fit_nmf(k)
            data = LabeledVectors(W, y_tr, ep_tr)
            row = {"k": k}
            for fam in s["families"]:
                point, table = grid_search_cv(fam, data, grids[fam], int(s["folds"]), seed,
                                              feature_map=s["feature_map"])
                acc = max(r["mean_accuracy"] for r in table)
                row[fam] = acc
                cv_rows.extend(_cv_rows(fam, k, table))
            row["mean"] = float(np.mean([row[f] for f in s["families"]]))
            sweep_rows.append(row)
            if best is None or row["mean"] > best[0]:
                best = (row["mean"], k)
        chosen_k = best[1]
        lines = ["k,compression_ratio," + ",".join(f"cv_accuracy_{f}" for f in s["families"]) + ",mean_cv_accuracy"]
        for r in sweep_rows:
            cr = nmf_mod.compression_ratio(r["k"], Vtr.shape[1])
            lines.append(",".join([str(r["k"]), fmt(cr)] + [fmt(r[f]) for f in s["families"]] + [fmt(r["mean"])]))
        (out / "accuracy_vs_k.csv").write_text("\n".join(lines) + "\n")

    W, nmf_model = fit_nmf(chosen_k)
    nmf_mod.save_model(out / "nmf.json", nmf_model, ghash, {"preprocess": pre.to_dict()})
    data = LabeledVectors(W, y_tr, ep_tr)
    summary = {"k": chosen_k, "nmf_fit_error": nmf_model.fit_error, "families": {}}
    final_cv_rows = []
    for fam in s["families"]:
        point, table = grid_search_cv(fam, data, grids[fam], int(s["folds"]), seed,
                                              feature_map=s["feature_map"])
        final_cv_rows.extend(_cv_rows(fam, chosen_k, table))
        cv_acc = max(r["mean_accuracy"] for r in table)
        model = train(fam, data, point, seed=seed, calibrate=True, feature_map=s["feature_map"])
        model.train_meta["cv_accuracy"] = cv_acc
        model.train_meta["k"] = chosen_k
        write_json(out / f"model-{fam}.json", model_to_dict(model))
        summary["families"][fam] = {"hyperparams": point, "cv_accuracy": cv_acc, "tau": model.tau}
    _write_cv_csv(out / "cv_table.csv", final_cv_rows if not s["k_sweep"] else cv_rows)
    write_json(out / "split.json", split_info)
    s["data"] = str(Path(s["data"]).resolve())
    s["out"] = str(out)
    s["k"] = chosen_k
    _write_resolved(out, "train", s)
    write_json(out / "train_summary.json", summary)
    return summary


# ---------------------------------------------------------------- loading a trained run

def load_run(run_dir, family: str, data_dir=None):
    """Return ``(settings, nmf_model, classifier, preprocess, split)`` for a train run."""
    run = Path(run_dir)
    missing = [p.name for p in (run / "config.json", run / "nmf.json", run / f"model-{family}.json",
                                run / "split.json") if not p.is_file()]
    if missing:
        raise DataFormatError(f"run directory {run} lacks: {', '.join(missing)}", path=run)
    settings = read_json(run / "config.json")
    data_dir = Path(data_dir or settings["data"])
    ghash = grid_hash(read_grid(data_dir / "grid.csv"))
    nmf_model = nmf_mod.load_model(run / "nmf.json", expected_grid_hash=ghash)
    clf = model_from_dict(read_json(run / f"model-{family}.json"))
    pre = PreprocessConfig.from_dict(settings["preprocess"])
    return settings, nmf_model, clf, pre, read_json(run / "split.json"), data_dir


def _trained_families(run_dir) -> list:
    return [f for f in FAMILIES if (Path(run_dir) / f"model-{f}.json").is_file()]


# ---------------------------------------------------------------- eval

def time_frame_pipeline(pipe: FramePipeline, counts: np.ndarray, calls: int) -> np.ndarray:
    """Seconds per single-frame ``predict`` (calibrate, smooth, transform, classify)."""
    times = np.empty(calls)
    n = counts.shape[0]
    for i in range(calls):
        row = counts[i % n]
        t0 = time.perf_counter()
        pipe.predict(row)
        times[i] = time.perf_counter() - t0
    return times


def run_eval(settings: dict) -> dict:
    s = {**EVAL_DEFAULTS, **{k: v for k, v in settings.items() if v is not None}}
    families = _families(s["families"]) or _trained_families(s["run"])
    if not families:
        raise DataFormatError(f"no trained models found in {s['run']}", path=s["run"])
    out = _out_dir(s["out"])
    summary = {}
    cache = {}
    timing = {}
    for fam in families:
        settings_run, nmf_model, clf, pre, split, data_dir = load_run(s["run"], fam, s.get("data"))
        key = str(data_dir)
        if key not in cache:
            ds, refl = _load_features(data_dir, pre)
            tr = _split_mask(ds, split)
            if not np.any(~tr):
                raise DataFormatError("held-out split is empty for this dataset", path=data_dir)
            cache[key] = (ds, tr, nmf_mod.nmf_transform_batch(refl, nmf_model))
        ds, tr, W = cache[key]
        test = LabeledVectors(W[~tr], ds.labels[~tr], ds.episode_ids[~tr])
        train_set = LabeledVectors(W[tr], ds.labels[tr], ds.episode_ids[tr])
        rep = evaluate(clf, test, timing_samples=0)
        rep_train = evaluate(clf, train_set, timing_samples=0)
        extra = {}
        if all(c in CLASS_BY_NAME for c in clf.classes):
            partner = {c: pair_partner(c) for c in clf.classes}
            extra["within_pair_accuracy"] = within_pair_accuracy(clf, test, partner)
        write_json(out / f"eval-{fam}.json", {"split": "test", **rep.to_dict(), **extra})
        write_json(out / f"eval-train-{fam}.json", {"split": "train", **rep_train.to_dict()})
        write_confusion_csv(out / f"confusion-{fam}.csv", rep)
        pipe = FramePipeline(ds.calibration, nmf_model, clf, pre, ds.grid)
        t = time_frame_pipeline(pipe, ds.counts[~tr], int(s["timing_calls"])) if s["timing_calls"] else np.zeros(1)
        timing[fam] = {"calls": int(s["timing_calls"]), "mean_inference_s": float(t.mean()),
                       "std_inference_s": float(t.std())}
        summary[fam] = {"test_accuracy": rep.accuracy, "test_macro_f1": rep.macro_f1,
                        "train_accuracy": rep_train.accuracy, **extra, **timing[fam]}
    write_json(out / "timing.json", timing)
    s["families"] = families
    s["out"] = str(out)
    s["run"] = str(s["run"])
    if s.get("data") is not None:
        s["data"] = str(s["data"])
    _write_resolved(out, "eval", s)
    return summary


# ---------------------------------------------------------------- stream

def heldout_episodes(gen_cfg: GenConfig, n: int, seed=None):
    """``n`` fresh episodes, never part of the generated dataset.

    Episode indices start after the dataset's ``episodes_per_class`` and
    cycle through the classes, so the classes stay balanced within one.
    """
    seed = gen_cfg.seed if seed is None else int(seed)
    params = dataclasses.replace(gen_cfg.params, seed=seed)
    specs = []
    for i in range(n):
        material = MATERIAL_CLASSES[i % len(MATERIAL_CLASSES)]
        ep_index = gen_cfg.episodes_per_class + i // len(MATERIAL_CLASSES)
        specs.append((material, ep_index))
    return params, specs


def frames_from_grasp_entry(decision_index, grasp_index) -> int:
    """Frames consumed from the first frame at grasp distance onwards (0 if decided earlier)."""
    return max(0, int(decision_index) - int(grasp_index) + 1)


def run_stream(settings: dict) -> dict:
    s = {**STREAM_DEFAULTS, **{k: v for k, v in settings.items() if v is not None}}
    fam = s["family"]
    _families([fam])
    settings_run, nmf_model, clf, pre, split, data_dir = load_run(s["run"], fam, s.get("data"))
    gen_path = Path(data_dir) / "gen_config.json"
    if not gen_path.is_file():
        raise DataFormatError("dataset has no gen_config.json; cannot synthesise held-out episodes",
                              path=gen_path)
    gen_cfg = load_gen_config(gen_path)
    policy = DecisionPolicy(float(s["kappa"]), int(s["n_max"]))
    n = int(s["episodes"])
    if n < 1:
        raise ConfigError("episodes must be >= 1")
    out = _out_dir(s["out"])
    profiles = gen_cfg.profiles()
    grid = read_grid(Path(data_dir) / "grid.csv")
    renderer = Renderer(grid)
    calibration = read_calibration(Path(data_dir) / "calibration.csv", grid)
    pipe = FramePipeline(calibration, nmf_model, clf, pre, grid)
    params, specs = heldout_episodes(gen_cfg, n, s["seed"])

    def one(i):
        material, ep_index = specs[i]
        ep = generate_episode(material, profiles, params, ep_index, renderer)
        trace = run_episode(ep.frames, pipe, policy, episode_id=i, true_label=material.name)
        return trace, ep.grasp_index

    results = pmap(one, range(n))
    lines = []
    rows = ["episode,true_label,label,correct,decision_index,frames_used,frames_from_grasp_entry,"
            "forced,low_confidence,top_prob"]
    correct = []
    used = []
    from_grasp = []
    forced = 0
    low = 0
    undecided = 0
    for trace, g in results:
        for r in trace.records:
            lines.append({"episode": trace.episode_id, "true_label": trace.true_label, **r})
        ok = trace.label == trace.true_label
        correct.append(ok)
        if trace.decided:
            fg = frames_from_grasp_entry(trace.decision_index, g)
            used.append(trace.decision_index + 1)
            from_grasp.append(fg)
        else:
            undecided += 1
            fg = None
        forced += trace.forced
        low += trace.low_confidence
        rows.append(",".join([str(trace.episode_id), trace.true_label, trace.label, str(int(ok)),
                              "" if not trace.decided else str(trace.decision_index),
                              str(trace.frames_used), "" if fg is None else str(fg),
                              str(int(trace.forced)), str(int(trace.low_confidence)),
                              fmt(trace.records[-1]["top_prob"])]))
    with open(out / "traces.jsonl", "w") as fh:
        for rec in lines:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out / "episodes.csv").write_text("\n".join(rows) + "\n")
    summary = {
        "family": fam,
        "episodes": n,
        "kappa": policy.kappa,
        "n_max": policy.n_max,
        "decision_accuracy": float(np.mean(correct)),
        "mean_frames_to_decision": float(np.mean(used)) if used else None,
        "mean_frames_from_grasp_entry": float(np.mean(from_grasp)) if from_grasp else None,
        "forced_decisions": int(forced),
        "low_confidence": int(low),
        "undecided": int(undecided),
    }
    write_json(out / "stream_summary.json", summary)
    s["out"] = str(out)
    s["run"] = str(s["run"])
    s["data"] = str(data_dir)
    _write_resolved(out, "stream", s)
    return summary


# ---------------------------------------------------------------- report

def run_report(settings: dict) -> dict:
    data_dir = Path(settings["data"])
    run_dir = Path(settings["run"]) if settings.get("run") else None
    stream_dir = Path(settings["stream"]) if settings.get("stream") else None
    required = [data_dir / "frames.csv", data_dir / "grid.csv", data_dir / "calibration.csv",
                data_dir / "gen_config.json"]
    if run_dir is not None:
        required.append(run_dir / "config.json")
    if stream_dir is not None:
        required.append(stream_dir / "traces.jsonl")
    missing = [str(p) for p in required if not p.is_file()]
    if missing:
        raise DataFormatError("missing report inputs: " + "; ".join(missing))
    out = _out_dir(settings["out"])
    written = []

    # per-class mean reflectance from the measured frames
    pre = PreprocessConfig()
    ds, refl = _load_features(data_dir, pre)
    wl = ds.grid.values
    lines = ["label," + ",".join(fmt(w) for w in wl)]
    for lab in ds.classes:
        mean = refl[ds.labels == lab].mean(axis=0)
        lines.append(lab + "," + ",".join(fmt(v) for v in mean))
    (out / "mean_curves.csv").write_text("\n".join(lines) + "\n")
    written.append("mean_curves.csv")

    # noise-free real/fake profile overlays from the generator
    gen_cfg = load_gen_config(data_dir / "gen_config.json")
    profiles = gen_cfg.profiles()
    names = [m.name for m in MATERIAL_CLASSES]
    cols = np.column_stack([profiles[m.class_index].reflectance for m in MATERIAL_CLASSES])
    lines = ["wavelength_nm," + ",".join(names)]
    for w, row in zip(wl, cols):
        lines.append(fmt(w) + "," + ",".join(fmt(v) for v in row))
    (out / "pair_overlays.csv").write_text("\n".join(lines) + "\n")
    written.append("pair_overlays.csv")

    written.append(_gel_overlay(out, gen_cfg, profiles))

    if run_dir is not None:
        src = run_dir / "accuracy_vs_k.csv"
        if src.is_file():
            (out / "accuracy_vs_k.csv").write_text(src.read_text())
        else:
            summary = read_json(run_dir / "train_summary.json")
            fams = sorted(summary["families"])
            lines = ["k,compression_ratio," + ",".join(f"cv_accuracy_{f}" for f in fams) + ",mean_cv_accuracy"]
            accs = [summary["families"][f]["cv_accuracy"] for f in fams]
            cr = nmf_mod.compression_ratio(summary["k"], int(pre.channel_mask(ds.grid).sum()))
            lines.append(",".join([str(summary["k"]), fmt(cr)] + [fmt(a) for a in accs] + [fmt(np.mean(accs))]))
            (out / "accuracy_vs_k.csv").write_text("\n".join(lines) + "\n")
        written.append("accuracy_vs_k.csv")

    if stream_dir is not None:
        lines = ["episode,frame_index,distance_cm,true_label,top_class,top_prob,p_true"]
        with open(stream_dir / "traces.jsonl") as fh:
            for raw in fh:
                r = json.loads(raw)
                classes = sorted(CLASS_BY_NAME)
                p_true = r["belief"][classes.index(r["true_label"])] if len(r["belief"]) == len(classes) else ""
                lines.append(",".join([str(r["episode"]), str(r["frame_index"]),
                                       "" if r["distance_cm"] is None else fmt(r["distance_cm"]),
                                       r["true_label"], r["top_class"], fmt(r["top_prob"]),
                                       fmt(p_true) if p_true != "" else ""]))
        (out / "belief_trajectories.csv").write_text("\n".join(lines) + "\n")
        written.append("belief_trajectories.csv")

    _write_resolved(out, "report", {k: (str(v) if v is not None else None) for k, v in settings.items()})
    return {"files": written}


GEL_FRAMES = 50


def _gel_overlay(out: Path, gen_cfg: GenConfig, profiles) -> str:
    """Mean dark-subtracted counts with and without the gel at grasp distance, plus their ratio."""
    renderer = Renderer()
    material = MATERIAL_CLASSES[0]
    base = dataclasses.replace(gen_cfg.params, seed=gen_cfg.seed)
    stacks = {}
    for name, gel in (("gel_on", base.gel_attenuation), ("gel_off", 1.0)):
        p = dataclasses.replace(base, gel_attenuation=gel)
        rng = np.random.default_rng(np.random.SeedSequence([gen_cfg.seed, 0x9E1, int(gel * 1000)]))
        frames = [renderer.render(profiles[material.class_index], p.d_grasp, p, rng).counts
                  for _ in range(GEL_FRAMES)]
        stacks[name] = np.array(frames) - renderer.dark
    on, off = stacks["gel_on"].mean(0), stacks["gel_off"].mean(0)
    se_on = stacks["gel_on"].std(0, ddof=1) / math.sqrt(GEL_FRAMES)
    se_off = stacks["gel_off"].std(0, ddof=1) / math.sqrt(GEL_FRAMES)
    ratio = on / off
    sigma = np.abs(ratio) * np.sqrt((se_on / on) ** 2 + (se_off / off) ** 2)
    lines = [f"wavelength_nm,gel_on,gel_off,ratio,ratio_sigma"]
    for row in zip(renderer.grid.values, on, off, ratio, sigma):
        lines.append(",".join(fmt(v) for v in row))
    (out / "gel_overlay.csv").write_text("\n".join(lines) + "\n")
    return "gel_overlay.csv"
