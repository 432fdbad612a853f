"""``spectrograsp`` command-line entry point.

Exit codes: 0 success, 2 configuration/parameter errors, 3 malformed data,
4 incompatible artifacts (e.g. wavelength-grid mismatch), 5 numerical
failures. Set ``SPECTROGRASP_THREADS`` to cap worker threads (0 = all cores).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .errors import ConfigError, SpectroGraspError


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    cfg.pop("schema_version", None)
    cfg.pop("command", None)
    return cfg


def _merge(cfg: dict, **flags) -> dict:
    out = dict(cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with settings for this command (flags override it)")
    p.add_argument("--seed", type=int, help="master random seed")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectrograsp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic grasp dataset")
    _common(g)
    g.add_argument("--episodes-per-class", type=int, dest="episodes_per_class")

    t = sub.add_parser("train", help="fit NMF and classifiers on the training split")
    _common(t)
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--family", help="model family, comma list, or 'all'")
    t.add_argument("--k", type=int, help="number of NMF components")
    t.add_argument("--k-sweep", dest="k_sweep", help="sweep NMF components, e.g. 5..25")
    t.add_argument("--folds", type=int, help="cross-validation folds")
    t.add_argument("--split", type=float, help="training fraction of episodes (default 0.8)")

    e = sub.add_parser("eval", help="evaluate trained models on the held-out split")
    _common(e)
    e.add_argument("--run", help="train output directory")
    e.add_argument("--data", help="dataset directory (default: the one used for training)")
    e.add_argument("--family", help="model family, comma list, or 'all' (default: every trained model)")
    e.add_argument("--timing-calls", type=int, dest="timing_calls", help="single-frame timing calls")

    s = sub.add_parser("stream", help="run the Bayes filter over fresh simulated episodes")
    _common(s)
    s.add_argument("--run", help="train output directory")
    s.add_argument("--data", help="dataset directory (default: the one used for training)")
    s.add_argument("--family", help="model family providing likelihoods (default rbf-svm)")
    s.add_argument("--episodes", type=int, help="number of episodes (default 500)")
    s.add_argument("--kappa", type=float, help="confidence threshold (default 0.95)")
    s.add_argument("--n-max", type=int, dest="n_max", help="forced-decision frame count (default 65)")

    r = sub.add_parser("report", help="write plot-ready CSVs")
    _common(r)
    r.add_argument("--data", help="dataset directory")
    r.add_argument("--run", help="train output directory (optional)")
    r.add_argument("--stream", help="stream output directory (optional)")
    return parser


def _require(settings, *keys):
    missing = [k for k in keys if not settings.get(k)]
    if missing:
        raise ConfigError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def dispatch(args) -> dict:
    cfg = _load_config(args.config)
    if args.command == "gen":
        st = _merge(cfg, out=args.out, seed=args.seed, episodes_per_class=args.episodes_per_class)
        _require(st, "out")
        return pipeline.run_gen(st)
    if args.command == "train":
        st = _merge(cfg, out=args.out, seed=args.seed, data=args.data, families=args.family, k=args.k,
                    k_sweep=args.k_sweep, folds=args.folds, split=args.split)
        _require(st, "out", "data")
        return pipeline.run_train(st)
    if args.command == "eval":
        st = _merge(cfg, out=args.out, run=args.run, data=args.data, families=args.family,
                    timing_calls=args.timing_calls)
        _require(st, "out", "run")
        return pipeline.run_eval(st)
    if args.command == "stream":
        st = _merge(cfg, out=args.out, seed=args.seed, run=args.run, data=args.data, family=args.family,
                    episodes=args.episodes, kappa=args.kappa, n_max=args.n_max)
        _require(st, "out", "run")
        return pipeline.run_stream(st)
    st = _merge(cfg, out=args.out, data=args.data, run=args.run, stream=args.stream)
    _require(st, "out", "data")
    return pipeline.run_report(st)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        summary = dispatch(args)
    except SpectroGraspError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
