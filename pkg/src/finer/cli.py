"""Command-line experiment runner.

Usage::

    python -m finer run --config experiment.cfg [--method lgfd] [--seed 3]

The config is a flat ``key = value`` file; ``#`` starts a comment and
unknown keys are rejected. Recognized keys:

    corpus          CoNLL training file, or ``synthetic`` for the built-in generator
    test_corpus     CoNLL evaluation file (optional)
    test_fraction   tail fraction of ``corpus`` held out when no test_corpus is given
    synthetic_train, synthetic_test, synthetic_seed   sizes and seed for ``synthetic``
    base, step      task schedule
    method          one of the method names in ``baselines.METHODS``
    seeds           comma-separated list
    output_dir      where result files go (``FINER_OUTPUT_DIR`` overrides)

plus every field of ``FederationConfig`` and ``TaggerConfig`` (the tagger's
``seed`` is taken from the run seed).

Each run writes ``rounds.jsonl``, ``metrics.csv`` and ``summary.csv``.
Exit status is 0 on success, 2 for a bad config and 1 when a run fails
(rows finished before the failure are kept).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .baselines import METHODS
from .corpus import Corpus, build_task_stream, load_corpus
from .errors import ConfigurationError
from .federation import FederationConfig, Federation
from .synthetic import generate_benchmark
from .tagger import TaggerConfig

log = logging.getLogger(__name__)

OUTPUT_ENV = "FINER_OUTPUT_DIR"
METRIC_COLUMNS = ("seed", "task", "old_ma_f1", "new_ma_f1", "all_mi_f1", "all_ma_f1")
SUMMARY_COLUMNS = ("seed", "avg_mi_f1", "avg_ma_f1")

_FED_FIELDS = {f.name: f for f in dataclasses.fields(FederationConfig) if f.name != "seed"}
_TAGGER_FIELDS = {f.name: f for f in dataclasses.fields(TaggerConfig) if f.name != "seed"}
_RUN_KEYS = {
    "corpus", "test_corpus", "test_fraction", "synthetic_train", "synthetic_test", "synthetic_seed",
    "base", "step", "method", "seeds", "output_dir",
}


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    corpus: str
    base: int
    step: int
    method: str = "lgfd"
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "results"
    test_corpus: Optional[str] = None
    test_fraction: float = 0.2
    synthetic_train: int = 1200
    synthetic_test: int = 300
    synthetic_seed: int = 7
    federation: FederationConfig = FederationConfig()
    tagger: TaggerConfig = TaggerConfig()

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not self.seeds:
            raise ConfigurationError("seeds must be nonempty")
        if not 0 < self.test_fraction < 1:
            raise ConfigurationError("test_fraction must lie in (0, 1)")
        self.tagger.check_groups(self.federation.groups)


def _convert(key: str, raw: str, kind):
    text = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind in ("Optional[float]",):
            return None if text.lower() in ("none", "") else float(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot read {raw!r} as {kind}") from None
    return text


def parse_config(text: str, path: str = "<config>") -> ExperimentConfig:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        if key not in _RUN_KEYS and key not in _FED_FIELDS and key not in _TAGGER_FIELDS:
            raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    for required in ("corpus", "base", "step"):
        if required not in values:
            raise ConfigurationError(f"{path}: missing required key {required!r}")

    fed = {k: _convert(k, v, _FED_FIELDS[k].type) for k, v in values.items() if k in _FED_FIELDS}
    tag = {k: _convert(k, v, _TAGGER_FIELDS[k].type) for k, v in values.items() if k in _TAGGER_FIELDS}
    run = {}
    for key in ("base", "step", "synthetic_train", "synthetic_test", "synthetic_seed"):
        if key in values:
            run[key] = _convert(key, values[key], int)
    if "test_fraction" in values:
        run["test_fraction"] = _convert("test_fraction", values["test_fraction"], float)
    for key in ("corpus", "test_corpus", "method", "output_dir"):
        if key in values:
            run[key] = values[key]
    if "seeds" in values:
        try:
            run["seeds"] = tuple(int(s) for s in values["seeds"].split(",") if s.strip())
        except ValueError:
            raise ConfigurationError(f"seeds: cannot read {values['seeds']!r}") from None
    return ExperimentConfig(federation=FederationConfig(**fed), tagger=TaggerConfig(**tag), **run)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def load_data(config: ExperimentConfig) -> tuple[Corpus, list]:
    """Training corpus and evaluation sentences."""
    if config.corpus == "synthetic":
        train, test = generate_benchmark(config.synthetic_train, config.synthetic_test, config.synthetic_seed)
        return train, list(test.sentences)
    train = load_corpus(config.corpus)
    if config.test_corpus:
        test = load_corpus(config.test_corpus)
        if set(test.registry.entity_types) - set(train.registry.entity_types):
            raise ConfigurationError("test corpus mentions types absent from the training corpus")
        # re-encode against the training registry
        remap = {test.registry.label_id(tag): train.registry.label_id(tag) for tag in test.registry.tags(range(test.registry.num_labels))}
        sents = [dataclasses.replace(s, labels=tuple(remap[l] for l in s.labels)) for s in test.sentences]
        return train, sents
    cut = len(train.sentences) - max(1, int(round(config.test_fraction * len(train.sentences))))
    return dataclasses.replace(train, sentences=train.sentences[:cut]), list(train.sentences[cut:])


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def run(config: ExperimentConfig, output_dir: Optional[str] = None) -> int:
    out = Path(output_dir or os.environ.get(OUTPUT_ENV) or config.output_dir)
    train, test = load_data(config)
    stream = build_task_stream(train, config.base, config.step)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rounds.jsonl", "w", encoding="utf-8", newline="\n") as rounds, \
            open(out / "metrics.csv", "w", encoding="utf-8", newline="") as metrics, \
            open(out / "summary.csv", "w", encoding="utf-8", newline="") as summary:
        m_writer = csv.writer(metrics, lineterminator="\n")
        s_writer = csv.writer(summary, lineterminator="\n")
        m_writer.writerow(METRIC_COLUMNS)
        s_writer.writerow(SUMMARY_COLUMNS)
        for seed in config.seeds:
            fed = Federation(
                stream, dataclasses.replace(config.federation, seed=seed), config.tagger, config.method, test
            )
            try:
                result = fed.run()
            except Exception:
                # flush whatever this seed finished before failing
                for rec in fed.logs:
                    rounds.write(json.dumps({"seed": seed, **rec.to_record()}, sort_keys=True) + "\n")
                for m in fed.metrics:
                    m_writer.writerow([seed, m.task, _fmt(m.old_ma_f1), _fmt(m.new_ma_f1), _fmt(m.all_mi_f1), _fmt(m.all_ma_f1)])
                raise
            for rec in result.logs:
                rounds.write(json.dumps({"seed": seed, **rec.to_record()}, sort_keys=True) + "\n")
            for m in result.metrics:
                m_writer.writerow([seed, m.task, _fmt(m.old_ma_f1), _fmt(m.new_ma_f1), _fmt(m.all_mi_f1), _fmt(m.all_ma_f1)])
            mi, ma = result.averages()
            s_writer.writerow([seed, _fmt(mi), _fmt(ma)])
            for f in (rounds, metrics, summary):
                f.flush()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="finer", description="Federated incremental NER experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment from a config file")
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--method", choices=METHODS, help="override the config's method")
    p.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        overrides = {}
        if args.method:
            overrides["method"] = args.method
        if args.seed is not None:
            overrides["seeds"] = (args.seed,)
        if overrides:
            config = dataclasses.replace(config, **overrides)
    except ConfigurationError as exc:
        print(f"finer: invalid config: {exc}", file=sys.stderr)
        return 2
    try:
        return run(config)
    except ConfigurationError as exc:
        print(f"finer: invalid config: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and exit non-zero
        log.exception("run failed")
        print(f"finer: run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
