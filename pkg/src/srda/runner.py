"""Config-driven experiment runs shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .config import RunSpec
from .data import Dataset
from .metrics import emit_csv
from .model import Model, save_checkpoint
from .training import STREAM_INIT, TrainConfig, TrainState, stream_rng, train_schedule


@dataclass
class Prepared:
    config: TrainConfig
    source: Dataset
    target: Dataset
    model: Model
    preprocess: dict | None


@dataclass
class RunResult:
    spec: RunSpec
    prepared: Prepared
    state: TrainState

    @property
    def preprocess(self):
        return self.prepared.preprocess


def prepare(spec: RunSpec) -> Prepared:
    """Resolve the config, load data and build the initial model."""
    config = spec.train_config()
    spec.values["train"]["lr_smooth"] = config.lr_smooth
    source, target, standardizer = spec.load_data()
    gen_spec, clf_spec = spec.model_specs(source)
    model = Model.build(gen_spec, clf_spec, rng=stream_rng(config.seed, STREAM_INIT))
    preprocess = standardizer.as_dict() if standardizer is not None else None
    return Prepared(config, source, target, model, preprocess)


def run_spec(spec: RunSpec, on_epoch=None, hook=None, prepared: Prepared | None = None) -> RunResult:
    prep = prepare(spec) if prepared is None else prepared
    state = train_schedule(prep.model, prep.source, prep.target, prep.config, hook=hook, on_epoch=on_epoch)
    return RunResult(spec, prep, state)


def write_outputs(result: RunResult, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.state.model, out / "checkpoint.json", result.preprocess)
    emit_csv(result.state.history, out / "metrics.csv")
    (out / "resolved.cfg").write_text(result.spec.dumps(), encoding="utf-8")
