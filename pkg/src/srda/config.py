"""Run configuration files.

Format: ``[section]`` headers followed by ``key = value`` lines; ``#`` starts a
comment.  Sections are ``dataset``, ``model``, ``train`` and ``output``.
Unknown sections or keys, duplicates and unparsable values are rejected with
the offending line number.  Overrides use dotted keys, e.g. ``train.epochs=0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .data import (
    SYNTHETIC_KINDS,
    Dataset,
    Standardizer,
    load_idx_dataset,
    make_shifted_pair,
    read_dataset_csv,
    subsample,
)
from .errors import ConfigError
from .model import ClassifierSpec, GeneratorSpec
from .numeric import make_rng
from .perturbation import NoisePlan
from .training import TrainConfig

PLANS = ("none", "isotropic", "fgsm", "vat")


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _choice(*options):
    def parse(s):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {s!r}")
        return s
    return parse


def _ints(s):
    return [int(v) for v in s.split(",") if v.strip()]


def _floats(s):
    return [float(v) for v in s.split(",") if v.strip()]


def _opt(parse):
    def wrapped(s):
        return None if s.strip().lower() in ("", "auto", "none") else parse(s)
    return wrapped


# section -> key -> (parser, default)
SCHEMA = {
    "dataset": {
        "kind": (_choice(*SYNTHETIC_KINDS, "csv", "idx"), "two-moons"),
        "n": (int, 400),
        "noise": (float, 0.1),
        "rotate": (float, 30.0),
        "translate": (_opt(_floats), None),
        "classes": (int, 3),
        "seed": (int, 0),
        "source": (_opt(str), None),
        "target": (_opt(str), None),
        "source_images": (_opt(str), None),
        "source_labels": (_opt(str), None),
        "target_images": (_opt(str), None),
        "target_labels": (_opt(str), None),
        "n_source": (_opt(int), None),
        "n_target": (_opt(int), None),
        "standardize": (_opt(_bool), None),
    },
    "model": {
        "generator": (_opt(_ints), None),
        "classifier": (_opt(_ints), None),
    },
    "train": {
        "epochs": (int, 150),
        "batch_size": (int, 128),
        "lr_source": (float, 1e-3),
        "lr_smooth": (_opt(float), None),
        "optimizer": (_choice("adam", "sgd"), "adam"),
        "plan": (_choice(*PLANS), "isotropic"),
        "epsilon": (float, 0.5),
        "vat_xi": (float, 0.1),
        "vat_power_iters": (int, 1),
        "entropy": (_bool, False),
        "entropy_weight": (float, 0.05),
        "entropy_step": (_choice("source", "smooth"), "smooth"),
        "warmup_epochs": (int, 0),
        "seed": (int, 0),
        "eval_every": (int, 1),
        "eval_plan": (_opt(_choice(*PLANS[1:])), None),
    },
    "output": {
        "dir": (str, "run"),
        "checkpoint_every": (int, 0),
    },
}


@dataclass
class RunSpec:
    values: dict = field(default_factory=dict)

    def __getitem__(self, dotted):
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    def set(self, dotted, raw, line=None):
        section, key = _split_key(dotted, line)
        parse, _ = SCHEMA[section][key]
        try:
            self.values[section][key] = parse(raw.strip())
        except ValueError as e:
            raise ConfigError(f"{section}.{key}: {e}", line) from None

    # ------------------------------------------------------------------ #

    def noise_plan(self, which="plan") -> NoisePlan | None:
        kind = self[f"train.{which}"]
        if kind is None or kind == "none":
            return None
        return NoisePlan(kind, self["train.epsilon"], self["train.vat_xi"], self["train.vat_power_iters"])

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        try:
            return TrainConfig(
                epochs=t["epochs"],
                batch_size=t["batch_size"],
                lr_source=t["lr_source"],
                lr_smooth=t["lr_smooth"],
                optimizer=t["optimizer"],
                plan=self.noise_plan(),
                eval_plan=self.noise_plan("eval_plan"),
                entropy_weight=t["entropy_weight"] if t["entropy"] else 0.0,
                entropy_step=t["entropy_step"],
                warmup_epochs=t["warmup_epochs"],
                seed=t["seed"],
                eval_every=t["eval_every"],
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def load_data(self):
        """Return ``(source, target, standardizer_or_None)``."""
        d = self.values["dataset"]
        kind = d["kind"]
        if kind in SYNTHETIC_KINDS:
            source, target = make_shifted_pair(kind, d["n"], d["noise"], d["rotate"], d["translate"],
                                               d["classes"], d["seed"])
        elif kind == "csv":
            _require(d, "source", "target")
            source = read_dataset_csv(d["source"], "source")
            target = read_dataset_csv(d["target"], "target")
        else:
            _require(d, "source_images", "source_labels", "target_images")
            source = load_idx_dataset(d["source_images"], d["source_labels"], "source")
            target = load_idx_dataset(d["target_images"], d["target_labels"], "target")
            rng = make_rng([d["seed"], 99])
            if d["n_source"]:
                source = subsample(source, min(d["n_source"], len(source)), rng)
            if d["n_target"]:
                target = subsample(target, min(d["n_target"], len(target)), rng)
        if not source.labeled:
            raise ConfigError("source dataset must be labeled")
        if source.dim != target.dim:
            raise ConfigError(f"source dim {source.dim} != target dim {target.dim}")
        st = None
        standardize = d["standardize"] if d["standardize"] is not None else kind != "idx"
        if standardize:
            st = Standardizer.fit(source)
            source, target = st.apply(source), st.apply(target)
        return source, target, st

    def model_specs(self, source: Dataset):
        m = self.values["model"]
        gen = m["generator"]
        if gen is None:
            gen = [source.dim, 256, 64] if self["dataset.kind"] == "idx" else [source.dim, 32, 32, 16]
        clf = m["classifier"]
        if clf is None:
            clf = [gen[-1], source.num_classes]
        if gen[0] != source.dim:
            raise ConfigError(f"model.generator input width {gen[0]} != data dim {source.dim}")
        try:
            return GeneratorSpec(gen), ClassifierSpec(clf)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def dumps(self) -> str:
        """Fully resolved config in the same file format."""
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_render(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)


def _render(v):
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _require(d, *keys):
    missing = [k for k in keys if not d[k]]
    if missing:
        raise ConfigError(f"dataset.kind={d['kind']} requires {', '.join('dataset.' + k for k in missing)}")


def _split_key(dotted, line=None):
    if "." not in dotted:
        raise ConfigError(f"expected section.key, got {dotted!r}", line)
    section, key = dotted.split(".", 1)
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]", line)
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]", line)
    return section, key


def default_spec() -> RunSpec:
    return RunSpec({s: {k: default for k, (_, default) in keys.items()} for s, keys in SCHEMA.items()})


def parse_config(text: str) -> RunSpec:
    spec = default_spec()
    section = None
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        dotted = key if "." in key else f"{section}.{key}" if section else key
        if section is None and "." not in key:
            raise ConfigError(f"key {key!r} appears before any [section]", lineno)
        if dotted in seen:
            raise ConfigError(f"duplicate key {dotted}", lineno)
        seen.add(dotted)
        spec.set(dotted, value, lineno)
    return spec


def load_config(path) -> RunSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def apply_override(spec: RunSpec, assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    spec.set(key.strip(), value)
