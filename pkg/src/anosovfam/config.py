"""Strict TOML run configuration.

A run file has a ``[family]`` table and optional ``[resolution]``,
``[constants]``, ``[experiment]`` and ``[output]`` tables, plus a top-level
``workers`` count. Unknown keys, wrong types and out-of-range values raise
:class:`~anosovfam.errors.ConfigError` naming the field and, when it can be
found, its line in the source text.

Example::

    workers = 1

    [family]
    kind = "random_perturbed_cat"
    window = 8
    alpha_range = [-1.0, -0.9]
    seed = 1

    [resolution]
    grid = 12

    [experiment]
    trials = 100
    seed = 7
"""
from dataclasses import dataclass, field
import os
from pathlib import Path
import re

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .certify import PerturbationModel, Resolutions
from .errors import AnosovError, ConfigError
from .family import (
    CAT,
    AffineToral,
    FamilySpec,
    PerturbedCat,
    alternating_family,
    constant_family,
    map_from_dict,
    random_perturbed_cat_family,
)
from .geometry import MetricSpec

OUT_ENV = "ANOSOVFAM_OUT"

FAMILY_KINDS = ("cat", "identity", "alternating", "constant", "perturbed_cat",
                "random_perturbed_cat", "maps")

# key -> accepted TOML value types
_FAMILY_KEYS = {
    "kind": (str,), "name": (str,), "window": (int,), "extension": (str,),
    "matrix": (list,), "translation": (list,), "alpha": (int, float),
    "alpha_range": (list,), "seed": (int,), "metric": (list,), "metric_start": (int,),
    "metric_extension": (str,), "maps": (list,), "dim": (int,),
}
_RESOLUTION_KEYS = {
    "grid": (int,), "boundary_samples": (int,), "chart_samples": (int,),
    "c1_grid": (int,), "fit_horizon": (int,), "n_max": (int,), "tol": (float,),
}
_CONSTANT_KEYS = {
    "alpha": (int, float), "epsilon": (int, float), "safety": (int, float),
    "tail_tol": (float,), "strict_tol": (float,), "vectors_per_point": (int,),
}
_EXPERIMENT_KEYS = {
    "trials": (int,), "seed": (int,), "inflate": (int, float),
    "fraction": (list,), "terms_per_axis": (int,), "max_freq": (int,),
}
_OUTPUT_KEYS = {"dir": (str,)}
_SECTIONS = {
    "family": _FAMILY_KEYS, "resolution": _RESOLUTION_KEYS, "constants": _CONSTANT_KEYS,
    "experiment": _EXPERIMENT_KEYS, "output": _OUTPUT_KEYS,
}
_TOP_KEYS = {"workers": (int,)}


@dataclass
class RunConfig:
    family: FamilySpec
    resolution: Resolutions = field(default_factory=Resolutions)
    constants: dict = field(default_factory=dict)
    trials: int = 0
    seed: int = 0
    inflate: float = 1.0
    model: PerturbationModel = field(default_factory=PerturbationModel)
    out_dir: Path = None
    workers: int = 1
    source: str = ""

    def to_dict(self):
        return {
            "family": self.family.to_dict(),
            "family_name": self.family.name,
            "resolution": self.resolution.to_dict(),
            "constants": dict(self.constants),
            "experiment": {"trials": self.trials, "seed": self.seed, "inflate": self.inflate,
                           "model": self.model.to_dict()},
        }


def _line_of(text, section, key=None):
    """1-based line of ``key`` inside ``[section]`` (or of the header), else None."""
    current = None
    header = re.compile(r"^\s*\[+\s*([A-Za-z0-9_.\-]+)\s*\]+")
    for n, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = m.group(1).split(".")[0]
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section and re.match(rf"^\s*{re.escape(key)}\s*=", line):
            return n
    return None


def _where(text, section, key=None):
    path = ".".join(p for p in (section, key) if p)
    line = _line_of(text, section, key) if section else None
    if line is None and not section and key:
        m = re.search(rf"^\s*{re.escape(key)}\s*=", text, re.M)
        line = text.count("\n", 0, m.start()) + 1 if m else None
    return f"{path} (line {line})" if line else path


def _check_table(text, section, table, schema):
    if not isinstance(table, dict):
        raise ConfigError("must be a table", _where(text, section))
    for key, val in table.items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r}", _where(text, section, key))
        types = schema[key]
        if isinstance(val, bool) or not isinstance(val, types):
            want = " or ".join(t.__name__ for t in types)
            raise ConfigError(f"expected {want}, got {type(val).__name__}",
                              _where(text, section, key))


def _build_metric(text, fam, d):
    if "metric" not in fam:
        return None
    g = np.asarray(fam["metric"], dtype=float)
    ext = fam.get("metric_extension", "periodic" if g.ndim == 3 else "constant")
    start = fam.get("metric_start", -fam.get("window", 1) if g.ndim == 3 else 0)
    try:
        m = MetricSpec(g, start, ext)
    except (AnosovError, ValueError) as e:
        raise ConfigError(str(e), _where(text, "family", "metric")) from None
    if m.dim != d:
        raise ConfigError("metric dimension differs from the maps",
                          _where(text, "family", "metric"))
    return m


def _build_family(text, fam):
    kind = fam.get("kind")
    if kind is None:
        raise ConfigError("missing required key 'kind'", _where(text, "family"))
    if kind not in FAMILY_KINDS:
        raise ConfigError(f"kind must be one of {FAMILY_KINDS}", _where(text, "family", "kind"))
    allowed = {
        "cat": set(), "identity": {"dim"}, "alternating": {"matrix"},
        "constant": {"matrix", "translation"}, "perturbed_cat": {"alpha"},
        "random_perturbed_cat": {"alpha_range", "seed"}, "maps": {"maps"},
    }[kind] | {"kind", "name", "window", "extension", "metric", "metric_start",
               "metric_extension"}
    for key in fam:
        if key not in allowed:
            raise ConfigError(f"key {key!r} does not apply to kind {kind!r}",
                              _where(text, "family", key))
    window = fam.get("window", 1)
    extension = fam.get("extension", "periodic")
    if window < 1:
        raise ConfigError("window must be at least 1", _where(text, "family", "window"))
    if extension not in ("periodic", "constant"):
        raise ConfigError("extension must be 'periodic' or 'constant'",
                          _where(text, "family", "extension"))
    try:
        if kind == "cat":
            maps = [AffineToral(CAT)] * (2 * window)
        elif kind == "identity":
            d = fam.get("dim", 2)
            maps = [AffineToral(np.eye(d, dtype=int))] * (2 * window)
        elif kind == "alternating":
            maps = list(alternating_family(fam.get("matrix", CAT), window).maps)
        elif kind == "constant":
            if "matrix" not in fam:
                raise ConfigError("kind 'constant' needs 'matrix'", _where(text, "family"))
            maps = list(constant_family(AffineToral(fam["matrix"], fam.get("translation")),
                                        window).maps)
        elif kind == "perturbed_cat":
            maps = [PerturbedCat(fam.get("alpha", -0.9))] * (2 * window)
        elif kind == "random_perturbed_cat":
            lo, hi = fam.get("alpha_range", [-1.0, -0.9])
            if not lo <= hi:
                raise ConfigError("alpha_range must be [low, high]",
                                  _where(text, "family", "alpha_range"))
            maps = list(random_perturbed_cat_family(window, (lo, hi), fam.get("seed", 0)).maps)
        else:
            raw = fam.get("maps", [])
            if len(raw) != 2 * window:
                raise ConfigError(f"window {window} needs {2 * window} maps, got {len(raw)}",
                                  _where(text, "family", "maps"))
            maps = [map_from_dict(m) for m in raw]
        metric = _build_metric(text, fam, maps[0].dim)
        return FamilySpec(maps, window, extension, metric, fam.get("name", kind))
    except ConfigError:
        raise
    except (AnosovError, ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"invalid family: {e}", _where(text, "family")) from None


def parse_config(text, out_dir=None):
    """Parse TOML ``text`` into a :class:`RunConfig`."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"syntax error: {e}") from None
    for key, val in data.items():
        if key in _SECTIONS:
            _check_table(text, key, val, _SECTIONS[key])
        elif key in _TOP_KEYS:
            _check_table(text, None, {key: val}, _TOP_KEYS)
        else:
            raise ConfigError(f"unknown key {key!r}", _where(text, None, key))
    if "family" not in data:
        raise ConfigError("missing required table [family]")
    F = _build_family(text, data["family"])
    res_kw = data.get("resolution", {})
    try:
        res = Resolutions(**res_kw)
    except AnosovError as e:
        bad = next((k for k in res_kw if k in str(e)), None)
        raise ConfigError(str(e), _where(text, "resolution", bad)) from None
    const = dict(data.get("constants", {}))
    if "safety" in const and not 0.0 < const["safety"] <= 1.0:
        raise ConfigError("safety must lie in (0, 1]", _where(text, "constants", "safety"))
    exp = data.get("experiment", {})
    trials = exp.get("trials", 0)
    if trials < 0:
        raise ConfigError("trials must be non-negative", _where(text, "experiment", "trials"))
    inflate = float(exp.get("inflate", 1.0))
    if not inflate > 0.0:
        raise ConfigError("inflate must be positive", _where(text, "experiment", "inflate"))
    seed = exp.get("seed", 0)
    model_kw = {k: exp[k] for k in ("terms_per_axis", "max_freq") if k in exp}
    if "fraction" in exp:
        model_kw["fraction"] = tuple(float(v) for v in exp["fraction"])
    model = PerturbationModel(seed=seed, c1_grid=res.c1_grid, **model_kw)
    workers = data.get("workers", os.cpu_count() or 1)
    if workers < 1:
        raise ConfigError("workers must be at least 1", _where(text, None, "workers"))
    out = out_dir or data.get("output", {}).get("dir") or os.environ.get(OUT_ENV) or "."
    return RunConfig(F, res, const, trials, seed, inflate, model, Path(out), workers, text)


def load_config(path, out_dir=None):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", str(path)) from None
    return parse_config(text, out_dir)
