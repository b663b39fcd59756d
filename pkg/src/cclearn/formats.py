"""Dataset CSV and model-configuration JSON formats.

Datasets are wide CSV files with one row per subject and columns

    id, <stage-1 covariates>, A1, delta1, Y1, S2_<stage-2 covariates>,
    A2, delta, Y2, Ytilde, eta

Files without intermediate rewards (form 2) drop ``delta1``, ``Y1`` and
``Y2``.  Subjects that never entered stage 2 leave every stage-2 cell
empty; an empty cell is missing, never zero.  ``eta`` is 1 exactly when the
subject entered stage 2.

Model configurations name the columns used by each stage's models:

    {
      "stages": [
        {"tf.mod": [...], "blip.mod": [...], "treat.mod": [...],
         "classification.mod": [...]},
        ...
      ],
      "response": "log", "ipcw_variant": "II", "induction": "D",
      "tree": {"max_depth": 4}, "seed": 0,
      "categories": {"Genotyping": {"KRAS": 1, "RAS": 2}}
    }

``tf.mod`` holds the Q-model main effects, ``blip.mod`` the terms that
interact with treatment, ``treat.mod`` the propensity covariates and
``classification.mod`` the features the regime tree may split on.  Stage-2
covariates may be written with or without the ``S2_`` prefix.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .costtree import TreeParams
from .engine import FitConfig, StageModels, treatment_name
from .errors import InvalidArgumentError
from .regressors import DesignSpec
from .trajectory import StageRecord, Trajectory

STAGE2_PREFIX = "S2_"
RESERVED = ("id", "A1", "delta1", "Y1", "A2", "delta", "Y2", "Ytilde", "eta")


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    covariate_names: tuple[tuple[str, ...], ...]
    ids: list[str]
    form: int

    @property
    def K(self) -> int:
        return len(self.covariate_names)

    def treatment_sets(self) -> tuple[tuple[int, ...], ...]:
        sets = []
        for k in range(self.K):
            seen = {t.stages[k].treatment for t in self.trajectories if t.n_stages > k}
            sets.append(tuple(sorted(seen)))
        return tuple(sets)


# -- writing -----------------------------------------------------------------


def _num(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def _header(covariate_names, form: int) -> list[str]:
    names1 = list(covariate_names[0])
    cols = ["id", *names1, "A1"]
    if form == 1:
        cols += ["delta1", "Y1"]
    if len(covariate_names) > 1:
        cols += [STAGE2_PREFIX + c for c in covariate_names[1]] + ["A2"]
    cols.append("delta")
    if form == 1 and len(covariate_names) > 1:
        cols.append("Y2")
    cols += ["Ytilde", "eta"]
    return cols


def dataset_to_csv(
    trajectories: Sequence[Trajectory],
    covariate_names: Sequence[Sequence[str]],
    ids: Sequence[str] | None = None,
    form: int = 1,
) -> str:
    """Render trajectories of at most two stages as wide CSV text."""
    covariate_names = tuple(tuple(c) for c in covariate_names)
    if not 1 <= len(covariate_names) <= 2:
        raise InvalidArgumentError("the wide format holds one or two stages")
    if form not in (1, 2):
        raise InvalidArgumentError(f"form must be 1 or 2, got {form}")
    for name in (c for stage in covariate_names for c in stage):
        if name in RESERVED or name.startswith(STAGE2_PREFIX):
            raise InvalidArgumentError(f"covariate name {name!r} clashes with a reserved column")
    if ids is None:
        ids = [str(i + 1) for i in range(len(trajectories))]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_header(covariate_names, form))
    two = len(covariate_names) > 1
    for sid, tr in zip(ids, trajectories, strict=True):
        if tr.n_stages > len(covariate_names):
            raise InvalidArgumentError(f"subject {sid} has more stages than the file layout")
        if form == 1 and not tr.has_intermediate_rewards:
            raise InvalidArgumentError("form-1 output needs intermediate rewards")
        s1 = tr.stages[0]
        row = [sid, *(_num(x) for x in s1.covariates), str(s1.treatment)]
        if form == 1:
            row += [str(s1.censor_indicator), _num(s1.reward)]
        entered = tr.n_stages > 1
        if two:
            if entered:
                s2 = tr.stages[1]
                row += [_num(x) for x in s2.covariates] + [str(s2.treatment)]
            else:
                row += [""] * (len(covariate_names[1]) + 1)
        row.append(str(tr.event))
        if form == 1 and two:
            row.append(_num(tr.stages[1].reward) if entered else "")
        row += [_num(tr.total_time), str(int(entered))]
        writer.writerow(row)
    return buf.getvalue()


def write_dataset(path: str, trajectories, covariate_names, ids=None, form: int = 1) -> None:
    text = dataset_to_csv(trajectories, covariate_names, ids, form)
    with open(path, "w", newline="") as fh:
        fh.write(text)


# -- reading -----------------------------------------------------------------


def _parse_real(text: str, where: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise InvalidArgumentError(f"{where}: {text!r} is not a number") from None
    if not math.isfinite(value):
        raise InvalidArgumentError(f"{where}: value must be finite")
    return value


def _parse_int(text: str, where: str) -> int:
    value = _parse_real(text, where)
    if not value.is_integer():
        raise InvalidArgumentError(f"{where}: expected an integer, got {text!r}")
    return int(value)


def dataset_from_csv(text: str) -> Dataset:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise InvalidArgumentError("dataset file is empty") from None
    if len(set(header)) != len(header):
        raise InvalidArgumentError("duplicate column names in header")
    for required in ("id", "A1", "delta", "Ytilde"):
        if required not in header:
            raise InvalidArgumentError(f"dataset lacks required column {required!r}")
    form = 1 if "Y1" in header else 2
    if form == 1 and "delta1" not in header:
        raise InvalidArgumentError("form-1 dataset lacks column 'delta1'")
    two = "A2" in header
    if form == 1 and two and "Y2" not in header:
        raise InvalidArgumentError("form-1 dataset lacks column 'Y2'")
    names2 = tuple(h[len(STAGE2_PREFIX):] for h in header if h.startswith(STAGE2_PREFIX))
    if names2 and not two:
        raise InvalidArgumentError("stage-2 covariates present but no A2 column")
    names1 = tuple(h for h in header if h not in RESERVED and not h.startswith(STAGE2_PREFIX))
    col = {h: j for j, h in enumerate(header)}

    trajectories, ids = [], []
    for line, row in enumerate(reader, start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise InvalidArgumentError(f"line {line}: expected {len(header)} fields, got {len(row)}")
        cell = {h: row[j].strip() for h, j in col.items()}

        def real(name):
            return _parse_real(cell[name], f"line {line}, column {name}")

        def integer(name):
            return _parse_int(cell[name], f"line {line}, column {name}")

        for name in names1 + ("A1", "delta", "Ytilde") + (("delta1", "Y1") if form == 1 else ()):
            if cell[name] == "":
                raise InvalidArgumentError(f"line {line}: column {name} is empty")
        stage2_cols = [STAGE2_PREFIX + c for c in names2] + (["A2"] if two else [])
        if form == 1 and two:
            stage2_cols.append("Y2")
        filled = [c for c in stage2_cols if cell[c] != ""]
        entered = bool(filled)
        if entered and len(filled) != len(stage2_cols):
            missing = sorted(set(stage2_cols) - set(filled))
            raise InvalidArgumentError(f"line {line}: stage-2 columns partially empty ({', '.join(missing)})")
        if "eta" in cell and cell["eta"] != "" and integer("eta") != int(entered):
            raise InvalidArgumentError(f"line {line}: eta disagrees with the stage-2 columns")

        event = integer("delta")
        if form == 1:
            delta1 = integer("delta1")
            stages = [StageRecord(tuple(real(c) for c in names1), integer("A1"), real("Y1"), delta1)]
            if entered:
                stages.append(
                    StageRecord(tuple(real(STAGE2_PREFIX + c) for c in names2), integer("A2"), real("Y2"), event)
                )
        else:
            stages = [StageRecord(tuple(real(c) for c in names1), integer("A1"))]
            if entered:
                stages.append(StageRecord(tuple(real(STAGE2_PREFIX + c) for c in names2), integer("A2")))
        try:
            trajectories.append(Trajectory(tuple(stages), real("Ytilde"), event, form == 1))
        except InvalidArgumentError as exc:
            raise InvalidArgumentError(f"line {line}: {exc}") from None
        ids.append(cell["id"])
    if not trajectories:
        raise InvalidArgumentError("dataset has no rows")
    covariate_names = (names1, names2) if two else (names1,)
    return Dataset(trajectories, covariate_names, ids, form)


def read_dataset(path: str) -> Dataset:
    with open(path, newline="") as fh:
        return dataset_from_csv(fh.read())


# -- model configuration -----------------------------------------------------

_STAGE_KEYS = {"tf.mod", "blip.mod", "treat.mod", "treat.interaction", "classification.mod", "categorical", "response"}
_TOP_KEYS = {
    "stages", "treatments", "response", "ipcw_variant", "induction", "tree", "seed",
    "km_floor", "propensity_clip", "softmax_max_iter", "softmax_tol", "elapsed_offset", "categories",
}


@dataclass
class ModelConfig:
    fit: FitConfig
    categories: dict[str, dict[str, int]] = field(default_factory=dict)

    def category_names(self) -> dict[str, dict[float, str]]:
        """Reverse lookup ``{column: {code: name}}`` for tree rendering."""
        return {col: {float(code): name for name, code in m.items()} for col, m in self.categories.items()}


def _names(value, where: str) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise InvalidArgumentError(f"{where} must be a list of column names")
    return tuple(v[len(STAGE2_PREFIX):] if v.startswith(STAGE2_PREFIX) else v for v in value)


def parse_model_config(doc: Mapping, dataset: Dataset) -> ModelConfig:
    """Build a :class:`FitConfig` from a JSON document and the dataset it applies to."""
    if not isinstance(doc, Mapping):
        raise InvalidArgumentError("model config must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise InvalidArgumentError(f"unknown model config key(s) {sorted(unknown)}")
    stages_doc = doc.get("stages")
    if not isinstance(stages_doc, list) or len(stages_doc) != dataset.K:
        raise InvalidArgumentError(f"model config needs a 'stages' list with {dataset.K} entries")
    default_response = doc.get("response", "identity")
    stages = []
    for k, sd in enumerate(stages_doc, start=1):
        if not isinstance(sd, Mapping):
            raise InvalidArgumentError(f"stage {k} entry must be an object")
        unknown = set(sd) - _STAGE_KEYS
        if unknown:
            raise InvalidArgumentError(f"stage {k}: unknown key(s) {sorted(unknown)}")
        if "classification.mod" not in sd:
            raise InvalidArgumentError(f"stage {k}: 'classification.mod' is required")
        q = DesignSpec(
            _names(sd.get("tf.mod", []), f"stage {k} tf.mod"),
            _names(sd.get("blip.mod", []), f"stage {k} blip.mod"),
            sd.get("response", default_response),
        )
        stages.append(
            StageModels(
                q,
                propensity_main=_names(sd.get("treat.mod", []), f"stage {k} treat.mod"),
                propensity_interaction=_names(sd.get("treat.interaction", []), f"stage {k} treat.interaction"),
                classification=_names(sd["classification.mod"], f"stage {k} classification.mod"),
                categorical=_names(sd.get("categorical", []), f"stage {k} categorical"),
            )
        )
    treatments = doc.get("treatments")
    if treatments is None:
        treatments = dataset.treatment_sets()
    tree = doc.get("tree", {})
    if not isinstance(tree, Mapping):
        raise InvalidArgumentError("'tree' must be an object")
    try:
        tree_params = TreeParams(**tree)
    except TypeError as exc:
        raise InvalidArgumentError(f"bad tree settings: {exc}") from None
    kwargs = {}
    for key in ("km_floor", "softmax_max_iter", "softmax_tol", "elapsed_offset"):
        if key in doc:
            kwargs[key] = doc[key]
    if "propensity_clip" in doc:
        kwargs["propensity_clip"] = tuple(doc["propensity_clip"])
    fit = FitConfig(
        K=dataset.K,
        treatment_sets=tuple(tuple(int(a) for a in s) for s in treatments),
        covariate_names=dataset.covariate_names,
        stages=tuple(stages),
        ipcw_variant=str(doc.get("ipcw_variant", "I")).upper(),
        induction=str(doc.get("induction", "D")).upper(),
        tree=tree_params,
        seed=int(doc.get("seed", 0)),
        **kwargs,
    )
    categories = _check_categories(doc.get("categories", {}), dataset)
    return ModelConfig(fit, categories)


def _check_categories(doc, dataset: Dataset) -> dict[str, dict[str, int]]:
    if not isinstance(doc, Mapping):
        raise InvalidArgumentError("'categories' must map column names to {name: code} objects")
    out = {}
    for column, mapping in doc.items():
        name = column[len(STAGE2_PREFIX):] if column.startswith(STAGE2_PREFIX) else column
        stage = next((k for k, names in enumerate(dataset.covariate_names) if name in names), None)
        if stage is None:
            raise InvalidArgumentError(f"category map for unknown column {column!r}")
        if not isinstance(mapping, Mapping) or not all(isinstance(v, int) for v in mapping.values()):
            raise InvalidArgumentError(f"category map for {column!r} must be {{name: integer code}}")
        codes = set(mapping.values())
        j = dataset.covariate_names[stage].index(name)
        for tr in dataset.trajectories:
            if tr.n_stages > stage and tr.stages[stage].covariates[j] not in codes:
                raise InvalidArgumentError(
                    f"column {column!r} holds code {tr.stages[stage].covariates[j]:g} missing from its category map"
                )
        out[name] = {str(k): int(v) for k, v in mapping.items()}
    return out


def default_model_config(dataset: Dataset, response: str = "identity") -> dict:
    """A config using every available column in every model role."""
    stages = []
    history: list[str] = []
    for k, names in enumerate(dataset.covariate_names, start=1):
        if k > 1:
            history.append(treatment_name(k - 1))
        history.extend(names)
        cols = list(history)
        stages.append({
            "tf.mod": cols,
            "blip.mod": cols,
            "treat.mod": cols,
            "classification.mod": cols,
        })
    return {"stages": stages, "response": response, "ipcw_variant": "I" if dataset.form == 1 else "II", "induction": "D"}


def config_document(fit: FitConfig, categories: Mapping[str, Mapping[str, int]] | None = None) -> dict:
    """The JSON document that :func:`parse_model_config` turns back into ``fit``."""
    stages = []
    for sm in fit.stages:
        entry = {
            "tf.mod": list(sm.q.main_terms),
            "blip.mod": list(sm.q.interaction_terms),
            "treat.mod": list(sm.propensity_main),
            "classification.mod": list(sm.classification),
            "response": sm.q.response_transform,
        }
        if sm.propensity_interaction:
            entry["treat.interaction"] = list(sm.propensity_interaction)
        if sm.categorical:
            entry["categorical"] = list(sm.categorical)
        stages.append(entry)
    doc = {
        "stages": stages,
        "treatments": [list(s) for s in fit.treatment_sets],
        "ipcw_variant": fit.ipcw_variant,
        "induction": fit.induction,
        "tree": fit.tree.to_dict(),
        "seed": fit.seed,
        "km_floor": fit.km_floor,
        "propensity_clip": list(fit.propensity_clip),
        "softmax_max_iter": fit.softmax_max_iter,
        "softmax_tol": fit.softmax_tol,
        "elapsed_offset": fit.elapsed_offset,
    }
    if categories:
        doc["categories"] = {k: dict(v) for k, v in categories.items()}
    return doc
