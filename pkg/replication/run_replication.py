#!/usr/bin/env python3
"""
Body Shape and Income Replication Runner

Drives the whole study on synthetic cohorts:
    synth      generate the cohort (meshes, cohort.csv, summary tables)
    train      fit one graphical autoencoder per group (+ dimension sweeps)
    encode     embed every subject and align components with body measures
    regress    run the income, reporting-error, Lasso, proxy and IV analyses
    replicate  all of the above into one bundle with a hash manifest

Usage:
    python run_replication.py replicate --config example.conf --out results/
    python run_replication.py synth --out results/ --seed 7
"""

import argparse
import os
import sys
import time
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dotenv import load_dotenv

# Add current directory to path for imports
sys.path.append(str(Path(__file__).parent))

from body_mesh import MEASURE_NAMES, TemplateSpec
from config import check_known_namespaces, format_value, read_conf, split_namespace, to_conf_lines, update_dataclass
from econometrics import (
    DesignMatrix,
    build_interactions,
    control_function,
    nested_proxy_sets,
    ols_bootstrap,
    ols_fit,
    partial_out,
    proxy_ols,
    residual_instrument,
    two_sls_oracle,
)
from errors import (
    LIBRARY_DATA_ERRORS,
    LIBRARY_NUMERICAL_ERRORS,
    ConfigError,
    DataError,
    ReplicationError,
    as_replication_error,
)
from graph_autoencoder import (
    Alignment,
    TrainConfig,
    align_components,
    dataset_matrix,
    dim_sweep,
    embed_cohort,
    latent_recovery_r2,
    load_model,
    save_model,
    train,
)
from lasso import lambda_grid, lasso_cv, lasso_r2, post_lasso
from nonparametric import kernel_regression_bands, quantile_fan, zero_crossings
from report_tables import (
    ReportBundle,
    band_row,
    category_shares,
    regression_table,
    stack_tables,
    summary_statistics,
    write_csv,
)
from synth_cohort import (
    CATEGORICAL_LEVELS,
    SIZE_ANCHORS,
    DGPConfig,
    add_analysis_columns,
    default_group_configs,
    read_cohort,
    sample_groups,
    write_cohort,
)

ANALYSES = (
    "summary", "reporting_errors", "height_weight", "bmi", "body_measures", "lasso",
    "autoencoder", "embedding", "proxy", "control_function", "comparison",
)
# need a trained model and aligned embeddings
EMBEDDING_ANALYSES = ("embedding", "proxy", "control_function", "comparison")
REGRESSION_ANALYSES = tuple(a for a in ANALYSES if a not in ("summary", "autoencoder"))

CONTROL_NUMERIC = ("education", "experience", "experience_sq", "n_children")
CONTROL_CATEGORICAL = ("race", "occupation", "marital")
MIN_LEVEL_COUNT = 10

SUMMARY_VARIABLES = (
    "height", "weight", "bmi", "reported_height", "reported_weight", "reported_bmi",
    "hip_waist_ratio", "income", "log_income", "education", "experience", "age",
    "fitness", "n_children",
)
ALIGN_MEASURES = ("height", "bmi", "hip_waist_ratio", "weight", *[m for m in MEASURE_NAMES
                                                                  if m not in ("height", "weight")])
FIT_MEASURES = ("height", "bmi", "hip_waist_ratio", "weight")
PROXY_BLOCKS = (("fitness", "numeric"), ("car_size", "categorical"),
                ("birth_region", "categorical"), ("survey_site", "categorical"))
QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)

MODEL_DIR = "models"
TRAIN_DIR = "train"
EMBED_DIR = "embeddings"
TABLE_DIR = "tables"
CURVE_DIR = "curves"
LASSO_DIR = "lasso"
RUN_CONF = "run.conf"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CohortOptions:
    n_per_group: int = 500
    groups: Tuple[str, ...] = ("male", "female")


@dataclass(frozen=True)
class RunOptions:
    seed: int = 0
    analyses: Tuple[str, ...] = ANALYSES
    bootstrap: int = 200
    lasso_folds: int = 10
    lasso_lambdas: int = 100
    sweep_dims: Tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    n_jobs: int = 1
    quantile_degree: int = 3
    grid_points: int = 50


def parse_group_dims(raw: str) -> Dict[str, int]:
    """'male:2,female:3' -> {'male': 2, 'female': 3}"""
    dims = {}
    for item in (part.strip() for part in raw.split(",")):
        if not item:
            continue
        name, sep, value = item.partition(":")
        try:
            if not sep:
                raise ValueError(f"expected name:d, got {item!r}")
            dims[name.strip()] = int(value)
        except ValueError as e:
            raise ConfigError(f"bad value for 'train.group_dims': {e}") from e
    return dims


@dataclass
class RunConfig:
    cohort: CohortOptions = field(default_factory=CohortOptions)
    template: TemplateSpec = field(default_factory=TemplateSpec)
    dgp: Dict[str, DGPConfig] = field(default_factory=default_group_configs)
    train: TrainConfig = field(default_factory=TrainConfig)
    group_dims: Dict[str, int] = field(default_factory=lambda: {"male": 2, "female": 3})
    run: RunOptions = field(default_factory=RunOptions)

    @classmethod
    def from_values(cls, values: Dict[str, str]) -> "RunConfig":
        """Build from flat namespaced keys; dgp.* applies to every group, group.<name>.* on top"""
        check_known_namespaces(values, ("cohort", "dgp", "group", "template", "train", "run"))
        cohort = update_dataclass(CohortOptions(), split_namespace(values, "cohort"), "cohort.")
        train_values = split_namespace(values, "train")
        raw_dims = train_values.pop("group_dims", None)
        train_config = update_dataclass(TrainConfig(), train_values, "train.")
        group_dims = parse_group_dims(raw_dims) if raw_dims is not None else {"male": 2, "female": 3}

        for key in values:
            if key.startswith("group."):
                name = key.split(".")[1]
                if name not in cohort.groups:
                    raise ConfigError(f"unknown config key '{key}': group '{name}' is not in cohort.groups")

        defaults = default_group_configs()
        shared = split_namespace(values, "dgp")
        dgp = {}
        for name in cohort.groups:
            base = update_dataclass(defaults.get(name, DGPConfig()), shared, "dgp.")
            dgp[name] = update_dataclass(base, split_namespace(values, f"group.{name}"), f"group.{name}.")

        return cls(
            cohort=cohort,
            template=update_dataclass(TemplateSpec(), split_namespace(values, "template"), "template."),
            dgp=dgp,
            train=train_config,
            group_dims=group_dims,
            run=update_dataclass(RunOptions(), split_namespace(values, "run"), "run."),
        )

    def dims_for(self, group: str) -> int:
        return self.group_dims.get(group, self.train.d)

    def validate(self) -> "RunConfig":
        groups = self.cohort.groups
        if not groups:
            raise ConfigError("cohort.groups must name at least one group")
        if len(set(groups)) != len(groups):
            raise ConfigError(f"duplicate names in cohort.groups: {format_value(groups)}")
        self.template.validate()
        for config in self.dgp.values():
            config.validate()
        self.train.validate()
        run = self.run
        unknown = [a for a in run.analyses if a not in ANALYSES]
        if unknown:
            raise ConfigError(f"unknown analyses in run.analyses: {', '.join(unknown)}")
        if run.seed < 0:
            raise ConfigError(f"run.seed must be >= 0, got {run.seed}")
        if run.bootstrap < 100:
            raise ConfigError(f"run.bootstrap must be >= 100, got {run.bootstrap}")
        if run.lasso_folds < 2:
            raise ConfigError(f"run.lasso_folds must be >= 2, got {run.lasso_folds}")
        if run.lasso_lambdas < 2:
            raise ConfigError(f"run.lasso_lambdas must be >= 2, got {run.lasso_lambdas}")
        if any(d < 1 for d in run.sweep_dims):
            raise ConfigError("run.sweep_dims must be positive")
        if run.n_jobs == 0:
            raise ConfigError("run.n_jobs must be nonzero")
        if run.quantile_degree < 0:
            raise ConfigError("run.quantile_degree must be >= 0")
        if run.grid_points < 2:
            raise ConfigError("run.grid_points must be >= 2")
        for name, d in self.group_dims.items():
            if d < 1:
                raise ConfigError(f"train.group_dims: {name} needs d >= 1, got {d}")
        return self

    def conf_lines(self) -> List[str]:
        lines = to_conf_lines(self.cohort, "cohort")
        lines += to_conf_lines(self.template, "template")
        for name, config in self.dgp.items():
            lines += to_conf_lines(config, f"group.{name}")
        lines += to_conf_lines(self.train, "train")
        lines.append("train.group_dims=" + ",".join(f"{g}:{d}" for g, d in self.group_dims.items()))
        lines += to_conf_lines(self.run, "run")
        return lines


def load_run_config(path: Optional[Union[str, Path]] = None, seed: Optional[int] = None) -> RunConfig:
    """Defaults, then the config file, then the --seed override"""
    values = read_conf(path) if path else {}
    config = RunConfig.from_values(values)
    if seed is not None:
        config.run = replace(config.run, seed=seed)
    return config.validate()


def stream_seed(seed: int, label: str) -> int:
    """Independent, reproducible seed for one named estimation"""
    return int(np.random.SeedSequence([seed, zlib.crc32(label.encode("utf-8"))]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Design helpers
# ---------------------------------------------------------------------------

def controls(frame: pd.DataFrame) -> DesignMatrix:
    """Intercept, schooling, experience, children, race, occupation and marital status"""
    return DesignMatrix.from_frame(frame, CONTROL_NUMERIC, CONTROL_CATEGORICAL, intercept=True,
                                   min_count=MIN_LEVEL_COUNT)


def columns(frame: pd.DataFrame, names: Sequence[str], standardize: bool = False) -> DesignMatrix:
    data = {}
    for name in names:
        values = frame[name].to_numpy(dtype=np.float64)
        if standardize:
            sd = values.std(ddof=1)
            values = (values - values.mean()) / (sd if sd > 0 else 1.0)
        data[name] = values
    return DesignMatrix.from_columns(data, intercept=False, n=len(frame))


def embedding_columns(frame: pd.DataFrame) -> List[str]:
    return sorted((c for c in frame.columns if c.startswith("P") and c[1:].isdigit()), key=lambda c: int(c[1:]))


def alignment_frame(alignment: Alignment) -> pd.DataFrame:
    return pd.DataFrame({
        "position": np.arange(1, len(alignment.permutation) + 1),
        "component": alignment.permutation + 1,
        "sign": alignment.signs[alignment.permutation],
        "measure": list(alignment.measure_names),
        "correlation": alignment.correlations,
    })


def alignment_from_frame(frame: pd.DataFrame) -> Alignment:
    frame = frame.sort_values("position")
    permutation = frame["component"].to_numpy(dtype=np.int64) - 1
    signs = np.ones(len(frame))
    signs[permutation] = frame["sign"].to_numpy(dtype=np.float64)
    return Alignment(permutation, signs, tuple(frame["measure"].astype(str)),
                     frame["correlation"].to_numpy(dtype=np.float64))


# ---------------------------------------------------------------------------
# Suite
# ---------------------------------------------------------------------------

class ReplicationSuite:
    """Every stage reads its inputs from and writes its outputs to ``out``"""

    def __init__(self, config: RunConfig, out: Union[str, Path], verbose: bool = True):
        self.config = config
        self.out = Path(out)
        self.verbose = verbose
        self.bundle = ReportBundle.open(self.out, ANALYSES)
        for name in ANALYSES:
            if not self.enabled(name):
                self.bundle.set_status(name, "disabled")
        self._frames: Optional[Dict[str, pd.DataFrame]] = None
        self._embeddings: Dict[str, pd.DataFrame] = {}

    # -- plumbing ----------------------------------------------------------

    def say(self, message: str) -> None:
        if self.verbose:
            print(message, file=sys.stderr)

    def enabled(self, analysis: str) -> bool:
        return analysis in self.config.run.analyses

    @property
    def groups(self) -> Tuple[str, ...]:
        return self.config.cohort.groups

    def seed_for(self, label: str) -> int:
        return stream_seed(self.config.run.seed, label)

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def run_stage(self, stage: str, fn: Callable[[], None], analysis: Optional[str] = None) -> None:
        """Run one stage; on failure mark it, keep the partial manifest and re-raise"""
        self.say(f"\n🔬 Running {stage}...")
        self.say("=" * 40)
        start = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                fn()
            except (ReplicationError, OSError) as e:
                self.mark_failed(stage, analysis, e)
                raise
            except LIBRARY_NUMERICAL_ERRORS + LIBRARY_DATA_ERRORS as e:
                error = as_replication_error(e)
                self.mark_failed(stage, analysis, error)
                raise error from e
        for w in caught:
            self.say(f"⚠️  {w.category.__name__}: {w.message}")
        if analysis is not None:
            self.bundle.set_status(analysis, "ok")
        self.say(f"✅ {stage} completed in {time.perf_counter() - start:.1f}s")

    def mark_failed(self, stage: str, analysis: Optional[str], error: BaseException) -> None:
        error.stage = stage
        if analysis is not None:
            self.bundle.set_status(analysis, f"failed: {stage}")
        self.bundle.write_manifest()

    def write_run_conf(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        self.path(RUN_CONF).write_text("\n".join(self.config.conf_lines()) + "\n", encoding="utf-8")

    def finish(self) -> ReportBundle:
        self.write_run_conf()
        path = self.bundle.write_manifest()
        self.say(f"\n📁 Results saved to: {self.out}")
        self.say(f"   Manifest: {path.name} ({len(self.bundle.files())} files)")
        return self.bundle

    def frames(self) -> Dict[str, pd.DataFrame]:
        """Per-group analysis frames, read back from cohort.csv"""
        if self._frames is None:
            cohort = read_cohort(self.out, load_meshes=False)
            self._frames = {g: add_analysis_columns(cohort.group(g).frame) for g in self.groups}
        return self._frames

    def embedded_frame(self, group: str) -> pd.DataFrame:
        """Group frame joined with its aligned, standardized embedding (P1..Pd)"""
        if group not in self._embeddings:
            emb_path = self.path(EMBED_DIR, f"embedding_{group}.csv")
            align_path = self.path(EMBED_DIR, f"alignment_{group}.csv")
            if not emb_path.exists() or not align_path.exists():
                raise DataError(f"no embeddings for group '{group}' at {emb_path}; run encode first")
            emb = pd.read_csv(emb_path, float_precision="round_trip")
            alignment = alignment_from_frame(pd.read_csv(align_path, float_precision="round_trip"))
            names = embedding_columns(emb)
            aligned = alignment.apply(emb[names].to_numpy(dtype=np.float64))
            aligned_frame = pd.DataFrame(aligned, columns=[f"P{k + 1}" for k in range(aligned.shape[1])])
            aligned_frame.insert(0, "id", emb["id"].to_numpy())
            frame = self.frames()[group]
            merged = frame.merge(aligned_frame, on="id", how="inner", validate="one_to_one")
            if len(merged) != len(frame):
                raise DataError(f"embeddings for group '{group}' cover {len(merged)} of {len(frame)} subjects")
            self._embeddings[group] = merged
        return self._embeddings[group]

    def bootstrap_ols(self, X: DesignMatrix, y: np.ndarray, label: str):
        run = self.config.run
        return ols_bootstrap(X, y, run.bootstrap, self.seed_for(label), run.n_jobs)

    # -- synth -------------------------------------------------------------

    def synthesize(self) -> None:
        config = self.config
        self.say(f"📊 {config.cohort.n_per_group} subjects per group, groups: {', '.join(self.groups)}")
        cohort = sample_groups(config.cohort.n_per_group, {g: config.dgp[g] for g in self.groups},
                               config.run.seed, config.template)
        written = write_cohort(cohort, self.out)
        self._frames = None
        self.say(f"✅ Wrote {len(written)} cohort files")

    def summary(self) -> None:
        frame = add_analysis_columns(read_cohort(self.out, load_meshes=False).frame)
        blocks = [("all", frame)] + [(g, frame[frame["group"] == g]) for g in self.groups]
        tables, shares = [], []
        for label, block in blocks:
            table = summary_statistics(block, SUMMARY_VARIABLES)
            table.insert(0, "group", label)
            tables.append(table)
            share = category_shares(block, tuple(CATEGORICAL_LEVELS))
            share.insert(0, "group", label)
            shares.append(share)
        write_csv(stack_tables(tables), self.path("summary.csv"))
        write_csv(stack_tables(shares), self.path("summary_categorical.csv"))

    # -- train / encode ----------------------------------------------------

    def train_models(self) -> None:
        cohort = read_cohort(self.out)
        if cohort.vertices is None:
            raise DataError(f"cohort at {self.out} has no meshes")
        run = self.config.run
        for group in self.groups:
            arm = cohort.group(group)
            x = dataset_matrix(arm.vertices)
            train_config = replace(self.config.train, d=self.config.dims_for(group),
                                   seed=self.config.train.seed + run.seed)
            self.say(f"🧠 Training {group}: {len(x)} meshes, d={train_config.d}")
            model, history = train(x, train_config, verbose=self.verbose)
            embed_cohort(model, x, arm.ids)
            model_path = self.path(MODEL_DIR, f"gae_{group}.gae")
            model_path.parent.mkdir(parents=True, exist_ok=True)
            save_model(model, model_path)
            write_csv(history.to_frame(), self.path(TRAIN_DIR, f"history_{group}.csv"))

    def sweep(self) -> None:
        run = self.config.run
        if not run.sweep_dims:
            self.say("⚠️  run.sweep_dims is empty, skipping dimension sweeps")
            return
        cohort = read_cohort(self.out)
        scopes = [(g, cohort.group(g).vertices) for g in self.groups]
        if len(self.groups) > 1:
            scopes.append(("pooled", cohort.vertices))
        selection = []
        for scope, vertices in scopes:
            config = replace(self.config.train, seed=self.config.train.seed + run.seed)
            frame = dim_sweep(dataset_matrix(vertices), run.sweep_dims, config, run.n_jobs, self.verbose)
            write_csv(frame, self.path(TRAIN_DIR, f"sweep_{scope}.csv"))
            best = int(frame.loc[frame["val_mse"].idxmin(), "d"])
            selection.append({"scope": scope, "best_d": best})
            self.say(f"📊 {scope}: validation MSE is lowest at d={best}")
        write_csv(pd.DataFrame(selection), self.path(TRAIN_DIR, "sweep_selection.csv"))

    def encode(self) -> None:
        cohort = read_cohort(self.out)
        if cohort.vertices is None:
            raise DataError(f"cohort at {self.out} has no meshes")
        for group in self.groups:
            model_path = self.path(MODEL_DIR, f"gae_{group}.gae")
            if not model_path.exists():
                raise DataError(f"no model for group '{group}' at {model_path}; run train first")
            model = load_model(model_path)
            arm = cohort.group(group)
            embedding = embed_cohort(model, dataset_matrix(arm.vertices), arm.ids, use_model_constants=True)
            measures = add_analysis_columns(arm.frame)[list(ALIGN_MEASURES)]
            alignment = align_components(embedding.standardized, measures)
            write_csv(embedding.to_frame(), self.path(EMBED_DIR, f"embedding_{group}.csv"))
            write_csv(alignment_frame(alignment), self.path(EMBED_DIR, f"alignment_{group}.csv"))
            pairs = ", ".join(f"P{k + 1}~{m} ({r:+.2f})"
                              for k, (m, r) in enumerate(zip(alignment.measure_names, alignment.correlations)))
            self.say(f"✅ {group}: {pairs}")
        self._embeddings = {}

    # -- analyses ----------------------------------------------------------

    def analysis_reporting_errors(self) -> None:
        run = self.config.run
        for group, frame in self.frames().items():
            dgp = self.config.dgp[group]
            height_X = DesignMatrix.from_columns({"log_income": frame["log_income"], "age_sq": frame["age_sq"]})
            weight_X = DesignMatrix.from_columns({"weight": frame["weight"], "fitness": frame["fitness"]})
            height_fit = self.bootstrap_ols(height_X, frame["height_error"], f"{group}/height_error")
            weight_fit = self.bootstrap_ols(weight_X, frame["weight_error"], f"{group}/weight_error")
            write_csv(stack_tables([regression_table(height_fit, "height_error"),
                                    regression_table(weight_fit, "weight_error")]),
                      self.path(TABLE_DIR, f"reporting_errors_{group}.csv"))

            truth = {
                "height_error": (height_fit, {"Intercept": dgp.height_err_0, "log_income": dgp.height_err_income,
                                              "age_sq": dgp.height_err_age_sq}),
                "weight_error": (weight_fit, {"Intercept": dgp.weight_err_0, "weight": dgp.weight_err_weight,
                                              "fitness": dgp.weight_err_fitness}),
            }
            rows = []
            for model, (fit, values) in truth.items():
                for name, value in values.items():
                    estimate, se = fit.coef(name), fit.se_of(name)
                    rows.append({"model": model, "variable": name, "truth": value, "estimate": estimate,
                                 "se": se, "within_3se": bool(abs(estimate - value) <= 3 * se)})
            write_csv(pd.DataFrame(rows), self.path(TABLE_DIR, f"reporting_truth_{group}.csv"))

            for error, regressor in (("height_error", "height"), ("weight_error", "weight")):
                x = frame[regressor].to_numpy(dtype=np.float64)
                y = frame[error].to_numpy(dtype=np.float64)
                grid = np.linspace(np.quantile(x, 0.02), np.quantile(x, 0.98), run.grid_points)
                bands = kernel_regression_bands(x, y, grid, B=run.bootstrap,
                                                seed=self.seed_for(f"{group}/kernel/{error}"), n_jobs=run.n_jobs)
                write_csv(bands, self.path(CURVE_DIR, f"kernel_{error}_{group}.csv"))
                fan = quantile_fan(x, y, QUANTILES, run.quantile_degree, grid)
                write_csv(fan, self.path(CURVE_DIR, f"quantile_{error}_{group}.csv"))
                if error == "weight_error":
                    crossings = zero_crossings(bands["grid"], bands["estimate"])
                    write_csv(pd.DataFrame([{
                        "group": group,
                        "dgp_crossing": dgp.weight_error_crossing(float(frame["fitness"].mean())),
                        "estimated_crossing": crossings[0] if len(crossings) else np.nan,
                        "n_crossings": len(crossings),
                    }]), self.path(TABLE_DIR, f"reporting_crossing_{group}.csv"))

    def _income_models(self, name: str, specs: Sequence[Tuple[str, Sequence[str]]]) -> None:
        for group, frame in self.frames().items():
            X = controls(frame)
            y = frame["log_income"].to_numpy(dtype=np.float64)
            tables = []
            for label, regressors in specs:
                fit = self.bootstrap_ols(X.hstack(columns(frame, regressors)), y, f"{group}/{name}/{label}")
                tables.append(regression_table(fit, label))
            write_csv(stack_tables(tables), self.path(TABLE_DIR, f"income_{name}_{group}.csv"))

    def analysis_height_weight(self) -> None:
        self._income_models("height_weight", (
            ("reported_height", ("reported_height",)),
            ("measured_height", ("height",)),
            ("reported_height_weight", ("reported_height", "reported_weight")),
            ("measured_height_weight", ("height", "weight")),
        ))

    def analysis_bmi(self) -> None:
        self._income_models("bmi", (
            ("reported_bmi", ("reported_bmi",)),
            ("measured_bmi", ("bmi",)),
            ("reported_height_bmi", ("reported_height", "reported_bmi")),
            ("measured_height_bmi", ("height", "bmi")),
        ))

    def analysis_body_measures(self) -> None:
        self._income_models("body_measures", (
            ("body_measures", MEASURE_NAMES),
            ("height_bmi_hip_waist", ("height", "bmi", "hip_waist_ratio")),
        ))

    def analysis_lasso(self) -> None:
        run = self.config.run
        for group, frame in self.frames().items():
            X = controls(frame)
            y = frame["log_income"].to_numpy(dtype=np.float64)
            body = build_interactions(columns(frame, MEASURE_NAMES, standardize=True))
            # controls stay unpenalized: the Lasso runs on their residuals
            body_res = DesignMatrix(partial_out(X, body.values), body.names)
            y_res = partial_out(X, y)
            result = lasso_cv(body_res, y_res, lambda_grid(body_res, y_res, n=run.lasso_lambdas),
                              k=run.lasso_folds, seed=self.seed_for(f"{group}/lasso"))
            write_csv(result.cv_frame(), self.path(LASSO_DIR, f"cv_{group}.csv"))
            active = result.active_set
            n_active = result.path.n_active()
            write_csv(pd.DataFrame([{
                "lambda_min": result.lambda_min,
                "lambda_1se": result.lambda_1se,
                "n_active_min": int(n_active[result.index_min]),
                "n_active_1se": int(n_active[result.index_1se]),
                "r2_1se": lasso_r2(result.fit_1se, body_res, y_res),
                "selected": ";".join(active),
            }]), self.path(LASSO_DIR, f"selection_{group}.csv"))
            fit = post_lasso(body, y, active, controls=X, B=run.bootstrap,
                             seed=self.seed_for(f"{group}/post_lasso"), n_jobs=run.n_jobs)
            write_csv(regression_table(fit, "post_lasso"), self.path(TABLE_DIR, f"post_lasso_{group}.csv"))
            self.say(f"📊 {group}: {len(active)} of {body.p} body terms kept at lambda_1se")

    def analysis_embedding(self) -> None:
        for group in self.groups:
            frame = self.embedded_frame(group)
            P = embedding_columns(frame)
            y = frame["log_income"].to_numpy(dtype=np.float64)
            fit = self.bootstrap_ols(controls(frame).hstack(columns(frame, P)), y, f"{group}/embedding")
            write_csv(regression_table(fit, "embedding"), self.path(TABLE_DIR, f"income_embedding_{group}.csv"))

            rows = []
            for component in P:
                design = DesignMatrix.from_columns({component: frame[component]})
                for measure in FIT_MEASURES:
                    line = ols_fit(design, frame[measure])
                    rows.append({"component": component, "measure": measure, "intercept": line.coefficients[0],
                                 "slope": line.coefficients[1], "r2": line.r2, "n": line.n})
            write_csv(pd.DataFrame(rows), self.path(TABLE_DIR, f"embedding_measure_fits_{group}.csv"))

            latents = frame[["s", "o", "w"]].to_numpy(dtype=np.float64)
            r2 = latent_recovery_r2(frame[P].to_numpy(dtype=np.float64), latents)
            write_csv(pd.DataFrame({"latent": ["s", "o", "w"], "r2": r2}),
                      self.path(EMBED_DIR, f"latent_recovery_{group}.csv"))

            if "P3" in P:
                predict = ols_fit(DesignMatrix.from_columns({m: frame[m] for m in MEASURE_NAMES}), frame["P3"])
                write_csv(regression_table(predict, "P3_from_measures"),
                          self.path(TABLE_DIR, f"p3_from_measures_{group}.csv"))

    def analysis_proxy(self) -> None:
        for group in self.groups:
            frame = self.embedded_frame(group)
            X = controls(frame)
            y = frame["log_income"].to_numpy(dtype=np.float64)
            features = columns(frame, embedding_columns(frame))
            blocks = []
            for name, kind in PROXY_BLOCKS:
                numeric, categorical = ((name,), ()) if kind == "numeric" else ((), (name,))
                blocks.append((name, DesignMatrix.from_frame(frame, numeric, categorical, intercept=False,
                                                             min_count=MIN_LEVEL_COUNT)))
            run = self.config.run
            tables = [regression_table(proxy_ols(y, X, None, features, run.bootstrap,
                                                 self.seed_for(f"{group}/proxy/none"), run.n_jobs), "none")]
            for label, proxies in nested_proxy_sets(blocks):
                fit = proxy_ols(y, X, proxies, features, run.bootstrap, self.seed_for(f"{group}/proxy/{label}"),
                                run.n_jobs)
                tables.append(regression_table(fit, label))
            write_csv(stack_tables(tables), self.path(TABLE_DIR, f"proxy_{group}.csv"))

    def analysis_control_function(self) -> None:
        run = self.config.run
        for group in self.groups:
            frame = self.embedded_frame(group)
            P = embedding_columns(frame)
            X = controls(frame)
            y = frame["log_income"].to_numpy(dtype=np.float64)
            endogenous = frame["P1"].to_numpy(dtype=np.float64)
            others = columns(frame, P[1:]) if len(P) > 1 else None
            instruments = DesignMatrix.from_columns({
                f"{stem}_resid": residual_instrument(frame[size], frame[anchor])
                for size, anchor, stem in SIZE_ANCHORS
            }, intercept=False)

            cf = control_function(y, X, endogenous, others, instruments, run.bootstrap,
                                  self.seed_for(f"{group}/control_function"), run.n_jobs, endogenous_name="P1")
            oracle = two_sls_oracle(y, X.hstack(others), endogenous, instruments, ("P1",))
            naive = ols_fit(X.hstack(columns(frame, ["P1"]), others), y)

            write_csv(regression_table(cf.first_stage.regression, "first_stage"),
                      self.path(TABLE_DIR, f"first_stage_{group}.csv"))
            write_csv(regression_table(cf.second_stage, "control_function"),
                      self.path(TABLE_DIR, f"control_function_{group}.csv"))
            write_csv(pd.DataFrame([{
                "group": group,
                "endogenous_feature": cf.endogenous_name,
                "beta_cf": cf.beta,
                "beta_2sls": float(oracle["P1"]),
                "beta_ols": naive.coef("P1"),
                "pi": cf.pi,
                "pi_se": cf.pi_se,
                "pi_t": cf.pi_t,
                "pi_pvalue": cf.pi_pvalue,
                "verdict": cf.verdict(),
                "first_stage_f": cf.first_stage.f_stat,
                "first_stage_f_pvalue": cf.first_stage.f_pvalue,
                "weak_instruments": cf.weak_instruments,
            }]), self.path(TABLE_DIR, f"cf_summary_{group}.csv"))
            self.say(f"📊 {group}: P1 {cf.verdict()} (pi t = {cf.pi_t:.2f}, first-stage F = {cf.first_stage.f_stat:.1f})")

    def analysis_comparison(self) -> None:
        rows = []
        for group in self.groups:
            frame = self.embedded_frame(group)
            X = controls(frame)
            y = frame["log_income"].to_numpy(dtype=np.float64)
            conventional = self.bootstrap_ols(X.hstack(columns(frame, ("height", "bmi"), standardize=True)), y,
                                              f"{group}/comparison/conventional")
            for feature in ("height", "bmi"):
                rows.append(band_row("conventional", feature, conventional, feature, group=group))
            P = embedding_columns(frame)
            learned = self.bootstrap_ols(X.hstack(columns(frame, P)), y, f"{group}/comparison/learned")
            for feature in P:
                rows.append(band_row("deep-learned", feature, learned, feature, group=group))
        write_csv(pd.DataFrame(rows), self.path("comparison.csv"))

    # -- commands ----------------------------------------------------------

    def run_synth(self) -> None:
        self.run_stage("synth", self.synthesize)
        if self.enabled("summary"):
            self.run_stage("summary", self.summary, analysis="summary")

    def run_train(self) -> None:
        self.run_stage("train", self.train_models)
        if self.enabled("autoencoder"):
            self.run_stage("dimension sweep", self.sweep, analysis="autoencoder")

    def run_encode(self) -> None:
        self.run_stage("encode", self.encode)

    def run_regress(self) -> None:
        for analysis in REGRESSION_ANALYSES:
            if self.enabled(analysis):
                self.run_stage(analysis, getattr(self, f"analysis_{analysis}"), analysis=analysis)

    def run_replicate(self) -> None:
        if not any(self.enabled(a) for a in ANALYSES):
            self.say("⚠️  No analyses enabled; writing an empty manifest")
            return
        self.run_synth()
        if any(self.enabled(a) for a in ("autoencoder", *EMBEDDING_ANALYSES)):
            self.run_train()
            self.run_encode()
        self.run_regress()


def cmd_synth(config: RunConfig, out: Union[str, Path], verbose: bool = True) -> ReportBundle:
    suite = ReplicationSuite(config, out, verbose)
    suite.run_synth()
    return suite.finish()


def cmd_train(config: RunConfig, out: Union[str, Path], verbose: bool = True) -> ReportBundle:
    suite = ReplicationSuite(config, out, verbose)
    suite.run_train()
    return suite.finish()


def cmd_encode(config: RunConfig, out: Union[str, Path], verbose: bool = True) -> ReportBundle:
    suite = ReplicationSuite(config, out, verbose)
    suite.run_encode()
    return suite.finish()


def cmd_regress(config: RunConfig, out: Union[str, Path], verbose: bool = True) -> ReportBundle:
    suite = ReplicationSuite(config, out, verbose)
    suite.run_regress()
    return suite.finish()


def cmd_replicate(config: RunConfig, out: Union[str, Path], verbose: bool = True) -> ReportBundle:
    suite = ReplicationSuite(config, out, verbose)
    suite.run_replicate()
    return suite.finish()


COMMANDS = {
    "synth": (cmd_synth, "Generate a synthetic cohort with summary tables"),
    "train": (cmd_train, "Train one graphical autoencoder per group"),
    "encode": (cmd_encode, "Embed the cohort with the trained models"),
    "regress": (cmd_regress, "Run the regression analyses on cohort + embeddings"),
    "replicate": (cmd_replicate, "Run every stage into one bundle"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Body shape and income replication on synthetic cohorts")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", default=os.getenv("REPLICATION_CONFIG"),
                         help="key=value config file (default: built-in defaults)")
        cmd.add_argument("--out", default=os.getenv("REPLICATION_OUT", "results"), help="Bundle directory")
        cmd.add_argument("--seed", type=int, default=None, help="Overrides run.seed")
        cmd.add_argument("--quiet", action="store_true", help="No status output")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    verbose = not args.quiet

    if verbose:
        print(f"🚀 Body Shape Replication: {args.command}", file=sys.stderr)
        print("=" * 60, file=sys.stderr)

    try:
        try:
            config = load_run_config(args.config, args.seed)
        except ReplicationError as e:
            e.stage = "config"
            raise
        COMMANDS[args.command][0](config, args.out, verbose)
    except ReplicationError as e:
        print(f"❌ {getattr(e, 'stage', args.command)}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"❌ {getattr(e, 'stage', args.command)}: {e}", file=sys.stderr)
        return DataError.exit_code
    except LIBRARY_NUMERICAL_ERRORS + LIBRARY_DATA_ERRORS as e:
        error = as_replication_error(e)
        print(f"❌ {args.command}: {error}", file=sys.stderr)
        return error.exit_code

    if verbose:
        print(f"\n🎉 {args.command} complete!", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
