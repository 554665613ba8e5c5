"""
Synthetic cohort generator.

Each subject gets latent body factors, a registered mesh, tape measures read
off the mesh, demographics, a log-income drawn from a linear income equation
and self-reported height/weight with systematic reporting errors.

Ability is a hidden confounder: it loads on stature (kappa) and on the income
error (lambda_a), so naive OLS of income on stature is biased by a known
amount. Reported garment and shoe sizes carry independent size preferences
that also move stature, which is what makes them usable as instruments.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd

from body_mesh import (
    BodyMeasures,
    LatentBody,
    MEASURE_NAMES,
    RegisteredMesh,
    TemplateSpec,
    cylinder_faces,
    derive_measures,
    mesh_from_latents,
    read_off,
    write_off,
)
from config import (
    check_known_namespaces,
    format_value,
    read_conf,
    require_finite,
    split_namespace,
    to_conf_lines,
    update_dataclass,
)
from errors import ConfigError, DataError

# Category levels; the first level of each is the regression reference
RACES = ("White", "Hispanic", "Black", "Asian")
RACE_P = (0.83, 0.02, 0.09, 0.06)
OCCUPATIONS = ("White Collar", "Management", "Blue Collar", "Service")
OCCUPATION_P = (0.60, 0.19, 0.13, 0.08)
MARITAL = ("Single", "Married", "Div-Wid")
MARITAL_P = (0.31, 0.61, 0.08)
BIRTH_REGIONS = ("Midwest", "Northeast", "South", "West", "Foreign")
BIRTH_REGION_P = (0.36, 0.14, 0.14, 0.16, 0.20)
CAR_SIZES = ("Sedan", "Non-sedan")
CAR_SIZE_P = (0.55, 0.45)
SURVEY_SITES = tuple(f"site_{i:02d}" for i in range(1, 13))
EDUCATION_YEARS = (12, 13, 14, 16, 18, 20, 24)
EDUCATION_P = (0.22, 0.10, 0.12, 0.30, 0.16, 0.06, 0.04)

CATEGORICAL_LEVELS = {
    "race": RACES,
    "occupation": OCCUPATIONS,
    "marital": MARITAL,
    "birth_region": BIRTH_REGIONS,
    "car_size": CAR_SIZES,
    "survey_site": SURVEY_SITES,
}

# Class midpoints (dollars) of the ten grouped income brackets
INCOME_CLASS_MIDPOINTS = (7500.0, 17500.0, 30000.0, 42500.0, 52500.0,
                          62500.0, 70000.0, 87500.0, 112500.0, 150000.0)

# (size column, anchor measure, DGPConfig field stem)
SIZE_ANCHORS = (
    ("shoe_size", "foot_length", "shoe"),
    ("jacket_size", "chest_circ", "jacket"),
    ("pants_size", "waist_circ", "pants"),
)


@dataclass(frozen=True)
class DGPConfig:
    """Coefficients of the data-generating process"""
    # stature = kappa * ability + u_s, sd(u_s) = sigma_u
    kappa: float = 0.6
    sigma_u: float = 0.8
    w_sd: float = 1.0

    # structural log-income equation
    alpha_0: float = 10.0
    alpha_education: float = 0.08
    alpha_experience: float = 0.03
    alpha_experience_sq: float = -0.0005
    alpha_married: float = 0.35
    alpha_management: float = 0.2
    alpha_blue_collar: float = -0.2
    alpha_service: float = -0.3
    beta_1: float = 0.06
    beta_2: float = -0.04
    beta_3: float = 0.02
    lambda_a: float = 0.25
    sigma_eps: float = 0.45
    income_classes: bool = False

    # size preferences: loadings on stature and reported-size equations
    gamma_shoe: float = 0.35
    gamma_jacket: float = 0.30
    gamma_pants: float = 0.25
    shoe_intercept: float = 0.0
    shoe_slope: float = 0.08
    shoe_noise: float = 0.5
    jacket_intercept: float = 0.0
    jacket_slope: float = 0.05
    jacket_noise: float = 1.0
    pants_intercept: float = 0.0
    pants_slope: float = 0.04
    pants_noise: float = 1.0

    # height reporting error (mm)
    height_err_0: float = 60.0
    height_err_income: float = -4.0
    height_err_age_sq: float = 0.004
    height_err_sd: float = 15.0

    # weight reporting error (kg)
    weight_err_0: float = 4.0
    weight_err_weight: float = -0.05
    weight_err_fitness: float = -0.1
    weight_err_sd: float = 2.0

    mesh_noise_sd: float = 1.0
    density: float = 985.0

    def validate(self) -> "DGPConfig":
        require_finite(self, "dgp")
        for name in ("sigma_u", "w_sd", "sigma_eps", "height_err_sd", "weight_err_sd", "mesh_noise_sd"):
            if getattr(self, name) < 0:
                raise ConfigError(f"dgp.{name} must be >= 0, got {getattr(self, name)}")
        for stem in ("shoe", "jacket", "pants"):
            if getattr(self, f"{stem}_noise") <= 0:
                raise ConfigError(f"dgp.{stem}_noise must be > 0")
        if self.density <= 0:
            raise ConfigError(f"dgp.density must be > 0, got {self.density}")
        if self.instrument_variance > self.sigma_u ** 2 + 1e-12:
            raise ConfigError(
                f"size loadings explain more stature variance ({self.instrument_variance:.4f}) "
                f"than sigma_u^2 ({self.sigma_u ** 2:.4f})"
            )
        return self

    @property
    def gammas(self) -> Tuple[float, float, float]:
        return (self.gamma_shoe, self.gamma_jacket, self.gamma_pants)

    @property
    def instrument_variance(self) -> float:
        return float(sum(g * g for g in self.gammas))

    def stature_ability_corr(self) -> float:
        denom = math.sqrt(self.kappa ** 2 + self.sigma_u ** 2)
        return self.kappa / denom if denom > 0 else 0.0

    def omitted_variable_bias(self) -> float:
        """Probability limit of (OLS beta_1 - beta_1) when ability is omitted"""
        denom = self.kappa ** 2 + self.sigma_u ** 2
        return self.lambda_a * self.kappa / denom if denom > 0 else 0.0

    def first_stage_truth(self) -> Tuple[float, float, float]:
        """Population coefficients of stature on the three residual instruments"""
        return tuple(g / getattr(self, f"{stem}_noise") for g, (_, _, stem) in zip(self.gammas, SIZE_ANCHORS))

    def weight_error_crossing(self, mean_fitness: float) -> float:
        """True weight (kg) at which the expected weight reporting error is zero"""
        if self.weight_err_weight == 0:
            raise ConfigError("weight error has no slope in true weight; no crossing point")
        return -(self.weight_err_0 + self.weight_err_fitness * mean_fitness) / self.weight_err_weight


def default_group_configs() -> Dict[str, DGPConfig]:
    """Two arms: one with exogenous stature and a weak third factor, one with both active"""
    return {
        "male": DGPConfig(kappa=0.0, w_sd=0.2),
        "female": DGPConfig(kappa=0.6, w_sd=1.0),
    }


@dataclass
class SubjectRecord:
    id: int
    group: str
    latent: LatentBody
    measures: BodyMeasures
    reported_height: float
    reported_weight: float
    log_income: float
    income: float
    education: int
    experience: float
    age: float
    fitness: float
    race: str
    occupation: str
    marital: str
    birth_region: str
    car_size: str
    survey_site: str
    n_children: int
    shoe_size: float
    jacket_size: float
    pants_size: float
    ability: float
    z_shoe: float = 0.0
    z_jacket: float = 0.0
    z_pants: float = 0.0

    def to_row(self) -> Dict[str, object]:
        row: Dict[str, object] = {"id": self.id, "group": self.group,
                                  "s": self.latent.s, "o": self.latent.o, "w": self.latent.w}
        row.update(self.measures.as_dict())
        for name in COHORT_COLUMNS[5 + len(MEASURE_NAMES):]:
            row[name] = getattr(self, name)
        return row

    @classmethod
    def from_row(cls, row: Mapping[str, object]) -> "SubjectRecord":
        values = {name: row[name] for name in COHORT_COLUMNS[5 + len(MEASURE_NAMES):]}
        for name in ("education", "n_children"):
            values[name] = int(values[name])
        return cls(
            id=int(row["id"]),
            group=str(row["group"]),
            latent=LatentBody(float(row["s"]), float(row["o"]), float(row["w"])),
            measures=BodyMeasures(**{m: float(row[m]) for m in MEASURE_NAMES}),
            **values,
        )


COHORT_COLUMNS = (
    "id", "group", "s", "o", "w",
    *MEASURE_NAMES,
    "reported_height", "reported_weight", "log_income", "income",
    "education", "experience", "age", "fitness",
    "race", "occupation", "marital", "birth_region", "car_size", "survey_site",
    "n_children", "shoe_size", "jacket_size", "pants_size",
    "ability", "z_shoe", "z_jacket", "z_pants",
)
INT_COLUMNS = ("id", "education", "n_children")
STRING_COLUMNS = ("group", *CATEGORICAL_LEVELS)
COLUMN_DTYPES = {
    c: (np.int64 if c in INT_COLUMNS else str if c in STRING_COLUMNS else np.float64) for c in COHORT_COLUMNS
}


@dataclass
class Cohort:
    """Subjects as a frame (one row per subject) plus their shared-topology meshes"""
    frame: pd.DataFrame
    template: TemplateSpec
    configs: Dict[str, DGPConfig]
    seed: int
    vertices: Optional[np.ndarray] = None  # (N, V, 3) in frame row order
    n_per_group: int = 0

    @property
    def n(self) -> int:
        return len(self.frame)

    @property
    def ids(self) -> np.ndarray:
        return self.frame["id"].to_numpy()

    @property
    def faces(self) -> np.ndarray:
        return cylinder_faces(self.template.rings, self.template.segments)

    @property
    def template_info(self) -> Dict[str, int]:
        return self.template.info()

    @property
    def subjects(self) -> List[SubjectRecord]:
        return [SubjectRecord.from_row(row) for row in self.frame.to_dict("records")]

    def mesh(self, index: int) -> RegisteredMesh:
        if self.vertices is None:
            raise DataError("cohort was generated without meshes")
        return RegisteredMesh(self.vertices[index], self.faces)

    def meshes(self) -> Iterator[RegisteredMesh]:
        for i in range(self.n):
            yield self.mesh(i)

    def group(self, name: str) -> "Cohort":
        mask = (self.frame["group"] == name).to_numpy()
        if not mask.any():
            raise DataError(f"cohort has no subjects in group '{name}'")
        return Cohort(
            frame=self.frame.loc[mask].reset_index(drop=True),
            template=self.template,
            configs={name: self.configs[name]},
            seed=self.seed,
            vertices=None if self.vertices is None else self.vertices[mask],
            n_per_group=self.n_per_group,
        )

    @property
    def groups(self) -> Tuple[str, ...]:
        return tuple(self.configs)


# ---------------------------------------------------------------------------
# Data-generating process
# ---------------------------------------------------------------------------

def subject_streams(seed: int, subject_id: int) -> Tuple[np.random.Generator, ...]:
    """Independent (dgp, mesh, report) generators for one subject"""
    children = np.random.SeedSequence([int(seed), int(subject_id)]).spawn(3)
    return tuple(np.random.default_rng(child) for child in children)


def discretize_income(income: np.ndarray) -> np.ndarray:
    """Snap dollar incomes to the nearest class midpoint on the log scale"""
    mids = np.log(np.asarray(INCOME_CLASS_MIDPOINTS))
    log_income = np.log(np.asarray(income, dtype=np.float64))
    idx = np.abs(log_income[..., None] - mids).argmin(axis=-1)
    return np.asarray(INCOME_CLASS_MIDPOINTS)[idx]


def apply_reporting_errors(subject: SubjectRecord, config: DGPConfig,
                           rng: np.random.Generator) -> Tuple[float, float]:
    """Self-reported (height mm, weight kg) for a subject with true measures"""
    m = subject.measures
    eta_h = rng.normal(0.0, config.height_err_sd) if config.height_err_sd > 0 else 0.0
    eta_w = rng.normal(0.0, config.weight_err_sd) if config.weight_err_sd > 0 else 0.0
    reported_height = (m.height + config.height_err_0 + config.height_err_income * subject.log_income
                       + config.height_err_age_sq * subject.age ** 2 + eta_h)
    reported_weight = (m.weight + config.weight_err_0 + config.weight_err_weight * m.weight
                       + config.weight_err_fitness * subject.fitness + eta_w)
    return float(reported_height), float(reported_weight)


def _log_income(config: DGPConfig, latent: LatentBody, ability: float, education: int,
                experience: float, marital: str, occupation: str, eps: float) -> float:
    return (config.alpha_0
            + config.alpha_education * education
            + config.alpha_experience * experience
            + config.alpha_experience_sq * experience ** 2
            + config.alpha_married * (marital == "Married")
            + config.alpha_management * (occupation == "Management")
            + config.alpha_blue_collar * (occupation == "Blue Collar")
            + config.alpha_service * (occupation == "Service")
            + config.beta_1 * latent.s + config.beta_2 * latent.o + config.beta_3 * latent.w
            + config.lambda_a * ability
            + config.sigma_eps * eps)


def sample_subject(subject_id: int, config: DGPConfig, template: TemplateSpec, seed: int,
                   group: str = "all") -> Tuple[SubjectRecord, RegisteredMesh]:
    """Draw one subject. Only (seed, subject_id) determines the draws."""
    rng, mesh_rng, report_rng = subject_streams(seed, subject_id)

    ability = rng.standard_normal()
    z = rng.standard_normal(3)
    e_sd = math.sqrt(max(config.sigma_u ** 2 - config.instrument_variance, 0.0))
    u_s = float(np.dot(config.gammas, z)) + e_sd * rng.standard_normal()
    latent = LatentBody(
        s=config.kappa * ability + u_s,
        o=rng.standard_normal(),
        w=config.w_sd * rng.standard_normal(),
    )

    age = rng.uniform(18.0, 65.0)
    education = int(rng.choice(EDUCATION_YEARS, p=EDUCATION_P))
    experience = max(age - education - 6.0, 0.0)
    fitness = float(np.clip(2.5 * math.exp(0.6 * rng.standard_normal()), 0.5, 10.0))
    n_children = int(min(rng.poisson(1.2), 7))
    race = str(rng.choice(RACES, p=RACE_P))
    occupation = str(rng.choice(OCCUPATIONS, p=OCCUPATION_P))
    marital = str(rng.choice(MARITAL, p=MARITAL_P))
    birth_region = str(rng.choice(BIRTH_REGIONS, p=BIRTH_REGION_P))
    car_size = str(rng.choice(CAR_SIZES, p=CAR_SIZE_P))
    survey_site = str(rng.choice(SURVEY_SITES))

    log_income = _log_income(config, latent, ability, education, experience, marital, occupation,
                             rng.standard_normal())
    income = math.exp(log_income)
    if config.income_classes:
        income = float(discretize_income(np.array([income]))[0])
        log_income = math.log(income)

    mesh = mesh_from_latents(latent, template, config.mesh_noise_sd, mesh_rng)
    measures = derive_measures(mesh, template, config.density)
    sizes = {}
    for (column, anchor, stem), z_k in zip(SIZE_ANCHORS, z):
        sizes[column] = (getattr(config, f"{stem}_intercept")
                         + getattr(config, f"{stem}_slope") * getattr(measures, anchor)
                         + getattr(config, f"{stem}_noise") * z_k)

    subject = SubjectRecord(
        id=int(subject_id), group=group, latent=latent, measures=measures,
        reported_height=measures.height, reported_weight=measures.weight,
        log_income=float(log_income), income=float(income),
        education=education, experience=float(experience), age=float(age), fitness=fitness,
        race=race, occupation=occupation, marital=marital, birth_region=birth_region,
        car_size=car_size, survey_site=survey_site, n_children=n_children,
        ability=float(ability), z_shoe=float(z[0]), z_jacket=float(z[1]), z_pants=float(z[2]),
        **sizes,
    )
    subject.reported_height, subject.reported_weight = apply_reporting_errors(subject, config, report_rng)
    return subject, mesh


def _check_seed(seed: int) -> int:
    if not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    return int(seed)


def _sample_arm(n: int, config: DGPConfig, template: TemplateSpec, seed: int, group: str,
                first_id: int, keep_meshes: bool) -> Tuple[List[SubjectRecord], Optional[np.ndarray]]:
    records = []
    vertices = np.empty((n, template.n_vertices, 3)) if keep_meshes else None
    for i in range(n):
        record, mesh = sample_subject(first_id + i, config, template, seed, group)
        records.append(record)
        if keep_meshes:
            vertices[i] = mesh.vertices
    return records, vertices


def _frame(records: List[SubjectRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in records], columns=list(COHORT_COLUMNS))


def sample_cohort(n: int, config: Optional[DGPConfig] = None, seed: int = 0,
                  template: Optional[TemplateSpec] = None, keep_meshes: bool = True,
                  group: str = "all", first_id: int = 1) -> Cohort:
    """Generate ``n`` subjects from one DGP arm"""
    if n < 1:
        raise DataError("empty cohort")
    config = (config or DGPConfig()).validate()
    template = template or TemplateSpec()
    template.validate()
    seed = _check_seed(seed)
    records, vertices = _sample_arm(n, config, template, seed, group, first_id, keep_meshes)
    return Cohort(_frame(records), template, {group: config}, seed, vertices, n_per_group=n)


def sample_groups(n_per_group: int, configs: Optional[Mapping[str, DGPConfig]] = None, seed: int = 0,
                  template: Optional[TemplateSpec] = None, keep_meshes: bool = True) -> Cohort:
    """Concatenate one arm per group; subject ids are disjoint across arms"""
    if n_per_group < 1:
        raise DataError("empty cohort")
    configs = dict(configs) if configs else default_group_configs()
    template = template or TemplateSpec()
    template.validate()
    seed = _check_seed(seed)
    records: List[SubjectRecord] = []
    blocks = []
    for g, (name, config) in enumerate(configs.items()):
        arm, vertices = _sample_arm(n_per_group, config.validate(), template, seed, name,
                                    g * n_per_group + 1, keep_meshes)
        records.extend(arm)
        blocks.append(vertices)
    vertices = np.concatenate(blocks) if keep_meshes else None
    return Cohort(_frame(records), template, configs, seed, vertices, n_per_group=n_per_group)


def add_analysis_columns(frame: pd.DataFrame) -> pd.DataFrame:
    """Derived columns used by the regressions"""
    out = frame.copy()
    out["bmi"] = out["weight"] / (out["height"] / 1000.0) ** 2
    out["reported_bmi"] = out["reported_weight"] / (out["reported_height"] / 1000.0) ** 2
    out["hip_waist_ratio"] = out["hip_circ"] / out["waist_circ"] * 100.0
    out["height_error"] = out["reported_height"] - out["height"]
    out["weight_error"] = out["reported_weight"] - out["weight"]
    out["age_sq"] = out["age"] ** 2
    out["experience_sq"] = out["experience"] ** 2
    return out


# ---------------------------------------------------------------------------
# Cohort directories
# ---------------------------------------------------------------------------

COHORT_CSV = "cohort.csv"
COHORT_CONF = "cohort.conf"
MESH_DIR = "meshes"


def mesh_filename(subject_id: int) -> str:
    return f"subject_{int(subject_id):05d}.off"


def cohort_conf_lines(cohort: Cohort) -> List[str]:
    lines = [
        f"cohort.seed={cohort.seed}",
        f"cohort.n_per_group={cohort.n_per_group}",
        f"cohort.groups={format_value(cohort.groups)}",
    ]
    lines.extend(to_conf_lines(cohort.template, "template"))
    for name, config in cohort.configs.items():
        lines.extend(to_conf_lines(config, f"group.{name}"))
    return lines


def write_cohort(cohort: Cohort, directory: Union[str, Path]) -> List[Path]:
    """Write cohort.csv, cohort.conf and one OFF file per subject; returns written paths"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    csv_path = directory / COHORT_CSV
    cohort.frame.to_csv(csv_path, index=False, float_format="%.17g", lineterminator="\n")
    written.append(csv_path)
    conf_path = directory / COHORT_CONF
    conf_path.write_text("\n".join(cohort_conf_lines(cohort)) + "\n", encoding="utf-8")
    written.append(conf_path)
    if cohort.vertices is not None:
        mesh_dir = directory / MESH_DIR
        mesh_dir.mkdir(exist_ok=True)
        for i, subject_id in enumerate(cohort.ids):
            path = mesh_dir / mesh_filename(subject_id)
            write_off(cohort.mesh(i), path)
            written.append(path)
    return written


def read_cohort(directory: Union[str, Path], load_meshes: bool = True) -> Cohort:
    directory = Path(directory)
    csv_path = directory / COHORT_CSV
    if not csv_path.exists():
        raise DataError(f"no cohort found at {csv_path}")
    values = read_conf(directory / COHORT_CONF)
    check_known_namespaces(values, ("cohort", "template", "group"))
    head = split_namespace(values, "cohort")
    try:
        seed = int(head["seed"])
        n_per_group = int(head.get("n_per_group", "0"))
        groups = [g.strip() for g in head["groups"].split(",") if g.strip()]
    except (KeyError, ValueError) as e:
        raise ConfigError(f"{directory / COHORT_CONF}: bad cohort header ({e})") from e
    template = update_dataclass(TemplateSpec(), split_namespace(values, "template"), "template.")
    configs = {
        name: update_dataclass(DGPConfig(), split_namespace(values, f"group.{name}"), f"group.{name}.")
        for name in groups
    }

    frame = pd.read_csv(csv_path, dtype=COLUMN_DTYPES, float_precision="round_trip")
    missing = [c for c in COHORT_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{csv_path}: missing columns {missing}")
    frame = frame[list(COHORT_COLUMNS)]
    if frame.empty:
        raise DataError("empty cohort")

    vertices = None
    mesh_dir = directory / MESH_DIR
    if load_meshes and mesh_dir.exists():
        faces = cylinder_faces(template.rings, template.segments)
        vertices = np.empty((len(frame), template.n_vertices, 3))
        for i, subject_id in enumerate(frame["id"]):
            path = mesh_dir / mesh_filename(subject_id)
            if not path.exists():
                raise DataError(f"missing mesh {path}")
            mesh = read_off(path)
            if mesh.vertices.shape != vertices.shape[1:] or not np.array_equal(mesh.faces, faces):
                raise DataError(f"{path}: mesh is not registered to the cohort template")
            vertices[i] = mesh.vertices
    return Cohort(frame, template, configs, seed, vertices, n_per_group=n_per_group)