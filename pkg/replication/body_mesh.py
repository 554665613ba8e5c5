"""
Registered body meshes.

A synthetic body is a generalized cylinder: R rings of S vertices stacked
along z, closed by two flat cap fans. Every mesh built from the same
TemplateSpec shares vertex count and face list, so vertex index i means the
same body location for every subject (a registered mesh).

Units: vertex coordinates in millimetres, volume in cubic metres.
"""

import functools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from errors import ConfigError, DataError

SeedLike = Union[None, int, np.random.SeedSequence, np.random.Generator]


@dataclass(frozen=True)
class LatentBody:
    """Ground-truth body factors on a standard-normal scale"""
    s: float  # stature
    o: float  # obesity
    w: float  # hip-to-waist

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.s, self.o, self.w)):
            raise DataError(f"latent factors must be finite: {self}")


@dataclass
class RegisteredMesh:
    vertices: np.ndarray  # (V, 3) float64, mm
    faces: np.ndarray     # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.faces.size == 0:
            self.faces = self.faces.reshape(0, 3)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise DataError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise DataError(f"faces must be (F, 3), got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DataError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)


@dataclass(frozen=True)
class BodyMeasures:
    height: float            # mm
    weight: float            # kg
    chest_circ: float        # mm
    waist_circ: float
    hip_circ: float
    neck_circ: float
    foot_length: float
    arm_length: float
    shoulder_breadth: float

    def as_dict(self) -> Dict[str, float]:
        return dict(self.__dict__)


MEASURE_NAMES = tuple(BodyMeasures.__dataclass_fields__)


@dataclass(frozen=True)
class TemplateSpec:
    """Geometry of the generalized-cylinder body template"""
    rings: int = 24
    segments: int = 32
    height_mm: float = 1750.0
    c_s: float = 0.05
    c_o: float = 0.08
    c_w: float = 0.04
    chest_fraction: float = 0.74
    shoulder_fraction: float = 0.80
    neck_fraction: float = 0.88

    def validate(self) -> None:
        if self.rings < 8 or self.segments < 8:
            raise ConfigError(f"template needs rings >= 8 and segments >= 8, got {self.rings}x{self.segments}")
        if self.height_mm <= 0:
            raise ConfigError("template height must be positive")

    @property
    def n_vertices(self) -> int:
        return self.rings * self.segments + 2

    @property
    def ring_fractions(self) -> np.ndarray:
        return np.arange(self.rings) / (self.rings - 1)

    @property
    def hip_ring(self) -> int:
        return int(np.argmax(hip_waist_bump(self.ring_fractions)))

    @property
    def waist_ring(self) -> int:
        return int(np.argmin(hip_waist_bump(self.ring_fractions)))

    def _ring_at(self, fraction: float) -> int:
        return int(round(fraction * (self.rings - 1)))

    @property
    def chest_ring(self) -> int:
        return self._ring_at(self.chest_fraction)

    @property
    def shoulder_ring(self) -> int:
        return self._ring_at(self.shoulder_fraction)

    @property
    def neck_ring(self) -> int:
        return self._ring_at(self.neck_fraction)

    def ring_indices(self, k: int) -> np.ndarray:
        return np.arange(k * self.segments, (k + 1) * self.segments)

    def info(self) -> Dict[str, int]:
        return {
            "rings": self.rings,
            "segments": self.segments,
            "n_vertices": self.n_vertices,
            "hip_ring": self.hip_ring,
            "waist_ring": self.waist_ring,
            "chest_ring": self.chest_ring,
            "shoulder_ring": self.shoulder_ring,
            "neck_ring": self.neck_ring,
        }


def base_profile(t: np.ndarray) -> np.ndarray:
    """Baseline ring radius (mm) along the normalized body axis t in [0, 1]"""
    t = np.asarray(t, dtype=np.float64)
    return 55.0 + 105.0 * np.exp(-((t - 0.55) / 0.26) ** 2) + 40.0 * np.exp(-((t - 0.95) / 0.035) ** 2)


def hip_waist_bump(t: np.ndarray) -> np.ndarray:
    """Positive around the hips, negative around the waist"""
    t = np.asarray(t, dtype=np.float64)
    return 2.5 * (np.exp(-((t - 0.50) / 0.08) ** 2) - np.exp(-((t - 0.64) / 0.08) ** 2))


@functools.lru_cache(maxsize=8)
def cylinder_faces(rings: int, segments: int) -> np.ndarray:
    """Outward-oriented triangles for R rings x S segments plus two cap apices.

    The returned array is shared between calls and is read-only.
    """
    faces = []
    bottom = rings * segments
    top = bottom + 1
    for k in range(rings - 1):
        for j in range(segments):
            a = k * segments + j
            b = k * segments + (j + 1) % segments
            c = (k + 1) * segments + j
            d = (k + 1) * segments + (j + 1) % segments
            faces.append((a, b, d))
            faces.append((a, d, c))
    last = (rings - 1) * segments
    for j in range(segments):
        jn = (j + 1) % segments
        faces.append((bottom, jn, j))
        faces.append((top, last + j, last + jn))
    faces = np.asarray(faces, dtype=np.int64)
    faces.setflags(write=False)
    return faces


def _assemble(radii: np.ndarray, heights: np.ndarray, segments: int) -> np.ndarray:
    theta = 2.0 * np.pi * np.arange(segments) / segments
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    ring_x = radii[:, None] * cos_t[None, :]
    ring_y = radii[:, None] * sin_t[None, :]
    ring_z = np.broadcast_to(heights[:, None], ring_x.shape)
    body = np.stack([ring_x, ring_y, ring_z], axis=-1).reshape(-1, 3)
    apices = np.array([[0.0, 0.0, heights[0]], [0.0, 0.0, heights[-1]]])
    return np.vstack([body, apices])


def template_mesh(template: Optional[TemplateSpec] = None) -> RegisteredMesh:
    """The baseline body, i.e. all latent factors at zero"""
    template = template or TemplateSpec()
    template.validate()
    t = template.ring_fractions
    vertices = _assemble(base_profile(t), t * template.height_mm, template.segments)
    return RegisteredMesh(vertices, cylinder_faces(template.rings, template.segments))


def mesh_from_latents(latents: LatentBody, template: Optional[TemplateSpec] = None,
                      noise_sd: float = 0.0, seed: SeedLike = None) -> RegisteredMesh:
    """Deform the template by the latent factors, then add Gaussian vertex noise.

    Ring k sits at z_k = t_k * H0 * exp(c_s * s) and has radius
    rho0(t_k) * exp(c_o * o) * (1 + c_w * w * phi(t_k)).
    """
    template = template or TemplateSpec()
    template.validate()
    if not noise_sd >= 0:
        raise ConfigError(f"noise_sd must be >= 0, got {noise_sd}")
    t = template.ring_fractions
    heights = t * (template.height_mm * math.exp(template.c_s * latents.s))
    radii = base_profile(t) * math.exp(template.c_o * latents.o) * (1.0 + template.c_w * latents.w * hip_waist_bump(t))
    if np.any(radii <= 0):
        raise DataError(f"latent factors {latents} collapse a ring radius")
    vertices = _assemble(radii, heights, template.segments)
    if noise_sd > 0:
        rng = np.random.default_rng(seed)
        vertices = vertices + rng.normal(0.0, noise_sd, size=vertices.shape)
    return RegisteredMesh(vertices, cylinder_faces(template.rings, template.segments))


def cylinder_mesh(radius_mm: float, height_mm: float, segments: int = 64, rings: int = 2) -> RegisteredMesh:
    """Right prism with a regular polygon cross-section and flat caps"""
    heights = np.linspace(0.0, height_mm, rings)
    vertices = _assemble(np.full(rings, float(radius_mm)), heights, segments)
    return RegisteredMesh(vertices, cylinder_faces(rings, segments))


@functools.lru_cache(maxsize=16)
def _faces_closed(face_bytes: bytes) -> bool:
    f = np.frombuffer(face_bytes, dtype=np.int64).reshape(-1, 3)
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges.sort(axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def is_closed(mesh: RegisteredMesh) -> bool:
    """True when every undirected edge is shared by exactly two faces"""
    if len(mesh.faces) == 0:
        return False
    return _faces_closed(np.ascontiguousarray(mesh.faces).tobytes())


def mesh_volume(mesh: RegisteredMesh) -> float:
    """Enclosed volume in m^3 from the signed-tetrahedron sum"""
    if not is_closed(mesh):
        raise DataError("volume undefined: mesh is not closed")
    v = mesh.vertices / 1000.0
    a = v[mesh.faces[:, 0]]
    b = v[mesh.faces[:, 1]]
    c = v[mesh.faces[:, 2]]
    signed = np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0
    return abs(float(signed))


def polygon_perimeter(points: np.ndarray) -> float:
    """Length of the closed polygon through ``points`` in order"""
    points = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(points - np.roll(points, -1, axis=0), axis=1).sum())


def ring_perimeter(mesh: RegisteredMesh, template: TemplateSpec, k: int) -> float:
    return polygon_perimeter(mesh.vertices[template.ring_indices(k)])


def _ring_breadth(mesh: RegisteredMesh, template: TemplateSpec, k: int) -> float:
    x = mesh.vertices[template.ring_indices(k), 0]
    return float(x.max() - x.min())


def derive_measures(mesh: RegisteredMesh, template: Optional[TemplateSpec] = None,
                    density: float = 985.0) -> BodyMeasures:
    """Tape-measure analogs read off fixed template rings"""
    template = template or TemplateSpec()
    if mesh.n_vertices != template.n_vertices:
        raise DataError(f"mesh has {mesh.n_vertices} vertices, template expects {template.n_vertices}")
    if density <= 0:
        raise ConfigError("density must be positive")
    z = mesh.vertices[:, 2]

    def ring_z(k: int) -> float:
        return float(mesh.vertices[template.ring_indices(k), 2].mean())

    return BodyMeasures(
        height=float(z.max() - z.min()),
        weight=density * mesh_volume(mesh),
        chest_circ=ring_perimeter(mesh, template, template.chest_ring),
        waist_circ=ring_perimeter(mesh, template, template.waist_ring),
        hip_circ=ring_perimeter(mesh, template, template.hip_ring),
        neck_circ=ring_perimeter(mesh, template, template.neck_ring),
        foot_length=_ring_breadth(mesh, template, 0),
        arm_length=ring_z(template.shoulder_ring) - ring_z(template.hip_ring),
        shoulder_breadth=_ring_breadth(mesh, template, template.shoulder_ring),
    )


def bmi(weight: float, height: float) -> float:
    """Body mass index from kg and mm"""
    if not height > 0:
        raise DataError(f"height must be positive, got {height}")
    return weight / (height / 1000.0) ** 2


def hip_to_waist_ratio(hip_circ: float, waist_circ: float) -> float:
    if not waist_circ > 0:
        raise DataError(f"waist circumference must be positive, got {waist_circ}")
    return hip_circ / waist_circ * 100.0


# ---------------------------------------------------------------------------
# OFF files
# ---------------------------------------------------------------------------

def write_off(mesh: RegisteredMesh, path: Union[str, Path]) -> None:
    lines = ["OFF", f"{mesh.n_vertices} {len(mesh.faces)} 0"]
    lines.extend(f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices)
    lines.extend(f"3 {i} {j} {k}" for i, j, k in mesh.faces)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_off(path: Union[str, Path]) -> RegisteredMesh:
    path = Path(path)
    tokens = [ln.split("#", 1)[0].strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    tokens = [ln for ln in tokens if ln]
    if not tokens or tokens[0] != "OFF":
        raise DataError(f"{path}: missing OFF header")
    n_vertices, n_faces = (int(v) for v in tokens[1].split()[:2])
    body = tokens[2:]
    if len(body) < n_vertices + n_faces:
        raise DataError(f"{path}: truncated file")
    vertices = np.array([[float(v) for v in ln.split()[:3]] for ln in body[:n_vertices]])
    faces = []
    for ln in body[n_vertices:n_vertices + n_faces]:
        parts = [int(v) for v in ln.split()]
        if parts[0] != 3:
            raise DataError(f"{path}: only triangular faces are supported")
        faces.append(parts[1:4])
    return RegisteredMesh(vertices.reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))
