#!/usr/bin/env python3
"""
Tests for registered meshes: topology, volume, measures and OFF files
"""

import math
import sys

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from body_mesh import (
    LatentBody,
    RegisteredMesh,
    TemplateSpec,
    bmi,
    cylinder_faces,
    cylinder_mesh,
    derive_measures,
    hip_to_waist_ratio,
    is_closed,
    mesh_from_latents,
    mesh_volume,
    polygon_perimeter,
    read_off,
    ring_perimeter,
    template_mesh,
    write_off,
)
from errors import ConfigError, DataError


def prism_volume(radius_m, height_m, segments):
    return 0.5 * segments * radius_m ** 2 * math.sin(2.0 * math.pi / segments) * height_m


def test_template_vertex_count():
    mesh = template_mesh()
    assert mesh.n_vertices == 24 * 32 + 2
    assert TemplateSpec().n_vertices == 770
    assert is_closed(mesh)


def test_faces_are_shared_and_read_only():
    a = cylinder_faces(8, 8)
    assert a is cylinder_faces(8, 8)
    with pytest.raises(ValueError):
        a[0, 0] = 1


def test_cylinder_volume_matches_prism_formula():
    mesh = cylinder_mesh(100.0, 1000.0, segments=64)
    assert_allclose(mesh_volume(mesh), prism_volume(0.1, 1.0, 64), rtol=1e-12)


def test_cylinder_weight_converges_to_the_analytic_volume():
    analytic = math.pi * 0.1 ** 2 * 1.0 * 1000.0
    errors = [abs(1000.0 * mesh_volume(cylinder_mesh(100.0, 1000.0, segments=s)) - analytic)
              for s in (64, 128, 256)]
    assert errors[-1] / analytic < 1e-3
    # second order in 1/S
    assert_allclose(errors[0] / errors[1], 4.0, rtol=0.05)
    assert_allclose(errors[1] / errors[2], 4.0, rtol=0.05)


def test_cylinder_volume_with_intermediate_rings():
    mesh = cylinder_mesh(50.0, 400.0, segments=16, rings=5)
    assert_allclose(mesh_volume(mesh), prism_volume(0.05, 0.4, 16), rtol=1e-12)


def test_volume_is_translation_invariant():
    mesh = cylinder_mesh(80.0, 600.0, segments=32)
    moved = RegisteredMesh(mesh.vertices + np.array([250.0, -40.0, 1000.0]), mesh.faces)
    assert_allclose(mesh_volume(moved), mesh_volume(mesh), rtol=1e-10)


def test_open_mesh_has_no_volume():
    mesh = cylinder_mesh(80.0, 600.0, segments=16)
    opened = RegisteredMesh(mesh.vertices, mesh.faces[:-1])
    assert not is_closed(opened)
    with pytest.raises(DataError, match="not closed"):
        mesh_volume(opened)


def test_empty_faces_are_not_closed():
    mesh = RegisteredMesh(np.zeros((2, 3)), np.empty((0, 3)))
    assert mesh.faces.shape == (0, 3)
    assert not is_closed(mesh)


def test_mesh_validation():
    with pytest.raises(DataError):
        RegisteredMesh(np.zeros((3, 2)), [[0, 1, 2]])
    with pytest.raises(DataError, match="out of range"):
        RegisteredMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(DataError):
        LatentBody(float("nan"), 0.0, 0.0)


def test_zero_latents_reproduce_the_template():
    template = TemplateSpec(rings=10, segments=12)
    assert_array_equal(mesh_from_latents(LatentBody(0.0, 0.0, 0.0), template).vertices,
                       template_mesh(template).vertices)


def test_height_follows_stature_factor():
    template = TemplateSpec()
    for s in (-2.0, 0.0, 1.5):
        measures = derive_measures(mesh_from_latents(LatentBody(s, 0.0, 0.0), template), template)
        assert_allclose(measures.height, template.height_mm * math.exp(template.c_s * s), rtol=1e-12)


def test_weight_grows_with_obesity_factor():
    weights = [derive_measures(mesh_from_latents(LatentBody(0.0, o, 0.0))).weight for o in (-1.0, 0.0, 1.0)]
    assert weights[0] < weights[1] < weights[2]
    # baseline body lands in a human range
    assert 40.0 < weights[1] < 120.0


def test_obesity_factor_scales_every_ring_circumference():
    template = TemplateSpec(rings=10, segments=16)
    base = mesh_from_latents(LatentBody(0.0, 0.0, 0.0), template)
    heavier = mesh_from_latents(LatentBody(0.0, 1.0, 0.0), template)
    for k in range(template.rings):
        ratio = ring_perimeter(heavier, template, k) / ring_perimeter(base, template, k)
        assert abs(ratio - math.exp(template.c_o)) < 1e-9


def test_hip_waist_ratio_grows_with_third_factor():
    ratios = []
    for w in (-1.0, 0.0, 1.0):
        m = derive_measures(mesh_from_latents(LatentBody(0.0, 0.0, w)))
        ratios.append(hip_to_waist_ratio(m.hip_circ, m.waist_circ))
    assert ratios[0] < ratios[1] < ratios[2]


def test_template_landmark_rings():
    template = TemplateSpec()
    assert template.waist_ring > template.hip_ring
    assert template.chest_ring < template.shoulder_ring < template.neck_ring
    info = template.info()
    assert info["n_vertices"] == template.n_vertices


def test_template_validation():
    with pytest.raises(ConfigError):
        TemplateSpec(rings=4).validate()
    with pytest.raises(ConfigError):
        mesh_from_latents(LatentBody(0.0, 0.0, 0.0), noise_sd=-1.0)


def test_noise_is_seeded():
    latents = LatentBody(0.3, -0.2, 0.5)
    a = mesh_from_latents(latents, noise_sd=1.0, seed=7)
    b = mesh_from_latents(latents, noise_sd=1.0, seed=7)
    c = mesh_from_latents(latents, noise_sd=1.0, seed=8)
    assert_array_equal(a.vertices, b.vertices)
    assert not np.array_equal(a.vertices, c.vertices)


def test_measures_reject_foreign_topology():
    with pytest.raises(DataError):
        derive_measures(cylinder_mesh(100.0, 1000.0), TemplateSpec())


def test_bmi_and_ratio():
    assert_allclose(bmi(70.0, 1750.0), 70.0 / 1.75 ** 2)
    assert_allclose(hip_to_waist_ratio(1000.0, 800.0), 125.0)
    with pytest.raises(DataError):
        bmi(70.0, 0.0)
    with pytest.raises(DataError):
        hip_to_waist_ratio(1000.0, 0.0)


def test_polygon_perimeter_square():
    square = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    assert polygon_perimeter(square) == 4.0


def test_off_round_trip(tmp_path):
    mesh = mesh_from_latents(LatentBody(0.4, -1.1, 0.7), TemplateSpec(rings=8, segments=8), noise_sd=1.0, seed=1)
    path = tmp_path / "body.off"
    write_off(mesh, path)
    back = read_off(path)
    assert_array_equal(back.vertices, mesh.vertices)
    assert_array_equal(back.faces, mesh.faces)


def test_off_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.off"
    bad.write_text("PLY\n1 0 0\n0 0 0\n")
    with pytest.raises(DataError, match="header"):
        read_off(bad)
    short = tmp_path / "short.off"
    short.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n")
    with pytest.raises(DataError, match="truncated"):
        read_off(short)
    quad = tmp_path / "quad.off"
    quad.write_text("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    with pytest.raises(DataError, match="triangular"):
        read_off(quad)


def test_off_comments_are_ignored(tmp_path):
    path = tmp_path / "tri.off"
    path.write_text("OFF\n# a comment\n3 1 0\n0 0 0\n1 0 0 # x axis\n0 1 0\n3 0 1 2\n")
    mesh = read_off(path)
    assert mesh.n_vertices == 3
    assert_array_equal(mesh.faces, [[0, 1, 2]])


if __name__ == "__main__":
    print("🧪 Testing body meshes")
    print("=" * 50)
    sys.exit(pytest.main([__file__, "-v"]))
