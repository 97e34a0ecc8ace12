from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from layerhom.geometry import (
    SOLID,
    Box,
    Cylinder,
    GeometryError,
    MicrostructureSpec,
    Sphere,
    build_cell,
    gamma_solid_voxels,
    phase_components,
    solid_face_pairs,
    spec_from_dict,
    validate_cell,
)


def brute_force_phase(n, prims):
    """Loop over voxel centres with explicit periodic images (independent of the vectorised path)."""
    h = 1.0 / n
    out = np.zeros((n, n, 2 * n), dtype=np.int8)
    for i, j, k in itertools.product(range(n), range(n), range(2 * n)):
        x, y, z = (i + 0.5) * h, (j + 0.5) * h, -1 + (k + 0.5) * h
        for p in prims:
            for sx, sy in itertools.product((-1, 0, 1), repeat=2):
                px, py = x + sx, y + sy
                if isinstance(p, Sphere):
                    cx, cy, cz = p.center
                    hit = (px - cx) ** 2 + (py - cy) ** 2 + (z - cz) ** 2 <= p.radius**2 + 1e-12
                elif isinstance(p, Cylinder):
                    cx, cy, cz = p.center
                    hit = (px - cx) ** 2 + (py - cy) ** 2 <= p.radius**2 + 1e-12 and abs(z - cz) <= p.height / 2 + 1e-12
                else:
                    hit = all(lo - 1e-12 <= c <= hi + 1e-12 for c, lo, hi in zip((px, py, z), p.lo, p.hi))
                if hit:
                    out[i, j, k] = SOLID
    return out


def test_empty_cell_measures(empty_cell):
    m = empty_cell.measures
    assert (m.zf, m.zs, m.gamma) == (2.0, 0.0, 0.0)
    assert (m.sf_plus, m.sf_minus, m.ss_plus, m.ss_minus) == (1.0, 1.0, 0.0, 0.0)
    rep = validate_cell(empty_cell, require_clearance=True)
    assert rep.valid and rep.clearance and rep.fluid_connected
    assert rep.interface_mode == "coupled"


def test_cylinder_phase_matches_brute_force():
    prims = (Cylinder((0.5, 0.5, 0.0), 0.3, 1.2),)
    cell = build_cell(MicrostructureSpec(8, prims))
    np.testing.assert_array_equal(cell.phase, brute_force_phase(8, prims))


def test_wrapped_sphere_matches_brute_force():
    prims = (Sphere((0.05, 0.9, 0.1), 0.3),)
    cell = build_cell(MicrostructureSpec(8, prims))
    np.testing.assert_array_equal(cell.phase, brute_force_phase(8, prims))


def test_cylinder_validation(cylinder_cell):
    rep = validate_cell(cylinder_cell, require_clearance=True)
    assert rep.valid and rep.fluid_connected and rep.solid_connected and rep.clearance
    # prism: lateral disc count times the number of layer centres inside |z| <= 0.6
    n = 16
    c = (np.arange(n) + 0.5) / n
    disc = sum((x - 0.5) ** 2 + (y - 0.5) ** 2 <= 0.09 for x in c for y in c)
    layers = sum(abs(-1 + (k + 0.5) / n) <= 0.6 for k in range(2 * n))
    assert cylinder_cell.measures.zs == disc * layers / n**3
    assert abs(cylinder_cell.measures.zs - math.pi * 0.09 * 1.2) < 0.05
    assert math.isclose(cylinder_cell.measures.zf + cylinder_cell.measures.zs, 2.0)


def test_translation_by_grid_shift_rolls_phase():
    a = build_cell(MicrostructureSpec(16, (Sphere((0.5, 0.5, 0.0), 0.3),)))
    b = build_cell(MicrostructureSpec(16, (Sphere((0.0, 0.0, 0.0), 0.3),)))
    np.testing.assert_array_equal(np.roll(a.phase, (8, 8), axis=(0, 1)), b.phase)
    assert a.measures == b.measures


def test_tie_on_voxel_centre_is_solid():
    # voxel centres at 0.125 + 0.25 k; the box faces pass exactly through centres
    cell = build_cell(MicrostructureSpec(4, (Box((0.375, 0.375, -0.125), (0.625, 0.625, 0.125)),)))
    assert cell.solid.sum() == 2 * 2 * 2


def test_block_interface_faces():
    # 2x2x2 voxel block: 6 sides of 4 faces each
    cell = build_cell(MicrostructureSpec(8, (Box((0.3, 0.3, -0.2), (0.5, 0.5, 0.0)),)))
    assert cell.solid.sum() == 8
    assert len(cell.gamma_faces) == 24
    assert cell.measures.gamma == pytest.approx(24 / 64)
    vox = gamma_solid_voxels(cell)
    assert np.all(cell.phase.ravel()[vox] == SOLID)
    a, b, _ = solid_face_pairs(cell)
    assert len(a) == 12  # internal faces of a 2x2x2 block


def test_slab_disconnects_fluid(slab_cell):
    rep = validate_cell(slab_cell)
    assert rep.fluid_components == 2 and not rep.valid
    assert slab_cell.measures.zs == 0.5 and slab_cell.measures.gamma == 2.0


def test_interface_modes():
    col = build_cell(MicrostructureSpec(8, (Box((0.25, 0.25, -1.0), (0.75, 0.75, 1.0)),), clearance_check=False))
    rep = validate_cell(col)
    assert rep.interface_mode == "impermeable" and rep.valid
    assert not validate_cell(col, require_clearance=True).valid
    top = build_cell(MicrostructureSpec(8, (Box((0.25, 0.25, 0.0), (0.75, 0.75, 1.0)),), clearance_check=False))
    assert validate_cell(top).interface_mode == "mixed"


def test_corner_contact_reported():
    # voxel blocks [0, 2) and [2, 4) in x and y share only a vertical edge
    prims = (Box((0.01, 0.01, -0.3), (0.24, 0.24, 0.3)), Box((0.26, 0.26, -0.3), (0.49, 0.49, 0.3)))
    cell = build_cell(MicrostructureSpec(8, prims))
    with pytest.warns(UserWarning):
        rep = validate_cell(cell)
    assert rep.solid_components == 2 and rep.corner_contacts


def test_validation_is_deterministic(cylinder_cell):
    assert validate_cell(cylinder_cell) == validate_cell(cylinder_cell)


def test_periodic_components_wrap():
    mask = np.zeros((4, 4, 2), dtype=bool)
    mask[0, :, 0] = mask[3, :, 0] = True
    n, _ = phase_components(mask)
    assert n == 1


@pytest.mark.parametrize(
    "prim, fragment",
    [
        (Sphere((0.5, 0.5, 0.9), 0.3, name="ball"), "ball"),
        (Box((0.2, 0.2, 0.1), (0.1, 0.4, 0.2)), "non-positive"),
        (Cylinder((0.5, 0.5, 0.0), 0.2, 2.5), "outside"),
    ],
)
def test_invalid_primitives(prim, fragment):
    with pytest.raises(GeometryError) as err:
        build_cell(MicrostructureSpec(8, (prim,)))
    assert fragment in str(err.value)


def test_resolution_bounds():
    with pytest.raises(GeometryError):
        build_cell(MicrostructureSpec(3))


def test_spec_from_dict():
    spec = spec_from_dict(
        {"resolution": 8, "solids": [{"type": "cylinder", "center": [0.5, 0.5, 0], "radius": 0.2, "height": 0.5, "axis": "x"}]}
    )
    assert spec.solids[0].axis == 0
    with pytest.raises(GeometryError):
        spec_from_dict({"resolution": 8, "solids": [{"type": "cone"}]})
