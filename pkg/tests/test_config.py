import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fewha.config import (
    ARCSEC,
    ConfigError,
    Grid2D,
    GuideStar,
    _disk_rect_area,
    compute_active_subapertures,
    dump_config,
    geometry_from_dict,
    geometry_to_dict,
    layer_extent,
    load_config,
    load_preset,
    save_config,
    with_layers,
)
from fewha.operators import OutOfGridError, TomographyOperators, interp_table

from helpers import small_geometry


def _minimal_dict():
    return {
        "telescope": {"diameter": 4.0},
        "wfs": [{"n_subap": 4, "noise_variance": 0.01}],
        "guide_stars": [{"kind": "NGS", "direction": [0.0, 0.0], "height": None}],
        "layers": [{"height": 0.0, "grid_order": 3, "relative_strength": 1.0}],
        "dms": [{"n_act": 5, "conjugation_height": 0.0}],
        "solver": {"alpha": 0.01},
        "loop": {},
    }


# -- load_config ------------------------------------------------------------------


def test_maory_preset_matches_parameter_table(maory):
    # W=9 (6 LGS, 3 NGS), n_s = 80/2/1, 128^2 layer points, D = 39 m, actuators 81/48/54
    assert maory.n_wfs == 9
    assert sum(s.is_lgs for s in maory.guide_stars) == 6
    assert sum(not s.is_lgs for s in maory.guide_stars) == 3
    assert [w.n_subap for w in maory.wfs_list] == [80] * 6 + [2, 1, 1]
    assert all(layer.n == 128 for layer in maory.layers)
    assert maory.telescope_diameter == 39.0
    assert [d.n_act for d in maory.dms] == [81, 48, 48, 48, 48, 54]
    assert maory.n_layers == maory.n_dms == 6
    assert maory.pcg_max_iter == 4


def test_maory_asterism_radii(maory):
    # LGS on a 2 arcmin diameter ring, NGS on 8/3 arcmin
    radii = [math.hypot(*s.direction) / ARCSEC for s in maory.guide_stars]
    np.testing.assert_allclose(radii[:6], 60.0, rtol=1e-12)
    np.testing.assert_allclose(radii[6:], 80.0, rtol=1e-12)


def test_obstruction_area_is_converted_to_diameter_ratio(maory):
    np.testing.assert_allclose(maory.central_obstruction_fraction**2, 0.28, rtol=1e-14)


def test_table_dimensions(maory):
    assert maory.n_coeffs == 2 ** (2 * 7) * 6
    assert maory.n_measurements == 2 * (6 * 80**2 + 2**2 + 2 * 1)


def test_minimal_file_is_valid(tmp_path):
    path = tmp_path / "min.json"
    path.write_text(json.dumps(_minimal_dict()))
    geo = load_config(path)
    assert geo.n_wfs == geo.n_layers == geo.n_dms == 1
    assert geo.layers[0].n == 8


def test_gain_out_of_range_is_rejected(tmp_path):
    data = _minimal_dict()
    data["loop"]["gain"] = 1.5
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(ConfigError, match=r"gain out of \[0,1\]"):
        load_config(path)


def test_parse_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{ not json")
    with pytest.raises(ConfigError, match="parse error"):
        load_config(path)


def test_missing_key_is_named(tmp_path):
    data = _minimal_dict()
    del data["solver"]["alpha"]
    path = tmp_path / "nokey.json"
    path.write_text(json.dumps(data))
    with pytest.raises(ConfigError, match="solver.alpha"):
        load_config(path)


def test_bare_preset_name_resolves():
    assert load_config("mini") == load_preset("mini")


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda d: d["guide_stars"].append({"kind": "NGS", "direction": [0, 0]}), "one per WFS"),
        (lambda d: d["layers"][0].update(relative_strength=0.9), "sum to 1"),
        (lambda d: d["solver"].update(max_iter=0), "pcg_max_iter"),
        (lambda d: d["solver"].update(alpha=0.0), "regularization_alpha"),
        (lambda d: d["dms"][0].update(n_act=1), "n_act"),
        (lambda d: d["wfs"][0].update(noise_variance=0.0), "noise_variance"),
        (lambda d: d["loop"].update(mode="sideways"), "loop mode"),
        (lambda d: d["telescope"].update(central_obstruction=1.0), "obstruction"),
    ],
)
def test_invariant_violations(mutate, message):
    data = _minimal_dict()
    mutate(data)
    with pytest.raises(ConfigError, match=message):
        geometry_from_dict(data)


def test_layer_heights_must_increase():
    data = _minimal_dict()
    data["layers"] = [
        {"height": 1000.0, "grid_order": 3, "relative_strength": 0.5},
        {"height": 500.0, "grid_order": 3, "relative_strength": 0.5},
    ]
    with pytest.raises(ConfigError, match="strictly increasing"):
        geometry_from_dict(data)


def test_lgs_must_sit_above_top_layer():
    data = _minimal_dict()
    data["guide_stars"] = [{"kind": "LGS", "direction": [0.0, 0.0], "height": 5000.0}]
    data["layers"] = [{"height": 8000.0, "grid_order": 3, "relative_strength": 1.0}]
    with pytest.raises(ConfigError, match="LGS height must exceed"):
        geometry_from_dict(data)


def test_explicit_extent_smaller_than_meta_pupil_is_rejected():
    data = _minimal_dict()
    data["layers"][0]["extent"] = 1.0
    with pytest.raises(ConfigError, match="extent"):
        geometry_from_dict(data)


@pytest.mark.parametrize("name", ["mini", "maory"])
def test_round_trip(name, tmp_path):
    geo = load_preset(name)
    save_config(geo, tmp_path / "rt.json")
    assert load_config(tmp_path / "rt.json") == geo


@given(
    n_subap=st.integers(1, 16),
    heights=st.lists(st.floats(0, 20000), min_size=1, max_size=4, unique=True),
    alpha=st.floats(1e-6, 10),
    gain=st.floats(0, 1),
    order=st.integers(1, 10),
)
def test_round_trip_property(n_subap, heights, alpha, gain, order):
    heights = sorted(heights)
    geo = small_geometry(
        n_subap=n_subap, order_j=5, heights=tuple(heights), regularization_alpha=alpha, gain=gain, wavelet_order=order
    )
    assert geometry_from_dict(json.loads(dump_config(geo))) == geo


# -- active subapertures -----------------------------------------------------------


def test_quarter_disk_cells_are_active():
    # each 1x1 m cell of a 2x2 grid on D = 2 m holds a quarter disk: pi/4 > 0.5
    np.testing.assert_allclose(_disk_rect_area(1.0, 0.0, 1.0, 0.0, 1.0), math.pi / 4, rtol=1e-14)
    geo = small_geometry(n_subap=2, telescope_diameter=2.0)
    assert compute_active_subapertures(geo, 0).all()


def test_fully_obstructed_pupil_is_dark():
    geo = small_geometry(n_subap=8, central_obstruction_fraction=1 - 1e-9)
    assert not compute_active_subapertures(geo, 0).any()


def _brute_force_fraction(d, r_in_frac, n_s, samples=48):
    """Per-cell lit fraction by midpoint sampling."""
    edges = -d / 2 + np.arange(n_s + 1) * d / n_s
    u = (np.arange(samples) + 0.5) / samples
    out = np.empty((n_s, n_s))
    for i in range(n_s):
        ys = edges[i] + u * (d / n_s)
        for j in range(n_s):
            xs = edges[j] + u * (d / n_s)
            r = np.hypot(xs[None, :], ys[:, None])
            out[i, j] = np.mean((r <= d / 2) & (r >= r_in_frac * d / 2))
    return out


def test_maory_mask_against_brute_force_integration(maory):
    mask = maory.active_mask(0)
    frac = _brute_force_fraction(maory.telescope_diameter, maory.central_obstruction_fraction, 80)
    clear = np.abs(frac - maory.illumination_threshold) > 0.02
    assert np.array_equal(mask[clear], frac[clear] >= 0.5)
    assert mask.sum() < 80**2


def test_maory_mask_symmetry(maory):
    mask = maory.active_mask(0)
    assert np.array_equal(mask, mask[::-1, ::-1])
    assert np.array_equal(mask, np.rot90(mask))
    assert np.array_equal(mask, mask.T)


@given(
    r=st.floats(0.1, 3.0),
    x0=st.floats(-3, 3),
    w=st.floats(0.01, 2),
    y0=st.floats(-3, 3),
    h=st.floats(0.01, 2),
)
def test_disk_rect_area_matches_polygon_oracle(r, x0, w, y0, h):
    shapely = pytest.importorskip("shapely.geometry")
    disk = shapely.Point(0.0, 0.0).buffer(r, quad_segs=2048)
    rect = shapely.box(x0, y0, x0 + w, y0 + h)
    expected = disk.intersection(rect).area
    # polygon inscribed in the circle underestimates by at most ~ pi r^2 (pi / 4096)^2 / 6
    assert abs(_disk_rect_area(r, x0, x0 + w, y0, y0 + h) - expected) <= 2e-6 * r * r + 1e-12


@given(n_s=st.integers(1, 24), obstruction=st.floats(0, 0.9))
def test_mask_has_grid_symmetry(n_s, obstruction):
    geo = small_geometry(n_subap=n_s, central_obstruction_fraction=obstruction)
    mask = compute_active_subapertures(geo, 0)
    for sym in (np.rot90(mask), mask.T, mask[::-1, :], mask[:, ::-1]):
        assert np.array_equal(mask, sym)


# -- layer extent -------------------------------------------------------------------


def test_on_axis_ngs_extent_is_pupil_plus_padding():
    geo = small_geometry(heights=(0.0, 3000.0))
    for ell in range(2):
        grid = geo.layer_grid(ell)
        # nodes reach one full cell past the pupil edge on the positive side
        np.testing.assert_allclose(grid.upper, geo.telescope_diameter / 2 + grid.spacing, rtol=1e-14)
        assert grid.origin <= -geo.telescope_diameter / 2 - grid.spacing
        np.testing.assert_allclose(layer_extent(geo, ell), grid.spacing * (grid.n - 1), rtol=1e-14)


def test_lgs_cone_apex_footprint():
    theta = 10 * ARCSEC
    star = GuideStar("LGS", (theta, 0.0), 90000.0)
    geo = small_geometry(stars=(star,), heights=(0.0, 10000.0))
    # at h = H the pupil shrinks to the point theta * H
    np.testing.assert_allclose(geo.meta_pupil_halfwidth(90000.0), max(theta * 90000.0, 2.0), rtol=1e-14)


def test_maory_extent_covers_all_beam_footprints(maory):
    """Independent ray trace of the square aperture's corners for every beam and probe."""
    d2 = maory.telescope_diameter / 2
    for ell, layer in enumerate(maory.layers):
        h = layer.height
        pts = []
        for s in maory.guide_stars:
            scale = 1 - h / s.height if s.is_lgs else 1.0
            for cx in (-d2, d2):
                pts.append((scale * cx + s.direction[0] * h, scale * cx + s.direction[1] * h))
        for tx, ty in maory.eval_directions:
            for cx in (-d2, d2):
                pts.append((cx + tx * h, cx + ty * h))
        pts = np.array(pts)
        grid = maory.layer_grid(ell)
        assert grid.origin <= pts.min() and pts.max() <= grid.upper
        # formula reference: max of scale * D/2 + |theta| h over beams, plus one cell
        ref = max(
            [(1 - h / s.height if s.is_lgs else 1.0) * d2 + math.hypot(*s.direction) * h for s in maory.guide_stars]
            + [d2 + math.hypot(*t) * h for t in maory.eval_directions]
        )
        np.testing.assert_allclose(grid.upper, ref + grid.spacing, rtol=1e-13)


@given(h=st.lists(st.floats(0, 30000), min_size=2, max_size=2, unique=True))
def test_extent_monotone_in_height(maory, h):
    lo, hi = sorted(h)
    assert maory.meta_pupil_halfwidth(lo) <= maory.meta_pupil_halfwidth(hi)


@pytest.mark.parametrize("name", ["mini", "maory"])
def test_no_out_of_grid_interpolation_on_presets(name):
    # builds every (WFS, layer) and (WFS, DM) table; OutOfGridError would propagate
    TomographyOperators(load_preset(name))


def test_out_of_grid_is_a_hard_error():
    source = Grid2D(8, -4.0, 1.0)
    aperture = Grid2D(5, -2.0, 1.0)
    interp_table(aperture, source, (0.0, 0.0), 1.0, 0.0)
    with pytest.raises(OutOfGridError, match="layer 1"):
        interp_table(aperture, source, (1e-3, 0.0), 1.0, 5000.0, "layer 1")


# -- layer sweep --------------------------------------------------------------------


def test_with_layers_follows_actuator_table(maory):
    geo9 = with_layers(maory, 9)
    assert geo9.n_layers == geo9.n_dms == 9
    assert [d.n_act for d in geo9.dms] == [81, 48, 48, 48, 48, 54, 54, 54, 54]
    np.testing.assert_allclose(sum(layer.relative_strength for layer in geo9.layers), 1.0, atol=1e-12)
    geo3 = with_layers(maory, 3)
    assert [layer.height for layer in geo3.layers] == [0.0, 8000.0, 16000.0]


def test_geometry_to_dict_is_json_serialisable(mini):
    assert json.loads(json.dumps(geometry_to_dict(mini)))["name"] == "mini"
