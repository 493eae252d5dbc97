import pytest

from cnncap import techmodel
from cnncap.techmodel import (DielectricSlab, MetalLayerSpec, TechFile,
                              TechFileError, load_techfile, save_techfile,
                              window_width)


def test_tech55_layer3_geometry(tech55):
    layer = tech55.layer(3)
    assert layer.thickness == 0.2
    assert layer.w_min == 0.09
    assert layer.s_min == 0.09


def test_tech15_layer6_geometry(tech15):
    layer = tech15.layer(6)
    assert layer.thickness == 0.13
    assert layer.w_min == 0.056
    assert layer.s_min == 0.056


def test_overlapping_dielectrics_rejected(tmp_path):
    path = tmp_path / "bad.tech"
    path.write_text(
        "tech bad\n"
        "layer 1 zbottom=0.1 thickness=0.1 wmin=0.05 smin=0.05\n"
        "dielectric zbottom=0 ztop=0.3 epsr=3.9\n"
        "dielectric zbottom=0.25 ztop=0.5 epsr=3.9\n")
    with pytest.raises(TechFileError, match="dielectric overlap"):
        load_techfile(path)


def test_dielectric_gap_rejected(tmp_path):
    path = tmp_path / "bad.tech"
    path.write_text(
        "tech bad\n"
        "layer 1 zbottom=0.1 thickness=0.1 wmin=0.05 smin=0.05\n"
        "dielectric zbottom=0 ztop=0.2 epsr=3.9\n"
        "dielectric zbottom=0.3 ztop=0.5 epsr=3.9\n")
    with pytest.raises(TechFileError, match="gap"):
        load_techfile(path)


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.tech"
    path.write_text("tech ok\nlayer 1 zbottom=0.1 thickness=abc wmin=0.05 smin=0.05\n")
    with pytest.raises(TechFileError, match="line 2"):
        load_techfile(path)


def test_window_width_55nm_layer3(tech55):
    assert window_width(tech55, 3) == pytest.approx(5.04)


def test_window_width_15nm_layer3(tech15):
    assert window_width(tech15, 3) == pytest.approx(1.568)


def test_window_width_unknown_layer(tech55):
    with pytest.raises(TechFileError, match="99"):
        window_width(tech55, 99)


def test_window_width_linear_in_wmin(tech55, tech15):
    for tech in (tech55, tech15):
        for layer in tech.layers:
            assert window_width(tech, layer.index) == pytest.approx(56 * layer.w_min)


def test_dielectrics_tile_domain(tech55, tech15):
    for tech in (tech55, tech15):
        slabs = sorted(tech.dielectrics, key=lambda s: s.z_bottom)
        total = sum(s.z_top - s.z_bottom for s in slabs)
        assert total == pytest.approx(tech.z_max)
        for lo, hi in zip(slabs, slabs[1:]):
            assert hi.z_bottom == pytest.approx(lo.z_top)


def test_save_load_roundtrip_bit_identical(tech55, tmp_path):
    p1 = tmp_path / "a.tech"
    p2 = tmp_path / "b.tech"
    save_techfile(tech55, p1)
    reloaded = load_techfile(p1)
    assert reloaded == tech55
    save_techfile(reloaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_layer_overlap_rejected():
    layers = (MetalLayerSpec(1, 0.2, 0.05, 0.05, 0.1),
              MetalLayerSpec(2, 0.2, 0.05, 0.05, 0.2))
    slabs = (DielectricSlab(0, 1.0, 3.9),)
    with pytest.raises(TechFileError, match="overlap"):
        techmodel._validate(TechFile("t", layers, slabs))


class TestCalibrateWindow:
    """Solver-backed audit of the fixed 56x window (slow-ish)."""

    def test_adjacent_neighbor_dominates(self, tech55):
        # neighbor at minimal center-to-center distance: coupling ratio >> 1%
        from cnncap import fieldsolver, patgen
        layer = tech55.layer(3)
        w = layer.w_min
        width = 12 * w
        mx = width / 2 - w / 2
        s = patgen.Structure2D(
            "adj", "B", (3, 3, 3), width,
            (patgen.Conductor(0, 3, mx, w),
             patgen.Conductor(1, 3, mx + 2 * w, w)), True)
        r = fieldsolver.extract_capacitances(tech55, s, resolution=4)
        assert r.couplings[1] / r.total > 0.10

    @staticmethod
    def _ratio_at(tech, master_layer, k, resolution=2):
        from cnncap import fieldsolver, patgen
        w = tech.layer(master_layer).w_min
        width = 2 * (k + 4) * w
        mx = width / 2 - w / 2
        s = patgen.Structure2D(
            f"c{k}", "B", (master_layer,) * 3, width,
            (patgen.Conductor(0, master_layer, mx, w),
             patgen.Conductor(1, master_layer, mx + k * w, w)), True)
        r = fieldsolver.extract_capacitances(tech, s, resolution=resolution)
        return r.couplings[1] / r.total

    def test_ratio_monotone_in_distance(self, tech55):
        ratios = [self._ratio_at(tech55, 1, k) for k in (3, 8, 16, 32, 64)]
        assert all(a > b for a, b in zip(ratios, ratios[1:]))

    def test_calibrated_is_smallest_clean_multiple(self, tech55):
        from cnncap import fieldsolver

        def handle(t, s):
            return fieldsolver.extract_capacitances(t, s, resolution=2)

        half = techmodel.calibrate_window(tech55, 1, solver_handle=handle)
        w = tech55.layer(1).w_min
        k = round(half / w)
        assert half == pytest.approx(k * w)
        assert self._ratio_at(tech55, 1, k) <= 0.01
        assert self._ratio_at(tech55, 1, k - 1) > 0.01

    def test_max_multiple_exhausted_is_an_error(self, tech55):
        # Higher layers sit far above the substrate; a lone neighbor's
        # coupling decays too slowly to reach 1% within a narrow sweep.
        from cnncap import fieldsolver

        def handle(t, s):
            return fieldsolver.extract_capacitances(t, s, resolution=2)

        with pytest.raises(techmodel.TechFileError, match="increase max_multiple"):
            techmodel.calibrate_window(tech55, 3, solver_handle=handle,
                                       max_multiple=16)

    def test_window_doubling_stability(self, tech55):
        # With the sandwich planes in place the master's field is localized:
        # doubling the window width changes its total by far less than 1%.
        from cnncap import fieldsolver, patgen

        def total_for(width):
            l3 = tech55.layer(3)
            w, s = 2 * l3.w_min, 2 * l3.s_min
            mx = width / 2 - w / 2
            conductors = (
                patgen.Conductor(0, 3, mx, w),
                patgen.Conductor(1, 2, 0.0, width),
                patgen.Conductor(2, 4, 0.0, width),
                patgen.Conductor(3, 3, mx - s - w, w),
                patgen.Conductor(4, 3, mx + w + s, w))
            st = patgen.Structure2D("win", "A", (2, 3, 4), width,
                                    conductors, False)
            return fieldsolver.extract_capacitances(tech55, st, resolution=3).total

        base = total_for(window_width(tech55, 3))
        doubled = total_for(2 * window_width(tech55, 3))
        assert abs(doubled - base) / base < 0.01
