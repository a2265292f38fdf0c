import numpy as np
import pytest
from scipy.stats import norm

from latent_scope import beamsim as bs
from latent_scope.config import load_shipped


def beam(coords, charge=1e-9):
    return bs.ParticleEnsemble(np.atleast_2d(np.asarray(coords, dtype=float)), charge)


def gaussian_beam(n=10_000, sigma=1e-3, seed=1, **offsets):
    gen = bs.GeneratorConfig(n_particles=n, sigmas=(sigma,) * 6)
    return bs.sample_input_beam(bs.MachineParams(**offsets), gen, seed)


@pytest.fixture(scope="module")
def sim():
    return bs.SimConfig.from_dict({**load_shipped("fig6_errors"), "generator": {"n_particles": 4000}})


# --- input beam ---------------------------------------------------------------


def test_input_beam_mean_within_shot_noise():
    b = gaussian_beam()
    assert abs(b.coords[:, 0].mean()) < 0.03e-3


def test_input_beam_offset_shifts_mean():
    b = gaussian_beam(x_offset=2e-3)
    assert 1.97e-3 <= b.coords[:, 0].mean() <= 2.03e-3


def test_input_beam_deterministic():
    a, b = gaussian_beam(seed=7), gaussian_beam(seed=7)
    assert np.array_equal(a.coords, b.coords)
    assert not np.array_equal(a.coords, gaussian_beam(seed=8).coords)


@pytest.mark.parametrize(
    "kw",
    [{"n_particles": 0}, {"sigmas": (1e-3, 0, 1e-3, 1e-3, 1e-3, 1e-3)}, {"sigmas": (-1e-3,) * 6}],
)
def test_generator_rejects_bad_config(kw):
    with pytest.raises(bs.ConfigError):
        bs.GeneratorConfig(**kw)


def test_blob_fraction_respected():
    gen = bs.GeneratorConfig(n_particles=1000, blobs=[{"fraction": 0.3, "offset": [0, 0, 0, 0, 0.01, 0]}])
    b = bs.sample_input_beam(bs.MachineParams(), gen, 0)
    assert np.sum(b.coords[:, 4] > 0.005) == 300


# --- element maps -------------------------------------------------------------


def test_drift_example():
    out = bs.Drift(2.0).apply(beam([1e-3, 0.5e-3, 0, 0, 0, 0]))
    assert out.coords[0, 0] == pytest.approx(2e-3, abs=1e-15)
    assert out.coords[0, 1] == 0.5e-3


def test_chicane_example():
    out = bs.Chicane(R56=-0.05, T566=0.0).apply(beam([0, 0, 0, 0, 0, 0.01]))
    assert out.coords[0, 4] == pytest.approx(-0.5e-3, abs=1e-15)


def test_chicane_second_order():
    out = bs.Chicane(R56=0.0, T566=2.0).apply(beam([0, 0, 0, 0, 0, 0.01]))
    assert out.coords[0, 4] == pytest.approx(2.0 * 1e-4)


def test_rf_example():
    out = bs.RF(V=0.05, phase=0.0, wavenumber=60.0).apply(beam([0, 0, 0, 0, 0, 0]))
    assert out.coords[0, 5] == pytest.approx(0.05, abs=1e-15)


def test_rf_is_cosine_of_z():
    z = np.linspace(-0.01, 0.01, 7)
    c = np.zeros((7, 6))
    c[:, 4] = z
    out = bs.RF(V=0.1, phase=0.3, wavenumber=40.0).apply(beam(c))
    np.testing.assert_allclose(out.coords[:, 5], 0.1 * np.cos(0.3 + 40.0 * z), rtol=0, atol=1e-15)


@pytest.mark.parametrize("L,k1", [(0.2, 4.0), (0.5, -3.0), (0.0, 10.0), (1.0, 0.0)])
def test_quad_planes_have_unit_determinant(L, k1):
    mx, my = bs.Quad(L, k1).plane_matrices()
    assert np.linalg.det(mx) == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.det(my) == pytest.approx(1.0, abs=1e-12)


def test_quad_focuses_x_defocuses_y():
    out = bs.Quad(0.1, 5.0).apply(beam([1e-3, 0, 1e-3, 0, 0, 0]))
    assert out.coords[0, 1] < 0 < out.coords[0, 3]


def test_wake_ramp_head_to_tail():
    c = np.zeros((4, 6))
    c[:, 4] = [3.0, 1.0, 2.0, 0.0]
    out = bs.WakeSurrogate(kappa=1e8).apply(beam(c, charge=1e-9))
    d = out.coords[:, 5]
    # rank order in z equals order of energy loss
    assert np.array_equal(np.argsort(-d), np.argsort(c[:, 4]))
    assert np.all(d <= 0)


@pytest.mark.parametrize(
    "elem,changed",
    [
        (bs.Drift(1.0), {0, 2}),
        (bs.Quad(0.2, 3.0), {0, 1, 2, 3}),
        (bs.RF(0.05, 0.2, 50.0), {5}),
        (bs.Chicane(-0.03, 0.05), {4}),
        (bs.WakeSurrogate(1e7), {5}),
    ],
)
def test_elements_touch_only_their_coordinates(elem, changed):
    b = gaussian_beam(n=200, seed=3)
    out = elem.apply(b)
    for c in range(6):
        same = np.array_equal(out.coords[:, c], b.coords[:, c])
        assert same == (c not in changed), (type(elem).__name__, c)


def test_negative_drift_rejected():
    with pytest.raises(bs.ConfigError):
        bs.Drift(-1.0)


# --- tracking -----------------------------------------------------------------


def test_single_marker_is_identity():
    b = gaussian_beam(n=100)
    snaps = bs.track([bs.Marker(0)], b, bs.MachineParams())
    assert np.array_equal(snaps[0].coords, b.coords)


def test_drift_spread_matches_oracle():
    b = gaussian_beam(n=20_000, seed=2)
    lat = [bs.Drift(1.0), bs.Marker(0), bs.Drift(1.0), bs.Marker(1)]
    s = bs.track(lat, b, bs.MachineParams())
    sx0, sx1 = s[0].coords[:, 0].std(), s[1].coords[:, 0].std()
    assert sx1 >= sx0
    # sigma_x^2(L) = sigma_x^2 + L^2 sigma_x'^2 for uncorrelated x, x'
    x, xp = b.coords[:, 0], b.coords[:, 1]
    oracle = np.sqrt(np.var(x) + 4 * np.var(xp) + 4 * np.cov(x, xp, ddof=0)[0, 1])
    assert sx1 == pytest.approx(oracle, rel=1e-9)


def test_track_requires_marker():
    with pytest.raises(bs.ConfigError):
        bs.track([bs.Drift(1.0)], gaussian_beam(n=10), bs.MachineParams())


def test_duplicate_station_ids_rejected():
    with pytest.raises(bs.ConfigError):
        bs.build_lattice([{"kind": "marker", "station_id": 0}, {"kind": "marker", "station_id": 0}])


def test_l1_phase_changes_downstream_energy(sim):
    nominal = sim.nominal()
    a = bs.simulate(sim, nominal, 5)
    b = bs.simulate(sim, nominal.replace(l1_phase=nominal.l1_phase + 0.2), 5)
    st = sim.stations[3]
    assert a[st].coords[:, 5].mean() != b[st].coords[:, 5].mean()


def test_track_deterministic(sim):
    a = bs.simulate(sim, sim.nominal(), 11)
    b = bs.simulate(sim, sim.nominal(), 11)
    for k in a:
        assert np.array_equal(a[k].coords, b[k].coords)


def test_nominal_lattice_compresses(sim):
    snaps = bs.simulate(sim, sim.nominal(), 0)
    z_in = snaps[-1].coords[:, 4].std()
    z_out = snaps[sim.stations[-1]].coords[:, 4].std()
    assert z_out < z_in / 3


def test_shipped_lattice_has_five_stations(sim):
    assert len(sim.stations) == 5
    assert bs.station_names(sim.lattice)[0] == "TCAV1"


# --- projections --------------------------------------------------------------


RANGES = [(-1.0, 1.0), (-1.0, 1.0)]


def test_single_particle_bin():
    G = 4
    # centre of bin (1, 2): x = -1 + 1.5 * 0.5, y = -1 + 2.5 * 0.5
    g = bs.project(beam([-0.25, 0.25, 0, 0, 0, 0]), (0, 1), RANGES, G)
    expect = np.zeros((G, G))
    expect[1, 2] = 1.0
    assert np.array_equal(g, expect)


def test_two_particles_two_bins():
    g = bs.project(beam([[-0.75, -0.75, 0, 0, 0, 0], [0.75, 0.75, 0, 0, 0, 0]]), (0, 1), RANGES, 4)
    assert g[0, 0] == 0.5 and g[3, 3] == 0.5 and g.sum() == 1.0


def test_out_of_range_clamps_to_edge():
    g = bs.project(beam([[5.0, -5.0, 0, 0, 0, 0]]), (0, 1), RANGES, 4)
    assert g[3, 0] == 1.0


def test_gaussian_histogram_matches_bin_integrals():
    rng = np.random.default_rng(0)
    c = np.zeros((100_000, 6))
    c[:, 0], c[:, 2] = rng.standard_normal((2, 100_000))
    G, lo, hi = 16, -4.0, 4.0
    g = bs.project(beam(c), (0, 2), [(lo, hi), (lo, hi)], G)
    edges = np.linspace(lo, hi, G + 1)
    p = np.diff(norm.cdf(edges))
    # edge bins absorb the tails
    p[0] += norm.cdf(lo)
    p[-1] += norm.sf(hi)
    tv = 0.5 * np.abs(g - np.outer(p, p)).sum()
    assert tv < 0.02


@pytest.mark.parametrize("G", [1, 0])
def test_project_rejects_small_grid(G):
    with pytest.raises(bs.ConfigError):
        bs.project(beam([0, 0, 0, 0, 0, 0]), (0, 1), RANGES, G)


@pytest.mark.parametrize("pair", [(1, 0), (2, 2), (0, 6)])
def test_project_rejects_bad_pair(pair):
    with pytest.raises(bs.ConfigError):
        bs.project(beam([0, 0, 0, 0, 0, 0]), pair, RANGES, 4)


def test_project_rejects_bad_range():
    with pytest.raises(bs.ConfigError):
        bs.project(beam([0, 0, 0, 0, 0, 0]), (0, 1), [(1.0, 1.0), (0.0, 1.0)], 4)


def test_channel_order():
    assert len(bs.PAIRS) == 15
    assert bs.PAIRS[0] == (0, 1) and bs.PAIRS[-1] == (4, 5)
    assert bs.PAIR_LABELS[bs.CHANNEL_XE] == "rho_16"
    assert bs.PAIR_LABELS[bs.CHANNEL_ZE] == "rho_56"


def test_station_projections_equal_project():
    b = gaussian_beam(n=500, seed=4)
    ranges = np.tile([-3e-3, 3e-3], (6, 1))
    stack = bs.station_projections(b, ranges, 8)
    for ch, pair in enumerate(bs.PAIRS):
        assert np.array_equal(stack[ch], bs.project(b, pair, ranges[list(pair)], 8))


def _marginal_pairs():
    """(channel_a, axis_a, channel_b, axis_b) for every pair of channels sharing a coordinate."""
    out = []
    for a, pa in enumerate(bs.PAIRS):
        for b, pb in enumerate(bs.PAIRS[a + 1 :], start=a + 1):
            for c in set(pa) & set(pb):
                # summing over the other axis leaves the shared coordinate
                out.append((a, 1 - pa.index(c), b, 1 - pb.index(c)))
    return out


def test_all_projections_shape_normalization_and_marginals(sim):
    snaps = bs.simulate(sim, sim.nominal(), 3)
    snaps.pop(-1)
    axes = bs.axis_table([snaps])
    ps = bs.all_projections(snaps, axes, 16)
    assert ps.grids.shape == (5, 15, 16, 16)
    assert ps.flat().shape == (75, 16, 16)
    np.testing.assert_allclose(ps.grids.sum(axis=(2, 3)), 1.0, atol=1e-6)
    assert ps.grids.min() >= 0
    for s in range(5):
        g = ps.grids[s]
        # x marginal of rho_13 equals that of rho_16
        np.testing.assert_allclose(g[1].sum(axis=1), g[4].sum(axis=1), atol=1e-6)
        for a, ax_a, b, ax_b in _marginal_pairs():
            np.testing.assert_allclose(g[a].sum(axis=ax_a), g[b].sum(axis=ax_b), atol=1e-6)


def test_all_projections_rejects_bad_axes(sim):
    snaps = bs.simulate(sim, sim.nominal(), 3)
    with pytest.raises(bs.ConfigError):
        bs.all_projections(snaps, np.zeros((2, 6, 2)), 8)


# --- energy spectrum ----------------------------------------------------------


def test_spectrum_of_delta():
    g = np.zeros((8, 8))
    g[2, 5] = 1.0
    s = bs.energy_spectrum(g)
    assert s[5] == 1.0 and s.sum() == 1.0


def test_spectrum_of_uniform():
    s = bs.energy_spectrum(np.full((8, 8), 1 / 64))
    np.testing.assert_allclose(s, 1 / 8, rtol=0, atol=1e-15)


def test_spectrum_of_gaussian_grid():
    edges = np.linspace(-3, 3, 25)
    px = np.diff(norm.cdf(edges, scale=0.8))
    pe = np.diff(norm.cdf(edges, loc=0.3, scale=1.1))
    px, pe = px / px.sum(), pe / pe.sum()
    s = bs.energy_spectrum(np.outer(px, pe))
    np.testing.assert_allclose(s, pe, atol=1e-6)
    assert s.sum() == pytest.approx(1.0, abs=1e-6)


def test_axis_table_contains_percentile_window(sim):
    snaps = [bs.simulate(sim, sim.nominal(), s) for s in range(3)]
    t = bs.axis_table(snaps)
    assert t.shape == (6, 6, 2)
    assert np.all(t[:, :, 0] < t[:, :, 1])


def test_sim_config_rejects_missing_ranges():
    doc = load_shipped("fig6_errors")
    doc["sampling_ranges"] = dict(doc["sampling_ranges"])
    del doc["sampling_ranges"]["charge"]
    with pytest.raises(bs.ConfigError):
        bs.SimConfig.from_dict(doc)


def test_machine_params_roundtrip():
    p = bs.MachineParams(1e-4, -2e-4, 2e-9, 1.01, 0.003, 0.99, -0.004)
    assert bs.MachineParams.from_array(p.as_array()) == p
    with pytest.raises(bs.ConfigError):
        bs.MachineParams.from_array([1, 2, 3])
