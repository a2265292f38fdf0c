import numpy as np
import pytest
from scipy.stats import norm

from latent_scope import beamsim as bs
from latent_scope import latentune as lt
from latent_scope import phasenet as pn
from latent_scope.experiments import DEFAULT_ES
from latent_scope.pipeline import build_axes, sim_config

from .conftest import tiny_doc

STATIONS = [0, 1, 2, 3, 4]
TCAV1 = lt.CostSpec([(0, 1.0)])
ALL = lt.CostSpec([(0, 1 / 3), (2, 1 / 3), (3, 1 / 3)])


@pytest.fixture(scope="module")
def net():
    arch = pn.NetworkArch(G=8, latent_dim=2, n_stations=5, enc_conv=[4, 8], enc_dense=[16], merge_dense=[16], dec_dense=[16], dec_base=2, dec_base_channels=8, dec_conv=[8])
    n = pn.init_network(arch, 0, np.float64)
    n.latent_half = np.array([2.0, 2.0])
    return n


def grid(rng, G=8):
    g = rng.random((G, G))
    return g / g.sum()


# --- cost functions -----------------------------------------------------------


def test_tcav_cost_identical_and_disjoint():
    rng = np.random.default_rng(0)
    g = grid(rng)
    assert lt.cost_tcav(g, g) == 0.0
    a, b = np.zeros((4, 4)), np.zeros((4, 4))
    a[0, 0], b[1, 1] = 1.0, 1.0
    assert lt.cost_tcav(a, b) == 2.0


def test_tcav_cost_symmetric_and_bounded():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = grid(rng), grid(rng)
        c = lt.cost_tcav(a, b)
        assert c == lt.cost_tcav(b, a)
        assert 0 < c <= 2


def test_tcav_cost_shifted_gaussian_matches_analytic():
    edges = np.linspace(-8, 8, 801)
    pz0 = np.diff(norm.cdf(edges))
    pz1 = np.diff(norm.cdf(edges, loc=1.0))
    pe = np.diff(norm.cdf(edges[::8], scale=2.0))
    pe /= pe.sum()
    c = lt.cost_tcav(np.outer(pz0, pe), np.outer(pz1, pe))
    analytic = 2 * (2 * norm.cdf(0.5) - 1)
    assert c == pytest.approx(analytic, rel=0.05)


def test_tcav_cost_shape_mismatch():
    with pytest.raises(ValueError):
        lt.cost_tcav(np.zeros((4, 4)), np.zeros((4, 5)))


def test_spectrum_cost():
    rng = np.random.default_rng(2)
    g = grid(rng)
    assert lt.cost_spectrum(g, bs.energy_spectrum(g)) == 0.0
    d = np.zeros((4, 4))
    d[2, 0] = 1.0
    other = np.zeros(4)
    other[3] = 1.0
    assert lt.cost_spectrum(d, other) == 2.0


def test_spectrum_of_projection_equals_marginal():
    rng = np.random.default_rng(3)
    g = grid(rng, 16)
    direct = np.array([sum(g[i, j] for i in range(16)) for j in range(16)])
    np.testing.assert_allclose(bs.energy_spectrum(g), direct, atol=1e-9)


def test_cost_spec_validation():
    with pytest.raises(lt.CostSpecError):
        lt.CostSpec()
    with pytest.raises(lt.CostSpecError):
        lt.CostSpec([(0, -1.0)])
    with pytest.raises(lt.CostSpecError):
        lt.CostSpec([(0, 0.0)], [(1, 0.0)])


def test_measured_channels():
    spec = lt.CostSpec([(0, 1.0), (3, 0.5)], [(4, 1.0)])
    assert spec.measured_channels(STATIONS) == [bs.CHANNEL_ZE, 3 * 15 + bs.CHANNEL_ZE, 4 * 15 + bs.CHANNEL_XE]
    assert spec.stations == [0, 3, 4]


def test_combined_cost_properties(net):
    stack_a = net.decode(np.array([0.5, -0.3]))
    stack_b = net.decode(np.array([-1.0, 0.8]))
    meas = lt.measurements_from_stack(ALL, stack_b, STATIONS)
    assert lt.combined_cost(TCAV1, stack_a, lt.measurements_from_stack(TCAV1, stack_a, STATIONS), STATIONS) == 0.0
    single = lt.CostSpec([(0, 1.0), (2, 0.0), (3, 0.0)])
    assert lt.combined_cost(single, stack_a, meas, STATIONS) == lt.cost_tcav(stack_a[bs.CHANNEL_ZE], stack_b[bs.CHANNEL_ZE])
    total = lt.combined_cost(ALL, stack_a, meas, STATIONS)
    terms = [w * lt.cost_tcav(stack_a[STATIONS.index(s) * 15 + bs.CHANNEL_ZE], meas[("tcav", s)]) for s, w in ALL.tcav_terms]
    assert total == pytest.approx(sum(terms), rel=1e-12)
    assert total >= max(terms)


def test_combined_cost_with_spectrum_terms(net):
    spec = lt.CostSpec([(0, 1.0)], [(4, 2.0)])
    a, b = net.decode(np.zeros(2)), net.decode(np.ones(2))
    meas = lt.measurements_from_stack(spec, b, STATIONS)
    expect = lt.cost_tcav(a[bs.CHANNEL_ZE], b[bs.CHANNEL_ZE]) + 2 * lt.cost_spectrum(a[60 + bs.CHANNEL_XE], bs.energy_spectrum(b[60 + bs.CHANNEL_XE]))
    assert lt.combined_cost(spec, a, meas, STATIONS) == pytest.approx(expect, rel=1e-12)


def test_combined_cost_missing_station(net):
    spec = lt.CostSpec([(9, 1.0)])
    with pytest.raises(lt.CostSpecError):
        lt.combined_cost(spec, net.decode(np.zeros(2)), {}, STATIONS)


# --- latent box ---------------------------------------------------------------


def test_latent_box_inverse():
    rng = np.random.default_rng(4)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    box = lt.LatentBox(rng.standard_normal(3), q, np.array([1.0, 2.0, 0.5]))
    u = rng.uniform(-1, 1, (10, 3))
    np.testing.assert_allclose(box.to_unit(box.to_latent(u)), u, atol=1e-12)
    assert box.diameter == pytest.approx(2 * np.sqrt(1 + 4 + 0.25))
    np.testing.assert_allclose(box.corner([1, 1, 1]), box.to_latent(np.ones(3)))


# --- detection helpers --------------------------------------------------------


def test_detect_stuck_on_plateau():
    s = lt.TuneSettings()
    assert lt.detect_stuck(np.full(1000, 0.3), s)
    assert not lt.detect_stuck(np.full(1000, 0.01), s)
    assert not lt.detect_stuck(np.full(400, 0.3), s)  # too short to judge
    assert not lt.detect_stuck(np.geomspace(1.0, 0.06, 1000), s)


def test_steps_to_threshold():
    costs = np.concatenate([np.ones(50), np.zeros(50)])
    # trailing mean over 10 first drops below 0.05 once all 10 samples are zero
    assert lt.steps_to_threshold(costs, 10, 0.05) == 60
    assert lt.steps_to_threshold(np.ones(20), 10, 0.05) is None


def test_es_config_resolves_fastest_dither():
    c = lt.es_config(DEFAULT_ES, 4)
    assert c.omega * c.ratios.max() * c.dt == pytest.approx(DEFAULT_ES["phase_step"])
    assert c.normalize and np.all(c.lo == -1) and np.all(c.hi == 1)


# --- tune ---------------------------------------------------------------------


def test_tune_zero_alpha_is_frozen(net):
    cfg = lt.es_config({**DEFAULT_ES, "alpha": 0.0}, 2)
    prov = lt.ManufacturedProvider(net, np.array([1.0, -1.0]), TCAV1, STATIONS)
    start = np.array([-0.5, 0.7])
    r = lt.tune(net, prov, TCAV1, cfg, start, 300, STATIONS)
    np.testing.assert_allclose(r.latents, np.broadcast_to(start, r.latents.shape), atol=1e-12)
    assert np.all(r.costs == r.costs[0])
    assert len(r.costs) == 300


def test_tune_does_not_mutate_weights(net):
    before = net.checksum()
    prov = lt.ManufacturedProvider(net, np.array([1.0, 1.0]), ALL, STATIONS)
    r = lt.tune(net, prov, ALL, lt.es_config(DEFAULT_ES, 2), np.zeros(2), 200, STATIONS)
    assert net.checksum() == before == r.weights_checksum


def test_tune_latent_dimension_checked(net):
    prov = lt.ManufacturedProvider(net, np.zeros(2), TCAV1, STATIONS)
    with pytest.raises(ValueError):
        lt.tune(net, prov, TCAV1, lt.es_config(DEFAULT_ES, 2), np.zeros(3), 10, STATIONS)


def test_tune_stop_on_success(net):
    target = np.array([0.2, 0.1])
    prov = lt.ManufacturedProvider(net, target, TCAV1, STATIONS)
    cfg = lt.es_config(DEFAULT_ES, 2)
    r = lt.tune(net, prov, TCAV1, cfg, target, 5000, STATIONS, stop_on_success=True)
    assert len(r.costs) < 5000
    assert r.steps_to_threshold == len(r.costs)


def test_manufactured_target_example(desk):
    """N_L=2, TCAV1-only cost, start at a box corner: final latent near the target."""
    from latent_scope.experiments import pick_latents

    model, _, stations = desk.model(2, 1)
    box = lt.LatentBox.of(model)
    pool = desk.pool(2, 1)
    cfg = lt.es_config(DEFAULT_ES, 2)
    close = []
    for seed in range(10):
        target, start = pick_latents(pool, seed, "corner", box, model.latent_center)
        prov = lt.ManufacturedProvider(model, target, TCAV1, stations)
        r = lt.tune(model, prov, TCAV1, cfg, start, 2000, stations)
        close.append(np.linalg.norm(r.final_latent - target) < 0.1 * box.diameter)
    # per-run example, checked as a rate over seeds
    assert np.mean(close) >= 0.8, close


# --- providers ----------------------------------------------------------------


@pytest.fixture(scope="module")
def sim_setup():
    doc = tiny_doc()
    sim = sim_config(doc)
    _, axes = build_axes(doc, 1)
    return sim, axes


def test_simulated_provider_truth_normalized(sim_setup):
    sim, axes = sim_setup
    prov = lt.SimulatedProvider(sim, sim.nominal(), 3, axes, ALL)
    t = prov.truth()
    assert t.shape == (75, 8, 8)
    np.testing.assert_allclose(t.sum(axis=(1, 2)), 1.0, atol=1e-6)
    assert set(prov.measure()) == {("tcav", 0), ("tcav", 2), ("tcav", 3)}


def test_simulated_provider_drift(sim_setup):
    sim, axes = sim_setup
    drift = lt.Drift("l1_phase", 0.01, 10.0)
    prov = lt.SimulatedProvider(sim, sim.nominal(), 3, axes, ALL, drift=drift, update_every=1.0)
    assert prov.params_at(2.5).l1_phase == pytest.approx(sim.nominal().l1_phase + 0.01 * np.sin(0.5 * np.pi))
    a = prov.truth(0.2).copy()
    assert np.array_equal(prov.truth(0.9), a)  # held within an update interval
    assert not np.array_equal(prov.truth(2.5), a)


def test_simulated_provider_noise(sim_setup):
    sim, axes = sim_setup
    clean = lt.SimulatedProvider(sim, sim.nominal(), 3, axes, TCAV1).measure()[("tcav", 0)]
    noisy = lt.SimulatedProvider(sim, sim.nominal(), 3, axes, TCAV1, noise_level=0.05).measure()[("tcav", 0)]
    assert noisy.sum() == pytest.approx(1.0)
    assert 0 < lt.cost_tcav(clean, noisy) < 0.5


# --- unseen-channel report ----------------------------------------------------


def test_evaluate_unseen_zero_for_truth(net):
    s = net.decode(np.zeros(2))
    rep = lt.evaluate_unseen(s, s, ALL.measured_channels(STATIONS))
    assert rep.measured_mean == 0 and rep.unseen_mean == 0


def test_evaluate_unseen_partition(net):
    a, b = net.decode(np.zeros(2)), net.decode(np.ones(2))
    measured = ALL.measured_channels(STATIONS)
    rep = lt.evaluate_unseen(a, b, measured)
    assert sorted(rep.measured + rep.unseen) == list(range(75))
    assert not set(rep.measured) & set(rep.unseen)
    assert rep.measured_mean == pytest.approx(rep.errors[measured].mean())


def test_evaluate_unseen_rejects_bad_channel(net):
    s = net.decode(np.zeros(2))
    with pytest.raises(ValueError):
        lt.evaluate_unseen(s, s, [75])
