import math

import numpy as np
import pytest

from sttd.data import (
    DemandTensor,
    ODGraph,
    SyntheticSpec,
    build_adjacency,
    ingest_trips,
    make_windows,
    sample_od_grid,
    split_chronological,
    split_lengths,
    synth_generate,
)
from sttd.errors import EmptyGraph, InsufficientZones, MalformedRow, TooShort, UnknownZone

HEADER = "origin_zone,dest_zone,timestamp\n"
PERIOD = (0, 3600)


def write(tmp_path, body, name="trips.csv"):
    path = tmp_path / name
    path.write_text(HEADER + body)
    return path


class TestIngest:
    def test_counts(self, tmp_path):
        path = write(tmp_path, "A,B,10\nA,B,899\nA,C,900\n")
        t = ingest_trips(path, ["A", "B", "C"], 15, PERIOD)
        ab = t.pair_index.index(("A", "B"))
        ac = t.pair_index.index(("A", "C"))
        assert t.counts.shape == (9, 4)
        assert t.counts[ab, 0] == 2
        assert t.counts[ac, 1] == 1
        assert t.counts.sum() == 3

    def test_empty_file(self, tmp_path):
        t = ingest_trips(write(tmp_path, ""), ["A", "B"], 60, PERIOD)
        assert t.counts.shape == (4, 1) and not t.counts.any()

    def test_boundary_goes_to_later_window(self, tmp_path):
        t = ingest_trips(write(tmp_path, "A,B,900\n"), ["A", "B"], 15, PERIOD)
        assert t.counts[t.pair_index.index(("A", "B"))].tolist() == [0, 1, 0, 0]

    def test_iso_timestamps(self, tmp_path):
        path = write(tmp_path, "A,B,1970-01-01T00:20:00Z\n")
        t = ingest_trips(path, ["A", "B"], 15, ("1970-01-01T00:00:00", "1970-01-01T01:00:00"))
        assert t.counts[t.pair_index.index(("A", "B")), 1] == 1

    def test_unknown_zone(self, tmp_path):
        with pytest.raises(UnknownZone, match="line 2"):
            ingest_trips(write(tmp_path, "A,Z,10\n"), ["A", "B"], 15, PERIOD)

    def test_malformed_row(self, tmp_path):
        with pytest.raises(MalformedRow, match="line 3"):
            ingest_trips(write(tmp_path, "A,B,10\nA,B,noon\n"), ["A", "B"], 15, PERIOD)

    def test_out_of_period_dropped(self, tmp_path):
        t = ingest_trips(write(tmp_path, "A,B,-5\nA,B,3600\nA,B,5\n"), ["A", "B"], 60, PERIOD)
        assert t.counts.sum() == 1

    def test_round_trip(self, tmp_path):
        t = ingest_trips(write(tmp_path, "A,B,10\n"), ["A", "B"], 15, PERIOD)
        t.save(tmp_path / "demand")
        back = DemandTensor.load(tmp_path / "demand")
        assert np.array_equal(back.counts, t.counts) and back.pair_index == t.pair_index
        assert (back.resolution_minutes, back.start_time) == (15, 0)

    def test_invalid_resolution(self):
        with pytest.raises(ValueError):
            DemandTensor(np.zeros((1, 2)), 10, 0, [("A", "B")])


def grid_tensor(n_zones, T=5):
    zones = [f"z{i}" for i in range(n_zones)]
    pairs = [(o, d) for o in zones for d in zones]
    counts = np.arange(len(pairs) * T).reshape(len(pairs), T)
    return DemandTensor(counts, 15, 0, pairs)


class TestGrid:
    def test_full_selection_is_identity(self):
        t = grid_tensor(4)
        s = sample_od_grid(t, 4, 4, seed=3)
        assert s.pair_index == t.pair_index and np.array_equal(s.counts, t.counts)

    def test_deterministic(self):
        t = grid_tensor(8)
        assert sample_od_grid(t, 3, 5, seed=1).pair_index == sample_od_grid(t, 3, 5, seed=1).pair_index

    def test_ten_by_ten_from_77(self):
        s = sample_od_grid(grid_tensor(77, T=2), 10, 10, seed=0)
        assert s.num_pairs == 100
        assert len({o for o, _ in s.pair_index}) == 10

    def test_insufficient(self):
        with pytest.raises(InsufficientZones):
            sample_od_grid(grid_tensor(3), 4, 2, seed=0)


class TestAdjacency:
    def test_shared_endpoint(self):
        g = build_adjacency([("A", "B"), ("A", "C"), ("D", "C")])
        assert g.adjacency.tolist() == [[0, 1, 0], [1, 0, 1], [0, 1, 0]]

    def test_single_pair(self):
        with pytest.raises(EmptyGraph):
            build_adjacency([("A", "B")])

    def test_correlation_on_noise(self):
        counts = np.random.default_rng(0).poisson(3.0, size=(6, 200))
        with pytest.raises(EmptyGraph):
            build_adjacency([(str(i), "x") for i in range(6)], "demand_correlation", counts, 1.0)

    def test_correlation_links_copies(self):
        base = np.random.default_rng(0).poisson(3.0, size=200)
        counts = np.stack([base, base + 1, np.random.default_rng(1).poisson(3.0, size=200)])
        g = build_adjacency([("a", "b"), ("c", "d"), ("e", "f")], "demand_correlation", counts, 0.9)
        assert g.adjacency.tolist() == [[0, 1, 0], [1, 0, 0], [0, 0, 0]]

    def test_transitions(self):
        a = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 0.0], [3.0, 1.0, 0.0]])
        g = ODGraph(a)
        assert np.all(np.diag(g.adjacency) == 0)
        assert g.forward_transition[0].tolist() == [0.0, 1.0, 0.0]
        assert not g.forward_transition[1].any()
        assert g.backward_transition.sum(axis=1) == pytest.approx([1.0, 1.0, 0.0])


class TestSplitsAndWindows:
    @pytest.mark.parametrize("T,expected", [(100, (60, 10, 30)), (10, (6, 1, 3)), (2000, (1200, 200, 600))])
    def test_lengths(self, T, expected):
        assert split_lengths(T) == expected

    def test_too_short(self):
        with pytest.raises(TooShort):
            split_lengths(9)

    def test_split_is_contiguous(self):
        t = grid_tensor(2, T=20)
        tr, va, te = split_chronological(t)
        assert np.array_equal(np.concatenate([tr.counts, va.counts, te.counts], axis=1), t.counts)
        assert va.start_time == t.window_start(12)

    def test_window_counts(self):
        seg = np.arange(24).reshape(2, 12)
        assert len(make_windows(seg, 8, 1)) == 4
        assert len(make_windows(seg, 8, 4)) == 1

    def test_window_contents(self):
        seg = np.arange(24).reshape(2, 12)
        w = make_windows(seg, 8, 2)
        x, y = w[1]
        assert x[0].tolist() == list(range(1, 9))
        assert y[1].tolist() == [21, 22]

    def test_window_too_short(self):
        with pytest.raises(TooShort):
            make_windows(np.zeros((2, 5)), 8, 1)


class TestSynthetic:
    def test_zero_fraction(self):
        t, truth = synth_generate(SyntheticSpec(10, 10, 2000, mu=1.0, phi=1.0, rho=1.5, seed=4))
        n = t.counts.size
        p0 = math.exp(-2)
        # rounding also sends draws below 0.5 to zero, so compare against the raw atom from below
        assert (t.counts == 0).mean() >= p0 - 4 * math.sqrt(p0 * (1 - p0) / n)
        assert truth["mu"].shape == (100, 2000)

    def test_raw_zero_fraction_matches_atom(self):
        from sttd.tweedie import sample_array

        spec = SyntheticSpec(10, 10, 2000, mu=1.0, phi=1.0, rho=1.5, seed=4)
        f = spec.fields()
        draws = sample_array(f["mu"], f["phi"], f["rho"], np.random.default_rng(spec.seed))
        p0, n = math.exp(-2), draws.size
        assert abs((draws == 0).mean() - p0) < 4 * math.sqrt(p0 * (1 - p0) / n)

    def test_deterministic(self):
        spec = SyntheticSpec(2, 3, 50, mu=2.0, seed=9)
        assert np.array_equal(synth_generate(spec)[0].counts, synth_generate(spec)[0].counts)

    def test_vanishing_rate(self):
        t, _ = synth_generate(SyntheticSpec(2, 2, 50, mu=1.0, phi=1e12, rho=1.5))
        assert not t.counts.any()

    def test_daily_profile(self):
        spec = SyntheticSpec(1, 1, 96 * 2, mu=2.0, daily_amplitude=0.5, resolution_minutes=15)
        mu = spec.fields()["mu"][0]
        assert mu.max() == pytest.approx(3.0, rel=1e-3) and mu.min() == pytest.approx(1.0, rel=1e-3)

    def test_invalid_field(self):
        with pytest.raises(ValueError):
            synth_generate(SyntheticSpec(1, 1, 10, rho=2.5))
