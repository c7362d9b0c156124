import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridsense.errors import ParseError, StructuralError
from gridsense.netmodel import (
    Branch,
    NetworkModel,
    QuadForm,
    VoltageState,
    branch_admittances,
    branch_flow_quadforms,
    build_ybus,
    ieee30,
    injection_quadforms,
    load_case,
    model_from_dict,
    pmu_quadform,
    vmag_quadform,
)


def two_bus(y=1 + 0j):
    return NetworkModel(2, (Branch(1, 2, y),))


def random_state(rng, n):
    return VoltageState(1 + 0.1 * rng.standard_normal(n), 0.1 * rng.standard_normal(n))


def complex_power(model, state):
    v = state.to_complex()
    return v * np.conj(build_ybus(model) @ v)


class TestYbus:
    def test_unit_conductance(self):
        np.testing.assert_array_equal(build_ybus(two_bus()), [[1, -1], [-1, 1]])

    def test_no_branches(self):
        np.testing.assert_array_equal(build_ybus(NetworkModel(3)), np.zeros((3, 3)))

    def test_reactance(self):
        y = 1 / complex(0, 0.1)
        np.testing.assert_allclose(build_ybus(two_bus(y)), [[-10j, 10j], [10j, -10j]], atol=1e-12)

    def test_parallel_branches_sum(self):
        m = NetworkModel(2, (Branch(1, 2, 1 + 0j), Branch(1, 2, 2 + 0j)))
        np.testing.assert_array_equal(build_ybus(m), [[3, -3], [-3, 3]])

    def test_symmetric_without_taps(self):
        y = build_ybus(ieee30())
        assert y.shape == (30, 30)
        # the bundled case has off-nominal transformers; rebuild with unit taps
        m = ieee30()
        flat = NetworkModel(m.n_buses, tuple(Branch(b.from_bus, b.to_bus, b.y, b.b_shunt, 1.0) for b in m.branches), m.bus_shunts)
        yf = build_ybus(flat)
        np.testing.assert_allclose(yf, yf.T, atol=0)

    def test_pi_model_entries(self):
        yff, yft, ytf, ytt = branch_admittances(Branch(1, 2, 2 - 4j, b_shunt=0.2, tap=0.5))
        assert yff == pytest.approx((2 - 4j + 0.1j) / 0.25)
        assert yft == ytf == pytest.approx(-(2 - 4j) / 0.5)
        assert ytt == pytest.approx(2 - 4j + 0.1j)


class TestModelValidation:
    def test_bus_out_of_range(self):
        with pytest.raises(StructuralError):
            NetworkModel(2, (Branch(1, 3, 1 + 0j),))

    def test_self_loop(self):
        with pytest.raises(StructuralError):
            NetworkModel(2, (Branch(2, 2, 1 + 0j),))

    def test_zero_buses(self):
        with pytest.raises(StructuralError):
            NetworkModel(0)

    def test_find_branch(self):
        m = two_bus()
        assert m.find_branch(1, 2) == (0, "from")
        assert m.find_branch(2, 1) == (0, "to")
        with pytest.raises(StructuralError):
            NetworkModel(3, (Branch(1, 2, 1 + 0j),)).find_branch(2, 3)


class TestInjections:
    def test_ordering_and_count(self):
        forms = injection_quadforms(ieee30())
        assert len(forms) == 60
        assert all(f.kind == "active_injection" for f in forms[:30])
        assert all(f.kind == "reactive_injection" for f in forms[30:])

    def test_lossless_flat_state_has_no_active_power(self):
        m = NetworkModel(3, (Branch(1, 2, -5j), Branch(2, 3, -2j)))
        flat = VoltageState.flat(3)
        assert all(f.evaluate(flat) == 0 for f in injection_quadforms(m)[:3])

    def test_two_bus_oracle(self):
        s = VoltageState([1.0, 0.9], [0.0, 0.0])
        forms = injection_quadforms(two_bus())
        assert forms[0].evaluate(s) == pytest.approx(0.1, abs=1e-12)
        assert forms[1].evaluate(s) == pytest.approx(-0.09, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_matches_complex_power(self, seed):
        rng = np.random.default_rng(seed)
        m = ieee30()
        s = random_state(rng, m.n_buses)
        forms = injection_quadforms(m)
        got = np.array([f.evaluate(s) for f in forms])
        ref = complex_power(m, s)
        np.testing.assert_allclose(got, np.concatenate([ref.real, ref.imag]), rtol=1e-12, atol=1e-12)

    def test_forms_are_symmetric(self):
        for f in injection_quadforms(ieee30()):
            np.testing.assert_array_equal(f.coeff, f.coeff.T)


class TestOtherForms:
    def test_vmag(self):
        f = vmag_quadform(2, 1)
        assert f.evaluate(VoltageState([1.0, 0.0], [0.0, 0.0])) == 1.0
        assert f.evaluate(VoltageState([0.6, 0.0], [0.8, 0.0])) == pytest.approx(1.0)

    def test_vmag_out_of_range(self):
        with pytest.raises(StructuralError):
            vmag_quadform(2, 3)

    def test_branch_flow_two_bus(self):
        p, q = branch_flow_quadforms(two_bus(), 0)
        s = VoltageState([1.0, 0.9], [0.0, 0.0])
        assert p.evaluate(s) == pytest.approx(0.1, abs=1e-12)
        assert q.evaluate(s) == pytest.approx(0.0, abs=1e-12)

    def test_branch_flow_zero_difference(self):
        p, q = branch_flow_quadforms(two_bus(3 - 7j), 0)
        s = VoltageState([1.02, 1.02], [0.1, 0.1])
        assert p.evaluate(s) == pytest.approx(0, abs=1e-14)
        assert q.evaluate(s) == pytest.approx(0, abs=1e-14)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31), end=st.sampled_from(["from", "to"]))
    def test_branch_flow_oracle(self, seed, end):
        rng = np.random.default_rng(seed)
        m = ieee30()
        k = int(rng.integers(len(m.branches)))
        s = random_state(rng, m.n_buses)
        br = m.branches[k]
        yff, yft, ytf, ytt = branch_admittances(br)
        v = s.to_complex()
        vf, vt = v[br.from_bus - 1], v[br.to_bus - 1]
        ref = vf * np.conj(yff * vf + yft * vt) if end == "from" else vt * np.conj(ytf * vf + ytt * vt)
        p, q = branch_flow_quadforms(m, k, end)
        assert p.evaluate(s) == pytest.approx(ref.real, abs=1e-12)
        assert q.evaluate(s) == pytest.approx(ref.imag, abs=1e-12)

    def test_branch_index_out_of_range(self):
        with pytest.raises(StructuralError):
            branch_flow_quadforms(two_bus(), 1)

    def test_pmu_selector_and_border(self):
        f = pmu_quadform(3, 1, "real")
        s = VoltageState([0.98, 1.0, 1.0], [0.0, 0.1, 0.2])
        assert f.evaluate(s) == pytest.approx(0.98)
        assert pmu_quadform(3, 3, "imag").evaluate(s) == pytest.approx(0.2)
        inner = f.coeff[:-1, :-1]
        assert not inner.any() and f.coeff[-1, -1] == 0
        np.testing.assert_array_equal(f.coeff, f.coeff.T)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_pmu_equals_coordinate(self, seed):
        rng = np.random.default_rng(seed)
        s = random_state(rng, 5)
        for b in range(1, 6):
            assert pmu_quadform(5, b, "real").evaluate(s) == pytest.approx(s.vx[b - 1], abs=1e-15)
            assert pmu_quadform(5, b, "imag").evaluate(s) == pytest.approx(s.vy[b - 1], abs=1e-15)

    def test_quadform_symmetrizes(self):
        f = QuadForm(np.array([[0.0, 2.0], [0.0, 0.0]]), "vmag_squared")
        np.testing.assert_array_equal(f.coeff, [[0, 1], [1, 0]])

    def test_quadform_bad_kind(self):
        with pytest.raises(StructuralError):
            QuadForm(np.eye(3), "current")


class TestCaseFiles:
    def test_bundled_case(self):
        m = ieee30()
        assert m.n_buses == 30 and len(m.branches) == 41 and m.slack_bus == 1

    def test_roundtrip_file(self, tmp_path):
        doc = {
            "buses": [{"id": 1, "type": "slack"}, {"id": 2, "pd": 0.5, "shunt_b": 0.1}],
            "branches": [{"from": 1, "to": 2, "r": 0.0, "x": 0.1}],
        }
        path = tmp_path / "case.json"
        path.write_text(json.dumps(doc))
        m = load_case(path)
        assert m.buses[1].pd == 0.5 and m.bus_shunts[1] == 0.1j
        np.testing.assert_allclose(build_ybus(m)[0, 1], 10j)

    def test_bad_json(self, tmp_path):
        path = tmp_path / "case.json"
        path.write_text("{\n  nope")
        with pytest.raises(ParseError) as err:
            load_case(path)
        assert err.value.line == 2

    def test_missing_field(self):
        with pytest.raises(ParseError):
            model_from_dict({"buses": [{"id": 1}], "branches": [{"from": 1, "to": 1}]})

    def test_non_contiguous_ids(self):
        with pytest.raises(StructuralError):
            model_from_dict({"buses": [{"id": 1}, {"id": 3}]})

    def test_zero_impedance(self):
        with pytest.raises(StructuralError):
            model_from_dict({"buses": [{"id": 1}, {"id": 2}], "branches": [{"from": 1, "to": 2, "r": 0, "x": 0}]})


class TestVoltageState:
    def test_vector_roundtrip(self):
        s = VoltageState([1.0, 0.9], [0.0, -0.1])
        back = VoltageState.from_vector(s.vector())
        np.testing.assert_array_equal(back.vx, s.vx)
        np.testing.assert_array_equal(back.vy, s.vy)
        np.testing.assert_array_equal(s.homogeneous(), [1.0, 0.9, 0.0, -0.1, 1.0])

    def test_rejects_non_finite(self):
        with pytest.raises(StructuralError):
            VoltageState([1.0, np.nan], [0.0, 0.0])

    def test_rejects_mismatch(self):
        with pytest.raises(StructuralError):
            VoltageState([1.0], [0.0, 0.0])
