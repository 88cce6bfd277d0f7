import numpy as np
import pytest

from helpers import random_zero_trace
from stvf.io_formats import (
    FieldSnapshot,
    read_energy_csv,
    read_field_csv,
    write_energy_csv,
    write_field_csv,
    write_field_pgm,
    write_mc_report_csv,
)
from stvf.mesh import FeFunction, build_unit_square_mesh, fe_zeros, interpolate
from stvf.noise import NoiseKind, sample_path
from stvf.stepper import SchemeParams, run_trajectory
from stvf.studies import build_operators, make_noisy_image


def test_field_csv_round_trip_zero(tmp_path):
    mesh = build_unit_square_mesh(4)
    path = tmp_path / "zero.csv"
    write_field_csv(fe_zeros(mesh), mesh, path, time=0.25)
    snap = read_field_csv(path)
    assert snap.n == 4 and snap.time == 0.25
    np.testing.assert_array_equal(snap.values, np.zeros(mesh.n_nodes))


def test_field_csv_coordinate_column(tmp_path):
    mesh = build_unit_square_mesh(3)
    xf = interpolate(lambda x, y: x, mesh)
    path = tmp_path / "x.csv"
    write_field_csv(xf, mesh, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# n=3 time=0"
    assert len(lines) == 1 + mesh.n_nodes
    for line, (x, _) in zip(lines[1:], mesh.nodes):
        assert float(line.split(",")[2]) == x


def test_field_csv_round_trip_random_bit_exact(tmp_path, rng):
    mesh = build_unit_square_mesh(5)
    f = FeFunction(rng.standard_normal(mesh.n_nodes) * 1e3)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_field_csv(f, mesh, p1, time=1e-5)
    snap = read_field_csv(p1)
    assert np.array_equal(snap.values, f.values)  # exact, not approx
    write_field_csv(FeFunction(snap.values), mesh, p2, time=snap.time)
    assert p1.read_bytes() == p2.read_bytes()


def test_field_snapshot_validates_count():
    with pytest.raises(ValueError, match=r"\(n\+1\)\^2"):
        FieldSnapshot(n=3, time=0.0, values=np.zeros(7))


def test_pgm_constant_fields(tmp_path):
    mesh = build_unit_square_mesh(2)
    lo = FeFunction(np.full(mesh.n_nodes, -1.0))
    hi = FeFunction(np.full(mesh.n_nodes, 2.0))
    p = tmp_path / "img.pgm"
    write_field_pgm(lo, mesh, p, lo=-1.0, hi=2.0)
    body = p.read_text().splitlines()
    assert body[:3] == ["P2", "3 3", "255"]
    assert all(tok == "0" for row in body[3:] for tok in row.split())
    write_field_pgm(hi, mesh, p, lo=-1.0, hi=2.0)
    body = p.read_text().splitlines()
    assert all(tok == "255" for row in body[3:] for tok in row.split())
    with pytest.raises(ValueError, match="lo < hi"):
        write_field_pgm(lo, mesh, p, lo=1.0, hi=1.0)


def test_pgm_disc_pixel_count_and_orientation(tmp_path):
    mesh = build_unit_square_mesh(32)
    g, _ = make_noisy_image(mesh, 0.0, 1)
    p = tmp_path / "disc.pgm"
    write_field_pgm(g, mesh, p, lo=0.0, hi=1.0)
    rows = p.read_text().splitlines()[3:]
    pixels = np.array([[int(t) for t in row.split()] for row in rows])
    assert pixels.shape == (33, 33)
    assert (pixels == 255).sum() == int(g.values.sum())  # white pixels = 1-nodes
    # top row is y = 1: the disc is centered, so the first row is all black
    assert np.all(pixels[0] == 0)
    # clamping keeps out-of-range values legal
    wild = FeFunction(np.linspace(-2, 3, mesh.n_nodes))
    write_field_pgm(wild, mesh, p, lo=0.0, hi=1.0)
    vals = [int(t) for row in p.read_text().splitlines()[3:] for t in row.split()]
    assert min(vals) == 0 and max(vals) == 255


def _tiny_record():
    ops = build_operators(4)
    _, g = make_noisy_image(ops.mesh, 0.1, 9)
    params = SchemeParams(t_final=5e-3, n_steps=5, eps=2.0**-5, lam=200.0,
                          noise=NoiseKind.LINEAR)
    path = sample_path(3, 5, ops.mesh, NoiseKind.LINEAR, params.tau)
    rec = run_trajectory(params, fe_zeros(ops.mesh), g, path, ops.mesh,
                         ops.m, ops.a)
    return rec, params


def test_energy_csv_round_trip(tmp_path):
    rec, params = _tiny_record()
    p = tmp_path / "energy.csv"
    write_energy_csv(rec, p)
    cols = read_energy_csv(p)
    assert len(cols["step"]) == params.n_steps + 1
    np.testing.assert_array_equal(cols["step"], np.arange(6))
    assert np.array_equal(cols["total"], [e.total for e in rec.energies])
    assert np.array_equal(cols["increment_sq"], rec.step_increments)
    assert cols["increment_sq"][0] == 0.0
    assert np.array_equal(cols["nonlinear_iters"], rec.nonlinear_iters)
    # writers are pure: same record, same bytes
    p2 = tmp_path / "energy2.csv"
    write_energy_csv(rec, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_energy_csv_zero_run_constant_total(tmp_path):
    ops = build_operators(4)
    params = SchemeParams(t_final=5e-3, n_steps=5, eps=2.0**-5,
                          noise=NoiseKind.LINEAR, mu=0.0)
    path = sample_path(3, 5, ops.mesh, NoiseKind.LINEAR, params.tau)
    zero = fe_zeros(ops.mesh)
    rec = run_trajectory(params, zero, zero, path, ops.mesh, ops.m, ops.a)
    p = tmp_path / "zero_energy.csv"
    write_energy_csv(rec, p)
    cols = read_energy_csv(p)
    assert np.all(cols["total"] == params.eps)


def test_mc_report_csv(tmp_path):
    from stvf.studies import McReport

    rep = McReport(
        statistic="demo", n_samples=4, levels=np.array([0.25, 0.125]),
        sample_values=np.ones((2, 4)), means=np.array([1.0, 0.5]),
        std_errors=np.array([0.1, 0.05]), criterion="demo", slope=1.0,
        passed=True,
    )
    p = tmp_path / "rep.csv"
    write_mc_report_csv(rep, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "statistic,level,mean,std_error,n_samples"
    assert lines[1].startswith("demo,0.25,1,")
    assert len(lines) == 3
