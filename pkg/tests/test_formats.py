import struct

import numpy as np
import pytest

from clusterwalk import formats
from clusterwalk.corrector import integrate_corrector, solve_all_directions
from clusterwalk.lattice import LatticeSpec, decompose_clusters, sample_bonds
from clusterwalk.walk import simulate_walk


def test_perc_layout_is_bit_exact(tmp_path):
    cfg = sample_bonds(LatticeSpec(2, 6), 0.5, 77)
    path = tmp_path / "b.perc"
    formats.write_perc(path, cfg)
    raw = path.read_bytes()
    assert raw[:4] == b"PERC"
    assert struct.unpack_from("<HBIdQ", raw, 4) == (1, 2, 6, 0.5, 77)
    body = raw[4 + 2 + 1 + 4 + 8 + 8:]
    assert len(body) == (72 + 7) // 8
    # bit i of the stream is edge i, least significant bit first
    for i in range(72):
        assert bool(body[i // 8] >> (i % 8) & 1) == cfg.bonds[i]
    assert formats.read_perc(path) == cfg


def test_perc_rejects_garbage(tmp_path):
    cfg = sample_bonds(LatticeSpec(2, 4), 0.5, 1)
    path = tmp_path / "b.perc"
    formats.write_perc(path, cfg)
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(formats.FormatError):
        formats.read_perc(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(formats.FormatError):
        formats.read_perc(tmp_path / "short")


def test_field_dumps_round_trip(tmp_path):
    cfg = sample_bonds(LatticeSpec(2, 16), 0.7, 3)
    cl = decompose_clusters(cfg)
    fields = [s.field for s in solve_all_directions(cfg, cl)]
    chi = integrate_corrector(fields, cfg, cl)
    formats.write_gchi(tmp_path / "c.gchi", chi)
    raw = (tmp_path / "c.gchi").read_bytes()
    assert raw[:4] == b"GCHI" and struct.unpack_from("<HBIQ", raw, 4) == (1, 2, 16, len(chi.vertices))
    back = formats.read_gchi(tmp_path / "c.gchi")
    assert np.array_equal(back.vertices, chi.vertices) and np.array_equal(back.values, chi.values)
    for f in fields:
        formats.write_gfld(tmp_path / "f.gfld", f)
        g = formats.read_gfld(tmp_path / "f.gfld")
        assert g.b == f.b and np.array_equal(g.edges, f.edges) and np.array_equal(g.values, f.values)


def test_endpoint_csv(tmp_path):
    ends = np.array([[0.1, -0.2], [1.0 / 3, 2.0]])
    formats.write_endpoints(tmp_path / "e.csv", ends, [5, 6], 10.0, 0.1)
    text = (tmp_path / "e.csv").read_text().splitlines()
    assert text[0] == "walk_id,seed,t,eps,x1,x2"
    back, seeds, t, eps = formats.read_endpoints(tmp_path / "e.csv")
    assert np.array_equal(back, ends) and seeds.tolist() == [5, 6] and (t, eps) == (10.0, 0.1)


def test_trajectory_csv(tmp_path):
    cfg = sample_bonds(LatticeSpec(2, 8), 1.0, 0)
    tr = simulate_walk(cfg, None, 0, 5.0, 1)
    formats.write_trajectories(tmp_path / "t.csv", [tr])
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "walk_id,event_index,time,dx1,dx2"
    assert len(lines) == 1 + tr.n_events
    last = lines[-1].split(",")
    assert [int(v) for v in last[3:]] == tr.displacements[-1].tolist()
