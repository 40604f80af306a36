import numpy as np
import pytest

from wstreid import datamodel as dm
from wstreid import synthgen
from wstreid.errors import ContractError, DatasetError, ParseError


def make_sample(sid, pid, cam, tracklet=0, ts=0.0):
    return dm.Sample(
        sample_id=sid,
        raw_person_id=pid,
        camera_id=cam,
        raw_tracklet_id=tracklet,
        timestamp=ts,
    )


# ---------------------------------------------------------------------------
# build_wst


def test_one_person_three_cameras_gives_three_wsts():
    samples = [make_sample(i, pid=7, cam=i) for i in range(3)]
    ds = dm.build_wst(samples)
    assert ds.num_cameras == 3
    assert ds.class_counts == [1, 1, 1]
    assert ds.labels == [0, 0, 0]


def test_labels_dense_per_camera_and_person_consistent():
    # camera 0: persons 5, 9; camera 1: person 9 twice
    samples = [
        make_sample(0, pid=9, cam=0),
        make_sample(1, pid=5, cam=0),
        make_sample(2, pid=9, cam=1),
        make_sample(3, pid=9, cam=1),
        make_sample(4, pid=5, cam=0),
    ]
    ds = dm.build_wst(samples)
    assert ds.class_counts == [2, 1]
    # dense labels, ascending person order within camera
    assert ds.labels == [1, 0, 0, 0, 0]
    # same (camera, label) always maps to one person
    seen = {}
    for s, y in zip(ds.samples, ds.labels):
        key = (s.camera_id, y)
        assert seen.setdefault(key, s.raw_person_id) == s.raw_person_id


def test_build_wst_idempotent():
    rng = np.random.default_rng(0)
    samples = [
        make_sample(i, pid=int(rng.integers(0, 12)), cam=int(rng.integers(0, 4)))
        for i in range(200)
    ]
    ds1 = dm.build_wst(samples)
    ds2 = dm.build_wst(ds1.samples)
    assert ds1.labels == ds2.labels
    assert ds1.class_counts == ds2.class_counts


def test_build_wst_members_index():
    samples = [
        make_sample(0, pid=1, cam=0),
        make_sample(1, pid=1, cam=0),
        make_sample(2, pid=2, cam=0),
    ]
    ds = dm.build_wst(samples)
    assert ds.members[0][ds.labels[0]] == [0, 1]
    assert ds.members[0][ds.labels[2]] == [2]


def test_build_wst_empty_rejected():
    with pytest.raises(DatasetError):
        dm.build_wst([])


# ---------------------------------------------------------------------------
# build_reduced


def chain_samples(pid, cam, times, start_id=0):
    return [
        make_sample(start_id + i, pid=pid, cam=cam, tracklet=i, ts=t)
        for i, t in enumerate(times)
    ]


def test_reduced_keeps_longest_chain():
    # 3-minute window: gaps of 100 s chain together, 400 s splits
    times = [0, 100, 200, 1000, 1100, 1200, 1300]
    ds = dm.build_reduced(chain_samples(1, 0, times), window_minutes=3)
    kept = sorted(s.timestamp for s in ds.samples)
    assert kept == [1000, 1100, 1200, 1300]


def test_reduced_tie_broken_by_earliest_start():
    times = [0, 100, 5000, 5100]
    ds = dm.build_reduced(chain_samples(1, 0, times), window_minutes=3)
    assert sorted(s.timestamp for s in ds.samples) == [0, 100]


def test_reduced_noop_when_all_within_window():
    times = [0, 30, 60, 90]
    ds = dm.build_reduced(chain_samples(4, 2, times), window_minutes=3)
    assert ds.num_samples == 4


def test_reduced_monotone_in_window():
    rng = np.random.default_rng(8)
    samples = []
    sid = 0
    for pid in range(6):
        for cam in range(3):
            t = 0.0
            for _ in range(12):
                t += float(rng.integers(10, 900))
                samples.append(make_sample(sid, pid=pid, cam=cam, ts=t))
                sid += 1
    sizes = [
        dm.build_reduced(samples, window_minutes=w).num_samples
        for w in [0.5, 1, 2, 3, 4, 5, 7, 9, 12, 15]
    ]
    assert all(a <= b for a, b in zip(sizes, sizes[1:]))


def test_reduced_rejects_bad_window():
    with pytest.raises(ContractError):
        dm.build_reduced([make_sample(0, 1, 0)], window_minutes=0)


def test_reduced_groups_stay_single_person_camera():
    rng = np.random.default_rng(9)
    samples = []
    for sid in range(300):
        samples.append(
            make_sample(
                sid,
                pid=int(rng.integers(0, 10)),
                cam=int(rng.integers(0, 4)),
                ts=float(rng.integers(0, 10000)),
            )
        )
    ds = dm.build_reduced(samples, window_minutes=2)
    groups = {}
    for s, y in zip(ds.samples, ds.labels):
        groups.setdefault((s.camera_id, y), set()).add(s.raw_person_id)
    assert all(len(persons) == 1 for persons in groups.values())


# ---------------------------------------------------------------------------
# estimate_phi


def test_phi_all_cameras_shared():
    samples = [
        make_sample(i * 3 + c, pid=i, cam=c) for i in range(4) for c in range(3)
    ]
    phi = dm.estimate_phi(samples).phi
    np.testing.assert_array_equal(phi, np.ones((3, 3)))


def test_phi_partial_overlap():
    samples = [
        make_sample(0, pid=1, cam=0),
        make_sample(1, pid=1, cam=1),
        make_sample(2, pid=2, cam=0),
    ]
    phi = dm.estimate_phi(samples).phi
    assert phi[1, 0] == 0.5
    assert phi[0, 1] == 1.0
    assert phi[0, 0] == 1.0 and phi[1, 1] == 1.0


def test_phi_empty_camera_row_and_column_zero():
    # camera 1 exists (max id 2) but holds nobody
    samples = [make_sample(0, pid=1, cam=0), make_sample(1, pid=1, cam=2)]
    phi = dm.estimate_phi(samples).phi
    assert phi.shape == (3, 3)
    assert phi[1].sum() == 0.0 and phi[:, 1].sum() == 0.0
    assert phi[1, 1] == 0.0


def test_phi_matches_set_counting_oracle_on_synthetic_corpus():
    config = synthgen.SynthConfig(
        num_persons=40,
        num_cameras=6,
        images_per_person_per_camera=2,
        input_dim=4,
        visit_matrix=np.full((6, 6), 0.55),
        seed=123,
    )
    samples, _ = synthgen.generate(config)
    phi = dm.estimate_phi(samples).phi

    cameras_of = {}
    for s in samples:
        cameras_of.setdefault(s.raw_person_id, set()).add(s.camera_id)
    for i in range(6):
        for j in range(6):
            in_j = [p for p, cams in cameras_of.items() if j in cams]
            both = [p for p in in_j if i in cameras_of[p]]
            expected = len(both) / len(in_j) if in_j else 0.0
            assert phi[i, j] == expected


# ---------------------------------------------------------------------------
# manifest and phi files


def test_manifest_roundtrip(tmp_path):
    samples = [
        make_sample(3, pid=1, cam=0, tracklet=9, ts=12.5),
        make_sample(4, pid=2, cam=1, tracklet=10, ts=0.25),
    ]
    samples[0].tensor_key = "3"
    samples[1].tensor_key = "4"
    path = tmp_path / "m.csv"
    dm.write_manifest(path, samples)
    loaded = dm.read_manifest(path)
    assert [(s.sample_id, s.raw_person_id, s.camera_id, s.raw_tracklet_id,
             s.timestamp, s.tensor_key) for s in loaded] == [
        (3, 1, 0, 9, 12.5, "3"),
        (4, 2, 1, 10, 0.25, "4"),
    ]


def test_manifest_requires_header(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("1,2,0,0,0.0,k\n")
    with pytest.raises(ParseError):
        dm.read_manifest(path)


def test_manifest_parse_error_names_line(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(
        "sample_id,raw_person_id,camera_id,raw_tracklet_id,timestamp_seconds,tensor_key\n"
        "1,2,0,0,0.0,k\n"
        "oops,2,0,0,0.0,k\n"
    )
    with pytest.raises(ParseError, match=":3:"):
        dm.read_manifest(path)


def test_phi_file_roundtrip(tmp_path):
    phi = dm.CoOccurrenceMatrix(phi=np.array([[1.0, 0.25], [0.5, 1.0]]))
    path = tmp_path / "phi.csv"
    dm.write_phi(path, phi)
    header = path.read_text().splitlines()[0]
    assert header == "camera_0,camera_1"
    loaded = dm.read_phi(path)
    np.testing.assert_array_equal(loaded.phi, phi.phi)


def test_phi_file_rejects_out_of_range(tmp_path):
    path = tmp_path / "phi.csv"
    path.write_text("camera_0,camera_1\n1.0,2.0\n0.0,1.0\n")
    with pytest.raises(ParseError):
        dm.read_phi(path)


def test_corpus_roundtrip_with_vectors(tmp_path):
    config = synthgen.SynthConfig(
        num_persons=4, num_cameras=2, images_per_person_per_camera=3,
        input_dim=5, seed=3,
    )
    samples, _ = synthgen.generate(config)
    synthgen.write_corpus(samples, tmp_path)
    loaded = dm.load_corpus(tmp_path / "manifest.csv")
    assert len(loaded) == len(samples)
    for a, b in zip(loaded, samples):
        np.testing.assert_array_equal(a.vector, b.vector)
