import numpy as np
import pytest

from morphgen.evaluation import ks_two_sample
from morphgen.morphology import describe_channel
from morphgen.synth import ARCHETYPES, generate_cell, generate_dataset
from morphgen.volume import read_volume


@pytest.mark.parametrize("archetype", sorted(ARCHETYPES))
def test_nucleus_inside_cytoplasm(archetype):
    for seed in range(5):
        cell = generate_cell(archetype, seed, with_signal=True)
        assert not np.any(cell.nucleus_mask & ~cell.cytoplasm_mask)
        assert cell.nucleus_mask.any()
        assert cell.signal.shape == cell.cytoplasm_mask.shape


def test_same_seed_is_bit_identical():
    a = generate_cell("protrusive", 11, with_signal=True)
    b = generate_cell("protrusive", 11, with_signal=True)
    assert a.volume.data.tobytes() == b.volume.data.tobytes()
    assert a.signal.tobytes() == b.signal.tobytes()
    assert generate_cell("protrusive", 12).volume.data.tobytes() != a.volume.data.tobytes()


def test_unknown_archetype():
    with pytest.raises(ValueError):
        generate_cell("cubic", 0)


def test_dataset_files_and_manifest(tmp_path):
    generate_dataset("round", 5, 7, tmp_path / "a", cube=16)
    generate_dataset("round", 5, 7, tmp_path / "b", cube=16)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["manifest.csv"] + [f"round_{i:05d}.mvol" for i in range(5)]
    rows = (tmp_path / "a" / "manifest.csv").read_text().splitlines()
    assert rows[0] == "sample_id,archetype,seed" and len(rows) == 6
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert read_volume(tmp_path / "a" / "round_00000.mvol").extents == (16, 16, 16)


def _descriptors(archetype, n, seed):
    cells = generate_dataset(archetype, n, seed)
    return np.array([describe_channel(c.volume.cytoplasm).as_array() for c in cells])


@pytest.fixture(scope="module")
def populations():
    return {"round": _descriptors("round", 200, 0), "protrusive": _descriptors("protrusive", 200, 1)}


def test_sphericity_separates_archetypes(populations):
    res = ks_two_sample(populations["round"][:100, 2], populations["protrusive"][:100, 2])
    assert res["p_value"] < 0.01


def test_descriptor_means_follow_design(populations):
    r, p = populations["round"].mean(0), populations["protrusive"].mean(0)
    assert r[2] > p[2]  # sphericity
    assert r[4] < p[4]  # protrusivity
