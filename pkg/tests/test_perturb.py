import numpy as np
import pytest

from conftest import random_image, tiny_model
from kneurons.identify import NeuronSet
from kneurons.model import GenConfig, Intervention, embed_image, forward_with_capture, generate
from kneurons.perturb import (
    EvalImage,
    NoiseSpec,
    PerturbResult,
    cell_seed,
    knowledge_presence,
    perturbed_generate,
    read_results_csv,
    run_cells,
    sample_noise,
    suppression_scores,
    write_results_csv,
    write_scores_csv,
)


def test_noise_contracts():
    assert not sample_noise(0.0, 16, 3).any()
    assert np.array_equal(sample_noise(40.0, 16, 3), sample_noise(40.0, 16, 3))
    v = sample_noise(80.0, 100_000, cell_seed(0, 1, 2, 3))
    assert 79.0 <= v.std() <= 81.0
    assert abs(v.mean()) < 1.0


def test_cell_seeds_differ():
    seeds = {cell_seed(0, li, si, gi) for li in range(3) for si in range(10) for gi in range(3)}
    assert len(seeds) == 90
    assert cell_seed(5, 0, 0, 0) != cell_seed(6, 0, 0, 0)


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(levels=(-1.0,))
    with pytest.raises(ValueError):
        NoiseSpec(scale_mode="weird")
    assert NoiseSpec.absolute_levels().levels == (40.0, 80.0, 120.0)


def test_perturbed_generate_identities():
    m = tiny_model(0)
    img = random_image(0)
    prompt = m.prompt_ids()
    base = generate(m, img, prompt)
    assert perturbed_generate(m, img, prompt, NeuronSet([], "final"), np.ones(16)) == base
    assert perturbed_generate(m, img, prompt, [(0, 1), (1, 2)], np.zeros(16)) == base


def test_recorded_activation_shift():
    m = tiny_model(1)
    tok = embed_image(random_image(1), m)
    v = sample_noise(2.0, 16, 9)
    _, base = forward_with_capture(m, tok, m.prompt_ids())
    _, pert = forward_with_capture(m, tok, m.prompt_ids(), Intervention(((1, 4), (1, 9)), v))
    for i in (4, 9):
        assert np.allclose(pert.O[1, :16, i], base.O[1, :16, i] + v, atol=1e-12)


def test_knowledge_presence():
    assert knowledge_presence("a bear on snow".split(), "bear") == 1
    assert knowledge_presence("two bears".split(), "bear") == 1
    assert knowledge_presence("a bus".split(), "bear") == 0
    assert knowledge_presence("a Bear".split(), "bear") == 1
    assert knowledge_presence("a fire hydrant".split(), "fire hydrant") == 1
    assert knowledge_presence("a fire truck".split(), "fire hydrant") == 0


def _r(k, image_k, presence, method="ours", level=2.0):
    return PerturbResult(k, f"{image_k}-0", image_k, 0, method, level, 0, 1, "", presence)


def test_scores_all_present():
    rows = suppression_scores([_r("bear", "bear", 1), _r("bear", "bus", 1)])
    assert rows[0].S_se == 0.0 and rows[0].S_re == 1.0 and rows[0].S_mean == 0.5


def test_scores_perfect():
    rows = suppression_scores([_r("bear", "bear", 0), _r("bear", "bus", 1), _r("bear", "cake", 1)])
    r = rows[0]
    assert (r.S_se, r.S_re, r.S_mean) == (1.0, 1.0, 1.0)
    assert rows[-1].k == "Ave." and rows[-1].S_mean == 1.0


def test_scores_gap_marker(tmp_path):
    rows = suppression_scores([_r("bear", "bear", 0)])
    assert rows[0].S_re is None and rows[0].S_mean is None
    write_scores_csv(tmp_path / "s.csv", rows)
    assert "NA" in (tmp_path / "s.csv").read_text()


def test_scores_mean_invariant():
    rng = np.random.default_rng(0)
    res = [_r(k, ik, int(rng.integers(0, 2)), m, lv)
           for k in ("bear", "bus") for ik in ("bear", "bus", "cake")
           for m in ("ours", "random_baseline") for lv in (2.0, 4.0) for _ in range(3)]
    for row in suppression_scores(res):
        assert abs(row.S_mean - (row.S_se + row.S_re) / 2) <= 1e-12


def test_run_cells_matches_direct_generation_and_jobs(tmp_path):
    m = tiny_model(2)
    imgs = [EvalImage(f"i{j}", k, random_image(j)) for j, k in enumerate(["bear", "bus"])]
    groups = {("bear", "ours", 0): NeuronSet([(0, 1), (1, 5)], "final"),
              ("bus", "ours", 0): NeuronSet([(1, 2)], "final")}
    spec = NoiseSpec((0.0, 3.0), samples=2, base_seed=4, scale_mode="absolute")
    gen = GenConfig(max_new_tokens=6)
    res = run_cells(m, imgs, groups, spec, m.prompt_ids(), gen)
    assert len(res) == 2 * 2 * 2 * 2
    r = [x for x in res if x.k == "bear" and x.level == 3.0 and x.sample == 1 and x.image_id == "i1"][0]
    v = sample_noise(3.0, 16, cell_seed(4, 1, 1, 0))
    direct = perturbed_generate(m, imgs[1].pixels, m.prompt_ids(), groups[("bear", "ours", 0)], v, gen)
    assert r.caption == " ".join(m.vocab.words[t] for t in direct)
    assert run_cells(m, imgs, groups, spec, m.prompt_ids(), gen, jobs=3) == res
    write_results_csv(tmp_path / "r.csv", res)
    assert read_results_csv(tmp_path / "r.csv") == res
