import math

import numpy as np
import pytest
import torch

from domain_data import (
    DomainData,
    DomainTransform,
    Subsampling,
    SyntheticSpec,
    class_centers,
    generate_domains,
    generate_synthetic,
    read_domains_csv,
    read_embeddings_csv,
    read_points_csv,
    subsample_domain,
    transform_points,
    write_domains_csv,
    write_embeddings_csv,
)
from pdg_errors import DataFormatError, ValidationError
from prob_embedding import ProbEmbedding


def test_half_turn_negates_the_rotated_plane():
    spec = SyntheticSpec(n_domains=2, n_classes=2, dim=3, samples_per_domain=4)
    centers = class_centers(spec)
    turned = transform_points(centers, DomainTransform(rotation=math.pi))
    np.testing.assert_allclose(turned[:, :2], -centers[:, :2], atol=1e-12)
    np.testing.assert_array_equal(turned[:, 2], centers[:, 2])


def test_scale_and_translation():
    points = np.array([[1.0, 0.0], [0.0, 2.0]])
    moved = transform_points(points, DomainTransform(scale=2.0, translation=(1.0, -1.0)))
    np.testing.assert_array_equal(moved, [[3.0, -1.0], [1.0, 3.0]])


def test_class_centers_more_classes_than_dimensions():
    spec = SyntheticSpec(n_domains=2, n_classes=5, dim=2, samples_per_domain=10, separation=2.0)
    centers = class_centers(spec)
    assert centers.shape == (5, 2)
    np.testing.assert_allclose(np.linalg.norm(centers, axis=1), 2.0)


def test_shift3_task():
    domains = generate_domains(SyntheticSpec.shift3())
    assert [d.domain_id for d in domains] == [0, 1, 2, 3]
    for domain in domains:
        assert (domain.n, domain.d) == (60, 8)
        assert np.bincount(domain.labels).tolist() == [20, 20, 20]


def test_generation_is_seeded():
    first = generate_domains(SyntheticSpec(seed=3))
    again = generate_domains(SyntheticSpec(seed=3))
    other = generate_domains(SyntheticSpec(seed=4))
    for a, b in zip(first, again):
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(first[0].features, other[0].features)


def test_synthetic_spec_validation():
    bad_specs = (
        {"n_domains": 1},
        {"n_classes": 3, "samples_per_domain": 10},
        {"n_classes": 3, "samples_per_domain": 3},
        {"noise_sigma": 0.0},
        {"n_domains": 2, "transforms": ({"rotation": 0.1},)},
        {"n_domains": 2, "transforms": ({}, {"translation": (1.0,)})},
    )
    for bad in bad_specs:
        with pytest.raises(ValidationError):
            SyntheticSpec(**bad)


def test_transforms_accept_mappings():
    transforms = ({"rotation": 0.5}, {"scale": 2.0})
    spec = SyntheticSpec(
        n_domains=2, dim=2, n_classes=2, samples_per_domain=4, transforms=transforms
    )
    assert spec.transforms[1] == DomainTransform(scale=2.0)


def test_domain_data_validation():
    with pytest.raises(ValidationError):
        DomainData(0, np.zeros((3, 2)), np.zeros(2, dtype=int))
    with pytest.raises(ValidationError):
        DomainData(0, np.full((1, 2), np.nan), np.zeros(1, dtype=int))
    with pytest.raises(ValidationError):
        DomainData(0, np.zeros((1, 2)), np.array([-1]))


def test_generate_synthetic_is_byte_identical(tmp_path):
    spec = SyntheticSpec(n_domains=2, n_classes=2, dim=3, samples_per_domain=8, seed=9)
    first = generate_synthetic(spec, tmp_path / "a")
    second = generate_synthetic(spec, tmp_path / "b")
    assert [p.name for p in first] == ["domain_0.csv", "domain_1.csv"]
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()
    assert first[0].read_text().splitlines()[0] == "domain,label,f0,f1,f2"


def test_dataset_csv_round_trip(tmp_path):
    domains = generate_domains(SyntheticSpec(n_domains=3, n_classes=2, dim=2, samples_per_domain=6))
    path = tmp_path / "all.csv"
    write_domains_csv(path, domains)
    loaded = read_domains_csv(str(path))
    assert [d.domain_id for d in loaded] == [0, 1, 2]
    for a, b in zip(domains, loaded):
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)


def test_dataset_files_are_merged_by_domain(tmp_path):
    domains = generate_domains(SyntheticSpec(n_domains=2, n_classes=2, dim=2, samples_per_domain=4))
    write_domains_csv(tmp_path / "b.csv", [domains[1]])
    write_domains_csv(tmp_path / "a.csv", [domains[0]])
    loaded = read_domains_csv([tmp_path / "b.csv", tmp_path / "a.csv"])
    assert [d.domain_id for d in loaded] == [0, 1]
    with pytest.raises(DataFormatError, match="several files"):
        read_domains_csv([tmp_path / "a.csv", tmp_path / "a.csv"])


@pytest.mark.parametrize(
    "content",
    [
        "domain,f0,f1\n0,1.0,2.0\n",
        "domain,label,f1,f0\n0,0,1.0,2.0\n",
        "domain,label\n0,0\n",
        "domain,label,f0\n0,a,1.0\n",
        "domain,label,f0\n0,0,x\n",
        "domain,label,f0\n0,-1,1.0\n",
        "",
    ],
)
def test_dataset_csv_format_errors(tmp_path, content):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(DataFormatError):
        read_domains_csv(path)


def test_dataset_dimensions_must_agree(tmp_path):
    (tmp_path / "a.csv").write_text("domain,label,f0\n0,0,1.0\n")
    (tmp_path / "b.csv").write_text("domain,label,f0,f1\n1,0,1.0,2.0\n")
    with pytest.raises(DataFormatError, match="dimension"):
        read_domains_csv([tmp_path / "a.csv", tmp_path / "b.csv"])


def test_missing_file_is_an_os_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_domains_csv(tmp_path / "none.csv")


def test_read_points_ignores_bookkeeping_columns(tmp_path):
    path = tmp_path / "points.csv"
    path.write_text("domain,label,f0,f1\n0,1,0.5,-1.5\n0,0,2.0,3.0\n")
    points = read_points_csv(path)
    assert points.dtype == torch.float64
    torch.testing.assert_close(points, torch.tensor([[0.5, -1.5], [2.0, 3.0]], dtype=torch.float64))
    (tmp_path / "plain.csv").write_text("f0\n1.0\n")
    assert read_points_csv(tmp_path / "plain.csv").shape == (1, 1)


def test_embeddings_csv_round_trip_ragged(tmp_path, rng):
    embeddings = [ProbEmbedding(torch.as_tensor(rng.normal(size=(t, 2)))) for t in (3, 1, 5)]
    path = tmp_path / "emb.csv"
    write_embeddings_csv(path, embeddings)
    loaded = read_embeddings_csv(path)
    assert [e.t for e in loaded] == [3, 1, 5]
    for a, b in zip(embeddings, loaded):
        torch.testing.assert_close(a.samples, b.samples, rtol=0, atol=0)


def test_embeddings_csv_errors(tmp_path):
    path = tmp_path / "emb.csv"
    path.write_text("item,f0\n")
    with pytest.raises(DataFormatError):
        read_embeddings_csv(path)
    path.write_text("item,f0\n0,inf\n")
    with pytest.raises(DataFormatError):
        read_embeddings_csv(path)
    path.write_text("id,f0\n0,1.0\n")
    with pytest.raises(DataFormatError):
        read_embeddings_csv(path)


def test_subsampling_is_stratified_and_seeded():
    domain = generate_domains(SyntheticSpec())[1]
    plan = Subsampling(train_fraction=0.5)
    kept = subsample_domain(domain, plan, seed=1)
    assert np.bincount(kept.labels).tolist() == [10, 10, 10]
    np.testing.assert_array_equal(kept.features, subsample_domain(domain, plan, seed=1).features)
    assert not np.array_equal(kept.features, subsample_domain(domain, plan, seed=2).features)


def test_subsampling_per_source_fraction_and_class_count():
    domains = generate_domains(SyntheticSpec())
    plan = Subsampling(source_fractions={1: 0.1})
    assert plan.active
    assert subsample_domain(domains[1], plan, 0).n == 6
    assert subsample_domain(domains[0], plan, 0).n == 60
    per_class = Subsampling(samples_per_class=2)
    assert np.bincount(subsample_domain(domains[0], per_class, 0).labels).tolist() == [2, 2, 2]


def test_subsampling_validation():
    assert not Subsampling().active
    for bad in ({"train_fraction": 0.0}, {"source_fractions": {0: 1.5}}, {"samples_per_class": 0}):
        with pytest.raises(ValidationError):
            Subsampling(**bad)
