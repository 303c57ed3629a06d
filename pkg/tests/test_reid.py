import itertools
import math

import numpy as np
import pytest
import torch

from PersonSearch.Exceptions.Geometry import GeometryException
from PersonSearch.Exceptions.Reid import SamplingException, TripletException
from PersonSearch.Networks.Backbone import split_config
from PersonSearch.Networks.Reid import (
    ReidBranch,
    batch_hard_triplet,
    embed,
    pairwise_sq_distances,
    pk_sample,
    pk_sample_indices,
    roi_pool,
    roi_pool_boxes,
    roi_window,
    semi_hard_triplet,
)
from PersonSearch.ValidationModels.Backbone import BackboneConfig, SharedMaps, StageName
from PersonSearch.ValidationModels.DataModel import (
    BoundingBox,
    DatasetManifest,
    PersonAnnotation,
    SceneRecord,
)
from PersonSearch.ValidationModels.Reid import PKConfig, ReidConfig, TripletConfig


def box(x1, y1, x2, y2) -> BoundingBox:
    return BoundingBox(x1=x1, y1=y1, x2=x2, y2=y2)


def shared(features: torch.Tensor, stride: int = 1) -> SharedMaps:
    return SharedMaps(
        features=features,
        stage=StageName.C1,
        stride=stride,
        image_height=features.shape[1] * stride,
        image_width=features.shape[2] * stride,
    )


def batch_hard_oracle(embs: np.ndarray, labels: list[int], margin: float) -> float:
    losses = []
    for a in range(len(labels)):
        positives = [np.sum((embs[a] - embs[p]) ** 2) for p in range(len(labels)) if p != a and labels[p] == labels[a]]
        negatives = [np.sum((embs[a] - embs[n]) ** 2) for n in range(len(labels)) if labels[n] != labels[a]]
        losses.append(max(margin + max(positives) - min(negatives), 0.0))
    return float(np.mean(losses))


def semi_hard_oracle(embs: np.ndarray, labels: list[int], margin: float) -> float:
    losses = []
    for a, p in itertools.permutations(range(len(labels)), 2):
        if labels[a] != labels[p]:
            continue
        d_ap = np.sum((embs[a] - embs[p]) ** 2)
        negatives = [np.sum((embs[a] - embs[n]) ** 2) for n in range(len(labels)) if labels[n] != labels[a]]
        farther = [d for d in negatives if d > d_ap]
        d_an = min(farther) if farther else max(negatives)
        losses.append(max(margin + d_ap - d_an, 0.0))
    return float(np.mean(losses))


def random_batch(rng: np.random.Generator) -> tuple[np.ndarray, list[int]]:
    identities = int(rng.integers(2, 5))
    shots = int(rng.integers(2, 5))
    labels = [identity for identity in range(identities) for _ in range(shots)][:16]
    labels = [labels[i] for i in rng.permutation(len(labels))]
    return rng.normal(size=(len(labels), int(rng.integers(1, 6)))), labels


class TestRoiPool:
    grid = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])

    def test_full_box_to_one_cell(self):
        assert roi_pool(shared(self.grid), box(0, 0, 2, 2), 1, 1).item() == 4.0

    def test_left_half_to_one_cell(self):
        assert roi_pool(shared(self.grid), box(0, 0, 1, 2), 1, 1).item() == 3.0

    def test_identity_binning(self):
        assert torch.equal(roi_pool(shared(self.grid), box(0, 0, 2, 2), 2, 2), self.grid)

    def test_box_smaller_than_a_cell_keeps_its_cell(self):
        maps = shared(torch.arange(16.0).reshape(1, 4, 4), stride=8)
        assert roi_window(box(9, 17, 10, 18), 8, 4, 4) == (2, 3, 1, 2)
        pooled = roi_pool(maps, box(9, 17, 10, 18), 2, 2)
        assert torch.all(pooled == 9.0)

    def test_box_is_clipped_to_the_map(self):
        assert roi_window(box(20, 20, 32, 32), 8, 4, 4) == (2, 4, 2, 4)

    def test_output_must_hold_a_cell(self):
        with pytest.raises(GeometryException):
            roi_pool(shared(self.grid), box(0, 0, 2, 2), 0, 1)

    def test_stacks_boxes(self):
        maps = shared(torch.rand(3, 8, 8), stride=4)
        pooled = roi_pool_boxes(maps, [box(0, 0, 16, 16), box(4, 8, 30, 31)], 2, 3)
        assert pooled.shape == (2, 3, 2, 3)
        assert roi_pool_boxes(maps, [], 2, 3).shape == (0, 3, 2, 3)

    def test_gradient(self):
        torch.manual_seed(0)
        # Distinct values keep every bin's maximum unique.
        features = torch.randperm(3 * 6 * 6).reshape(3, 6, 6).double().div(10).requires_grad_(True)

        def pool(values: torch.Tensor) -> torch.Tensor:
            return roi_pool(shared(values, stride=4), box(3, 2, 21, 23), 2, 2)

        assert torch.autograd.gradcheck(pool, (features,), rtol=1e-4)


class TestEmbedding:
    @pytest.fixture(scope="class")
    def branch(self) -> ReidBranch:
        torch.manual_seed(0)
        return ReidBranch(BackboneConfig(), split_config("J3"), ReidConfig(embedding_dim=16)).eval()

    def test_unit_norm(self, branch):
        embedding = embed(torch.rand(32, 4, 4), split_config("J3"), branch)
        assert embedding.dim == 16
        assert np.linalg.norm(embedding.as_array()) == pytest.approx(1.0, abs=1e-5)

    def test_deterministic(self, branch):
        pooled = torch.rand(32, 4, 4)
        assert embed(pooled, split_config("J3"), branch) == embed(pooled.clone(), split_config("J3"), branch)

    def test_batched_branch_matches_single_embedding(self, branch):
        pooled = torch.rand(3, 32, 4, 4)
        batched = branch(pooled)
        single = torch.tensor(embed(pooled[1], split_config("J3"), branch).vector)
        assert torch.allclose(batched[1], single, atol=1e-6)


class TestDistances:
    def test_single_embedding(self):
        assert pairwise_sq_distances(torch.tensor([[0.6, 0.8]])).tolist() == [[0.0]]

    def test_orthonormal(self):
        distances = pairwise_sq_distances(torch.eye(3))
        assert torch.allclose(distances, 2.0 * (1 - torch.eye(3)))

    def test_antipodal(self):
        e = torch.tensor([0.6, 0.8])
        assert pairwise_sq_distances(torch.stack([e, -e]))[0, 1].item() == pytest.approx(4.0)


class TestTripletLosses:
    separated = torch.tensor([[0.0], [1.0], [10.0], [11.0]])
    separated_labels = ["A", "A", "B", "B"]

    def test_collapsed_embeddings_cost_the_margin(self):
        embs = torch.ones(6, 4) / 2
        labels = [0, 0, 1, 1, 2, 2]
        assert batch_hard_triplet(embs, labels, TripletConfig(margin=0.3)).item() == pytest.approx(0.3)
        assert semi_hard_triplet(embs, labels, TripletConfig(margin=0.3)).item() == pytest.approx(0.3)

    def test_separated_clusters_cost_nothing(self):
        cfg = TripletConfig(margin=0.5)
        assert batch_hard_triplet(self.separated, self.separated_labels, cfg).item() == 0.0
        assert semi_hard_triplet(self.separated, self.separated_labels, cfg).item() == 0.0

    def test_match_exhaustive_oracles(self):
        rng = np.random.default_rng(0)
        cfg = TripletConfig(margin=0.3)
        for _ in range(200):
            embs, labels = random_batch(rng)
            tensor = torch.tensor(embs)
            assert batch_hard_triplet(tensor, labels, cfg).item() == pytest.approx(
                batch_hard_oracle(embs, labels, 0.3), abs=1e-6
            )
            assert semi_hard_triplet(tensor, labels, cfg).item() == pytest.approx(
                semi_hard_oracle(embs, labels, 0.3), abs=1e-6
            )

    def test_batch_hard_is_zero_iff_every_anchor_clears_the_margin(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            embs, labels = random_batch(rng)
            distances = pairwise_sq_distances(torch.tensor(embs)).numpy()
            same = np.equal.outer(labels, labels)
            np.fill_diagonal(same, False)
            other = ~np.equal.outer(labels, labels)
            gaps = [distances[a][other[a]].min() - distances[a][same[a]].max() for a in range(len(labels))]
            loss = batch_hard_triplet(torch.tensor(embs), labels, TripletConfig(margin=0.3)).item()
            assert loss >= 0.0
            assert (loss == 0.0) == all(gap >= 0.3 for gap in gaps)

    @pytest.mark.parametrize("loss_fn", [batch_hard_triplet, semi_hard_triplet])
    def test_gradient(self, loss_fn):
        generator = torch.Generator().manual_seed(0)
        embs = (0.1 * torch.randn(8, 3, generator=generator, dtype=torch.float64)).requires_grad_(True)
        labels = [0, 0, 1, 1, 2, 2, 3, 3]
        # A wide margin keeps every hinge active.
        cfg = TripletConfig(margin=5.0)
        assert torch.autograd.gradcheck(lambda e: loss_fn(e, labels, cfg), (embs,), rtol=1e-4)

    @pytest.mark.parametrize("loss_fn", [batch_hard_triplet, semi_hard_triplet])
    def test_invariant_to_batch_order_and_rotation(self, loss_fn):
        rng = np.random.default_rng(2)
        cfg = TripletConfig(margin=0.3)
        for _ in range(20):
            embs, labels = random_batch(rng)
            expected = loss_fn(torch.tensor(embs), labels, cfg).item()
            order = rng.permutation(len(labels))
            shuffled = loss_fn(torch.tensor(embs[order]), [labels[i] for i in order], cfg).item()
            rotation, _ = np.linalg.qr(rng.normal(size=(embs.shape[1], embs.shape[1])))
            rotated = loss_fn(torch.tensor(embs @ rotation), labels, cfg).item()
            assert shuffled == pytest.approx(expected, abs=1e-9)
            assert rotated == pytest.approx(expected, abs=1e-9)

    def test_single_shot_label(self):
        with pytest.raises(TripletException, match="once"):
            batch_hard_triplet(torch.rand(3, 2), ["a", "a", "b"], TripletConfig())

    def test_single_label(self):
        with pytest.raises(TripletException, match="two labels"):
            semi_hard_triplet(torch.rand(3, 2), ["a", "a", "a"], TripletConfig())


class TestPkSampling:
    def test_cardinality(self):
        groups = {identity: list(range(5 * k, 5 * k + 5)) for k, identity in enumerate("abc")}
        batch = pk_sample_indices(groups, PKConfig(P=2, K=2), 0)
        assert len(batch) == 4
        identities = [identity for _, identity in batch]
        assert len(set(identities)) == 2
        assert all(identities.count(identity) == 2 for identity in set(identities))
        assert all(item in groups[identity] for item, identity in batch)

    def test_rare_identity_is_repeated(self):
        batch = pk_sample_indices({"a": [7], "b": [1, 2, 3, 4, 5]}, PKConfig(P=2, K=4), 0)
        assert [item for item, identity in batch if identity == "a"] == [7, 7, 7, 7]

    def test_too_few_identities(self):
        groups = {identity: [0, 1] for identity in "abc"}
        with pytest.raises(SamplingException):
            pk_sample_indices(groups, PKConfig(P=5, K=2), 0)

    def test_seeded(self):
        groups = {identity: list(range(10)) for identity in "abcdef"}
        assert pk_sample_indices(groups, PKConfig(P=3, K=2), 5) == pk_sample_indices(groups, PKConfig(P=3, K=2), 5)

    def test_manifest_sampling_skips_unlabeled_boxes(self):
        def annotation(identity):
            return PersonAnnotation(box=box(0, 0, 10, 20), identity=identity)

        records = tuple(
            SceneRecord(
                image_ref=f"{index}.png",
                width=50,
                height=50,
                annotations=(annotation("p1"), annotation(None), annotation("p2")),
            )
            for index in range(3)
        )
        batch = pk_sample(DatasetManifest(name="m", records=records), PKConfig(P=2, K=2), 0)
        assert len(batch) == 4
        assert all(ref.index in (0, 2) for ref, _ in batch)

    def test_identities_are_drawn_uniformly(self):
        groups = {identity: list(range(4)) for identity in "abcde"}
        cfg = PKConfig(P=2, K=2)
        draws = 3000
        counts = dict.fromkeys(groups, 0)
        for seed in range(draws):
            for identity in {identity for _, identity in pk_sample_indices(groups, cfg, seed)}:
                counts[identity] += 1
        p = cfg.P / len(groups)
        sigma = math.sqrt(draws * p * (1 - p))
        assert all(abs(count - draws * p) <= 3 * sigma for count in counts.values())
