import pytest
import torch

from lreidpy.backbone import (
    Backbone,
    IncrementalClassifier,
    classify,
    extract_features,
    grow_classifier,
    snapshot,
    state_checksum,
)
from lreidpy.core import ConfigurationError, FeatureBatch


def test_zero_head_gives_zero_features():
    backbone = Backbone((5,), embedding_dim=8)
    with torch.no_grad():
        backbone.head.weight.zero_()
        backbone.head.bias.zero_()
    batch = extract_features(backbone, torch.randn(3, 5))
    assert torch.equal(batch.features, torch.zeros(3, 8))


def test_duplicated_inputs_give_identical_rows():
    backbone = Backbone((5,), embedding_dim=8)
    row = torch.randn(1, 5)
    features = backbone(torch.cat([row, row]))
    assert torch.equal(features[0], features[1])


def test_vector_batch_shape():
    batch = extract_features(Backbone((10,), embedding_dim=8), torch.randn(4, 10), torch.arange(4))
    assert isinstance(batch, FeatureBatch)
    assert batch.size == 4
    assert batch.dim == 8
    assert torch.isfinite(batch.features).all()


def test_image_batch_shape():
    backbone = Backbone((3, 9, 7), embedding_dim=8, hidden_dims=(4, 4))
    assert backbone.is_image_backbone
    assert backbone(torch.randn(2, 3, 9, 7)).shape == (2, 8)


def test_backbone_rejects_mismatched_inputs():
    with pytest.raises(ConfigurationError):
        Backbone((5,))(torch.randn(2, 6))
    with pytest.raises(ConfigurationError):
        Backbone((5, 5))


def test_empty_batch_is_rejected():
    with pytest.raises(ValueError):
        extract_features(Backbone((5,)), torch.zeros(0, 5))


def test_zero_features_give_zero_logits():
    classifier = IncrementalClassifier(4).grow(3)
    assert torch.equal(classify(classifier, torch.zeros(2, 4)), torch.zeros(2, 3))


def test_single_class_softmax_is_one():
    classifier = IncrementalClassifier(4).grow(1)
    logits = classifier(torch.randn(5, 4))
    assert logits.shape == (5, 1)
    assert torch.equal(torch.softmax(logits, dim=1), torch.ones(5, 1))


def test_logits_match_matrix_product():
    classifier = IncrementalClassifier(2).grow(2)
    weight = torch.tensor([[1.0, 2.0], [-3.0, 0.5]])
    with torch.no_grad():
        classifier.heads[0].weight.copy_(weight)
    features = torch.tensor([[1.0, 1.0], [2.0, -1.0]])
    assert torch.allclose(classifier(features), features.matmul(weight.T))


def test_classifier_needs_classes_and_matching_width():
    classifier = IncrementalClassifier(4)
    with pytest.raises(ConfigurationError):
        classifier(torch.zeros(1, 4))
    classifier.grow(2)
    with pytest.raises(ConfigurationError):
        classifier(torch.zeros(1, 3))


def test_first_growth_starts_from_zero():
    classifier = IncrementalClassifier(8)
    assert classifier.num_classes == 0
    grow_classifier(classifier, 5)
    assert classifier.num_classes == 5


def test_growth_keeps_old_logits_bit_identical():
    classifier = IncrementalClassifier(16).grow(500)
    features = torch.randn(7, 16)
    old_weight = classifier.heads[0].weight.detach().clone()
    before = classifier(features).detach()

    classifier.grow(500)
    after = classifier(features).detach()

    assert classifier.num_classes == 1000
    assert torch.equal(classifier.heads[0].weight, old_weight)
    assert torch.equal(after[:, :500], before)


def test_growth_follows_arrival_order():
    classifier = IncrementalClassifier(4).grow(3).grow(4)
    assert classifier.num_classes == 7
    assert classifier.head_sizes == [3, 4]


def test_new_heads_start_small_with_zero_bias():
    classifier = IncrementalClassifier(32).grow(200, generator=torch.Generator().manual_seed(0))
    head = classifier.heads[0]
    assert torch.equal(head.bias, torch.zeros(200))
    assert head.weight.std().item() == pytest.approx(0.01, rel=0.1)


@pytest.mark.parametrize("new_classes", [0, -2, 1.5])
def test_growth_rejects_invalid_counts(new_classes):
    with pytest.raises(ValueError):
        IncrementalClassifier(4).grow(new_classes)


def test_snapshot_survives_optimizer_step():
    backbone = Backbone((5,), embedding_dim=4)
    classifier = IncrementalClassifier(4).grow(3)
    frozen = snapshot(backbone, classifier, step=1)
    checksums = state_checksum(frozen.backbone), state_checksum(frozen.classifier)

    optimizer = torch.optim.SGD(list(backbone.parameters()) + list(classifier.parameters()), lr=1.0)
    classifier(backbone(torch.randn(4, 5))).sum().backward()
    optimizer.step()

    assert (state_checksum(frozen.backbone), state_checksum(frozen.classifier)) == checksums
    assert state_checksum(backbone) != checksums[0]
    assert all(not p.requires_grad for p in frozen.backbone.parameters())


def test_snapshot_width_and_idempotence():
    backbone = Backbone((5,), embedding_dim=4)
    classifier = IncrementalClassifier(4).grow(6)
    first = snapshot(backbone, classifier, step=1, vertices=torch.randn(3, 4))
    second = snapshot(backbone, classifier, step=1, vertices=first.vertices)

    assert first.num_classes == 6
    assert first.step == 1
    for a, b in zip(first.backbone.state_dict().values(), second.backbone.state_dict().values()):
        assert torch.equal(a, b)
    assert torch.equal(first.vertices, second.vertices)


def test_snapshot_is_frozen_dataclass():
    frozen = snapshot(Backbone((5,), embedding_dim=4), IncrementalClassifier(4).grow(2))
    with pytest.raises(AttributeError):
        frozen.step = 3
