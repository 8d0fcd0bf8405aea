import copy

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from sdnet.cit import (
    PERCEPTUAL_WEIGHT,
    CitLossConfig,
    CitSchedule,
    GeneratorNet,
    GeneratorPair,
    build_extractor,
    cit_loss,
    expand_dataset,
    expanded_arrays,
    generator_forward,
    internal_classifier,
    read_expanded,
    train_cit,
    write_expanded,
)
from sdnet.dataset import ImageRecord, SeverityLevel
from sdnet.errors import CheckpointMissing, ShapeMismatch

IDENTITY = CitLossConfig(extractor="identity")


def tiny_pair(features=4, blocks=1, seed=0):
    torch.manual_seed(seed)
    return GeneratorPair(GeneratorNet("P", blocks, features), GeneratorNet("N", blocks, features), internal_classifier()).eval()


class LinearHead(torch.nn.Module):
    """Stand-in internal classifier: flatten -> linear over (N, P)."""

    def __init__(self, n_in):
        super().__init__()
        self.fc = torch.nn.Linear(n_in, 2)

    def forward(self, x):
        return self.fc(x.flatten(1))


def test_identity_output_has_zero_reconstruction_loss():
    x = torch.randn(2, 3, 8, 8)
    loss = cit_loss(x.clone(), x, None, "P", CitLossConfig(extractor="vgg16", extractor_weights="none"))
    assert loss.mse.item() == 0.0
    assert loss.perceptual.item() == 0.0
    assert loss.total.item() == 0.0


def test_worked_example_identity_extractor():
    # every pixel off by 0.5 -> mse 0.25; with the identity extractor the perceptual term is 0.25 too
    target = torch.zeros(1, 3, 2, 2)
    out = torch.full((1, 3, 2, 2), 0.5)
    logits = torch.tensor([[0.0, 0.0]])
    for lam in (0.0, 0.1, 1.0):
        cfg = CitLossConfig(extractor="identity", lam=lam)
        loss = cit_loss(out, target, logits, "P", cfg, labels=[1])
        assert loss.mse.item() == pytest.approx(0.25)
        assert loss.perceptual.item() == pytest.approx(0.25)
        assert loss.ce.item() == pytest.approx(np.log(2))
        assert loss.total.item() == pytest.approx(0.25 * (1 + PERCEPTUAL_WEIGHT) + lam * np.log(2))


def test_lambda_zero_ignores_classifier():
    x = torch.randn(2, 3, 4, 4)
    out = x + 0.1
    a = cit_loss(out, x, torch.tensor([[5.0, -5.0], [0.0, 1.0]]), "P", CitLossConfig(extractor="identity", lam=0), [1, 1])
    b = cit_loss(out, x, torch.tensor([[-3.0, 9.0], [2.0, 2.0]]), "P", CitLossConfig(extractor="identity", lam=0), [1, 1])
    assert a.total.item() == b.total.item()


def test_mask_mode_uses_only_matching_labels():
    x = torch.zeros(2, 3, 2, 2)
    logits = torch.tensor([[0.0, 3.0], [0.0, -3.0]])
    masked = cit_loss(x, x, logits, "P", IDENTITY, labels=[1, 0])
    assert masked.ce.item() == pytest.approx(torch.nn.functional.cross_entropy(logits[:1], torch.tensor([1])).item())
    none = cit_loss(x, x, logits, "P", IDENTITY, labels=[0, 0])
    assert none.ce.item() == 0.0
    relabel = cit_loss(x, x, logits, "P", CitLossConfig(extractor="identity", ce_mode="relabel"))
    assert relabel.ce.item() == pytest.approx(torch.nn.functional.cross_entropy(logits, torch.tensor([1, 1])).item())


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        cit_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 5, 4), None, "P", IDENTITY)


def test_loss_decomposition_random_inputs():
    rng = np.random.default_rng(0)
    torch.manual_seed(0)
    for lam in (0.0, 0.1, 1.0):
        cfg = CitLossConfig(lam=lam, extractor="vgg16", extractor_weights="none")
        ext = build_extractor(cfg)
        for _ in range(100):
            x = torch.from_numpy(rng.normal(size=(2, 3, 8, 8)).astype(np.float32))
            out = x + torch.from_numpy(rng.normal(0, 0.3, size=x.shape).astype(np.float32))
            logits = torch.from_numpy(rng.normal(size=(2, 2)).astype(np.float32))
            labels = rng.integers(0, 2, 2)
            loss = cit_loss(out, x, logits, int(rng.integers(0, 2)), cfg, labels, ext)
            expected = loss.mse + PERCEPTUAL_WEIGHT * loss.perceptual + lam * loss.ce
            assert abs(loss.total.item() - expected.item()) < 1e-6


def _grad_check(dtype):
    """Relative error between the analytic gradient of the composite loss in `dtype` and
    central differences (step 1e-6) taken on a float64 copy of the same network."""
    torch.manual_seed(0)
    gen = GeneratorNet("P", n_blocks=2, features=4)
    head = LinearHead(3 * 4 * 4)
    x = torch.randn(2, 3, 4, 4)
    labels = torch.tensor([1, 0])
    cfg = CitLossConfig(extractor="identity", lam=0.1)

    def loss_value(g, h, xx):
        out = g(xx)
        return cit_loss(out, xx, h(out), "P", cfg, labels).total

    g_a, h_a = copy.deepcopy(gen).to(dtype), copy.deepcopy(head).to(dtype)
    loss_value(g_a, h_a, x.to(dtype)).backward()
    analytic = torch.cat([p.grad.flatten() for p in g_a.parameters()]).double()

    g64, h64, x64 = copy.deepcopy(gen).double(), copy.deepcopy(head).double(), x.double()
    eps, numeric = 1e-6, []
    with torch.no_grad():
        for p in g64.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_value(g64, h64, x64).item()
                flat[i] = orig - eps
                down = loss_value(g64, h64, x64).item()
                flat[i] = orig
                numeric.append((up - down) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    return ((analytic - numeric).norm() / numeric.norm()).item()


def test_gradient_check_float64():
    assert _grad_check(torch.float64) < 1e-5


def test_gradient_check_float32():
    assert _grad_check(torch.float32) < 1e-3


def test_zero_weight_generator_is_identity():
    gen = GeneratorNet("N", 2, 8)
    with torch.no_grad():
        for p in gen.parameters():
            p.zero_()
    x = np.random.default_rng(1).normal(size=(3, 10, 12)).astype(np.float32)
    assert_allclose(generator_forward(gen, x), x)


def test_generator_preserves_shape_and_checks_channels():
    gen = GeneratorNet("P", 1, 4)
    assert generator_forward(gen, np.zeros((2, 3, 9, 7), np.float32)).shape == (2, 3, 9, 7)
    with pytest.raises(ShapeMismatch):
        gen(torch.zeros(1, 1, 8, 8))
    with pytest.raises(ValueError):
        GeneratorNet("X")


def _toy_arrays(n, side=16, seed=0):
    from sdnet.preprocess import prepare_image
    from sdnet.toy import make_toy_images

    ids, labels, imgs = make_toy_images(n, 32, seed)
    return ids, labels, np.stack([prepare_image(im, side) for im in imgs])


SMALL = CitSchedule(batch_size=8, max_epochs=3, patience=3, n_blocks=1, features=8)


def test_train_cit_history_and_determinism():
    _, labels, x = _toy_arrays(4)
    pair, hist = train_cit(x, labels, x[:4], labels[:4], IDENTITY, SMALL)
    assert len(hist["P"]) == len(hist["N"]) == len(hist["val_total"]) == 3
    assert set(hist["P"][0]) == {"epoch", "total", "mse", "perceptual", "ce"}
    assert 1 <= hist["best_epoch"] <= 3
    assert hist["val_total"][hist["best_epoch"] - 1] == min(hist["val_total"])
    for row in hist["P"] + hist["N"]:
        assert row["total"] == pytest.approx(row["mse"] + PERCEPTUAL_WEIGHT * row["perceptual"] + 0.1 * row["ce"], rel=1e-5)
    pair2, hist2 = train_cit(x, labels, x[:4], labels[:4], IDENTITY, SMALL)
    assert hist == hist2
    assert_allclose(pair.transform(x)[0], pair2.transform(x)[0])
    assert set(pair.classify(x)) <= {"P", "N"}


def test_generator_pair_round_trip(tmp_path):
    _, _, x = _toy_arrays(2)
    pair = tiny_pair()
    pair.save(tmp_path / "cit")
    loaded = GeneratorPair.load(tmp_path / "cit")
    for a, b in zip(pair.transform(x), loaded.transform(x)):
        assert_allclose(a, b)
    assert list(pair.classify(x)) == list(loaded.classify(x))


def test_load_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointMissing):
        GeneratorPair.load(tmp_path)


def _records(n_pos, n_neg):
    recs = [ImageRecord(f"p{i}", "", "P", SeverityLevel.MILD) for i in range(n_pos)]
    recs += [ImageRecord(f"n{i}", "", "N", SeverityLevel.NEGATIVE_CONTROL) for i in range(n_neg)]
    return recs


def test_expansion_counts_426_each():
    recs = _records(426, 426)
    rng = np.random.default_rng(0)
    images = {r.id: rng.normal(size=(3, 4, 4)).astype(np.float32) for r in recs}
    pairs = expand_dataset(recs, images, tiny_pair(), batch_size=256)
    x, labels, sources = expanded_arrays(pairs)
    assert x.shape == (4 * 426, 3, 4, 4)
    assert {lab: labels.count(lab) for lab in set(labels)} == {"P+": 426, "P-": 426, "N+": 426, "N-": 426}
    # each source maps to exactly one (plus, minus) pair with matching polarity
    by_source = {}
    for lab, sid in zip(labels, sources):
        by_source.setdefault(sid, []).append(lab)
    assert set(by_source) == {r.id for r in recs}
    for r in recs:
        assert by_source[r.id] == [r.label + "+", r.label + "-"]


def test_expansion_edge_cases(tmp_path):
    assert expand_dataset([], {}, tiny_pair()) == []
    recs = _records(0, 1)
    pairs = expand_dataset(recs, {"n0": np.zeros((3, 4, 4), np.float32)}, tiny_pair())
    assert [(p.y_plus, p.y_minus) for p in pairs] == [("N+", "N-")]
    with pytest.raises(CheckpointMissing):
        expand_dataset(recs, {}, None)
    write_expanded(pairs, tmp_path / "exp")
    back = read_expanded(tmp_path / "exp")
    assert back[0].source_id == "n0"
    assert_allclose(back[0].x_minus, pairs[0].x_minus)
