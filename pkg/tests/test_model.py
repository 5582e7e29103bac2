import json

import numpy as np
import pytest
from pydantic import ValidationError

from abclust.attention import AdditiveCompat, CompatKind, MultiplicativeCompat
from abclust.datasets import CirclesConfig, gen_circles
from abclust.model import (AbcConfig, ModelParams, SimilarityMatrix, abc_forward, bce_loss, embed,
                           pairwise_forward, project, similarity)
from abclust.tensor import Tensor, grad_check
from abclust.utils import ConfigurationError, DataError, ShapeError

SMALL = AbcConfig(input_dim=4, latent_dim=8, sab_count=2, heads=2)
SMALL_ADD = SMALL.with_variant("abc-add")


def fixed(values) -> SimilarityMatrix:
    return SimilarityMatrix(Tensor(values))


def test_config_defaults():
    c = AbcConfig()
    assert (c.input_dim, c.latent_dim, c.sab_count, c.heads) == (2, 32, 2, 4)
    assert isinstance(c.compat_sim, MultiplicativeCompat)


def test_config_accepts_compat_key_and_dict():
    c = AbcConfig.model_validate({"compat_sim": "additive",
                                  "compat_embed": {"type": "additive", "act": "relu"}})
    assert isinstance(c.compat_sim, AdditiveCompat)
    assert c.compat_embed.act == "relu"  # type: ignore[union-attr]


def test_config_rejects_unknown_keys_and_compats():
    with pytest.raises(ValidationError):
        AbcConfig.model_validate({"latent": 8})
    with pytest.raises(ValidationError):
        AbcConfig.model_validate({"compat_sim": "cosine"})
    with pytest.raises(ValidationError):
        AbcConfig(latent_dim=10, heads=4)
    with pytest.raises(ValidationError):
        AbcConfig(input_dim=2, latent_dim=8, heads=2, input_affine=False)


def test_variants():
    assert SMALL.with_variant("pairwise").is_pairwise
    assert isinstance(SMALL_ADD.compat_embed, AdditiveCompat)
    assert isinstance(SMALL_ADD.compat_sim, AdditiveCompat)
    assert SMALL.with_variant("pairwise").with_variant("abc-mul").sab_count == 2
    with pytest.raises(ConfigurationError):
        SMALL.with_variant("abc-dot")  # type: ignore[arg-type]


def test_named_order_is_stable():
    p = ModelParams.init(SMALL_ADD, 0)
    names = [n for n, _ in p.named()]
    assert names[:2] == ["input.w", "input.b"]
    assert names[-1] == "sim.w"
    assert names == [n for n, _ in ModelParams.init(SMALL_ADD, 1).named()]


def test_similarity_orthogonal_is_half():
    s = similarity(Tensor([[1.0, 0.0], [0.0, 1.0]]), CompatKind(MultiplicativeCompat())).numpy()
    assert s[0, 1] == pytest.approx(0.5)


def test_similarity_identical_rows():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((3, 4))
    z[2] = z[0]
    kind = CompatKind(AdditiveCompat(), Tensor(rng.standard_normal((1, 4))))
    s = similarity(Tensor(z), kind).numpy()
    assert s[0, 2] == pytest.approx(s[0, 0])
    assert np.array_equal(s, s.T)


@pytest.mark.parametrize("config", [SMALL, SMALL_ADD])
def test_forward_single_point(config):
    s = abc_forward(Tensor(np.ones((1, 4))), ModelParams.init(config, 0)).numpy()
    assert s.shape == (1, 1)
    assert 0.0 < s[0, 0] < 1.0


@pytest.mark.parametrize("config", [SMALL, SMALL_ADD])
def test_forward_is_symmetric_and_finite(config):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        s = abc_forward(Tensor(rng.standard_normal((7, 4))), ModelParams.init(config, seed)).numpy()
        assert np.isfinite(s).all()
        assert np.array_equal(s, s.T)
        assert (s > 0).all() and (s < 1).all()


def _equivariance_error(config, seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = ModelParams.init(config, seed)
    x = rng.standard_normal((6, 4))
    perm = rng.permutation(6)
    s = abc_forward(Tensor(x), p).numpy()
    sp = abc_forward(Tensor(x[perm]), p).numpy()
    return float(np.max(np.abs(sp - s[np.ix_(perm, perm)])))


@pytest.mark.parametrize("config", [SMALL, SMALL_ADD])
def test_permutation_equivariance(config):
    assert max(_equivariance_error(config, seed) for seed in range(10)) <= 1e-9


@pytest.mark.slow
@pytest.mark.parametrize("config", [SMALL, SMALL_ADD])
def test_permutation_equivariance_full(config):
    assert max(_equivariance_error(config, seed) for seed in range(100)) <= 1e-9


def test_embed_without_blocks_is_projection():
    p = ModelParams.init(SMALL.with_variant("pairwise"), 3)
    x = Tensor(np.random.default_rng(3).standard_normal((5, 4)))
    assert np.array_equal(embed(x, p).data, project(x, p).data)


def test_pairwise_identical_rows_give_identical_rows():
    p = ModelParams.init(SMALL, 2)
    x = np.random.default_rng(2).standard_normal((4, 4))
    x[3] = x[1]
    s = pairwise_forward(Tensor(x), p).numpy()
    assert np.array_equal(s[1], s[3])


def test_input_checks():
    p = ModelParams.init(SMALL, 0)
    with pytest.raises(ShapeError):
        abc_forward(Tensor(np.ones((3, 2))), p)
    with pytest.raises(DataError):
        abc_forward(Tensor(np.zeros((0, 4))), p)


def test_bce_half_is_ln2():
    g = np.array([[1, 0, 1], [0, 1, 0], [1, 0, 1]], dtype=float)
    assert bce_loss(fixed(np.full((3, 3), 0.5)), g).item() == pytest.approx(np.log(2.0))


def test_bce_perfect_prediction_hits_clamp_floor():
    g = np.array([[1, 1], [1, 1]], dtype=float)
    assert bce_loss(fixed(g), g).item() <= 2e-7


def test_bce_hand_value():
    loss = bce_loss(fixed([[0.9, 0.1], [0.1, 0.9]]), np.eye(2)).item()
    assert loss == pytest.approx(-np.log(0.9))
    assert loss == pytest.approx(0.1054, abs=1e-4)


def test_bce_validates_ground_truth():
    s = fixed(np.full((2, 2), 0.5))
    with pytest.raises(DataError):
        bce_loss(s, np.array([[1.0, 0.5], [0.5, 1.0]]))
    with pytest.raises(DataError):
        bce_loss(s, np.array([[1.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(ShapeError):
        bce_loss(s, np.eye(3))


def _circle_batch(seed: int, count: int = 8):
    rng = np.random.default_rng(seed)
    cfg = CirclesConfig(n_points=50, n_circles=4)
    return [gen_circles(cfg, rng, i) for i in range(count)]


@pytest.mark.parametrize("variant", ["abc-mul", "abc-add"])
def test_initial_loss_near_ln2(variant):
    config = AbcConfig().with_variant(variant)
    for seed in range(5):
        p = ModelParams.init(config, seed)
        losses = [bce_loss(abc_forward(Tensor(inst.x), p), inst.g).item() for inst in _circle_batch(seed)]
        assert 0.6 <= float(np.mean(losses)) <= 0.8


@pytest.mark.parametrize("variant", ["abc-mul", "abc-add"])
def test_initial_similarity_near_half(variant):
    config = AbcConfig().with_variant(variant)
    for seed in range(5):
        inst = _circle_batch(seed, 1)[0]
        s = abc_forward(Tensor(inst.x), ModelParams.init(config, seed)).numpy()
        assert np.isfinite(s).all()
        assert float(np.mean(np.abs(s - 0.5))) < 0.15


@pytest.mark.parametrize("variant", ["abc-mul", "abc-add"])
def test_initial_scores_bounded(variant):
    p = ModelParams.init(AbcConfig().with_variant(variant), 0)
    s = abc_forward(Tensor(10.0 * _circle_batch(0, 1)[0].x), p).numpy()
    lo, hi = 1 / (1 + np.exp(0.25)), 1 / (1 + np.exp(-0.25))
    assert s.min() >= lo - 1e-9 and s.max() <= hi + 1e-9


def test_pairwise_ignores_other_points():
    p = ModelParams.init(SMALL, 4)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 4))
    s = pairwise_forward(Tensor(x), p).numpy()
    x[2] = 10.0 * rng.standard_normal(4)
    s2 = pairwise_forward(Tensor(x), p).numpy()
    keep = [0, 1, 3, 4]
    assert np.max(np.abs(s[np.ix_(keep, keep)] - s2[np.ix_(keep, keep)])) <= 1e-12


@pytest.mark.parametrize("config", [SMALL, SMALL_ADD])
def test_abc_depends_on_other_points(config):
    p = ModelParams.init(config, 4)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((5, 4))
    s = abc_forward(Tensor(x), p).numpy()
    x[2] = 10.0 * rng.standard_normal(4)
    s2 = abc_forward(Tensor(x), p).numpy()
    assert abs(s[0, 1] - s2[0, 1]) > 1e-9


def _full_grad_error(config, seed: int) -> float:
    # entries below the 1e-7 floor must match to an absolute 1e-11 for a 1e-4 result
    rng = np.random.default_rng(seed)
    p = ModelParams.init(config, seed)
    x = Tensor(rng.standard_normal((5, 4)))
    labels = rng.integers(0, 2, size=5)
    g = (labels[:, None] == labels[None, :]).astype(float)
    return grad_check(lambda: bce_loss(abc_forward(x, p), g), p.parameters(), floor=1e-7)


@pytest.mark.parametrize("config", [SMALL, SMALL_ADD])
def test_full_model_gradients(config):
    assert max(_full_grad_error(config, seed) for seed in range(2)) <= 1e-4


@pytest.mark.slow
@pytest.mark.parametrize("config", [SMALL, SMALL_ADD])
def test_full_model_gradients_many_seeds(config):
    assert max(_full_grad_error(config, seed) for seed in range(50)) <= 1e-4


def test_checkpoint_round_trip(tmp_path):
    from abclust.model import ArrayRecord, TrainState
    p = ModelParams.init(SMALL_ADD, 5)
    for _, t in p.named():
        t.data += 1.0 / 3.0
    state = TrainState(step=3, adam_t=3, adam_m={"input.w": ArrayRecord.of(p.input_w.data)},
                       adam_v={}, loss_trace=[0.7, 0.6, 0.5])
    path = tmp_path / "ckpt.json"
    p.save(path, state)
    loaded, got = ModelParams.load(path)
    assert loaded.config == p.config
    for (name, a), (_, b) in zip(p.named(), loaded.named(), strict=True):
        assert np.array_equal(a.data, b.data), name
    assert got == state


def test_checkpoint_errors(tmp_path):
    with pytest.raises(DataError):
        ModelParams.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(DataError):
        ModelParams.load(bad)
    p = ModelParams.init(SMALL, 0)
    path = tmp_path / "ckpt.json"
    p.save(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    del data["arrays"]["sim.w" if "sim.w" in data["arrays"] else "input.b"]
    path.write_text(json.dumps(data), encoding="utf-8")
    with pytest.raises(DataError, match="missing"):
        ModelParams.load(path)
    data["surprise"] = 1
    path.write_text(json.dumps(data), encoding="utf-8")
    with pytest.raises(ConfigurationError):
        ModelParams.load(path)
