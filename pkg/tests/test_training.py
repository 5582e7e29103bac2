import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from abclust.datasets import CirclesConfig, gen_circles
from abclust.model import AbcConfig, ModelParams, abc_forward, bce_loss
from abclust.tensor import Tensor
from abclust.training import (AdamState, CirclesStream, FixedStream, TrainConfig, adam_step,
                              batch_gradients, clip_global_norm, instance_gradients, train,
                              write_loss_trace)
from abclust.utils import DataError, NumericalError

LOGGER = logging.getLogger("Trainer")
TINY = AbcConfig(input_dim=2, latent_dim=4, sab_count=1, heads=2)


def tiny_cfg(**kw) -> TrainConfig:
    base = dict(learning_rate=0.01, batch_size=2, steps=4, instance_length=6, n_circles=2)
    return TrainConfig(**(base | kw))


def snapshot_equal(a: ModelParams, b: ModelParams) -> bool:
    sa, sb = a.snapshot(), b.snapshot()
    return sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_zero_gradient_leaves_params():
    p = ModelParams.init(TINY, 0)
    before = p.snapshot()
    state = AdamState.zeros(p)
    adam_step(p, [np.zeros_like(t.data) for t in p.parameters()], state, TrainConfig())
    assert all(np.array_equal(before[n], t.data) for n, t in p.named())
    assert state.t == 1


def test_constant_gradient_moves_by_learning_rate():
    p = ModelParams.init(TINY, 0)
    cfg = TrainConfig(learning_rate=0.01)
    state = AdamState.zeros(p)
    grads = [np.full_like(t.data, 0.5) for t in p.parameters()]
    for _ in range(50):
        before = p.snapshot()
        adam_step(p, grads, state, cfg)
    for name, t in p.named():
        assert np.allclose(before[name] - t.data, 0.01, rtol=1e-6)


def test_non_finite_gradient_rejected():
    p = ModelParams.init(TINY, 0)
    before = p.snapshot()
    grads = [np.zeros_like(t.data) for t in p.parameters()]
    grads[0][0, 0] = np.nan
    state = AdamState.zeros(p)
    with pytest.raises(NumericalError, match="input.w"):
        adam_step(p, grads, state, TrainConfig(), LOGGER)
    assert state.t == 0
    assert all(np.array_equal(before[n], t.data) for n, t in p.named())


def test_gradient_count_checked():
    p = ModelParams.init(TINY, 0)
    with pytest.raises(DataError):
        adam_step(p, [], AdamState.zeros(p), TrainConfig())


def test_clip_global_norm():
    grads = [np.array([[3.0]]), np.array([[4.0]])]
    assert clip_global_norm(grads, 1.0) == pytest.approx(5.0)
    assert np.allclose([grads[0][0, 0], grads[1][0, 0]], [0.6, 0.8])
    small = [np.array([[0.1]])]
    clip_global_norm(small, 1.0)
    assert small[0][0, 0] == 0.1


def test_streams_are_deterministic():
    a = CirclesStream(6, 2, 3).batch(5, 3)
    b = CirclesStream(6, 2, 3).batch(5, 3)
    assert all(np.array_equal(x.x, y.x) for x, y in zip(a, b))
    assert not np.array_equal(a[0].x, CirclesStream(6, 2, 3).batch(6, 3)[0].x)


def test_fixed_stream_cycles():
    insts = [gen_circles(CirclesConfig(n_points=4, n_circles=2, seed=s)) for s in range(3)]
    stream = FixedStream(insts)
    got = stream.batch(1, 2)
    assert got[0] is insts[2] and got[1] is insts[0]
    with pytest.raises(DataError):
        FixedStream([])
    with pytest.raises(DataError):
        batch_gradients(ModelParams.init(TINY, 0), [])


def test_batch_gradient_is_mean_of_instances():
    p = ModelParams.init(TINY, 3)
    batch = CirclesStream(6, 2, 3).batch(0, 4)
    loss, grads = batch_gradients(p, batch)
    per = [instance_gradients(p, inst) for inst in batch]
    assert loss == pytest.approx(np.mean([value for value, _ in per]), abs=1e-12)
    for i, g in enumerate(grads):
        assert np.max(np.abs(g - np.mean([gs[i] for _, gs in per], axis=0))) <= 1e-12
    with ThreadPoolExecutor(2) as pool:
        threaded_loss, threaded = batch_gradients(p, batch, pool)
    assert threaded_loss == loss
    assert all(np.array_equal(a, b) for a, b in zip(threaded, grads))


def test_training_is_deterministic():
    a = train(ModelParams.init(TINY, 0), CirclesStream(6, 2, 0), tiny_cfg(), LOGGER, progress=False)
    b = train(ModelParams.init(TINY, 0), CirclesStream(6, 2, 0), tiny_cfg(), LOGGER, progress=False)
    assert a.loss_trace == b.loss_trace
    assert snapshot_equal(a.params, b.params)


def test_workers_do_not_change_result():
    a = train(ModelParams.init(TINY, 1), CirclesStream(6, 2, 1), tiny_cfg(batch_size=4),
              LOGGER, progress=False)
    b = train(ModelParams.init(TINY, 1), CirclesStream(6, 2, 1), tiny_cfg(batch_size=4, workers=3),
              LOGGER, progress=False)
    assert a.loss_trace == b.loss_trace
    assert snapshot_equal(a.params, b.params)


def test_resume_matches_uninterrupted(tmp_path):
    full = train(ModelParams.init(TINY, 2), CirclesStream(6, 2, 2), tiny_cfg(steps=6), LOGGER,
                 progress=False)
    first = train(ModelParams.init(TINY, 2), CirclesStream(6, 2, 2), tiny_cfg(steps=3), LOGGER,
                  progress=False)
    path = tmp_path / "checkpoint.json"
    first.params.save(path, first.train_state())
    params, state = ModelParams.load(path)
    resumed = train(params, CirclesStream(6, 2, 2), tiny_cfg(steps=6), LOGGER, resume=state,
                    progress=False)
    assert resumed.step == 6
    assert np.allclose(resumed.loss_trace, full.loss_trace, rtol=0, atol=1e-12)
    for name, arr in full.params.snapshot().items():
        assert np.allclose(resumed.params.snapshot()[name], arr, rtol=0, atol=1e-12)


def test_resume_past_budget_is_noop(tmp_path):
    first = train(ModelParams.init(TINY, 0), CirclesStream(6, 2, 0), tiny_cfg(steps=2), LOGGER,
                  progress=False)
    again = train(first.params, CirclesStream(6, 2, 0), tiny_cfg(steps=2), LOGGER,
                  resume=first.train_state(), progress=False)
    assert again.step == 2
    assert again.loss_trace == first.loss_trace


def test_periodic_checkpoint(tmp_path):
    path = tmp_path / "ckpt.json"
    train(ModelParams.init(TINY, 0), CirclesStream(6, 2, 0), tiny_cfg(steps=4, checkpoint_every=2),
          LOGGER, checkpoint=path, progress=False)
    _, state = ModelParams.load(path)
    assert state is not None and state.step == 4


def test_overfits_single_instance():
    inst = gen_circles(CirclesConfig(n_points=8, n_circles=2, seed=4))
    p = ModelParams.init(TINY, 4)

    def loss() -> float:
        return bce_loss(abc_forward(Tensor(inst.x), p), inst.g).item()

    start = loss()
    result = train(p, FixedStream([inst]), tiny_cfg(steps=40, batch_size=1), LOGGER, progress=False)
    assert result.loss_trace[0] == pytest.approx(start)
    assert loss() < start


def test_write_loss_trace(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_trace(path, [0.5, 0.25])
    assert path.read_text(encoding="utf-8") == "step,loss\n0,0.5\n1,0.25\n"


@pytest.mark.slow
def test_training_determinism_hundred_steps():
    cfg = tiny_cfg(steps=100)
    a = train(ModelParams.init(TINY, 7), CirclesStream(6, 2, 7), cfg, LOGGER, progress=False)
    b = train(ModelParams.init(TINY, 7), CirclesStream(6, 2, 7), cfg, LOGGER, progress=False)
    assert snapshot_equal(a.params, b.params)


@pytest.mark.slow
def test_memorizes_two_cluster_instance():
    inst = gen_circles(CirclesConfig(n_points=10, n_circles=2, seed=1))
    p = ModelParams.init(AbcConfig(input_dim=2, latent_dim=8, sab_count=2, heads=2), 1)
    result = train(p, FixedStream([inst]), tiny_cfg(steps=500, batch_size=1), LOGGER, progress=False)
    assert min(result.loss_trace) < 0.05
