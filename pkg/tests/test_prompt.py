import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pond import numgrad as ng
from pond.errors import ConfigError, ShapeError
from pond.prompt import (
    DomainPromptBuffer,
    aggregate_domain_prompt,
    generate_instance_prompt,
    generator_graph,
    init_generator,
    prepend,
    prepend_graph,
    update_buffer,
    zero_generator,
)


def test_prepend_shape_and_content():
    P = np.ones((2, 3))
    dP = np.full((2, 3), 0.5)
    x = np.zeros((2, 5))
    out = prepend(P, dP, x)
    assert out.shape == (2, 8)
    np.testing.assert_array_equal(out[:, :3], 1.5)
    np.testing.assert_array_equal(out[:, 3:], 0.0)


def test_prepend_errors():
    with pytest.raises(ConfigError):
        prepend(np.zeros((2, 0)), np.zeros((2, 0)), np.zeros((2, 5)))
    assert prepend(np.zeros((2, 0)), np.zeros((2, 0)), np.zeros((2, 5)), allow_empty=True).shape == (2, 5)
    with pytest.raises(ShapeError):
        prepend(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((2, 5)))


def test_prepend_graph_broadcasts_common_prompt():
    g = ng.Graph()
    out = prepend_graph(g.const(np.ones((2, 3))), g.const(np.zeros((4, 2, 5)))).value
    assert out.shape == (4, 2, 8) and (out[:, :, :3] == 1).all()


def test_generator_shapes_and_determinism():
    gen = init_generator(2, 16, 3, hidden=8, seed=0)
    x = np.random.default_rng(0).normal(size=(4, 2, 16))
    a = generate_instance_prompt(gen, x)
    assert a.shape == (4, 2, 3)
    np.testing.assert_array_equal(a, generate_instance_prompt(gen, x))
    np.testing.assert_allclose(generate_instance_prompt(gen, x[1]), a[1], atol=1e-14)
    g = ng.Graph()
    from pond.model import bind
    np.testing.assert_allclose(generator_graph(g.const(x), bind(g, gen.arrays(), False), 2, 3).value, a, atol=1e-14)
    with pytest.raises(ShapeError):
        generate_instance_prompt(gen, np.zeros((3, 16)))


def test_zero_generator_outputs_zero():
    gen = zero_generator(2, 16, 3)
    assert not generate_instance_prompt(gen, np.ones((5, 2, 16))).any()


def test_noise_only_when_requested():
    gen = init_generator(1, 8, 2, hidden=4, seed=1)
    x = np.ones((1, 8))
    clean = generate_instance_prompt(gen, x)
    noisy = generate_instance_prompt(gen, x, noise_std=0.5, rng=np.random.default_rng(0))
    assert not np.allclose(clean, noisy)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 2, 3), elements=st.floats(-5, 5)))
def test_aggregate_is_entrywise_mean(prompts):
    np.testing.assert_allclose(aggregate_domain_prompt(list(prompts)), prompts.mean(axis=0), atol=1e-12)


def test_aggregate_errors():
    with pytest.raises(ConfigError):
        aggregate_domain_prompt([])
    with pytest.raises(ShapeError):
        aggregate_domain_prompt([np.zeros((2, 3)), np.zeros((3, 2))])


def test_buffer_ema():
    buf = DomainPromptBuffer(momentum=0.9)
    buf = update_buffer(buf, [np.full((1, 2), 2.0), np.full((1, 2), 4.0)])
    np.testing.assert_array_equal(buf.value, 3.0)
    buf = update_buffer(buf, [np.full((1, 2), 13.0)])
    np.testing.assert_allclose(buf.value, 0.9 * 3.0 + 0.1 * 13.0)
    assert buf.count == 2
    with pytest.raises(ConfigError):
        DomainPromptBuffer(momentum=1.0)
