import pytest
import torch

from nodulegen.errors import ConfigError
from nodulegen.gradcheck import (GROUPS, GradCheckEntry, GradCheckReport, check_coordinates,
                                 check_directions, run_gradcheck, selected_targets)


class _MisdifferentiatedSquare(torch.autograd.Function):
    """x**2 with a backward that returns 3x instead of 2x."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x * x

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return 3.0 * x * grad


def _leaf(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=torch.float64).requires_grad_(True)


def test_smooth_function_passes(torch_gen):
    x = _leaf(torch_gen, 5)
    entry = check_coordinates('cube', lambda: (x ** 3).sum(), [x])
    assert entry.passed
    assert entry.n_checked == 5


def test_wrong_backward_is_caught(torch_gen):
    x = _leaf(torch_gen, 4)
    entry = check_coordinates('bad', lambda: _MisdifferentiatedSquare.apply(x).sum(), [x])
    assert not entry.passed
    assert entry.rel_error == pytest.approx(1.0 / 3.0, rel=1e-6)


def test_coordinate_subset(torch_gen):
    x = _leaf(torch_gen, 50)
    entry = check_coordinates('subset', lambda: (x ** 2).sum(), [x], max_coordinates=7, rng=torch_gen)
    assert entry.n_checked == 7


def test_directions_pass_for_linear_map(torch_gen):
    w = _leaf(torch_gen, 3, 3)
    v = torch.randn(3, generator=torch_gen, dtype=torch.float64)
    entry = check_directions('linear', lambda recorder: (w @ v).sum(), [w], rng=torch_gen)
    assert entry.passed
    assert entry.n_checked == 8


def test_kink_crossings_are_skipped(torch_gen):
    x = torch.full((1,), 1e-6, dtype=torch.float64, requires_grad=True)

    def fn(recorder):
        recorder.record(x)
        return x.abs().sum()

    entry = check_directions('kink', fn, [x], rng=torch_gen)
    assert entry.n_checked == 0
    assert entry.n_skipped == 8
    assert not entry.passed


def test_selection():
    assert selected_targets('all') == [name for group in GROUPS.values() for name in group]
    assert selected_targets('maskgan, l1_loss') == ['gradient_penalty', 'critic_loss',
                                                    'generator_loss_mask', 'l1_loss']
    with pytest.raises(ConfigError) as info:
        selected_targets('attention,nonsense')
    assert info.value.key == "gradcheck.select"


def test_report_passes_only_with_entries():
    assert not GradCheckReport(seed=0).passed
    report = GradCheckReport(seed=0, entries=[GradCheckEntry('a', 1e-9, 3)])
    assert report.passed
    assert report.to_dict()['entries'][0]['passed'] is True


def test_attention_operators():
    report = run_gradcheck('attention', seed=0)
    assert [e.name for e in report.entries] == list(GROUPS['attention'])
    for entry in report.entries:
        assert entry.passed, entry.to_dict()


def test_single_target_selection():
    report = run_gradcheck('l1_loss', seed=2)
    assert [e.name for e in report.entries] == ['l1_loss']
    assert report.passed


@pytest.mark.slow
def test_all_targets():
    report = run_gradcheck('all', seed=0)
    assert len(report.entries) == 11
    for entry in report.entries:
        assert entry.passed, entry.to_dict()
