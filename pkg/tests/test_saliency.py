import numpy as np
import pytest

from heterolora.adapters import ModuleId
from heterolora.autodiff import Tensor
from heterolora.saliency import (compute_scores, constant_scores, gradnorm_scores, merged_weight, snip_scores,
                                 synflow_scores, write_scores_csv)

from conftest import central_diff, randomise_adapters


def snapshot(model):
    state = model.state_dict()
    flags = {m: a.enabled for m, a in model.adapters.items()}
    grads = {k: (None if p.grad is None else p.grad.copy()) for k, p in model.named_parameters().items()}
    return state, flags, grads


def assert_same(model, snap):
    state, flags, grads = snap
    now = model.state_dict()
    assert all(np.array_equal(state[k], now[k]) for k in state)
    assert flags == {m: a.enabled for m, a in model.adapters.items()}
    for k, p in model.named_parameters().items():
        assert (p.grad is None) == (grads[k] is None), k
    assert all(a.override is None and a.masks is None for a in model.adapters.values())


def avg_loss(model, batches):
    return sum(float(model.loss(b.tokens, b.targets).data) for b in batches) / len(batches)


class TestSnip:
    def test_decomposed_zero_at_init(self, adapted_model, tiny_batches):
        scores = snip_scores(adapted_model, tiny_batches)
        assert len(scores) == 11
        assert all(s.value == 0.0 for s in scores.values())

    def test_merged_nonzero_at_init(self, adapted_model, tiny_batches):
        scores = snip_scores(adapted_model, tiny_batches, basis="merged")
        assert max(s.value for s in scores.values()) > 0

    @pytest.mark.parametrize("basis", ["decomposed", "merged"])
    def test_mask_route_agrees(self, adapted_model, tiny_batches, basis):
        randomise_adapters(adapted_model)
        direct = snip_scores(adapted_model, tiny_batches, basis)
        masked = snip_scores(adapted_model, tiny_batches, basis, via_mask=True)
        for m in direct:
            assert direct[m].value == pytest.approx(masked[m].value, abs=1e-10)
            assert direct[m].value > 0

    def test_fd_oracle(self, adapted_model, tiny_batches):
        randomise_adapters(adapted_model)
        batches = tiny_batches[:2]
        mid = ModuleId(1, "v_proj")
        a = adapted_model.adapters[mid]
        gA, gB = central_diff(lambda: avg_loss(adapted_model, batches), [a.A.data, a.B.data], h=1e-6)
        expected = np.abs(a.A.data * gA).sum() + np.abs(a.B.data * gB).sum()
        assert snip_scores(adapted_model, batches)[mid].value == pytest.approx(expected, rel=1e-5)

    def test_empty_data(self, adapted_model):
        with pytest.raises(ValueError):
            snip_scores(adapted_model, [])

    def test_side_effect_free(self, adapted_model, tiny_batches):
        randomise_adapters(adapted_model)
        set_off = list(adapted_model.adapters)[::3]
        for m in set_off:
            adapted_model.adapters[m].enabled = False
        snap = snapshot(adapted_model)
        snip_scores(adapted_model, tiny_batches, "merged")
        snip_scores(adapted_model, tiny_batches, via_mask=True)
        assert_same(adapted_model, snap)

    def test_disabled_modules_still_scored(self, adapted_model, tiny_batches):
        randomise_adapters(adapted_model)
        on = snip_scores(adapted_model, tiny_batches)
        for a in adapted_model.adapters.values():
            a.enabled = False
        off = snip_scores(adapted_model, tiny_batches)
        assert {m: s.value for m, s in on.items()} == {m: s.value for m, s in off.items()}


class TestSynflow:
    def test_zero_at_init(self, adapted_model):
        assert all(s.value == 0.0 for s in synflow_scores(adapted_model).values())

    def test_repeatable_and_side_effect_free(self, adapted_model):
        randomise_adapters(adapted_model)
        snap = snapshot(adapted_model)
        first = synflow_scores(adapted_model)
        second = synflow_scores(adapted_model, basis="merged")
        assert_same(adapted_model, snap)
        assert first == synflow_scores(adapted_model)
        assert second == synflow_scores(adapted_model, basis="merged")

    def test_fd_oracle(self, adapted_model):
        randomise_adapters(adapted_model)
        mid = ModuleId(1, "q_proj")
        a = adapted_model.adapters[mid]
        state = adapted_model.state_dict()
        # oracle: abs the whole network, feed ones, differentiate the logit sum
        for p in adapted_model.named_parameters().values():
            np.abs(p.data, out=p.data)
        cfg = adapted_model.config
        ones = np.ones((1, cfg.max_seq_len, cfg.d_model)) + adapted_model.params["embed.positions"].data

        def R():
            return float(adapted_model.forward(embeddings=Tensor(ones)).data.sum())

        gA, gB = central_diff(R, [a.A.data, a.B.data], h=1e-6)
        adapted_model.load_state_dict(state)
        expected = (a.A.data * gA).sum() + (a.B.data * gB).sum()
        got = synflow_scores(adapted_model)[mid].value
        assert abs(expected) > 1e-6
        assert got == pytest.approx(expected, rel=1e-5)


class TestGradNorm:
    def test_init_only_b_contributes(self, adapted_model, tiny_batches):
        scores = gradnorm_scores(adapted_model, tiny_batches)
        assert all(s.value >= 0 for s in scores.values())
        assert any(s.value > 0 for s in scores.values())

    def test_doubling(self, adapted_model, tiny_batches):
        randomise_adapters(adapted_model)
        one = gradnorm_scores(adapted_model, tiny_batches)
        two = gradnorm_scores(adapted_model, tiny_batches, loss_scale=2.0)
        for m in one:
            assert two[m].value == 2 * one[m].value

    def test_fd_norms(self, adapted_model, tiny_batches):
        randomise_adapters(adapted_model)
        batches = tiny_batches[:2]
        scores = gradnorm_scores(adapted_model, batches)
        for mid in (ModuleId(0, "q_proj"), ModuleId(1, "cut")):
            a = adapted_model.adapters[mid]
            gA, gB = central_diff(lambda: avg_loss(adapted_model, batches), [a.A.data, a.B.data], h=1e-6)
            expected = np.linalg.norm(gA) + np.linalg.norm(gB)
            assert abs(scores[mid].value - expected) / expected < 1e-4

    def test_merged_fd(self, adapted_model, tiny_batches):
        randomise_adapters(adapted_model)
        batches = tiny_batches[:1]
        mid = ModuleId(0, "v_proj")
        a = adapted_model.adapters[mid]
        W = adapted_model.params["layers.0.v_proj.weight"]
        original = W.data.copy()
        W.data[...] = merged_weight(adapted_model, mid)
        a.enabled = False
        (g,) = central_diff(lambda: avg_loss(adapted_model, batches), [W.data], h=1e-6)
        W.data[...] = original
        a.enabled = True
        got = gradnorm_scores(adapted_model, batches, basis="merged")[mid].value
        assert got == pytest.approx(np.linalg.norm(g), rel=1e-5)

    def test_deterministic(self, adapted_model, tiny_batches):
        a = gradnorm_scores(adapted_model, tiny_batches)
        b = gradnorm_scores(adapted_model, tiny_batches)
        assert {m: s.value for m, s in a.items()} == {m: s.value for m, s in b.items()}

    def test_side_effect_free(self, adapted_model, tiny_batches):
        snap = snapshot(adapted_model)
        gradnorm_scores(adapted_model, tiny_batches)
        gradnorm_scores(adapted_model, tiny_batches, basis="merged")
        assert_same(adapted_model, snap)


class TestConstant:
    def test_all_one(self, adapted_model):
        scores = constant_scores(adapted_model.adapters)
        assert len(scores) == 11 and all(s.value == 1.0 for s in scores.values())

    def test_empty(self):
        assert constant_scores({}) == {}


def test_compute_scores_rejects_unknown(adapted_model):
    with pytest.raises(ValueError):
        compute_scores(adapted_model, "fisher")


def test_csv(adapted_model, tmp_path):
    path = tmp_path / "s.csv"
    write_scores_csv(compute_scores(adapted_model, "constant"), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "layer,site,proxy,basis,value"
    assert lines[1] == "0,q_proj,constant,decomposed,1.0"
    assert len(lines) == 12
