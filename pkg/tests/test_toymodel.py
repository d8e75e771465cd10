import math

import numpy as np
import pytest
import torch

import qlens.toymodel as tm
from qlens.errors import DivergenceError, InvalidParameterError
from qlens.metrics import kl_logits
from qlens.perturb import FixedL2, Gaussian, MagNeg, MagPos, MatchQuantL2, PerturbSpec
from qlens.quant import PerChannel, QuantScheme
from qlens.tensor import RngStream
from qlens.toymodel import (
    CheckpointError,
    InjectionPlan,
    ModelConfig,
    ModelParams,
    OptimizerConfig,
    Perturb,
    Quantize,
    TaskSpec,
    activation_scheme,
    evaluate,
    forward,
    grad_check,
    init,
    inject_outliers,
    load_checkpoint,
    param_shapes,
    parse_preset,
    perturb_plan,
    preset_plan,
    save_checkpoint,
    site_names,
    train,
    weight_scheme,
)

CFG = ModelConfig()
COPY = TaskSpec("copy")


@pytest.fixture(scope="module")
def params():
    return init(CFG)


@pytest.fixture(scope="module")
def tokens():
    return COPY.sample(RngStream(3), 4, CFG.vocab)[0]


class TestInit:
    def test_deterministic(self):
        assert init(CFG).equal(init(CFG))
        assert not init(CFG).equal(init(ModelConfig(init_seed=1)))

    def test_weight_scale(self, params):
        for name in params.sites + ["embed", "pos_embed"]:
            w = params[name].numpy()
            assert np.isfinite(w).all()
            assert 0.25 * CFG.init_std <= w.std() <= 4 * CFG.init_std, name

    def test_layout(self, params):
        assert list(params.tensors) == list(param_shapes(CFG))
        assert len(site_names(CFG)) == 6 * CFG.n_layers + 1
        assert params["layers.0.ffn.w_in"].shape == (64, 256)

    def test_config_validation(self):
        with pytest.raises(InvalidParameterError):
            ModelConfig(d_model=30, n_heads=4)
        with pytest.raises(InvalidParameterError):
            ModelParams(CFG, {})


class TestForward:
    def test_shape(self, params, tokens):
        assert forward(params, tokens).shape == (4, 32, 64)

    def test_empty_plan_is_exact(self, params, tokens):
        base = forward(params, tokens)
        none_plan = InjectionPlan({s: None for s in params.sites}, {s: None for s in params.sites})
        assert torch.equal(forward(params, tokens, InjectionPlan()), base)
        assert torch.equal(forward(params, tokens, none_plan), base)

    def test_zero_perturbation(self, params, tokens):
        plan = perturb_plan(CFG, PerturbSpec(Gaussian(), FixedL2(0.0)))
        torch.testing.assert_close(forward(params, tokens, plan), forward(params, tokens), atol=1e-6, rtol=0)

    def test_w8a8_changes_logits(self, params, tokens):
        base = forward(params, tokens).numpy()
        q = forward(params, tokens, preset_plan(CFG, "w8a8")).numpy()
        assert not np.array_equal(base, q)
        assert kl_logits(base, q) > 0

    def test_causality(self, params, tokens):
        base = forward(params, tokens)
        for t in (5, 17, 31):
            mutated = tokens.copy()
            mutated[:, t + 1 :] = (mutated[:, t + 1 :] + 7) % CFG.vocab
            out = forward(params, mutated)
            assert torch.equal(out[:, : t + 1], base[:, : t + 1])

    def test_attention_rows(self, params, tokens):
        _, maps = forward(params, tokens, return_attention=True)
        for a in maps:
            assert (a >= 0).all()
            torch.testing.assert_close(a.sum(-1), torch.ones(a.shape[:-1]), atol=1e-5, rtol=0)
            assert (a.triu(1) == 0).all()

    def test_deterministic_with_perturbations(self, params, tokens):
        plan = perturb_plan(CFG, PerturbSpec(MagNeg(), MatchQuantL2(), seed=3))
        assert torch.equal(forward(params, tokens, plan, call_id=2), forward(params, tokens, plan, call_id=2))
        assert not torch.equal(forward(params, tokens, plan, call_id=2), forward(params, tokens, plan, call_id=3))

    def test_injection_locality(self, params, tokens):
        plan = InjectionPlan({"head": Perturb(PerturbSpec(Gaussian(), FixedL2(1.0), seed=1))})
        assert not torch.equal(forward(params, tokens, plan), forward(params, tokens))
        # a zero input block into the head makes any head perturbation invisible
        t = dict(params.tensors)
        t["ln_f.gain"] = torch.zeros_like(t["ln_f.gain"])
        t["ln_f.bias"] = torch.zeros_like(t["ln_f.bias"])
        dead = ModelParams(CFG, t)
        assert torch.equal(forward(dead, tokens, plan), forward(dead, tokens))

    def test_errors(self, params, tokens):
        with pytest.raises(InvalidParameterError, match="token"):
            forward(params, np.full((1, 4), CFG.vocab))
        with pytest.raises(InvalidParameterError, match="site"):
            forward(params, tokens, InjectionPlan({"layers.9.attn.wq": None}))
        bad = InjectionPlan(activation_actions={"head": Quantize(QuantScheme(8, granularity=PerChannel(0)))})
        with pytest.raises(InvalidParameterError, match="per-tensor"):
            forward(params, tokens, bad)
        with pytest.raises(InvalidParameterError):
            forward(params, np.zeros((1, CFG.context + 1), dtype=int))


class TestPresets:
    def test_parse(self):
        assert parse_preset("w4a8") == (4, 8)
        assert parse_preset("fp") == (None, None)
        assert parse_preset("w4a16") == (4, None)
        with pytest.raises(InvalidParameterError):
            parse_preset("int8")

    def test_schemes(self):
        assert weight_scheme(4).granularity == PerChannel(1)
        assert activation_scheme(8).bits == 8
        plan = preset_plan(CFG, "w4a16")
        assert not plan.activation_actions and len(plan.weight_actions) == len(site_names(CFG))


class TestTasks:
    def test_copy(self):
        tok, sc = COPY.sample(RngStream(0), 2, 64)
        np.testing.assert_array_equal(tok[:, :16], tok[:, 16:])
        assert sc.sum() == 2 * 16 and sc[:, 15:31].all()

    def test_induction_and_modadd(self):
        tok, sc = TaskSpec("induction").sample(RngStream(0), 3, 64)
        for row in tok:
            assert len(set(row[:16])) == 16 and set(row[16:]) == set(row[:16])
        tok, sc = TaskSpec("modadd", 30, 17).sample(RngStream(0), 2, 64)
        trip = tok.reshape(2, 10, 3)
        np.testing.assert_array_equal(trip[..., 2], trip[..., :2].sum(-1) % 17)
        assert sc.sum() == 2 * 10

    def test_checks(self):
        with pytest.raises(InvalidParameterError):
            TaskSpec("sort")
        with pytest.raises(InvalidParameterError):
            TaskSpec(seq_len=64).check(CFG)
        with pytest.raises(InvalidParameterError):
            TaskSpec("modadd", modulus=100).check(CFG)


class TestTrainEval:
    def test_zero_steps(self, params):
        out, curve = train(params, COPY, 0)
        assert out.equal(params) and curve == []

    def test_short_run_learns(self, params):
        out, curve = train(params, COPY, 60, OptimizerConfig(lr=3e-3), RngStream(0))
        assert np.mean(curve[-10:]) < np.mean(curve[:10])
        assert not out.equal(params)
        assert params.equal(init(CFG))

    def test_divergence(self, params, monkeypatch):
        real = tm.loss_and_accuracy

        def poisoned(logits, tokens, scored):
            loss, acc = real(logits, tokens, scored)
            return loss * float("nan"), acc

        monkeypatch.setattr(tm, "loss_and_accuracy", poisoned)
        with pytest.raises(DivergenceError) as info:
            train(params, COPY, 3)
        assert info.value.step == 0 and info.value.exit_code == 3

    def test_untrained_perplexity(self, params):
        res = evaluate(params, COPY)
        assert 49 <= res.perplexity <= 79
        assert res.perplexity == pytest.approx(math.exp(res.ce_loss))

    def test_empty_plan_metric_exact(self, params):
        none_plan = InjectionPlan({s: None for s in params.sites})
        assert evaluate(params, COPY, none_plan) == evaluate(params, COPY)

    def test_trained_model(self, trained_checkpoint):
        assert trained_checkpoint["eval"].accuracy >= 0.95
        curve = np.asarray(trained_checkpoint["curve"])
        smooth = curve.reshape(-1, 100).mean(axis=1)
        assert (np.diff(smooth) <= 0).all()

    def test_mag_neg_worse_than_mag_pos(self, trained_checkpoint):
        params, _ = inject_outliers(trained_checkpoint["params"], 0.01, 100.0, RngStream(3))
        wins = 0
        for seed in range(4):
            acc = {}
            for kind in (MagPos(), MagNeg()):
                w = Perturb(PerturbSpec(kind, MatchQuantL2(weight_scheme(8)), seed))
                a = Perturb(PerturbSpec(kind, MatchQuantL2(activation_scheme(8)), seed))
                acc[kind] = evaluate(params, COPY, InjectionPlan.uniform(CFG, w, a)).accuracy
            wins += acc[MagNeg()] <= acc[MagPos()]
        assert wins >= 3


class TestGradCheck:
    def test_float32(self, params):
        res = grad_check(params, COPY, n_coords=128)
        assert res.n_coords >= 100 and res.max_rel_error < 1e-2

    def test_float64(self, params):
        assert grad_check(params, COPY, n_coords=64, dtype=torch.float64).max_rel_error < 1e-4

    def test_zero_loss_is_flat(self):
        # zero head and final gain: the prediction is uniform and nothing upstream can move it
        cfg = ModelConfig(n_layers=1, d_model=16, n_heads=2, vocab=8, context=8)
        p = init(cfg)
        t = dict(p.tensors)
        t["head"] = torch.zeros_like(t["head"])
        t["ln_f.gain"] = torch.zeros_like(t["ln_f.gain"])
        tokens = np.zeros((2, 8), dtype=np.int64)
        scored = np.ones((2, 7), dtype=bool)
        flat = ModelParams(cfg, t)
        leaves = {k: v.clone().requires_grad_(True) for k, v in flat.tensors.items()}
        loss = tm.batch_loss(tm._RawParams(cfg, leaves), tokens, scored)
        grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
        for name, g in zip(leaves, grads):
            if name not in ("head", "ln_f.bias", "ln_f.gain") and g is not None:
                assert float(g.abs().max()) < 1e-12, name

    def test_batch_doubling(self, params):
        tok, sc = COPY.sample(RngStream(1), 4, CFG.vocab)

        def grad(tk, s):
            leaves = {k: v.clone().double().requires_grad_(True) for k, v in params.tensors.items()}
            loss = tm.batch_loss(tm._RawParams(CFG, leaves), tk, s)
            return torch.autograd.grad(loss, [leaves["head"]])[0]

        g1 = grad(tok, sc)
        g2 = grad(np.concatenate([tok, tok]), np.concatenate([sc, sc]))
        torch.testing.assert_close(g1, g2, rtol=1e-9, atol=1e-12)


class TestOutliers:
    def test_function_preserving(self, params, tokens):
        out, ch = inject_outliers(params, 0.05, 20.0, RngStream(0))
        assert len(ch) == 3
        torch.testing.assert_close(forward(out, tokens), forward(params, tokens), atol=1e-4, rtol=1e-4)
        assert float(out["layers.0.ln1.gain"][ch].min()) == 20.0

    def test_creates_activation_outliers(self, params, tokens):
        out, ch = inject_outliers(params, 0.01, 20.0, RngStream(0))
        a = torch.nn.functional.layer_norm(out["embed"][torch.as_tensor(tokens)], (64,), out["layers.0.ln1.gain"], out["layers.0.ln1.bias"])
        mag = a.abs().amax(dim=(0, 1))
        others = np.setdiff1d(np.arange(64), ch)
        assert float(mag[ch].min()) > 5 * float(mag[others].max())

    def test_validation(self, params):
        with pytest.raises(InvalidParameterError):
            inject_outliers(params, 0.0)
        with pytest.raises(InvalidParameterError):
            inject_outliers(params, 0.1, -1)


class TestCheckpoint:
    def test_round_trip(self, params, tmp_path):
        save_checkpoint(params, tmp_path / "ck", {"note": "x"})
        back, meta = load_checkpoint(tmp_path / "ck")
        assert back.equal(params) and meta == {"note": "x"}

    def test_errors(self, params, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "missing")
        save_checkpoint(params, tmp_path / "ck")
        (tmp_path / "ck" / "manifest.json").write_text('{"format": "other"}')
        with pytest.raises(CheckpointError, match="format"):
            load_checkpoint(tmp_path / "ck")
