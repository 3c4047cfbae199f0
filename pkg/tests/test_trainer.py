import numpy as np
import pytest

from soli import dataset, trainer
from soli.config import TrainConfig
from soli.dataset import generate_augmented_set, load_manifest
from soli.errors import NonFiniteGradientError, SamplingError
from soli.nncore import ParamStore, build_vocabulary
from soli.nncore.checkpoint import dumps, loads
from soli.synth import generate_corpus
from soli.trainer import adam_step

TOY_PROFILES = ("normal", "R0.5S1", "R0.2S50", "R0.05S50")


def _scalar_store(w0=1.0):
    ps = ParamStore()
    ps.add("w", np.array([w0], dtype=np.float64))
    return ps


class TestAdam:
    def test_zero_gradient_fresh_state(self):
        ps = _scalar_store(0.7)
        adam_step(ps, lr=0.1)
        assert ps["w"].data[0] == 0.7
        assert ps.opt_state["w"]["t"] == 1

    def test_zero_gradient_decays_moments(self):
        ps = _scalar_store()
        ps["w"].grad[:] = 2.0
        adam_step(ps)
        m, v = ps.opt_state["w"]["m"].copy(), ps.opt_state["w"]["v"].copy()
        ps["w"].grad[:] = 0.0
        adam_step(ps)
        np.testing.assert_allclose(ps.opt_state["w"]["m"], 0.9 * m, rtol=1e-12)
        np.testing.assert_allclose(ps.opt_state["w"]["v"], 0.999 * v, rtol=1e-12)

    @pytest.mark.parametrize("g", [1e-3, 1.0, 250.0, -4.0])
    def test_first_step_is_lr(self, g):
        ps = _scalar_store(0.0)
        ps["w"].grad[:] = g
        adam_step(ps, lr=0.01)
        assert abs(ps["w"].data[0]) == pytest.approx(0.01, rel=1e-4)
        assert np.sign(ps["w"].data[0]) == -np.sign(g)

    def test_quadratic_bowl(self):
        ps = _scalar_store(1.0)
        for _ in range(200):
            ps["w"].grad[:] = 2 * ps["w"].data
            adam_step(ps, lr=0.05)
        assert abs(ps["w"].data[0]) < 1e-2

    def test_matches_reference_formula(self, rng):
        ps = _scalar_store()
        grads = rng.normal(size=5)
        m = v = 0.0
        w = 1.0
        for t, g in enumerate(grads, 1):
            ps["w"].grad[:] = g
            adam_step(ps, lr=0.02)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.02 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert ps["w"].data[0] == pytest.approx(w, rel=1e-12)

    def test_non_finite_aborts(self):
        ps = _scalar_store()
        ps.add("u", np.zeros(2))
        ps["w"].grad[:] = 1.0
        ps["u"].grad[:] = [0.0, np.nan]
        with pytest.raises(NonFiniteGradientError) as info:
            adam_step(ps)
        assert info.value.names == ("u",)
        assert ps["w"].data[0] == 1.0 and not ps.opt_state

    def test_only_named(self):
        ps = _scalar_store()
        ps.add("u", np.zeros(1))
        ps["w"].grad[:] = 1.0
        ps["u"].grad[:] = 1.0
        adam_step(ps, names=["u"])
        assert ps["w"].data[0] == 1.0 and ps["u"].data[0] != 0.0


# -- toy corpus -------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    recs = load_manifest(generate_corpus(d, count=32, size=64, seed=1))
    aset, report = generate_augmented_set(recs, TOY_PROFILES, d / "aug")
    assert report.ok
    vocab = build_vocabulary([c for r in recs if r.split == "train" for c in r.captions])
    return aset, vocab


def _cfg(**kw):
    base = dict(mode="baseline", epochs=2, batch_size=8, seed=3, profiles=TOY_PROFILES,
                side=16, channels=(4, 8), embedding_dim=8, token_dim=8, hidden_dim=16)
    base.update(kw)
    return TrainConfig(**base).validate()


def _data(toy, cfg):
    aset, vocab = toy
    return trainer.data_for(cfg, aset, vocab)


@pytest.fixture(scope="module")
def warm(toy):
    cfg = _cfg(epochs=3)
    ps, _ = trainer.train(cfg, _data(toy, cfg), trainer.new_model(cfg, toy[1]))
    return ps


class TestRegimes:
    @pytest.mark.parametrize("mode", ["baseline", "soli-half", "soli-par"])
    def test_zero_epochs_is_identity(self, toy, warm, mode):
        cfg = _cfg(mode=mode, epochs=0)
        ps, log = trainer.train(cfg, _data(toy, cfg), warm)
        assert ps.checksum() == warm.checksum() and log.records == []

    @pytest.mark.parametrize("mode", ["baseline", "soli-half", "soli-par"])
    def test_deterministic(self, toy, warm, mode):
        cfg = _cfg(mode=mode)
        a, la = trainer.train(cfg, _data(toy, cfg), warm)
        b, lb = trainer.train(cfg, _data(toy, cfg), warm)
        assert a.checksum() == b.checksum()
        assert la.to_jsonl() == lb.to_jsonl()
        assert la.summary_csv() == lb.summary_csv()

    def test_input_params_not_mutated(self, toy, warm):
        before = warm.checksum()
        cfg = _cfg(mode="soli-par", epochs=1)
        trainer.train(cfg, _data(toy, cfg), warm)
        assert warm.checksum() == before

    def test_half_freezes_decoder(self, toy, warm):
        cfg = _cfg(mode="soli-half", epochs=3)
        ps, log = trainer.train(cfg, _data(toy, cfg), warm)
        assert ps.checksum("dec.") == warm.checksum("dec.")
        assert ps.checksum("enc.") != warm.checksum("enc.")
        assert all("cross_entropy" not in r and "gamma" not in r for r in log.records)
        assert set(ps.opt_state) <= set(ps.names("enc."))

    def test_baseline_never_samples_pairs(self, toy, warm, monkeypatch):
        def boom(*a, **k):
            raise AssertionError("pair sampled in baseline")
        monkeypatch.setattr(trainer, "sample_pair", boom)
        cfg = _cfg(mode="baseline", epochs=1)
        trainer.train(cfg, _data(toy, cfg), warm)

    def test_log_records(self, toy, warm):
        cfg = _cfg(mode="soli-par", epochs=2, gamma=0.3, lam=1.7)
        _, log = trainer.train(cfg, _data(toy, cfg), warm)
        steps = [r["step"] for r in log.records]
        assert steps == list(range(1, len(steps) + 1))
        # 24 train images at batch 8 -> 3 steps per epoch
        assert len(steps) == 6
        for r in log.records:
            assert r["seed"] == 3
            assert r["combined"] == pytest.approx(r["gamma"] * r["contrastive"] + r["lambda"] * r["cross_entropy"],
                                                  rel=1e-6)

    def test_steps_per_epoch_match_across_regimes(self, toy, warm):
        counts = {}
        for mode in ("baseline", "soli-half", "soli-par"):
            cfg = _cfg(mode=mode, epochs=1)
            counts[mode] = len(trainer.train(cfg, _data(toy, cfg), warm)[1].records)
        assert len(set(counts.values())) == 1

    def test_baseline_draws_only_configured_profiles(self, toy, warm, monkeypatch):
        seen = []
        real = trainer.TrainData.images

        def spy(self, keys):
            seen.extend(p for _, p in keys)
            return real(self, keys)
        monkeypatch.setattr(trainer.TrainData, "images", spy)
        cfg = _cfg(mode="baseline", epochs=2, profiles=("normal",))
        trainer.train(cfg, _data(toy, cfg), warm)
        assert set(seen) == {"normal"}

    def test_unknown_profile_in_config(self, toy):
        cfg = _cfg(profiles=("normal", "R0.3S2"))
        with pytest.raises(SamplingError, match="R0.3S2"):
            _data(toy, cfg)

    def test_empty_split(self, toy):
        aset, vocab = toy
        with pytest.raises(SamplingError):
            trainer.TrainData(aset, vocab, 16, 16, split="nosuch")

    def test_mode_mismatch(self, toy, warm):
        cfg = _cfg(mode="baseline")
        with pytest.raises(ValueError):
            trainer.train_soli_par(cfg, _data(toy, cfg), warm)


class TestComposition:
    def test_phase_b_zero_equals_half(self, toy, warm):
        con = _cfg(mode="soli-con", epochs_phase_a=2, epochs_phase_b=0)
        half = _cfg(mode="soli-half", epochs=2)
        a, la = trainer.train(con, _data(toy, con), warm)
        b, lb = trainer.train(half, _data(toy, half), warm)
        assert dumps(a, {}) == dumps(b, {})
        assert [r["contrastive"] for r in la.records] == [r["contrastive"] for r in lb.records]

    def test_phase_a_zero_equals_par(self, toy, warm):
        con = _cfg(mode="soli-con", epochs_phase_a=0, epochs_phase_b=2)
        par = _cfg(mode="soli-par", epochs=2)
        assert trainer.train(con, _data(toy, con), warm)[0].checksum() == \
            trainer.train(par, _data(toy, par), warm)[0].checksum()

    def test_both_phases(self, toy, warm):
        con = _cfg(mode="soli-con", epochs_phase_a=1, epochs_phase_b=2)
        half = _cfg(mode="soli-half", epochs=1)
        par = _cfg(mode="soli-par", epochs=2)
        mid, _ = trainer.train(half, _data(toy, half), warm)
        expected, _ = trainer.train(par, _data(toy, par), mid)
        got, log = trainer.train(con, _data(toy, con), warm)
        assert got.checksum() == expected.checksum()
        assert log.phase_boundaries == [3]
        assert [r["phase"] for r in log.records] == ["A"] * 3 + ["B"] * 6


class TestResume:
    @pytest.mark.parametrize("mode,stop", [("baseline", 1), ("soli-par", 2), ("soli-con", 1), ("soli-con", 2)])
    def test_interrupted_equals_uninterrupted(self, toy, warm, mode, stop):
        cfg = _cfg(mode=mode, epochs=3, epochs_phase_a=2, epochs_phase_b=2)
        full, lf = trainer.train(cfg, _data(toy, cfg), warm)
        part, lp = trainer.train(cfg, _data(toy, cfg), warm, stop_after_epochs=stop)
        assert lp.resume is not None
        # persist through a checkpoint to include the float32 round trip
        part, meta = loads(dumps(part, trainer.checkpoint_meta(cfg, toy[1], lp)))
        rest, lr = trainer.train(cfg, _data(toy, cfg), part, resume=meta["resume"])
        assert lr.resume is None
        assert rest.checksum() == full.checksum()
        assert lp.to_jsonl() + lr.to_jsonl() == lf.to_jsonl()


class TestObjectives:
    def _pairs(self, toy, n=4, prob=0.5, seed=0):
        cfg = _cfg(mode="soli-par")
        data = _data(toy, cfg)
        rng = np.random.default_rng(seed)
        pairs = [dataset.sample_pair(data.aset, rng, prob) for _ in range(n)]
        return cfg, data, pairs, data.caption_batch([p.left[0] for p in pairs], rng), \
            data.caption_batch([p.right[0] for p in pairs], rng)

    def _grads(self, ps, loss):
        ps.zero_grad()
        loss.backward()
        return {n: t.grad.copy() for n, t in ps.items()}

    def test_gamma_zero_is_cross_entropy_direction(self, toy):
        cfg, data, pairs, ca, cb = self._pairs(toy)
        from soli import losses
        from soli.nncore import decode_teacher_forced, encode, init_params

        ps = init_params(cfg.encoder_spec, cfg.decoder_spec(toy[1].size), 4).astype(np.float64)
        g0 = self._grads(ps, trainer.par_objective(ps, data, pairs, ca, cb, _cfg(mode="soli-par", gamma=0.0)))
        ea = encode(ps, data.images([p.left for p in pairs]).astype(np.float64))
        eb = encode(ps, data.images([p.right for p in pairs]).astype(np.float64))
        ce = losses.mean_of([losses.cross_entropy(decode_teacher_forced(ps, ea, ca[0]), ca[1]),
                             losses.cross_entropy(decode_teacher_forced(ps, eb, cb[0]), cb[1])], "ce")
        g1 = self._grads(ps, ce)
        for n in g0:
            np.testing.assert_allclose(g0[n], g1[n], rtol=0, atol=1e-6)

    def test_shared_encoder(self, toy, warm):
        cfg = _cfg(mode="soli-par")
        data = _data(toy, cfg)
        iid = data.ids[0]
        pair = dataset.SiamesePair((iid, "normal"), (iid, "normal"), 1, (), ())
        loss = trainer.half_objective(warm, data, [pair], 1.0)
        assert loss.components["mean_pos_d"] == 0.0


# -- convergence on the toy corpus ---------------------------------------------------

def _epoch_mean(log, key, epoch):
    return np.mean([r[key] for r in log.records if r["epoch"] == epoch])


@pytest.fixture(scope="module")
def converge(toy):
    """Default-size model warm-started on normal images; fine-tunes then see every toy profile."""
    base = TrainConfig(mode="baseline", epochs=50, batch_size=8, seed=0, profiles=("normal",)).validate()
    ps, _ = trainer.train(base, _data(toy, base), trainer.new_model(base, toy[1]))
    cfg = base.override({"profiles": TOY_PROFILES}).validate()
    return cfg, _data(toy, cfg), ps


class TestConvergence:
    def test_baseline_halves_cross_entropy(self, toy):
        cfg = TrainConfig(mode="baseline", epochs=50, batch_size=8, seed=0, profiles=TOY_PROFILES).validate()
        _, log = trainer.train(cfg, _data(toy, cfg), trainer.new_model(cfg, toy[1]))
        assert _epoch_mean(log, "cross_entropy", 49) < 0.5 * _epoch_mean(log, "cross_entropy", 0)

    def test_soli_half_geometry(self, converge):
        cfg, data, warm_ps = converge
        c = cfg.override({"mode": "soli-half", "epochs": 50}).validate()
        before = trainer.probe_objective(warm_ps, data, c)
        ps, _ = trainer.train(c, data, warm_ps)
        after = trainer.probe_objective(ps, data, c)
        assert after["mean_pos_d"] < 0.5 * before["mean_pos_d"]
        assert after["mean_neg_d"] >= 0.8 * c.margin

    def test_soli_par_reduces_combined(self, converge):
        cfg, data, warm_ps = converge
        c = cfg.override({"mode": "soli-par", "epochs": 50}).validate()
        before = trainer.probe_objective(warm_ps, data, c)
        ps, _ = trainer.train(c, data, warm_ps)
        after = trainer.probe_objective(ps, data, c)
        assert after["combined"] <= 0.7 * before["combined"]
        assert after["mean_pos_d"] < before["mean_pos_d"]

    def test_soli_con_phase_b_does_not_hurt(self, converge):
        cfg, data, warm_ps = converge
        half = cfg.override({"mode": "soli-half", "epochs": 20}).validate()
        con = cfg.override({"mode": "soli-con", "epochs_phase_a": 20, "epochs_phase_b": 20}).validate()
        mid, _ = trainer.train(half, data, warm_ps)
        final, _ = trainer.train(con, data, warm_ps)
        assert trainer.probe_objective(final, data, con)["combined"] <= \
            trainer.probe_objective(mid, data, con)["combined"]
