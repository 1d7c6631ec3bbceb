"""Acceptance gate.

Six criteria, each pinned to a tolerance:

1. Code math: per-query innocent score centered at zero; threshold curve
   satisfies its defining equality; bias rows respect the cutoff box.
2. Codeword-level catch-one under majority-vote collusion, and soundness
   against innocent oracles.
3. Exact white-box laws: 1/sqrt(c) merge rule, finite-difference gradient
   agreement, scale invariance.
4. Architecture audit: carrier size and softmax normalization.
5. Desk-scale federated reproduction (trains two strategies, owner
   baselines, and the full attack-trial grid inside a 30-minute budget).
6. Full-scale figures (hours): opt-in via FLTRACE_FULL_SCALE=1.

The desk fixture is session-scoped and shared by all criterion-5 tests;
its wall-clock time is part of the criterion and asserted at the end.
"""

import os
import time

import numpy as np
import pytest

pytestmark = pytest.mark.acceptance

from fltrace import attacks, config
from fltrace import evaluation as ev
from fltrace import nnengine as nn
from fltrace import tardos, whitebox
from fltrace.datasets import generate_triggers, partition, resolve_corpus
from fltrace.fedsim import run_fl_training, train_independent

# --------------------------------------------------------------- criterion 1

def test_criterion_1_innocent_score_zero_mean():
    rng = np.random.default_rng(11)
    bias = tardos.sample_bias_matrix(1000, 10, 100.0, 0.038, seed=12)
    rows = rng.integers(0, bias.m, size=10 ** 5)
    cols = np.empty(10 ** 5, dtype=np.int64)
    scores = np.empty(10 ** 5)
    for k, i in enumerate(rows):  # draw y ~ p_i, then score a random symbol
        p = bias.entries[i]
        y = rng.choice(10, p=p)
        cols[k] = y
        held = rng.choice(10, p=p)
        scores[k] = tardos.score_increment(held, y, p)
    se = scores.std(ddof=1) / np.sqrt(len(scores))
    assert abs(scores.mean()) < 3 * se
    # the identity behind it: exact zero expectation per (row, output) pair
    p = bias.entries[0]
    for y in range(10):
        u1 = np.sqrt((1 - p[y]) / p[y])
        u0 = -np.sqrt(p[y] / (1 - p[y]))
        assert abs(p[y] * u1 + (1 - p[y]) * u0) < 1e-12


def test_criterion_1_threshold_equality():
    for t in (1, 10, 100, 1000):
        z = tardos.accusation_threshold(t, 1e-6, 0.038)
        lhs = -z * z / (2 * t + 2 * z / (3 * np.sqrt(0.038)))
        assert abs(lhs - np.log(1e-6)) <= 1e-6 * abs(np.log(1e-6))


def test_criterion_1_bias_cutoff_box():
    bias = tardos.sample_bias_matrix(2000, 10, 100.0, 0.038, seed=13)
    assert bias.entries.min() >= 0.038 - 1e-12
    assert bias.entries.max() <= 1 - 9 * 0.038 + 1e-12
    np.testing.assert_allclose(bias.entries.sum(axis=1), 1.0, atol=1e-9)


# --------------------------------------------------------------- criterion 2

@pytest.fixture(scope="module")
def full_code():
    bias = tardos.sample_bias_matrix(1000, 10, 100.0, 0.038, seed=21)
    book = tardos.generate_codebook(bias, 100, seed=22)
    return bias, book


def _majority_outputs(labels: np.ndarray) -> np.ndarray:
    """Per-position majority symbol of the given codeword rows (ties: lowest)."""
    c, m = labels.shape
    out = np.empty(m, dtype=np.int64)
    for i in range(m):
        out[i] = np.bincount(labels[:, i], minlength=10).argmax()
    return out


def test_criterion_2_catch_one_majority_vote(full_code):
    bias, book = full_code
    rng = np.random.default_rng(23)
    caught = 0
    for trial in range(500):
        c = 2 + trial % 5  # c cycles through 2..6, 100 trials each
        colluders = rng.choice(100, size=c, replace=False)
        outputs = _majority_outputs(book.labels[np.sort(colluders)])
        res = tardos.accuse_from_outputs(outputs, book, bias, 1e-6)
        if res.accused is not None:
            assert res.accused in colluders, "innocent accused"
            caught += 1
    assert caught >= 495


def test_criterion_2_innocent_oracles_never_accused(full_code):
    bias, book = full_code
    rng = np.random.default_rng(24)
    m = bias.m
    # cumulative-score crossing check, vectorized over trials: an owner is
    # accused iff its running score ever reaches the threshold curve
    z = tardos.threshold_curve(m, 1e-6, bias.tau)
    cum_p = np.cumsum(bias.entries, axis=1)
    accused_trials = 0
    for _ in range(100):  # 100 chunks x 100 trials
        u = rng.random((100, m))
        outputs = np.empty((100, m), dtype=np.int64)
        for i in range(m):
            outputs[:, i] = np.searchsorted(cum_p[i], u[:, i])
        p_out = bias.entries[np.arange(m)[None, :], outputs]
        u1 = np.sqrt((1 - p_out) / p_out)
        u0 = -np.sqrt(p_out / (1 - p_out))
        match = book.labels[None, :, :] == outputs[:, None, :]
        scores = np.where(match, u1[:, None, :], u0[:, None, :])
        crossing = (np.cumsum(scores, axis=2) >= z[None, None, :]).any(axis=(1, 2))
        accused_trials += int(crossing.sum())
    assert accused_trials == 0
    # spot-check that the sequential accusation agrees with the curve check
    outputs = [int(np.searchsorted(cum_p[i], rng.random())) for i in range(m)]
    res = tardos.accuse_from_outputs(outputs, book, bias, 1e-6)
    assert res.exhausted and res.accused is None


# --------------------------------------------------------------- criterion 3

def test_criterion_3_merge_law():
    basis = whitebox.generate_basis(64, 8, seed=31)
    proj = whitebox.generate_projection(4096, 64, seed=32)
    gram_inv = np.linalg.pinv(proj.entries.T @ proj.entries)
    carriers = [proj.entries @ (gram_inv @ basis.column(j)) for j in range(8)]
    for c in range(1, 7):
        merged = np.mean(carriers[:c], axis=0)
        r = whitebox.project_all(merged, proj, basis)
        np.testing.assert_allclose(r[:c], 1 / np.sqrt(c), atol=1e-9)
        np.testing.assert_allclose(r[c:8], 0.0, atol=1e-9)


def test_criterion_3_regularizer_gradient_fd():
    rng = np.random.default_rng(33)
    proj = whitebox.generate_projection(96, 12, seed=34)
    basis = whitebox.generate_basis(12, 4, seed=35)
    h, worst = 1e-6, 0.0
    for k in range(100):
        w = rng.standard_normal(96)
        s = basis.column(k % 4)
        loss, grad = whitebox.regularizer_loss_and_grad(w, proj, s)
        idx = rng.integers(96, size=4)
        for i in idx:
            wp, wm = w.copy(), w.copy()
            wp[i] += h
            wm[i] -= h
            lp, _ = whitebox.regularizer_loss_and_grad(wp, proj, s)
            lm, _ = whitebox.regularizer_loss_and_grad(wm, proj, s)
            fd = (lp - lm) / (2 * h)
            denom = max(abs(fd), abs(grad[i]), 1e-12)
            worst = max(worst, abs(fd - grad[i]) / denom)
    assert worst < 1e-4


def test_criterion_3_scale_invariance():
    rng = np.random.default_rng(36)
    proj = whitebox.generate_projection(128, 16, seed=37)
    basis = whitebox.generate_basis(16, 3, seed=38)
    w = rng.standard_normal(128)
    r = whitebox.project(w, proj, basis.column(1))
    for scale in (1e-6, 0.5, 3.0, 1e6):
        assert whitebox.project(scale * w, proj, basis.column(1)) == \
            pytest.approx(r, abs=1e-12)


# --------------------------------------------------------------- criterion 4

def test_criterion_4_architecture_audit():
    model = nn.build_model(seed=41)
    assert model.carrier_weights().shape[0] == 73728
    x = np.random.default_rng(42).random((16, 28, 28, 1), dtype=np.float32)
    probs, _ = nn.forward_predict(model, x)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


# --------------------------------------------------------------- criterion 5

class DeskRun:
    """Everything criterion 5 needs, computed once."""

    def __init__(self):
        t_start = time.monotonic()
        cfg = config.resolve(preset="desk")
        code, wb, dat = cfg.code, cfg.whitebox, cfg.data
        seeds = cfg.seeds

        x, y, source = resolve_corpus(dat.get("mnist_dir"),
                                      dat["corpus_fraction"], seeds["corpus"],
                                      synthetic_size=dat["synthetic_size"])
        frac = dat["corpus_fraction"] if source == "mnist" else 1.0
        self.part = partition(x, y, dat["n_owners"], dat["eval_fraction"],
                              seeds["partition"], corpus_fraction=frac)
        self.triggers = generate_triggers(code["m"], seed=seeds["triggers"])
        self.bias = tardos.sample_bias_matrix(
            code["m"], code["q"], code["kappa"], code["tau"],
            [seeds["code"], 0])
        self.codebook = tardos.generate_codebook(
            self.bias, dat["n_owners"], [seeds["code"], 1])
        self.basis = whitebox.generate_basis(wb["p"], dat["n_owners"],
                                             seeds["basis"])
        carrier_len = nn.build_model(seed=seeds["model"]).carrier_weights().size
        dtype = np.float32 if wb["dtype"] == "float32" else np.float64
        self.projection = whitebox.generate_projection(
            carrier_len, wb["p"], seeds["projection"], dtype=dtype)
        self.epsilon = code["epsilon"]
        self.wb_threshold = wb["threshold"]
        self.cfg = cfg

        self.dropout_copies, self.dropout_logs = run_fl_training(
            cfg.fl_config("DropoutWM"), self.part, self.triggers,
            self.codebook, self.basis, self.projection)
        self.vanilla_copies, _ = run_fl_training(
            cfg.fl_config("VanillaWM"), self.part, self.triggers,
            self.codebook, self.basis, self.projection)

        self.baseline_accs = []
        for owner in range(5):
            model, _ = train_independent("OwnerBaseline",
                                         cfg.fl_config("DropoutWM"),
                                         self.part, owner_id=owner)
            self.baseline_accs.append(nn.evaluate_accuracy(
                model, self.part.eval_images, self.part.eval_labels,
                batch=256))

        rng = np.random.default_rng(seeds["trials"])
        pick = rng.choice(len(self.part.eval_labels),
                          size=cfg.trials["attack_data_size"], replace=False)
        self.attack_x = self.part.eval_images[pick]
        self.attack_y = self.part.eval_labels[pick]

        cells = [ev.TrialCell(c=c, post_attack=self._post(attack), n_trials=n)
                 for c, attack, n in cfg.trials["cells"]]
        self.trials = ev.run_collusion_trials(
            self.dropout_copies, triggers=self.triggers,
            codebook=self.codebook, bias=self.bias, basis=self.basis,
            projection=self.projection, attack_x=self.attack_x,
            attack_y=self.attack_y, cells=cells, epsilon=self.epsilon,
            wb_threshold=self.wb_threshold, seed=seeds["trials"],
            strategy_name="DropoutWM")

        self.vanilla_c2 = ev.run_collusion_trials(
            self.vanilla_copies, triggers=self.triggers,
            codebook=self.codebook, bias=self.bias, basis=self.basis,
            projection=self.projection, attack_x=self.attack_x,
            attack_y=self.attack_y, cells=[ev.TrialCell(2, None, 20)],
            epsilon=self.epsilon, wb_threshold=self.wb_threshold,
            seed=seeds["trials"] + 1, strategy_name="VanillaWM")

        self.seconds = time.monotonic() - t_start

    def _post(self, name):
        t = self.cfg.trials
        if name == "None":
            return None
        if name == "FineTune":
            return attacks.FineTune(epochs=t["finetune_epochs"],
                                    batch=t["finetune_batch"],
                                    learning_rate=t["finetune_learning_rate"])
        return attacks.Prune(fraction=t["prune_fraction"])

    def pair_mavs(self, copies, seed):
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(10):
            pair = sorted(rng.choice(len(copies), size=2, replace=False))
            merged = attacks.collude([copies[j] for j in pair])
            out.append(ev.mav(merged, self.triggers, self.codebook, pair))
        return out


@pytest.fixture(scope="session")
def desk():
    return DeskRun()


@pytest.mark.slow
def test_criterion_5a_per_copy_accuracy(desk):
    trig = [ev.trigger_accuracy(m, desk.triggers, desk.codebook.labels[j])
            for j, m in enumerate(desk.dropout_copies)]
    main = [nn.evaluate_accuracy(m, desk.part.eval_images,
                                 desk.part.eval_labels, batch=256)
            for m in desk.dropout_copies]
    assert min(trig) > 0.95, f"trigger accuracy per copy: min {min(trig):.4f}"
    assert min(main) > 0.90, f"main accuracy per copy: min {min(main):.4f}"


@pytest.mark.slow
def test_criterion_5b_mav_ordering(desk):
    dropout = desk.pair_mavs(desk.dropout_copies, seed=51)
    vanilla = desk.pair_mavs(desk.vanilla_copies, seed=51)
    assert np.mean(dropout) < np.mean(vanilla), \
        f"MAV dropout {np.mean(dropout):.4f} vs vanilla {np.mean(vanilla):.4f}"


@pytest.mark.slow
def test_criterion_5c_blackbox_catch_one(desk):
    report = desk.trials
    assert report.n_trials >= 100
    assert report.false_negatives == 0, \
        f"{report.false_negatives} exhausted accusations"
    assert report.innocent_accusations == 0


@pytest.mark.slow
def test_criterion_5d_vanilla_false_negatives(desk):
    report = desk.vanilla_c2
    assert report.false_negatives > report.n_trials / 2, \
        f"{report.false_negatives}/{report.n_trials} false negatives"


@pytest.mark.slow
def test_criterion_5e_whitebox_catch_all(desk):
    misses = [t for t in desk.trials.trials if not t.wb_exact]
    assert not misses, \
        f"{len(misses)}/{desk.trials.n_trials} trials missed the exact set " \
        f"(first: c={misses[0].c} {misses[0].attack})" if misses else ""


@pytest.mark.slow
def test_criterion_5f_salient_activation_count(desk):
    def mean_above(copies):
        return np.mean([ev.activation_histogram(m, desk.triggers, layer=2,
                                                threshold=0.1).above_threshold
                        for m in copies])
    dropout, vanilla = mean_above(desk.dropout_copies), \
        mean_above(desk.vanilla_copies)
    assert dropout > vanilla, f"above-0.1 count {dropout:.0f} vs {vanilla:.0f}"


@pytest.mark.slow
def test_criterion_5g_embedding_before_protection(desk):
    threshold = ev.protection_threshold(desk.baseline_accs)
    t_embed = next((lg.iteration for lg in desk.dropout_logs
                    if lg.mean_projection is not None
                    and lg.mean_projection > 0.11), None)
    t_protect = next((lg.iteration for lg in desk.dropout_logs
                      if lg.main_accuracy is not None
                      and lg.main_accuracy > threshold), None)
    assert t_embed is not None, "mean r never crossed 0.11"
    assert t_protect is not None, \
        f"main accuracy never crossed the baseline mean {threshold:.4f}"
    assert t_embed < t_protect, \
        f"embedded at iteration {t_embed}, protected at {t_protect}"


@pytest.mark.slow
def test_criterion_5_wall_clock(desk):
    assert desk.seconds < 1800, f"desk pipeline took {desk.seconds:.0f}s"


# --------------------------------------------------------------- criterion 6

@pytest.mark.fullscale
@pytest.mark.skipif(os.environ.get("FLTRACE_FULL_SCALE") != "1",
                    reason="full-scale run is opt-in (hours): "
                           "set FLTRACE_FULL_SCALE=1")
def test_criterion_6_full_scale():
    cfg = config.resolve()  # full-scale defaults
    code, wb, dat = cfg.code, cfg.whitebox, cfg.data
    seeds = cfg.seeds
    x, y, source = resolve_corpus(dat.get("mnist_dir"),
                                  dat["corpus_fraction"], seeds["corpus"],
                                  synthetic_size=dat["synthetic_size"])
    frac = dat["corpus_fraction"] if source == "mnist" else 1.0
    part = partition(x, y, dat["n_owners"], dat["eval_fraction"],
                     seeds["partition"], corpus_fraction=frac)
    baseline_accs = []
    for owner in range(5):
        model, _ = train_independent("OwnerBaseline",
                                     cfg.fl_config("DropoutWM"), part,
                                     owner_id=owner)
        baseline_accs.append(nn.evaluate_accuracy(model, part.eval_images,
                                                  part.eval_labels))
    mean_acc = float(np.mean(baseline_accs))
    assert abs(mean_acc - 0.8591) < 0.03, \
        f"owner-baseline mean {mean_acc:.4f} (needs real MNIST corpus)"

    triggers = generate_triggers(code["m"], seed=seeds["triggers"])
    bias = tardos.sample_bias_matrix(code["m"], code["q"], code["kappa"],
                                     code["tau"], [seeds["code"], 0])
    book = tardos.generate_codebook(bias, dat["n_owners"], [seeds["code"], 1])
    basis = whitebox.generate_basis(wb["p"], dat["n_owners"], seeds["basis"])
    carrier_len = nn.build_model(seed=seeds["model"]).carrier_weights().size
    projection = whitebox.generate_projection(carrier_len, wb["p"],
                                              seeds["projection"],
                                              dtype=np.float32)
    t_stars = {}
    for name in ("DropoutWM", "DropoutLimitedWM"):
        copies, _ = run_fl_training(cfg.fl_config(name), part, triggers,
                                    book, basis, projection)
        report = ev.run_collusion_trials(
            copies, triggers=triggers, codebook=book, bias=bias, basis=basis,
            projection=projection, attack_x=part.eval_images[:1000],
            attack_y=part.eval_labels[:1000],
            cells=[ev.TrialCell(6, attacks.Prune(0.8), 20)],
            epsilon=code["epsilon"], seed=seeds["trials"], strategy_name=name)
        stars = [t.t_star for t in report.trials if t.t_star is not None]
        t_stars[name] = float(np.mean(stars)) if stars else float("inf")
    assert t_stars["DropoutWM"] < t_stars["DropoutLimitedWM"], str(t_stars)
