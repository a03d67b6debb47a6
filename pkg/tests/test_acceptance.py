"""Acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (collected
again in the pytest terminal summary). Criteria 6-9 share one ablation run
over five seeds at the default protocol; it takes several minutes.

    python tests/test_acceptance.py      # runs just this file, lines on stdout
"""

import sys
import time

import numpy as np
import pytest

from conftest import record
from metaface import autodiff as ad
from metaface import corpus as C
from metaface import kernels
from metaface.checkpoint import load_checkpoint
from metaface.config import RunConfig
from metaface.meta import MetaConfig, meta_outer_step, personalize
from metaface.model import ModelConfig, init_adapters, init_params, predict, trainable_report
from metaface.objective import FaceObjective
from metaface.objectives import dtw_lip_sync, recon_loss, velocity_loss
from metaface.pipeline import AblationCell, run_ablation
from metaface.relation import LatentDistribution, encode_set, kl_gaussian
from oracles import brute_dtw, central_difference, kl_quadrature, naive_recon, naive_velocity, rel_error
from quadratic import as_float, case_problem, load_cases

# --- 1. gradients ----------------------------------------------------------------

SHAPES = {"X": (3, 4), "Y": (4, 3), "v": (4,)}


def random_expression(rng):
    """A random composite of primitives over inputs X [3,4], Y [4,3], v [4].

    Returns a function mapping a dict of Tensors to a scalar Tensor.
    """
    steps = []
    pool = [("X", (3, 4)), ("Y", (4, 3)), ("v", (4,))]
    for k in range(int(rng.integers(4, 9))):
        i = int(rng.integers(len(pool)))
        name, shape = pool[i]
        kind = rng.choice(["unary", "binary", "matmul", "reduce", "concat", "slice", "broadcast"])
        if kind == "unary":
            op = rng.choice(["tanh", "exp", "log", "square", "scale"])
            steps.append(("unary", op, name))
            pool.append((f"t{k}", shape))
        elif kind == "binary":
            same = [n for n, s in pool if s == shape]
            other = same[int(rng.integers(len(same)))]
            op = rng.choice(["add", "sub", "mul"])
            steps.append(("binary", op, name, other))
            pool.append((f"t{k}", shape))
        elif kind == "matmul" and len(shape) == 2:
            cands = []
            for n, s in pool:
                if len(s) != 2:
                    continue
                for ta in (False, True):
                    for tb in (False, True):
                        inner_a = shape[0] if ta else shape[1]
                        inner_b = s[1] if tb else s[0]
                        if inner_a == inner_b:
                            out = (shape[1] if ta else shape[0], s[0] if tb else s[1])
                            cands.append((n, ta, tb, out))
            if cands:
                n, ta, tb, out = cands[int(rng.integers(len(cands)))]
                steps.append(("matmul", name, n, ta, tb))
                pool.append((f"t{k}", out))
                continue
            steps.append(("unary", "tanh", name))
            pool.append((f"t{k}", shape))
        elif kind == "reduce" and len(shape) == 2:
            op = rng.choice(["sum0", "mean0"])
            steps.append(("reduce", op, name))
            pool.append((f"t{k}", (shape[1],)))
        elif kind == "concat" and len(shape) == 2:
            same_rows = [n for n, s in pool if len(s) == 2 and s[0] == shape[0]]
            other = same_rows[int(rng.integers(len(same_rows)))]
            other_shape = dict(pool)[other]
            steps.append(("concat", name, other))
            pool.append((f"t{k}", (shape[0], shape[1] + other_shape[1])))
        elif kind == "slice" and shape[-1] > 1:
            lo = int(rng.integers(0, shape[-1] - 1))
            hi = int(rng.integers(lo + 1, shape[-1] + 1))
            steps.append(("slice", name, lo, hi))
            pool.append((f"t{k}", shape[:-1] + (hi - lo,)))
        elif kind == "broadcast" and len(shape) == 1:
            rows = int(rng.integers(1, 4))
            steps.append(("broadcast", name, rows))
            pool.append((f"t{k}", (rows, shape[0])))
        else:
            steps.append(("unary", "tanh", name))
            pool.append((f"t{k}", shape))
    final = pool[-1][0]
    use_mean = bool(rng.integers(2))

    def build(inputs):
        env = dict(inputs)
        for k, st in enumerate(steps):
            kind = st[0]
            if kind == "unary":
                x = env[st[2]]
                out = {
                    "tanh": lambda: ad.tanh(x),
                    "exp": lambda: ad.exp(ad.scale(x, 0.3)),
                    "log": lambda: ad.log(ad.add(ad.square(x), 1.0)),
                    "square": lambda: ad.square(x),
                    "scale": lambda: ad.scale(x, -1.7),
                }[st[1]]()
            elif kind == "binary":
                a, b = env[st[2]], env[st[3]]
                out = {"add": ad.add, "sub": ad.sub, "mul": ad.mul}[st[1]](a, b)
            elif kind == "matmul":
                out = ad.matmul(env[st[1]], env[st[2]], transpose_a=st[3], transpose_b=st[4])
            elif kind == "reduce":
                out = ad.sum(env[st[2]], axis=0) if st[1] == "sum0" else ad.mean(env[st[2]], axis=0)
            elif kind == "concat":
                out = ad.concat([env[st[1]], env[st[2]]])
            elif kind == "slice":
                out = ad.slice_last(env[st[1]], st[2], st[3])
            else:
                out = ad.broadcast(env[st[1]], (st[2], env[st[1]].shape[0]))
            env[f"t{k}"] = out
        # touch every input so no gradient is trivially zero
        extra = ad.add(ad.add(ad.sum(ad.tanh(env["X"])), ad.sum(ad.square(env["Y"]))), ad.sum(env["v"]))
        head = ad.mean(env[final]) if use_mean else ad.sum(env[final])
        return ad.add(head, ad.scale(extra, 0.1))

    return build


def full_model_problem(corpus):
    cfg = ModelConfig()
    params, adapters = init_params(cfg, 3), init_adapters(cfg, 3)
    rng = np.random.default_rng(3)
    adapters = {k: a.with_factors(a.B, ad.tensor(0.05 * rng.standard_normal(a.A.shape))) for k, a in adapters.items()}
    clips = corpus.clips["spk05"]
    objective = FaceObjective(cfg)
    return cfg, params, adapters, clips[:1], clips[1:2], objective


def test_criterion_01_gradients(default_corpus):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        build = random_expression(rng)
        values = {k: rng.uniform(-1.2, 1.2, s) for k, s in SHAPES.items()}
        leaves = {k: ad.tensor(v, requires_grad=True) for k, v in values.items()}
        grads = ad.gradient(build(leaves), leaves)
        for k in values:
            def f(x, k=k):
                return build({**{n: ad.constant(v) for n, v in values.items()}, k: ad.constant(x)}).item()
            worst = max(worst, rel_error(grads[k].data, central_difference(f, values[k])))

    # full objective: recon + velocity + KL against a different context set
    cfg, params, adapters, support, query, objective = full_model_problem(default_corpus)
    vp = params.as_variables()
    va = {k: a.with_factors(ad.tensor(a.B.data, requires_grad=True), ad.tensor(a.A.data, requires_grad=True))
          for k, a in adapters.items()}
    targets = dict(vp.items())
    for k, a in va.items():
        targets[f"lora.{k}.B"] = a.B
        targets[f"lora.{k}.A"] = a.A
    loss, _ = objective(vp, va, query, support, 17)
    grads = ad.gradient(loss, targets)
    pick = np.random.default_rng(5)
    auto, fd = [], []
    model_worst = 0.0
    for name, t in targets.items():
        idx = pick.choice(t.size, size=min(4, t.size), replace=False)
        a_vals, f_vals = [], []
        for i in idx:
            def f(x, name=name, i=i):
                arr = t.data.copy().reshape(-1)
                arr[i] = x[0]
                arr = arr.reshape(t.shape)
                if name.startswith("lora."):
                    base, fac = name[5:].rsplit(".", 1)
                    a = adapters[base]
                    new = a.with_factors(ad.tensor(arr), a.A) if fac == "B" else a.with_factors(a.B, ad.tensor(arr))
                    return objective(params, {**adapters, base: new}, query, support, 17)[0].item()
                return objective(params.replace({name: ad.tensor(arr)}), adapters, query, support, 17)[0].item()
            a_vals.append(grads[name].data.reshape(-1)[i])
            f_vals.append(central_difference(f, np.array([t.data.reshape(-1)[i]]))[0])
        auto += a_vals
        fd += f_vals
        model_worst = max(model_worst, rel_error(np.array(a_vals), np.array(f_vals)))
    model_err = rel_error(np.array(auto), np.array(fd))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and model_err < 1e-5 and elapsed < 60
    record(1, ok, f"100 expressions worst rel err {worst:.2e}; full loss rel err {model_err:.2e} "
                  f"(worst tensor {model_worst:.2e}, {len(auto)} coords); {elapsed:.1f}s")
    assert worst < 1e-5
    assert model_err < 1e-5
    assert elapsed < 60


# --- 2. second-order meta-gradient ---------------------------------------------------

def test_criterion_02_meta_gradient():
    worst = 0.0
    cases = load_cases()
    for case in cases:
        params, loss, task = case_problem(case)
        mc = MetaConfig(inner_lr=float(case["alpha"]), inner_steps=case["steps"], adapt_scope="all", order="second")
        step = meta_outer_step(params, {}, [task], mc, loss)
        worst = max(worst, rel_error(step.grads["theta"].ravel(), as_float(case["grad"])))
    ok = worst < 1e-4
    record(2, ok, f"{len(cases)} quadratic cases vs exact rational closed form, worst rel err {worst:.2e}")
    assert ok


# --- 3. DTW -------------------------------------------------------------------

def test_criterion_03_dtw():
    t0 = time.perf_counter()
    rng = np.random.default_rng(33)
    worst = 0.0
    pairs = 0
    for _ in range(220):
        n, m = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        p, g = rng.standard_normal((n, 3, 3)), rng.standard_normal((m, 3, 3))
        want, _ = brute_dtw(p, g)
        got = dtw_lip_sync(p, g, (0, 3))
        cost = kernels.lip_cost_matrix_numpy(p, g)
        tot, length = kernels.dtw_accumulate_numpy(cost)
        worst = max(worst, abs(got - want), abs(tot / length - want))
        pairs += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and pairs >= 200 and elapsed < 60
    record(3, ok, f"{pairs} pairs T<=6, both kernel paths vs path enumeration, worst abs err {worst:.1e}; {elapsed:.1f}s")
    assert ok


# --- 4. KL ---------------------------------------------------------------------

def test_criterion_04_kl():
    rng = np.random.default_rng(44)
    worst = 0.0
    for _ in range(50):
        mq, mp = rng.uniform(-2, 2, 3), rng.uniform(-2, 2, 3)
        lq, lp = rng.uniform(-2, 2, 3), rng.uniform(-2, 2, 3)
        q = LatentDistribution(ad.constant(mq), ad.constant(lq))
        p = LatentDistribution(ad.constant(mp), ad.constant(lp))
        worst = max(worst, abs(kl_gaussian(q, p).item() - kl_quadrature(mq, lq, mp, lp)))
    self_kl = max(abs(kl_gaussian(q, q).item()) for q in [
        LatentDistribution(ad.constant(rng.normal(0, 3, 5)), ad.constant(rng.uniform(-10, 10, 5))) for _ in range(20)])
    ok = worst < 1e-6 and self_kl <= 1e-12
    record(4, ok, f"50 draws vs quadrature on [-20,20], worst abs err {worst:.1e}; max KL(q,q) {self_kl:.1e}")
    assert ok


# --- 5. losses ---------------------------------------------------------------

def test_criterion_05_losses():
    rng = np.random.default_rng(55)
    worst = 0.0
    for _ in range(100):
        T, L = int(rng.integers(2, 12)), int(rng.integers(1, 9))
        p, g = rng.standard_normal((T, L, 3)), rng.standard_normal((T, L, 3))
        worst = max(worst, abs(recon_loss(p, g).item() - naive_recon(p, g)),
                    abs(velocity_loss(p, g).item() - naive_velocity(p, g)))
    ok = worst <= 1e-12
    record(5, ok, f"100 clip pairs, recon and velocity vs loop oracles, worst abs err {worst:.1e}")
    assert ok


# --- 6-9. ablation -------------------------------------------------------------

@pytest.fixture(scope="session")
def ablation(default_corpus):
    run = RunConfig()
    sp = C.split(default_corpus, run.held_out_speakers, run.adapt_clips)
    seeds = run.seed_list
    cache = {}
    on = AblationCell(True, True, "lora-only", 4, seeds)
    off = AblationCell(False, True, "lora-only", 4, seeds)
    t0 = time.perf_counter()
    run_ablation(sp, run, [on, off], models=cache)
    t_meta = time.perf_counter() - t0
    rest = {
        "no_drmn": AblationCell(True, False, "lora-only", 4, seeds),
        "full": AblationCell(True, True, "all", 4, seeds),
        "clips1": AblationCell(True, True, "lora-only", 1, seeds),
        "clips2": AblationCell(True, True, "lora-only", 2, seeds),
    }
    run_ablation(sp, run, list(rest.values()), models=cache)
    cells = {"on": on, "off": off, **rest}
    for c in cells.values():
        assert c.status == "ok", f"{c.label}: {c.error}"
    return {"cells": cells, "t_meta": t_meta, "run": run, "models": cache}


def _per_seed(cell, name):
    return " ".join(f"{getattr(cell.metrics[s], name):.5f}" for s in cell.seeds)


def test_criterion_06_meta_init(ablation):
    on, off = ablation["cells"]["on"], ablation["cells"]["off"]
    m_on, m_off = on.summary("l2_face")[0], off.summary("l2_face")[0]
    ok = m_on < m_off and ablation["t_meta"] < 600
    record(6, ok, f"l2_face ON {m_on:.6f} vs OFF {m_off:.6f} ({(m_off - m_on) / m_off:+.2%}); "
                  f"ON seeds [{_per_seed(on, 'l2_face')}] OFF seeds [{_per_seed(off, 'l2_face')}]; "
                  f"wall {ablation['t_meta']:.0f}s")
    assert m_on < m_off
    assert ablation["t_meta"] < 600


def test_criterion_07_drmn(ablation):
    on, no = ablation["cells"]["on"], ablation["cells"]["no_drmn"]
    s_on, s_off = on.summary("lip_sync")[0], no.summary("lip_sync")[0]
    ok = s_on <= s_off
    record(7, ok, f"lip_sync DRMN ON {s_on:.6f} vs OFF {s_off:.6f} ({(s_off - s_on) / s_off:+.3%}); "
                  f"ON seeds [{_per_seed(on, 'lip_sync')}] OFF seeds [{_per_seed(no, 'lip_sync')}]")
    assert ok


def test_criterion_08_lora_tradeoff(ablation):
    lora, full = ablation["cells"]["on"], ablation["cells"]["full"]
    l_lora, l_full = lora.summary("l2_face")[0], full.summary("l2_face")[0]
    res = ablation["models"][(0, True, True)]
    rep = trainable_report(res.params, res.adapters, "lora-only")
    fewer = 1 - rep.lora_count / rep.full_count
    ok = l_full <= l_lora and fewer >= 0.85
    record(8, ok, f"l2_face full {l_full:.6f} vs lora-only {l_lora:.6f}; lora-only trains {rep.lora_count} of "
                  f"{rep.full_count} ({fewer:.1%} fewer)")
    assert l_full <= l_lora
    assert fewer >= 0.85


def test_criterion_09_clip_sweep(ablation):
    cells = ablation["cells"]
    means = {n: cells[k].summary("l2_face")[0] for n, k in ((1, "clips1"), (2, "clips2"), (4, "on"))}
    ok = means[2] <= means[1] and means[4] <= means[2]
    record(9, ok, "l2_face by clip count " + ", ".join(f"{n}: {v:.6f}" for n, v in means.items())
           + f"; 4 vs 1 {(means[1] - means[4]) / means[1]:+.3%}")
    assert ok


def test_training_traces(ablation):
    """Trace-derived checks on the meta-trained models (5-seed averages)."""
    rows = [ablation["models"][(s, True, True)].rows for s in ablation["run"].seed_list]
    tenth = max(1, len(rows[0]) // 10)
    lnp_first = np.mean([np.mean([r["lnp"] for r in rs[:tenth]]) for rs in rows])
    lnp_last = np.mean([np.mean([r["lnp"] for r in rs[-tenth:]]) for rs in rows])
    q_first = np.mean([rs[0]["query_l2_face"] for rs in rows])
    q_last = np.mean([rs[-1]["query_l2_face"] for rs in rows])
    print(f"traces: lnp {lnp_first:.4f} -> {lnp_last:.4f}; post-adapt query l2_face {q_first:.4f} -> {q_last:.4f}")
    assert lnp_last < lnp_first
    assert q_last < q_first


# --- 10. reproducibility ------------------------------------------------------------

def test_criterion_10_reproducibility(tmp_path):
    from metaface import cli

    m = C.default_manifest()
    C.generate_corpus(m, tmp_path / "c1")
    C.generate_corpus(m, tmp_path / "c2")
    corpus_same = C.corpus_digest(tmp_path / "c1") == C.corpus_digest(tmp_path / "c2")

    outs = []
    for name in ("r1", "r2"):
        assert cli.main(["meta-train", "--corpus", str(tmp_path / "c1"), "--out", str(tmp_path / name),
                         "--outer-steps", "4", "--seed", "3"]) == 0
        assert cli.main(["adapt", "--corpus", str(tmp_path / "c1"), "--out", str(tmp_path / name), "--seed", "3",
                         "--checkpoint", str(tmp_path / name / "checkpoint.bin"), "--speaker", "spk11",
                         "--adapt-steps", "5"]) == 0
        files = {f: (tmp_path / name / f).read_bytes() for f in ("trace.txt", "checkpoint.bin", "delta_spk11.bin")}
        # the stored config differs only in its own output path
        files["config.txt"] = b"".join(l for l in (tmp_path / name / "config.txt").read_bytes().splitlines(True)
                                       if not l.startswith(b"out="))
        outs.append(files)
    runs_same = outs[0] == outs[1]

    ck = load_checkpoint(tmp_path / "r1" / "checkpoint.bin")
    round_trip = ck.to_bytes() == outs[0]["checkpoint.bin"]
    fields_same = all(np.array_equal(ck.params[k].data, load_checkpoint(tmp_path / "r2" / "checkpoint.bin").params[k].data)
                      for k in ck.params.keys())
    ok = corpus_same and runs_same and round_trip and fields_same
    record(10, ok, f"corpus identical={corpus_same}; trace/checkpoint/delta/config(minus out path) identical={runs_same}; "
                   f"save(load(c)) byte-exact={round_trip}")
    assert ok


# --- 11. structural invariants -----------------------------------------------------

def test_criterion_11_invariants(default_corpus):
    cfg = ModelConfig()
    params, adapters = init_params(cfg, 1), init_adapters(cfg, 1)
    feats, motion = default_corpus.clips["spk06"][0]
    z = ad.constant(np.random.default_rng(0).standard_normal(cfg.latent_dim))

    zero_equiv = np.array_equal(predict(params, adapters, feats.frames, z, cfg).data,
                                predict(params, {}, feats.frames, z, cfg).data)

    s = default_corpus.clips["spk06"][:4]
    ref = encode_set(params, s)
    perm_ok = True
    for order in ([3, 2, 1, 0], [1, 3, 0, 2], [0, 0, 1, 2, 3, 3]):
        d = encode_set(params, [s[i] for i in order])
        perm_ok &= np.array_equal(d.mean.data, ref.mean.data) and np.array_equal(d.log_var.data, ref.log_var.data)

    trained = {k: a.with_factors(a.B, ad.tensor(np.full(a.A.shape, 0.01))) for k, a in adapters.items()}
    base = predict(params, trained, feats.frames, z, cfg).data
    causal = True
    T = feats.frames.shape[0]
    for t in range(1, T, 5):
        f2 = feats.frames.copy()
        f2[t:] = np.random.default_rng(t).standard_normal(f2[t:].shape)
        out = predict(params, trained, f2, z, cfg).data
        causal &= np.array_equal(out[:t], base[:t]) and not np.array_equal(out[t:], base[t:])

    before = {k: v.data.tobytes() for k, v in params.items()}
    p, a = personalize(params, adapters, s, MetaConfig(inner_lr=1e-3), FaceObjective(cfg), 3)
    isolated = {k: v.data.tobytes() for k, v in p.items()} == before and \
        any(not np.array_equal(a[k].A.data, adapters[k].A.data) for k in a)

    ok = zero_equiv and perm_ok and causal and isolated
    record(11, ok, f"adapter-zero={zero_equiv} permutation={perm_ok} causality={causal} scope-isolation={isolated}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
