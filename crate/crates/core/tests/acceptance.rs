//! Acceptance checks, one PASS/FAIL line each.
//!
//! Property checks always gate the exit status. The end-to-end checks
//! (4b, 6, 7, 8) are empirical; they print their per-seed numbers and only
//! gate the exit status with `UPSTEP_STRICT=1`. `UPSTEP_SKIP_E2E=1` skips
//! them, `UPSTEP_FULL_GRID=1` adds the remaining ablation rows.

use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use upstep::adapters::{param_report, AdapterConfig, AdapterSet, TargetPolicy, Variant};
use upstep::cvr::{self, CvrConfig, CvrState};
use upstep::data::{gen_synthetic, Dataset, Domain, SynthSpec};
use upstep::eval::{ensemble, knn_classify, knn_predict, FeatureBank, Metric};
use upstep::nn::gradcheck::param_gradcheck;
use upstep::nn::init::rng_stream;
use upstep::nn::{Encoder, EncoderConfig, Graph, ParamStore, ProjectorConfig, Readout};
use upstep::numcore::Tensor;
use upstep::ssl::{self, sinkhorn, softmax_assign};
use upstep::trainer::{pretrain_base, run_upstep, upstep_step, Model, RunState, Toggles, TrainConfig};

const DESK: &str = include_str!("../../../configs/desk.json");
const K: usize = 20;

struct Outcome {
    id: &'static str,
    pass: bool,
    gating: bool,
    detail: String,
}

fn line(o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let note = if o.gating || o.pass { "" } else { " (empirical; not gating)" };
    println!("[{tag}] {:<4} {}{note}", o.id, o.detail);
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn micro_encoder(depth: usize, readout: Readout) -> EncoderConfig {
    EncoderConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        depth,
        heads: 2,
        mlp_ratio: 2,
        readout,
        ..Default::default()
    }
}

// 1: tape gradients of L_CE + L_CV against central differences
fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let (mut worst, mut checked, mut failed) = (0.0f64, 0, Vec::new());
    let instances = 24;
    for i in 0..instances as u64 {
        let readout = if i % 2 == 0 { Readout::Cls } else { Readout::MeanPool };
        let mut cfg = TrainConfig {
            encoder: EncoderConfig { fused_qkv: i % 3 != 0, ..micro_encoder(1 + (i % 2) as usize, readout) },
            projector: ProjectorConfig { hidden: 12, out: 6 },
            ..Default::default()
        };
        cfg.ssl.prototypes = 5;
        let mut m = Model::init_base(&cfg, i).unwrap();
        // every third instance trains adapters on a frozen encoder instead
        if i % 3 == 1 {
            let variant = if i % 2 == 0 { Variant::Lora } else { Variant::Vera };
            m.attach_adapters(AdapterConfig { variant, rank: 2, ..Default::default() }, i).unwrap();
            let mut rng = rng_stream(i, 55);
            let ids: Vec<_> = m.adapters.as_ref().unwrap().deltas().flat_map(|(_, d)| d.trainable_params()).collect();
            for id in ids {
                m.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        // O(1) random weights: at the 0.02 init scale projector outputs are ~1e-3
        // and the 1e-5 difference step stops being small against them
        let mut rng = rng_stream(i, 57);
        for id in m.store.trainable().collect::<Vec<_>>() {
            m.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let mut rng = rng_stream(i, 56);
        let x = Tensor::new(&[4, 3, 8, 8], (0..4 * 192).map(|_| rng.random::<f64>()).collect()).unwrap();
        let z_t = rand_tensor(&mut rng, &[4, 6], 1.0);
        let p_t = ssl::offline_assign(&z_t, m.prototypes(), &cfg.ssl).unwrap();
        let checks = param_gradcheck(&m.store, 1e-5, |g: &mut Graph<'_>| {
            let f = m.encoder.forward(g, m.adapters.as_ref(), &x)?;
            let z = m.projector.forward(g, f)?;
            let protos = g.param(m.prototype_id());
            let p_s = ssl::online_assign(&mut g.tape, z, protos, cfg.ssl.tau, true)?;
            let ce = ssl::cluster_ce_loss(&mut g.tape, p_s, &p_t)?;
            let s = cvr::center_vector(&mut g.tape, f)?;
            let cv = cvr::cv_loss(&mut g.tape, s, 0.5);
            g.tape.add(ce, cv)
        })
        .unwrap();
        for c in checks {
            checked += 1;
            if c.abs_err >= upstep::nn::gradcheck::ABS_FLOOR {
                worst = worst.max(c.rel_err);
            }
            if !c.passes(1e-4) {
                failed.push(format!(
                    "instance {i} {}: rel {:.2e} abs {:.2e} norm {:.2e}",
                    c.name, c.rel_err, c.abs_err, c.analytic_norm
                ));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        id: "1",
        pass: failed.is_empty() && secs < 120.0,
        gating: true,
        detail: format!(
            "gradient integrity: {instances} micro models, {checked} parameter tensors, worst rel err {worst:.2e} (tol 1e-4), {secs:.1}s (< 120s){}",
            if failed.is_empty() { String::new() } else { format!("; failures: {}", failed.join(", ")) }
        ),
    }
}

fn col_sums(q: &Tensor) -> Vec<f64> {
    let k = q.cols();
    let mut c = vec![0.0; k];
    for r in 0..q.rows() {
        c.iter_mut().zip(q.row(r)).for_each(|(c, v)| *c += v);
    }
    c
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

// 2: row sums, long-run column sums, and 3-iteration flattening
fn sinkhorn_contract() -> Outcome {
    let t = Instant::now();
    let (b, k) = (16, 8);
    let (mut row_err, mut col_err, mut wins) = (0.0f64, 0.0f64, 0);
    for i in 0..100 {
        let s = rand_tensor(&mut rng_stream(i, 2), &[b, k], 1.0);
        let q = sinkhorn(&s, 0.3, 3).unwrap();
        for r in 0..b {
            row_err = row_err.max((q.row(r).iter().sum::<f64>() - 1.0).abs());
        }
        let long = sinkhorn(&s, 0.3, 200).unwrap();
        for c in col_sums(&long) {
            col_err = col_err.max((c - b as f64 / k as f64).abs());
        }
        if variance(&col_sums(&q)) < variance(&col_sums(&softmax_assign(&s, 0.3))) {
            wins += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        id: "2",
        pass: row_err < 1e-9 && col_err < 1e-6 && wins >= 95 && secs < 10.0,
        gating: true,
        detail: format!(
            "sinkhorn: max row-sum err {row_err:.1e} (< 1e-9), 200-iter col-sum err {col_err:.1e} (< 1e-6), 3-iter variance drop in {wins}/100 (>= 95), {secs:.2}s"
        ),
    }
}

// 3: E‖s‖ for uniform unit vectors
fn center_vector_statistics() -> Outcome {
    let t = Instant::now();
    let (batches, b, d) = (1000, 160, 64);
    let mut rng = rng_stream(3, 3);
    let mut total = 0.0;
    for _ in 0..batches {
        let x: Vec<f64> = (0..b * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::new(&[b, d], x).unwrap();
        let mut tape = upstep::numcore::Tape::no_grad();
        let v = tape.constant(x);
        let s = cvr::center_vector(&mut tape, v).unwrap();
        total += tape.value(s).iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let mean = total / batches as f64;
    let want = 1.0 / (b as f64).sqrt();
    let rel = (mean - want).abs() / want;
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        id: "3",
        pass: rel < 0.10 && secs < 5.0,
        gating: true,
        detail: format!(
            "center vector: mean |s| {mean:.5} vs 1/sqrt(160) = {want:.5}, rel dev {rel:.3} (< 0.10), {secs:.2}s"
        ),
    }
}

// 4a: gate on i.i.d. magnitudes
fn gate_skip_rate() -> Outcome {
    let mut st = CvrState::new(CvrConfig::default());
    let mut rng = rng_stream(4, 4);
    for _ in 0..10_000 {
        st.gate(rng.random::<f64>());
    }
    let r = st.skip_rate();
    Outcome {
        id: "4a",
        pass: (r - 0.5).abs() <= 0.02,
        gating: true,
        detail: format!("gate on 10000 i.i.d. magnitudes: skip fraction {r:.4} (0.50 +- 0.02)"),
    }
}

// 5: merge equivalence, zero-init identity, closed-form count
fn adapter_correctness() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut zero_same = true;
    for i in 0..50u64 {
        for variant in [Variant::Lora, Variant::Vera] {
            let cfg = EncoderConfig { fused_qkv: i % 2 == 0, ..micro_encoder(2, Readout::Cls) };
            let mut store = ParamStore::new();
            let enc = Encoder::new(cfg.clone(), &mut store, &mut rng_stream(i, 50)).unwrap();
            let policy = [TargetPolicy::Qkv, TargetPolicy::QkvProj, TargetPolicy::QkvProjMlp][(i % 3) as usize];
            let ac = AdapterConfig { variant, rank: 1 + (i % 4) as usize, policy, ..Default::default() };
            let set = AdapterSet::attach(ac, &enc, &mut store, &mut rng_stream(i, 51)).unwrap();
            let mut rng = rng_stream(i, 52);
            let x = Tensor::new(&[3, 3, 8, 8], (0..3 * 192).map(|_| rng.random::<f64>()).collect()).unwrap();
            let feats = |s: &ParamStore, e: &Encoder, a: Option<&AdapterSet>| {
                let mut g = Graph::no_grad(s);
                let f = e.forward(&mut g, a, &x).unwrap();
                g.tape.tensor(f)
            };
            zero_same &= feats(&store, &enc, Some(&set)) == feats(&store, &enc, None);
            for (_, delta) in set.deltas() {
                for id in delta.trainable_params() {
                    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
                }
            }
            let merged = set.merged_store(&enc, &store).unwrap();
            let enc_m = Encoder::from_store(cfg, &merged).unwrap();
            worst = worst.max(feats(&store, &enc, Some(&set)).max_abs_diff(&feats(&merged, &enc_m, None)));
        }
    }
    let mut store = ParamStore::new();
    let enc = Encoder::new(EncoderConfig::default(), &mut store, &mut rng_stream(0, 0)).unwrap();
    let ac = AdapterConfig { rank: 4, policy: TargetPolicy::QkvProj, ..Default::default() };
    let set = AdapterSet::attach(ac, &enc, &mut store, &mut rng_stream(0, 1)).unwrap();
    let rep = param_report(&store, Some(&set), None);
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        id: "5",
        pass: worst < 1e-9 && zero_same && rep.adapter == 6144 && rep.trainable == 6144 && secs < 30.0,
        gating: true,
        detail: format!(
            "adapters: merge max |diff| {worst:.1e} (< 1e-9) over 50 LoRA + 50 VeRA, zero-init identical: {zero_same}, d=64 L=4 r=4 QKV+PROJ count {} (= 6144), {secs:.2}s",
            rep.adapter
        ),
    }
}

fn brute_force_knn(train: &FeatureBank, test: &FeatureBank, k: usize) -> Vec<usize> {
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let classes = train.labels.iter().max().unwrap() + 1;
    (0..test.len())
        .map(|i| {
            let q = test.features.row(i);
            let mut sims: Vec<(f64, usize)> = (0..train.len())
                .map(|j| {
                    let r = train.features.row(j);
                    (q.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / (norm(q) * norm(r)), j)
                })
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut best = (0, f64::NEG_INFINITY, 0);
            for c in 0..classes {
                let hit: Vec<f64> = sims[..k].iter().filter(|(_, j)| train.labels[*j] == c).map(|s| s.0).collect();
                let (n, m) = (hit.len(), hit.iter().sum::<f64>());
                if n > best.0 || (n == best.0 && m > best.1) {
                    best = (n, m, c);
                }
            }
            best.2
        })
        .collect()
}

// 9: exhaustive reference
fn knn_oracle() -> Outcome {
    let t = Instant::now();
    let mut mismatches = 0;
    let bank = |n: usize, seed: u64, tag: &str| {
        let mut rng = rng_stream(seed, 9);
        let x: Vec<f64> = (0..n * 6).map(|_| StandardNormal.sample(&mut rng)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..4)).collect();
        FeatureBank::new(Tensor::new(&[n, 6], x).unwrap(), labels, tag).unwrap()
    };
    for i in 0..25u64 {
        let (train, test) = (bank(50, 2 * i, "tr"), bank(20, 2 * i + 1, "te"));
        for k in [1, 5, 20] {
            let got = knn_predict(&train, &test, k, Metric::Cosine).unwrap();
            mismatches += got.iter().zip(brute_force_knn(&train, &test, k)).filter(|(a, b)| **a != *b).count();
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        id: "9",
        pass: mismatches == 0 && secs < 5.0,
        gating: true,
        detail: format!(
            "k-NN oracle: {mismatches} mismatches vs brute force on 25 instances x k in {{1,5,20}}, {secs:.2}s"
        ),
    }
}

fn dataset(domain: Domain, seed: u64, per_class: usize) -> Dataset {
    gen_synthetic(&SynthSpec { classes: 10, per_class, domain, seed, image_size: 32 }).unwrap()
}

fn desk_config() -> TrainConfig {
    let v: serde_json::Value = serde_json::from_str(DESK).unwrap();
    TrainConfig::from_json(&v["train"].to_string()).unwrap()
}

// 10: hash of trainable parameters across skipped steps
fn skip_step_purity() -> Outcome {
    let t = Instant::now();
    let mut cfg = desk_config();
    cfg.batch_size = 32;
    let target = dataset(Domain::Target, 10, 40);
    let base = Model::init_base(&cfg, 10).unwrap();
    let mut m = base.clone();
    m.attach_adapters(cfg.adapter.clone(), 10).unwrap();
    let mut state = RunState::new(m, &cfg, cfg.cvr(), Toggles::ALL);
    let data = target.unlabeled();
    let (mut skipped, mut violations, mut steps) = (0, 0, 0);
    for epoch in 0..2u64 {
        for idx in data.epoch_batches(cfg.batch_size, &mut rng_stream(10, epoch)) {
            let (xs, xt) =
                upstep::data::two_views(&data.gather(&idx), &cfg.augment, &mut rng_stream(10, 1000 + steps)).unwrap();
            let before = (state.model.store.trainable_digest(), state.offline.trainable_digest());
            let r = upstep_step(&mut state, &xs, &xt).unwrap();
            let after = (state.model.store.trainable_digest(), state.offline.trainable_digest());
            if !r.updated {
                skipped += 1;
                violations += usize::from(before != after);
            }
            steps += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Outcome {
        id: "10",
        pass: violations == 0 && skipped > 0 && secs < 60.0,
        gating: true,
        detail: format!(
            "skip purity: {skipped} of {steps} steps skipped, {violations} changed the SHA-256 of trainable params, {secs:.1}s"
        ),
    }
}

struct SeedRun {
    seed: u64,
    init_src: f64,
    base_src: f64,
    base_tgt: f64,
    adapted_tgt: f64,
    ensemble_tgt: f64,
    adapted_src: f64,
    base_only_tgt: f64,
    base_only_src: f64,
    skip_rate: f64,
    mag_first: f64,
    mag_last: f64,
    grid: Vec<(&'static str, f64)>,
    secs_main: f64,
    secs_ablation: f64,
}

fn knn(m: &Model, train: &Dataset, test: &Dataset) -> f64 {
    knn_classify(&m.features(train, "m").unwrap(), &m.features(test, "m").unwrap(), K, Metric::Cosine).unwrap()
}

fn seed_run(cfg: &TrainConfig, seed: u64, full_grid: bool) -> SeedRun {
    let t = Instant::now();
    let src = dataset(Domain::Source, seed * 10 + 1, 500);
    let src_test = dataset(Domain::Source, seed * 10 + 2, 100);
    let tgt = dataset(Domain::Target, seed * 10 + 3, 500);
    let tgt_test = dataset(Domain::Target, seed * 10 + 4, 100);
    let init_src = knn(&Model::init_base(cfg, seed).unwrap(), &src, &src_test);
    let (base, _) = pretrain_base(src.unlabeled(), cfg, seed, None).unwrap();
    let (adapted, s) = run_upstep(&base, tgt.unlabeled(), cfg, seed, None).unwrap();
    let bank = |m: &Model, d: &Dataset| m.features(d, "m").unwrap();
    let ens = knn_classify(
        &ensemble(&bank(&base, &tgt), &bank(&adapted, &tgt), true).unwrap(),
        &ensemble(&bank(&base, &tgt_test), &bank(&adapted, &tgt_test), true).unwrap(),
        K,
        Metric::Cosine,
    )
    .unwrap();
    let mut r = SeedRun {
        seed,
        init_src,
        base_src: knn(&base, &src, &src_test),
        base_tgt: knn(&base, &tgt, &tgt_test),
        adapted_tgt: knn(&adapted, &tgt, &tgt_test),
        ensemble_tgt: ens,
        adapted_src: knn(&adapted, &src, &src_test),
        base_only_tgt: f64::NAN,
        base_only_src: f64::NAN,
        skip_rate: s.skip_rate,
        mag_first: s.first_epoch_cv_mag,
        mag_last: s.last_epoch_cv_mag,
        grid: Vec::new(),
        secs_main: t.elapsed().as_secs_f64(),
        secs_ablation: 0.0,
    };
    let t = Instant::now();
    for (name, toggles) in Toggles::ablation_grid() {
        let wanted = name == "base_only" || full_grid;
        if !wanted || toggles == Toggles::ALL || (toggles == Toggles { ensemble: false, ..Toggles::ALL }) {
            continue;
        }
        let c = TrainConfig { toggles, ..cfg.clone() };
        let (m, _) = run_upstep(&base, tgt.unlabeled(), &c, seed, None).unwrap();
        let acc = knn(&m, &tgt, &tgt_test);
        if name == "base_only" {
            r.base_only_tgt = acc;
            r.base_only_src = knn(&m, &src, &src_test);
        }
        r.grid.push((name, acc));
    }
    r.secs_ablation = t.elapsed().as_secs_f64();
    r.grid.push(("base+cv_all", r.adapted_tgt));
    r.grid.push(("upstep", r.ensemble_tgt));
    r
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn end_to_end(strict: bool, full_grid: bool) -> Vec<Outcome> {
    let cfg = desk_config();
    let runs: Vec<SeedRun> = (0..3).map(|s| seed_run(&cfg, s, full_grid)).collect();
    for r in &runs {
        println!(
            "       seed {}: source k-NN init {:.3} base {:.3} adapted {:.3} base-only {:.3} | target base {:.3} adapted {:.3} ensemble {:.3} base-only {:.3} | skip {:.3} |s| {:.4} -> {:.4}",
            r.seed, r.init_src, r.base_src, r.adapted_src, r.base_only_src, r.base_tgt, r.adapted_tgt, r.ensemble_tgt,
            r.base_only_tgt, r.skip_rate, r.mag_first, r.mag_last
        );
        if full_grid {
            let g: Vec<String> = r.grid.iter().map(|(n, a)| format!("{n} {a:.3}")).collect();
            println!("       seed {} grid: {}", r.seed, g.join(", "));
        }
    }
    let m = |f: fn(&SeedRun) -> f64| mean(runs.iter().map(f));
    let (base, adapted, ens, base_only) =
        (m(|r| r.base_tgt), m(|r| r.adapted_tgt), m(|r| r.ensemble_tgt), m(|r| r.base_only_tgt));
    let secs6: f64 = runs.iter().map(|r| r.secs_main).sum();
    let secs7: f64 = secs6 + runs.iter().map(|r| r.secs_ablation).sum::<f64>();
    let per_seed = |f: fn(&SeedRun) -> String| runs.iter().map(f).collect::<Vec<_>>().join(", ");
    let skips_ok = runs.iter().all(|r| (0.35..=0.65).contains(&r.skip_rate));
    let mags_ok = runs.iter().all(|r| (r.mag_last - 0.5).abs() < (r.mag_first - 0.5).abs());
    let (pre_init, pre_base) = (m(|r| r.init_src), m(|r| r.base_src));
    println!(
        "[{}] pre  pretrain example: source k-NN init {pre_init:.3} -> base {pre_base:.3} (want >= +0.10; informational)",
        if pre_base >= pre_init + 0.10 { "PASS" } else { "FAIL" }
    );
    let gap_on = mean(runs.iter().map(|r| r.ensemble_tgt - r.adapted_tgt));
    println!(
        "       forgetting (source, mean over seeds): adapted {:.3} vs base-only {:.3}; target ensemble gap CVR-on {gap_on:+.3}",
        m(|r| r.adapted_src),
        m(|r| r.base_only_src)
    );
    vec![
        Outcome {
            id: "4b",
            pass: skips_ok,
            gating: strict,
            detail: format!("real run skip fraction in [0.35, 0.65]: {}", per_seed(|r| format!("{:.3}", r.skip_rate))),
        },
        Outcome {
            id: "6",
            pass: adapted >= base + 0.05 && ens >= adapted - 0.02 && secs6 < 1200.0,
            gating: strict,
            detail: format!(
                "end-to-end, 3 seeds: target k-NN base {base:.3}, adapted {adapted:.3} (want >= base + 0.05), ensemble {ens:.3} (want >= adapted - 0.02), {secs6:.0}s (< 1200s); per seed adapted {}",
                per_seed(|r| format!("{:.3}", r.adapted_tgt))
            ),
        },
        Outcome {
            id: "7",
            pass: ens >= base_only && secs7 < 3600.0,
            gating: strict,
            detail: format!(
                "ablation: full CVR + ensemble {ens:.3} >= base-only {base_only:.3}; per seed {}; {secs7:.0}s (< 3600s)",
                per_seed(|r| format!("{:.3} vs {:.3}", r.ensemble_tgt, r.base_only_tgt))
            ),
        },
        Outcome {
            id: "8",
            pass: mags_ok,
            gating: strict,
            detail: format!(
                "cv_loss on, s_phi 0.5: final-epoch |s| closer to 0.5 than first epoch: {}",
                per_seed(|r| format!("{:.4} -> {:.4}", r.mag_first, r.mag_last))
            ),
        },
    ]
}

fn main() -> ExitCode {
    let flag = |k: &str| std::env::var(k).is_ok_and(|v| v == "1");
    // cargo passes harness flags such as --list; nothing to list here
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let strict = flag("UPSTEP_STRICT");
    let mut all = Vec::new();
    for check in [
        gradient_integrity,
        sinkhorn_contract,
        center_vector_statistics,
        gate_skip_rate,
        adapter_correctness,
        knn_oracle,
        skip_step_purity,
    ] {
        let o = check();
        line(&o);
        all.push(o);
    }
    if flag("UPSTEP_SKIP_E2E") {
        println!("[SKIP] 4b 6 7 8 end-to-end checks (UPSTEP_SKIP_E2E=1)");
    } else {
        for o in end_to_end(strict, flag("UPSTEP_FULL_GRID")) {
            line(&o);
            all.push(o);
        }
    }
    let gating_failures = all.iter().filter(|o| o.gating && !o.pass).count();
    let failures = all.iter().filter(|o| !o.pass).count();
    println!("acceptance: {} checks, {failures} failing, {gating_failures} gating failures", all.len());
    if gating_failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
