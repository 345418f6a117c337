//! Acceptance criteria 1 to 10. Prints one PASS or FAIL line per criterion
//! and exits nonzero when any criterion fails.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use lola_core::analysis::{approximation_error, gram_study_cell, study_inputs, Cell, ScaleRule};
use lola_core::attention::{
    distill_feature_map, distillation_gradient, distillation_loss, softmax_attention_oracle, synthetic_teacher_corpus,
};
use lola_core::cache::select_top_scores;
use lola_core::harness::{
    collision_policies, difference_lower_bound, eval_recall_with, ordering_violations, run_ablation,
    CollisionExperiment, ExperimentConfig, FeatureMapSource, Policy, SyntheticTaskSpec, ABLATION_ORDER,
};
use lola_core::numerics::{gaussian_sample, Matrix};
use lola_core::scoring::self_recall_score;
use lola_core::{
    prefill, AttentionConfig, CacheConfig, ChunkConfig, FeatureMapParams, LinearState, LoLAState, Scorer, SeededRng,
    Vector,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed.as_secs_f64() < limit_secs as f64
}

/// `‖a − b‖∞ / ‖b‖∞`.
fn rel_err(a: &Vector, b: &Vector) -> f64 {
    let diff = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    diff / scale.max(f64::MIN_POSITIVE)
}

struct Stream {
    attention: AttentionConfig,
    params: FeatureMapParams,
    qs: Vec<Vector>,
    ks: Vec<Vector>,
    vs: Vec<Vector>,
}

fn stream(rng: &mut SeededRng, n: usize, d: usize) -> Stream {
    let attention = AttentionConfig::new(d).unwrap();
    let params = FeatureMapParams::init(rng, &attention).unwrap();
    Stream {
        attention,
        params,
        qs: gaussian_sample(rng, n, d, 1.0).unwrap(),
        ks: gaussian_sample(rng, n, d, 1.0).unwrap(),
        vs: gaussian_sample(rng, n, d, 1.0).unwrap(),
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(1001);
    let (mut decode_worst, mut prefill_worst) = (0.0f64, 0.0f64);
    let streams = 250;
    for _ in 0..streams {
        let n = 1 + rng.below(64);
        let d = 1 + rng.below(8);
        let s = stream(&mut rng, n, d);
        let oracle = softmax_attention_oracle(&s.qs, &s.ks, &s.vs, s.attention.scale).unwrap();
        let window = n + rng.below(4);
        let mut st = LoLAState::new(
            s.attention,
            s.params.clone(),
            CacheConfig::new(window, 1 + rng.below(4)),
            Scorer::SelfRecall,
        )
        .unwrap();
        for t in 0..n {
            let y = st.decode_step(&s.qs[t], s.ks[t].clone(), s.vs[t].clone()).unwrap();
            decode_worst = decode_worst.max(rel_err(&y, &oracle[t]));
        }
        let chunk = n.div_ceil(2) + rng.below(3);
        let (ys, _) = prefill(
            &s.qs,
            &s.ks,
            &s.vs,
            ChunkConfig::new(chunk, rng.below(4)).unwrap(),
            s.attention,
            s.params,
        )
        .unwrap();
        for (y, o) in ys.iter().zip(&oracle) {
            prefill_worst = prefill_worst.max(rel_err(y, o));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        decode_worst <= 1e-9 && prefill_worst <= 1e-9 && within(elapsed, 30),
        format!(
            "{streams} streams, max relative error decode {decode_worst:.2e}, prefill {prefill_worst:.2e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Self-recall error computed from scratch: `φ(x) = [exp(Wx), exp(−Wx)]`,
/// `H = Σ φ(k_i) v_iᵀ`, `s = Σ φ(k_i)`.
fn independent_self_recall(w: &Matrix, keys: &[Vector], values: &[Vector], k: &Vector, v: &Vector) -> f64 {
    let phi = |x: &Vector| -> Vec<f64> {
        let proj: Vec<f64> = (0..w.rows())
            .map(|r| w.row(r).iter().zip(x.iter()).map(|(a, b)| a * b).sum())
            .collect();
        proj.iter()
            .map(|p| p.exp())
            .chain(proj.iter().map(|p| (-p).exp()))
            .collect()
    };
    let fk = phi(k);
    let mut num = vec![0.0; v.dim()];
    let mut den = 0.0;
    for (ki, vi) in keys.iter().zip(values) {
        let weight: f64 = phi(ki).iter().zip(&fk).map(|(a, b)| a * b).sum();
        den += weight;
        for c in 0..v.dim() {
            num[c] += weight * vi[c];
        }
    }
    num.iter()
        .zip(v.iter())
        .map(|(n, x)| (n / den - x).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn self_recall_identities() -> Outcome {
    let mut rng = SeededRng::new(2002);
    let mut single_worst = 0.0f64;
    for _ in 0..1000 {
        let d = 1 + rng.below(8);
        let s = stream(&mut rng, 1, d);
        let mut lin = LinearState::new(s.attention.feature_dim, d);
        lin.absorb(
            s.params.apply(s.ks[0].as_slice()).unwrap().as_slice(),
            s.vs[0].as_slice(),
        )
        .unwrap();
        single_worst = single_worst.max(self_recall_score(&s.params, &s.ks[0], &s.vs[0], &lin).unwrap());
    }
    let mut multi_worst = 0.0f64;
    for _ in 0..1000 {
        let d = 1 + rng.below(8);
        let m = 2 + rng.below(15);
        let s = stream(&mut rng, m + 1, d);
        let mut lin = LinearState::new(s.attention.feature_dim, d);
        for i in 0..m {
            lin.absorb(
                s.params.apply(s.ks[i].as_slice()).unwrap().as_slice(),
                s.vs[i].as_slice(),
            )
            .unwrap();
        }
        // Score a stored pair and an unseen one.
        for j in [rng.below(m), m] {
            let got = self_recall_score(&s.params, &s.ks[j], &s.vs[j], &lin).unwrap();
            let want = independent_self_recall(s.params.weights(), &s.ks[..m], &s.vs[..m], &s.ks[j], &s.vs[j]);
            multi_worst = multi_worst.max((got - want).abs() / want.max(1e-12));
        }
    }
    outcome(
        single_worst <= 1e-10 && multi_worst <= 1e-9,
        format!(
            "single-pair score max {single_worst:.2e}; 1000 multi-pair states, max relative error {multi_worst:.2e}"
        ),
    )
}

/// Best `k`-subset by score sum; equal sums prefer the lexicographically
/// smallest (oldest) index list.
fn enumerate_best(scores: &[(usize, f64)], k: usize) -> Vec<usize> {
    let n = scores.len();
    let k = k.min(n);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let sum: f64 = members.iter().map(|&i| scores[i].1).sum();
        let mut idx: Vec<usize> = members.iter().map(|&i| scores[i].0).collect();
        idx.sort_unstable();
        if best.as_ref().is_none_or(|(s, b)| sum > *s || (sum == *s && idx < *b)) {
            best = Some((sum, idx));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

fn top_selection() -> Outcome {
    let mut rng = SeededRng::new(3003);
    let mut mismatches = 0;
    let mut engine_events = 0;
    let mut seed = 0;
    while engine_events < 1000 {
        let sparse = 1 + seed % 4;
        let s = stream(&mut SeededRng::new(seed as u64), 40, 3);
        let mut st = LoLAState::new(
            s.attention,
            s.params.clone(),
            CacheConfig::new(3, sparse),
            Scorer::SelfRecall,
        )
        .unwrap();
        for t in 0..40 {
            let report = st.ingest(&s.qs[t], s.ks[t].clone(), s.vs[t].clone()).unwrap();
            let cands = &report.selection.candidates;
            if cands.len() <= sparse {
                continue;
            }
            let scores: Vec<(usize, f64)> = cands.iter().map(|c| (c.index, c.score)).collect();
            let mut kept: Vec<usize> = cands.iter().filter(|c| c.retained).map(|c| c.index).collect();
            kept.sort_unstable();
            if kept != enumerate_best(&scores, sparse) {
                mismatches += 1;
            }
            engine_events += 1;
        }
        seed += 1;
    }
    // Larger candidate sets with frequent ties.
    for _ in 0..1000 {
        let e = 1 + rng.below(10);
        let capacity = rng.below(5);
        let scores: Vec<(usize, f64)> = (0..e).map(|i| (i + 1, rng.below(6) as f64 / 2.0)).collect();
        let keep = select_top_scores(&scores, capacity);
        let chosen: Vec<usize> = scores
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(s, _)| s.0)
            .collect();
        if chosen != enumerate_best(&scores, capacity) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{engine_events} engine eviction events and 1000 tied score sets up to 10 candidates, {mismatches} mismatches"),
    )
}

fn conservation() -> Outcome {
    let mut rng = SeededRng::new(4004);
    let (mut steps, mut violations) = (0usize, 0usize);
    while steps < 100_000 {
        let d = 1 + rng.below(6);
        let n = 50 + rng.below(450);
        let window = rng.below(33);
        let sparse = rng.below(17);
        let scorer = Scorer::ALL[rng.below(Scorer::ALL.len())];
        let s = stream(&mut rng, n, d);
        let mut st = LoLAState::new(s.attention, s.params.clone(), CacheConfig::new(window, sparse), scorer).unwrap();
        for t in 0..n {
            st.ingest(&s.qs[t], s.ks[t].clone(), s.vs[t].clone()).unwrap();
            let counted = st.window().len() + st.sparse().len() + st.linear().count();
            if counted != st.time() || st.window().len() > window || st.sparse().len() > sparse {
                violations += 1;
            }
            steps += 1;
        }
    }
    outcome(
        violations == 0,
        format!("{steps} decode steps, {violations} violations"),
    )
}

fn budget_sweep_task() -> SyntheticTaskSpec {
    SyntheticTaskSpec::single_topic(512, 16, 1)
}

fn directional_recall() -> Outcome {
    let start = Instant::now();
    let spec = budget_sweep_task();
    let trials = 500;
    let source = FeatureMapSource::default();
    let base = ExperimentConfig::new(Policy::WindowOnly, 128, 0, trials);
    let params = source.resolve(&spec, &base.attention(&spec).unwrap()).unwrap();
    let window_only = eval_recall_with(&base, &spec, &params).unwrap();
    let sweep: Vec<_> = [0, 32, 64, 128]
        .into_iter()
        .map(|lambda| {
            let cfg = ExperimentConfig::new(Policy::Lola, 128 - lambda, lambda, trials);
            eval_recall_with(&cfg, &spec, &params).unwrap()
        })
        .collect();
    let lola = &sweep[2];
    let lb = difference_lower_bound(lola, &window_only);
    let accs: Vec<f64> = sweep.iter().map(|r| r.accuracy).collect();
    let monotone = accs.windows(2).all(|w| w[0] <= w[1]);
    let elapsed = start.elapsed();
    outcome(
        lb >= 0.15 && monotone && within(elapsed, 300),
        format!(
            "lola 64/64 {:.3} vs window-only 128 {:.3}, 95% lower bound of difference {lb:.3}; accuracy over sparse 0/32/64/128 {accs:?}; {:.1}s",
            lola.accuracy,
            window_only.accuracy,
            elapsed.as_secs_f64()
        ),
    )
}

fn scoring_ablation() -> Outcome {
    let start = Instant::now();
    let records = run_ablation(
        &budget_sweep_task(),
        &Scorer::ALL,
        64,
        64,
        500,
        &FeatureMapSource::default(),
    )
    .unwrap();
    let violations = ordering_violations(&records, &ABLATION_ORDER, 1);
    let accs: Vec<String> = ABLATION_ORDER
        .iter()
        .filter_map(|l| records.iter().find(|r| r.label == *l))
        .map(|r| format!("{} {:.3}", r.label, r.accuracy))
        .collect();
    outcome(
        violations.is_empty(),
        format!(
            "{}; inversions {violations:?}; {:.1}s",
            accs.join(", "),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn gram_study() -> Outcome {
    let start = Instant::now();
    let rule = ScaleRule::InverseFourthRootDim;
    let seed = 7;
    let big_n = gram_study_cell(512, 16, rule, seed).unwrap();
    let small_n = gram_study_cell(128, 16, rule, seed).unwrap();
    let big_d = gram_study_cell(256, 64, rule, seed).unwrap();
    let small_d = gram_study_cell(256, 8, rule, seed).unwrap();
    let dominance_n = big_n.dominates(&small_n, 128);
    let dominance_d = big_d.dominates(&small_d, 128);
    let mut worst_margin = f64::INFINITY;
    let mut maps = 0;
    for (n, d) in [(128, 8), (256, 8), (128, 16), (256, 16)] {
        let cell = gram_study_cell(n, d, rule, seed).unwrap();
        let xs = study_inputs(n, d, rule, seed).unwrap();
        for map_seed in 0..3 {
            let attention = AttentionConfig::new(d).unwrap();
            let mut rng = SeededRng::new(map_seed);
            let corpus = synthetic_teacher_corpus(&mut rng, &attention, 4, 16, rule.std_dev(d)).unwrap();
            let trained = distill_feature_map(&mut rng, &attention, &corpus, 30, 0.05)
                .unwrap()
                .params;
            let err = approximation_error(&trained, &xs).unwrap();
            worst_margin = worst_margin.min(err - (cell.floor(attention.feature_dim) - 1e-6));
            maps += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        dominance_n && dominance_d && worst_margin >= 0.0 && within(elapsed, 180),
        format!(
            "n-dominance {dominance_n}, d-dominance {dominance_d}; {maps} trained maps, smallest error above floor {worst_margin:.3e}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn collision_analysis() -> Outcome {
    let exp = CollisionExperiment {
        name: "acceptance".into(),
        steps: 256,
        d: 8,
        window: 16,
        sparse: 16,
        key_scale: 1.0,
        feature_seed: None,
        check_ordering: true,
    };
    let seed = 11;
    let results = collision_policies(&exp, seed).unwrap();
    let means: Vec<f64> = results.iter().map(|(_, abs, _)| abs.mean_seen()).collect();
    let absorbed: Vec<f64> = results.iter().map(|(_, abs, _)| abs.mean_absorbed()).collect();
    let (lin, win, lola) = (means[0], means[1], means[2]);
    let ordered = lola <= win && win <= lin && absorbed[2] <= absorbed[1];

    let (_, lola_abs, lola_rel) = &results[2];
    let mut resident_cells = 0;
    let mut resident_nonzero = 0;
    for r in 0..lola_abs.steps() {
        for c in 0..=r {
            for m in [lola_abs, lola_rel] {
                if matches!(m.cell(r, c), Cell::Sparse | Cell::Window) {
                    resident_cells += 1;
                    if m.cell(r, c).value() != Some(0.0) {
                        resident_nonzero += 1;
                    }
                }
            }
        }
    }

    let csv = |seed: u64| -> Vec<Vec<u8>> {
        collision_policies(&exp, seed)
            .unwrap()
            .iter()
            .map(|(_, _, rel)| {
                let mut buf = Vec::new();
                rel.write_csv(&mut buf).unwrap();
                buf
            })
            .collect()
    };
    let reproducible = csv(seed) == csv(seed);
    outcome(
        ordered && resident_nonzero == 0 && resident_cells > 0 && reproducible,
        format!(
            "mean error lola {lola:.4} <= window-only {win:.4} <= linear-only {lin:.4} \
             (absorbed pairs only: {:.4}, {:.4}, {:.4}); {resident_cells} resident cells, {resident_nonzero} nonzero; \
             relative matrices byte-identical on rerun: {reproducible}",
            absorbed[2], absorbed[1], absorbed[0]
        ),
    )
}

fn distillation() -> Outcome {
    let mut rng = SeededRng::new(9009);
    let mut worst = 0.0f64;
    let eps = 1e-5;
    for _ in 0..50 {
        let d = 1 + rng.below(3);
        let half = 1 + rng.below(3);
        let attention = AttentionConfig::with_feature_dim(d, 2 * half).unwrap();
        let (sequences, len) = (1 + rng.below(2), 2 + rng.below(4));
        let corpus = synthetic_teacher_corpus(&mut rng, &attention, sequences, len, 1.0).unwrap();
        let params = FeatureMapParams::init(&mut rng, &attention).unwrap();
        let (_, grad) = distillation_gradient(&params, &corpus).unwrap();
        let w = params.weights();
        let fd: Vec<f64> = (0..w.as_slice().len())
            .map(|i| {
                let bumped = |delta: f64| {
                    let mut data = w.as_slice().to_vec();
                    data[i] += delta;
                    let p = FeatureMapParams::from_weights(Matrix::from_row_major(w.rows(), w.cols(), data).unwrap())
                        .unwrap();
                    distillation_loss(&p, &corpus).unwrap()
                };
                (bumped(eps) - bumped(-eps)) / (2.0 * eps)
            })
            .collect();
        let diff: f64 = grad
            .as_slice()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let size: f64 = grad.as_slice().iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / size.max(1e-12));
    }
    let attention = AttentionConfig::new(8).unwrap();
    let mut rng = SeededRng::new(9010);
    let corpus = synthetic_teacher_corpus(&mut rng, &attention, 8, 32, 1.0).unwrap();
    let run = distill_feature_map(&mut rng, &attention, &corpus, 200, 0.05).unwrap();
    let stalls = run.loss_history.windows(2).filter(|w| w[1] >= w[0]).count();
    outcome(
        worst < 1e-4 && stalls == 0,
        format!(
            "50 instances, max gradient relative error {worst:.2e}; 200 steps, loss {:.4} -> {:.4}, {stalls} non-decreasing steps",
            run.initial_loss(),
            run.final_loss()
        ),
    )
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let out = tempfile::tempdir().unwrap();
    let result = Command::new(env!("CARGO_BIN_EXE_lola"))
        .arg("suite")
        .arg("--out-dir")
        .arg(out.path())
        .output()
        .unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<String> = String::from_utf8_lossy(&result.stdout)
        .lines()
        .filter(|l| l.trim_start().starts_with("FAIL") || l.starts_with("ERROR"))
        .map(str::to_string)
        .collect();
    outcome(
        result.status.success() && within(elapsed, 600),
        format!(
            "exit {:?} in {:.1}s{}",
            result.status.code(),
            elapsed.as_secs_f64(),
            if failed.is_empty() {
                String::new()
            } else {
                format!("; {}", failed.join("; "))
            }
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("self-recall identities", self_recall_identities),
        ("top-sparse selection", top_selection),
        ("conservation", conservation),
        ("directional recall", directional_recall),
        ("scoring ablation ordering", scoring_ablation),
        ("gram study", gram_study),
        ("collision analysis", collision_analysis),
        ("distillation sanity", distillation),
        ("end-to-end suite", end_to_end),
    ];
    let mut all = true;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        all &= o.passed;
        println!(
            "{} criterion {} ({name}): {}",
            if o.passed { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
