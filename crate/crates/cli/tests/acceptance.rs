//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vscomplete_core::corpus::{filter_corpus, generate_synthetic_corpus, CodeEntry, CodeKey, ValueSet, VsType};
use vscomplete_core::eval::{
    auroc, average_precision, macro_aggregate, pair_metrics, retrieval_only_baseline, score_external_predictions,
    value_set_prf, PredictedCode, PredictionSet, Prf,
};
use vscomplete_core::features::feature_dim;
use vscomplete_core::model::{init_model, parameter_count, weighted_bce_with_logits, Inputs};
use vscomplete_core::pool::{pool_positive_rate, read_pools, CandidateEntry, CandidatePool};
use vscomplete_core::split::{
    assign_splits, largest_remainder, publisher_bin, ManifestRow, Split, SplitManifest, MIN_STRATUM,
};
use vscomplete_core::theory::{
    crossover_n, estimate_recovery, n_required_direct, n_required_rasc, TheoryConfig, TheoryResult,
};

use vscomplete_cli::config::{validate_config, PipelineConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn workspace() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR")).parent().unwrap().parent().unwrap()
}

fn base_theory(universe: usize, pool: usize, gamma: f64) -> TheoryConfig {
    TheoryConfig {
        universe,
        pool,
        s: 5,
        gamma,
        tau: 0.0,
        sigma: 1.0,
        n: 1,
        eps_ret: 0.0,
        delta: 0.05,
        trials: 10_000,
        seed: 2024,
    }
}

/// The twelve swept configs, each at n midway between the two required
/// sample sizes.
fn theory_grid() -> Vec<TheoryConfig> {
    let mut out = Vec::new();
    for universe in [1_000, 10_000, 100_000] {
        for pool in [50, 100] {
            for gamma in [0.1, 0.3] {
                let mut c = base_theory(universe, pool, gamma);
                let nd = n_required_direct(universe, c.delta, c.sigma, gamma).unwrap();
                let nr = n_required_rasc(pool, c.delta, 0.0, c.sigma, gamma).unwrap();
                c.n = ((nd + nr) / 2) as usize;
                out.push(c);
            }
        }
    }
    out
}

fn theory_bounds(coupled: &mut (usize, usize)) -> Outcome {
    let start = Instant::now();
    let mut worst = f64::NEG_INFINITY;
    for c in theory_grid() {
        let r = estimate_recovery(&c).map_err(|e| e.to_string())?;
        coupled.0 += r.coupled_trials;
        coupled.1 += r.dominance_violations;
        for (name, upper, bound) in [
            ("direct", r.p_fail_direct_ci.hi, r.bound_direct),
            ("rasc", r.p_fail_rasc_ci.hi, r.bound_rasc),
        ] {
            ensure(upper <= bound, || {
                format!("N={} K={} gamma={} n={}: {name} upper {upper:.4} > bound {bound:.4}", c.universe, c.pool, c.gamma, c.n)
            })?;
            worst = worst.max(upper - bound.min(1.0));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("sweep took {secs:.1}s"))?;
    Ok(format!("12 configs, max(upper - min(bound,1)) = {worst:.4}, {secs:.1}s"))
}

fn geometric_grid(lo: usize, hi: usize, ratio: f64) -> Vec<usize> {
    let mut g = vec![lo.max(1)];
    while *g.last().unwrap() < hi {
        let last = *g.last().unwrap();
        g.push(((last as f64 * ratio).ceil() as usize).max(last + 1));
    }
    g
}

fn sample_complexity(coupled: &mut (usize, usize)) -> Outcome {
    let nd = n_required_direct(100_000, 0.05, 1.0, 0.2).map_err(|e| e.to_string())?;
    let nr = n_required_rasc(100, 0.05, 0.0, 1.0, 0.2).map_err(|e| e.to_string())?;
    ensure(nd == 761 && nr == 415, || format!("n_required = {nd}, {nr}"))?;

    let mut c = base_theory(100_000, 100, 0.2);
    c.n = 761;
    let at_direct = estimate_recovery(&c).map_err(|e| e.to_string())?;
    c.n = 415;
    let at_rasc = estimate_recovery(&c).map_err(|e| e.to_string())?;
    for r in [&at_direct, &at_rasc] {
        coupled.0 += r.coupled_trials;
        coupled.1 += r.dominance_violations;
    }
    ensure(at_direct.p_fail_direct_mc <= 0.05 + 2.0 * at_direct.se_direct(), || {
        format!("direct failure {} at n=761", at_direct.p_fail_direct_mc)
    })?;
    ensure(at_rasc.p_fail_rasc_mc <= 0.05 + 2.0 * at_rasc.se_rasc(), || {
        format!("rasc failure {} at n=415", at_rasc.p_fail_rasc_mc)
    })?;

    let mut gaps = Vec::new();
    for base in theory_grid() {
        let nd = n_required_direct(base.universe, base.delta, base.sigma, base.gamma).unwrap() as usize;
        let nr = n_required_rasc(base.pool, base.delta, 0.0, base.sigma, base.gamma).unwrap() as usize;
        let grid = geometric_grid(nr / 5, nd, 1.05);
        let results: Vec<TheoryResult> = grid
            .iter()
            .map(|&n| estimate_recovery(&TheoryConfig { n, trials: 2_000, seed: 99, ..base.clone() }))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        for r in &results {
            coupled.0 += r.coupled_trials;
            coupled.1 += r.dominance_violations;
        }
        let (direct, rasc) = crossover_n(&results, 0.05);
        let tag = format!("N={} K={} gamma={}", base.universe, base.pool, base.gamma);
        match (direct, rasc) {
            (Some(d), Some(r)) if r < d => gaps.push(format!("{r}<{d}")),
            other => return Err(format!("{tag}: crossover (direct, rasc) = {other:?}")),
        }
    }
    Ok(format!(
        "n_req 761/415; MC at n_req {:.4}/{:.4}; crossovers rasc<direct: {}",
        at_direct.p_fail_direct_mc,
        at_rasc.p_fail_rasc_mc,
        gaps.join(" ")
    ))
}

fn coupled_dominance(coupled: (usize, usize)) -> Outcome {
    ensure(coupled.0 >= 100_000, || format!("only {} coupled trials", coupled.0))?;
    ensure(coupled.1 == 0, || format!("{} violations in {} trials", coupled.1, coupled.0))?;
    Ok(format!("0 violations in {} coupled trials", coupled.0))
}

fn auroc_oracle(s: &[f64], y: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1 && y[j] == 0 {
                pairs += 1.0;
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

/// Precision at each positive, where ties are ranked in input order.
fn ap_oracle(s: &[f64], y: &[u8]) -> f64 {
    let ahead = |i: usize, j: usize| s[j] > s[i] || (s[j] == s[i] && j <= i);
    let mut sum = 0.0;
    let pos = y.iter().filter(|v| **v == 1).count();
    for i in (0..s.len()).filter(|&i| y[i] == 1) {
        let rank = (0..s.len()).filter(|&j| ahead(i, j)).count();
        let hits = (0..s.len()).filter(|&j| ahead(i, j) && y[j] == 1).count();
        sum += hits as f64 / rank as f64;
    }
    sum / pos as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut ties, mut singles) = (0.0f64, 0, 0);
    for t in 0..1000 {
        let n = rng.gen_range(2..=100);
        let levels = if t % 3 == 0 { rng.gen_range(1..5) } else { 1_000_000 };
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut y: Vec<u8> = if t % 5 == 0 {
            let mut y = vec![0; n];
            y[rng.gen_range(0..n)] = 1;
            y
        } else {
            (0..n).map(|_| rng.gen_bool(0.3) as u8).collect()
        };
        if y.iter().all(|v| *v == 1) {
            y[0] = 0;
        }
        if y.iter().all(|v| *v == 0) {
            y[n - 1] = 1;
        }
        if y.iter().filter(|v| **v == 1).count() == 1 {
            singles += 1;
        }
        if s.iter().map(|v| v.to_bits()).collect::<HashSet<_>>().len() < n {
            ties += 1;
        }
        let a = auroc(&s, &y).map_err(|e| e.to_string())?;
        let p = average_precision(&s, &y).map_err(|e| e.to_string())?;
        worst = worst.max((a - auroc_oracle(&s, &y)).abs()).max((p - ap_oracle(&s, &y)).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("1000 instances ({ties} with ties, {singles} single-positive), max deviation {worst:e}"))
}

fn gradient_check() -> Outcome {
    let dims = [13, 8, 5, 3, 1];
    let mut worst = 0.0f64;
    for batch_seed in 0..20u64 {
        let mut m = init_model(&dims, 500 + batch_seed).map_err(|e| e.to_string())?;
        m.dropout = 0.0;
        let mut r = ChaCha8Rng::seed_from_u64(batch_seed);
        for p in m.params_mut() {
            *p += r.gen_range(-0.3..0.3);
        }
        let batch = r.gen_range(4..12);
        let x: Vec<f64> = (0..batch * dims[0]).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut labels: Vec<u8> = (0..batch).map(|_| r.gen_bool(0.4) as u8).collect();
        labels[0] = 1;
        let w = r.gen_range(1.0..5.0);
        let inputs = Inputs::Dense { x: &x, dim: dims[0] };
        let rows: Vec<usize> = (0..batch).collect();
        let cache = m.forward_train(&inputs, &rows, &mut r).map_err(|e| e.to_string())?;
        let (_, d) = weighted_bce_with_logits(&cache.logits, &labels, w);
        let g = m.backward(&inputs, &rows, &cache, &d).map_err(|e| e.to_string())?;
        let h = 1e-5;
        for i in 0..g.len() {
            let orig = m.params()[i];
            let mut loss_at = |v: f64| {
                m.params_mut()[i] = v;
                let logits = m.forward_train(&inputs, &rows, &mut r).unwrap().logits;
                weighted_bce_with_logits(&logits, &labels, w).0
            };
            let num = (loss_at(orig + h) - loss_at(orig - h)) / (2.0 * h);
            m.params_mut()[i] = orig;
            let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!("20 batches, max relative error {worst:e}"))
}

fn architecture() -> Outcome {
    let count = parameter_count(&[1545, 512, 256, 64, 1]);
    let built = init_model(&[1545, 512, 256, 64, 1], 0).map_err(|e| e.to_string())?.parameter_count();
    let fd = feature_dim(768);
    ensure(count == 941_057 && built == count && fd == 1545, || {
        format!("parameter_count {count}, model {built}, feature_dim {fd}")
    })?;
    Ok(format!("{count} parameters, feature length {fd}"))
}

fn random_pools(rng: &mut ChaCha8Rng, count: usize) -> Vec<CandidatePool> {
    (0..count)
        .map(|p| {
            let target_size = rng.gen_range(3..30);
            let pos = rng.gen_range(0..=target_size);
            let neg = rng.gen_range(if pos == 0 { 1 } else { 0 }..40);
            let mut entries: Vec<CandidateEntry> = (0..pos + neg)
                .map(|i| CandidateEntry {
                    code: i.to_string(),
                    system: "LOINC".into(),
                    display: String::new(),
                    similarity: rng.gen_range(0.0..1.0),
                    source_oid: "src".into(),
                    label: (i < pos) as u8,
                })
                .collect();
            entries.rotate_left(rng.gen_range(0..pos + neg));
            CandidatePool {
                target_oid: format!("vs{p}"),
                target_size,
                rr_at_k: pos as f64 / target_size as f64,
                entries,
            }
        })
        .collect()
}

fn check_identities(pools: &[CandidatePool], rng: &mut ChaCha8Rng, decision_sets: usize) -> Result<(), String> {
    let base = retrieval_only_baseline(pools);
    let per: Vec<Prf> = pools.iter().zip(&base).map(|(p, d)| value_set_prf(p, d)).collect();
    let recall = macro_aggregate(&per).map_err(|e| e.to_string())?.recall;
    let mean_rr = pools.iter().map(|p| p.rr_at_k).sum::<f64>() / pools.len() as f64;
    ensure(recall == mean_rr, || format!("baseline recall {recall} != mean RR@K {mean_rr}"))?;

    let labels: Vec<u8> = pools.iter().flat_map(|p| p.entries.iter().map(|e| e.label)).collect();
    let scores: Vec<f64> = pools.iter().flat_map(|p| p.entries.iter().map(|e| e.similarity)).collect();
    let all: Vec<bool> = base.concat();
    let pm = pair_metrics(&scores, &labels, &all).map_err(|e| e.to_string())?;
    let rate = pool_positive_rate(pools).map_err(|e| e.to_string())?;
    ensure(pm.precision == rate, || format!("pair precision {} != positive rate {rate}", pm.precision))?;

    for t in 0..decision_sets {
        let p = &pools[t % pools.len()];
        let keep = rng.gen_range(0.0..1.0);
        let d: Vec<bool> = p.entries.iter().map(|_| rng.gen_bool(keep)).collect();
        let prf = value_set_prf(p, &d);
        ensure(prf.recall <= p.rr_at_k, || format!("{}: recall {} > rr {}", p.target_oid, prf.recall, p.rr_at_k))?;
    }
    Ok(())
}

fn definitional_identities(bench_pools: Option<&Path>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for round in 0..20 {
        let n = rng.gen_range(1..60);
        let pools = random_pools(&mut rng, n);
        check_identities(&pools, &mut rng, 500).map_err(|e| format!("random pools {round}: {e}"))?;
    }
    let mut note = "20 random pools files".to_string();
    if let Some(path) = bench_pools {
        let pools = read_pools(path).map_err(|e| e.to_string())?;
        check_identities(&pools, &mut rng, 10_000)?;
        note = format!("{note} + benchmark pools ({} sets)", pools.len());
    }
    Ok(format!("{note}; 2x10^4 random decision sets"))
}

fn run_benchmark(out: &Path) -> Result<(Duration, serde_json::Value, Vec<u8>), String> {
    let start = Instant::now();
    let res = Command::new(env!("CARGO_BIN_EXE_vscomplete"))
        .arg("run-all")
        .arg("--config")
        .arg(workspace().join("configs/benchmark.json"))
        .arg("--out-dir")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    let took = start.elapsed();
    if !res.status.success() {
        return Err(format!("run-all exited {:?}: {}", res.status.code(), String::from_utf8_lossy(&res.stderr)));
    }
    let bytes = std::fs::read(out.join("reports/report.json")).map_err(|e| e.to_string())?;
    let summary: serde_json::Value = serde_json::from_slice(&res.stdout).map_err(|e| e.to_string())?;
    Ok((took, summary, bytes))
}

fn end_to_end(first: &Path, second: &Path) -> Outcome {
    let (t1, s1, r1) = run_benchmark(first)?;
    let (t2, _, r2) = run_benchmark(second)?;
    let gain = s1["f1_gain"].as_f64().unwrap_or(f64::NAN);
    let auc = s1["pair_auroc"].as_f64().unwrap_or(f64::NAN);
    let detail = format!(
        "{} sets, MLP F1 {:.4} vs baseline {:.4} (gain {gain:.4}), AUROC {auc:.4}, runs {:.0}s/{:.0}s",
        s1["value_sets"],
        s1["mlp_macro_f1"].as_f64().unwrap_or(f64::NAN),
        s1["retrieval_only_macro_f1"].as_f64().unwrap_or(f64::NAN),
        t1.as_secs_f64(),
        t2.as_secs_f64()
    );
    let limit = Duration::from_secs(15 * 60);
    ensure(t1 < limit && t2 < limit, || format!("too slow: {detail}"))?;
    ensure(gain >= 0.05, || format!("F1 gain below 0.05: {detail}"))?;
    ensure(auc >= 0.75, || format!("AUROC below 0.75: {detail}"))?;
    ensure(r1 == r2, || format!("reports differ: {detail}"))?;
    Ok(format!("{detail}, reports identical"))
}

fn hallucination() -> Outcome {
    let codes = ["a", "b", "c", "d"].map(|c| CodeEntry::new(c, "LOINC", c)).to_vec();
    let vs = ValueSet {
        oid: "1.2.3".into(),
        title: "Glucose tests".into(),
        description: String::new(),
        publisher: "P".into(),
        vs_type: VsType::LabObservation,
        codes,
    };
    let universe: HashSet<CodeKey> = vs.code_keys();
    let manifest = SplitManifest {
        rows: vec![ManifestRow {
            oid: vs.oid.clone(),
            split: Split::Test,
            rr_at_k: 1.0,
            vs_type: vs.vs_type,
            publisher: vs.publisher.clone(),
        }],
    };
    let pred = |pairs: &[(&str, &str)]| PredictionSet {
        oid: vs.oid.clone(),
        predictions: pairs
            .iter()
            .map(|(c, s)| PredictedCode { code: c.to_string(), system: s.to_string() })
            .collect(),
    };
    let mixed = pred(&[("a", "LOINC"), ("b", "LOINC"), ("zz", "LOINC"), ("a", "SNOMED-CT")]);
    let r = score_external_predictions(&[mixed], &[&vs], &universe, &manifest, 50).map_err(|e| e.to_string())?;
    let rate = r.hallucination_rate.unwrap_or(f64::NAN);
    ensure(rate == 0.5, || format!("2 of 4 outside scored {rate}"))?;

    // predictions drawn only from candidate pools never leave the corpus
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut corpus = Vec::new();
    for i in 0..30 {
        let n = rng.gen_range(3..12);
        corpus.push(ValueSet {
            oid: format!("2.{i}"),
            title: format!("set {i}"),
            description: String::new(),
            publisher: "P".into(),
            vs_type: VsType::Procedure,
            codes: (0..n).map(|_| CodeEntry::new(rng.gen_range(0..60).to_string(), "CPT", "")).collect(),
        });
    }
    let universe: HashSet<CodeKey> = corpus.iter().flat_map(|s| s.code_keys()).collect();
    let preds: Vec<PredictionSet> = corpus
        .iter()
        .map(|target| {
            let mut pairs = Vec::new();
            for _ in 0..3 {
                let src = &corpus[rng.gen_range(0..corpus.len())];
                if src.oid != target.oid {
                    pairs.extend(src.codes.iter().filter(|_| rng.gen_bool(0.5)).map(|c| (c.code.clone(), c.system.clone())));
                }
            }
            PredictionSet {
                oid: target.oid.clone(),
                predictions: pairs.into_iter().map(|(code, system)| PredictedCode { code, system }).collect(),
            }
        })
        .collect();
    let manifest = SplitManifest {
        rows: corpus
            .iter()
            .map(|v| ManifestRow {
                oid: v.oid.clone(),
                split: Split::Test,
                rr_at_k: 0.0,
                vs_type: v.vs_type,
                publisher: v.publisher.clone(),
            })
            .collect(),
    };
    let truth: Vec<&ValueSet> = corpus.iter().collect();
    let r = score_external_predictions(&preds, &truth, &universe, &manifest, 50).map_err(|e| e.to_string())?;
    let grounded = r.hallucination_rate.unwrap_or(f64::NAN);
    ensure(grounded == 0.0, || format!("pool-restricted file scored {grounded}"))?;
    Ok("constructed file 0.5, pool-restricted file 0.0".into())
}

fn split_integrity(c: &PipelineConfig) -> Outcome {
    let sets = filter_corpus(generate_synthetic_corpus(&c.synth).map_err(|e| e.to_string())?);
    let rr: HashMap<String, f64> = sets.iter().map(|s| (s.oid.clone(), 0.0)).collect();
    let m = assign_splits(&sets, &rr, &c.split).map_err(|e| e.to_string())?;
    let held: HashSet<&str> = c.split.held_out_publishers.iter().map(String::as_str).collect();

    let mut seen = HashSet::new();
    for row in &m.rows {
        ensure(seen.insert(row.oid.as_str()), || format!("{} assigned twice", row.oid))?;
    }
    ensure(seen.len() == sets.len(), || format!("{} rows for {} sets", seen.len(), sets.len()))?;
    let by_oid = m.by_oid();
    let mut held_count = 0;
    let mut counts: HashMap<String, usize> = HashMap::new();
    for vs in &sets {
        if held.contains(vs.publisher.as_str()) {
            held_count += 1;
            ensure(by_oid[vs.oid.as_str()].split == Split::Test, || format!("held-out {} not in test", vs.oid))?;
        } else {
            *counts.entry(vs.publisher.clone()).or_default() += 1;
        }
    }
    ensure(held_count > 0, || "no held-out sets in the corpus".into())?;

    let mut strata: HashMap<(VsType, String), [usize; 3]> = HashMap::new();
    for vs in sets.iter().filter(|v| !held.contains(v.publisher.as_str())) {
        let key = (vs.vs_type, publisher_bin(&vs.publisher, &counts, c.split.publisher_threshold));
        let slot = match by_oid[vs.oid.as_str()].split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        strata.entry(key).or_default()[slot] += 1;
    }
    for ((ty, bin), got) in &strata {
        let n: usize = got.iter().sum();
        let want = if n < MIN_STRATUM { [n, 0, 0] } else { largest_remainder(n, c.split.ratios) };
        ensure(*got == want, || format!("stratum {ty:?}/{bin}: {got:?} vs {want:?}"))?;
    }
    Ok(format!("{} sets, {held_count} held out, {} strata at largest-remainder counts", sets.len(), strata.len()))
}

fn main() {
    let config = validate_config(&workspace().join("configs/benchmark.json")).expect("benchmark config");
    let dirs = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut coupled = (0usize, 0usize);

    let mut results: Vec<(&str, Outcome)> = Vec::new();
    results.push(("1 theory bounds hold", theory_bounds(&mut coupled)));
    results.push(("2 sample-complexity gap", sample_complexity(&mut coupled)));
    results.push(("3 coupled dominance", coupled_dominance(coupled)));
    results.push(("4 metric oracle equivalence", metric_oracles()));
    results.push(("5 gradient correctness", gradient_check()));
    results.push(("6 architecture fidelity", architecture()));
    let e2e = end_to_end(dirs.0.path(), dirs.1.path());
    let pools = dirs.0.path().join("pools.jsonl");
    results.push(("7 definitional identities", definitional_identities(pools.exists().then_some(pools.as_path()))));
    results.push(("8 end-to-end benchmark", e2e));
    results.push(("9 hallucination accounting", hallucination()));
    results.push(("10 split integrity", split_integrity(&config)));

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}
