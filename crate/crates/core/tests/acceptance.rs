//! Acceptance suite. Runs every primary criterion, prints one PASS/FAIL line
//! per criterion and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crimesim_core::decision::{parse_decision, render_prompt, DecisionContext, EngineConfig, PromptTemplate};
use crimesim_core::env::CrimeDistribution;
use crimesim_core::gateway::{CompletionRequest, Gateway, GatewayConfig, MockTransport};
use crimesim_core::metrics::{hit_rate, hotspot_crime_ratio, jsd, new_hotspot_concordance, normalize, rmse, union_support};
use crimesim_core::mobility::{epr_step, EprParams};
use crimesim_core::perception::{
    align_prompt, cronbach_alpha, pearson, split_ids, AlignConfig, FixtureScorer, ScriptedOptimizer,
};
use crimesim_core::population::AgentState;
use crimesim_core::scenario::ScenarioPlan;
use crimesim_core::simulation::{run_in, write_events, RunConfig, RunDeps, Simulator};
use crimesim_core::synthetic::{zipf_counts, SyntheticCity};
use crimesim_core::CellIdx;

type Outcome = Result<String, String>;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.2?}, limit {limit:?}"))
}

fn dist(pairs: &[(&str, u64)]) -> CrimeDistribution {
    CrimeDistribution::from_counts(pairs.iter().map(|&(k, v)| (k.to_owned(), v)))
}

// ---------------------------------------------------------------------------
// Independent oracles over small instances. Fractions are kept as integer
// numerator/denominator pairs so hotspot sizes are computed exactly.

struct Frac(u64, u64);

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Position of `id` in the ranking, counted as the number of cells that beat
/// it: a higher count, or an equal count and a smaller id.
fn rank_of(id: &str, counts: &BTreeMap<String, u64>) -> usize {
    let c = counts[id];
    counts.iter().filter(|(k, &v)| v > c || (v == c && k.as_str() < id)).count()
}

fn oracle_top(counts: &BTreeMap<String, u64>, n: usize) -> BTreeSet<String> {
    counts.keys().filter(|k| rank_of(k, counts) < n).cloned().collect()
}

fn oracle_hotspots(counts: &BTreeMap<String, u64>, alpha: &Frac) -> BTreeSet<String> {
    let n = ceil_div(alpha.0 * counts.len() as u64, alpha.1).min(counts.len() as u64) as usize;
    oracle_top(counts, n)
}

fn on_universe(d: &BTreeMap<String, u64>, universe: &BTreeSet<String>) -> BTreeMap<String, u64> {
    universe.iter().map(|k| (k.clone(), d.get(k).copied().unwrap_or(0))).collect()
}

fn shares(d: &BTreeMap<String, u64>) -> Vec<f64> {
    let t: u64 = d.values().sum();
    d.values().map(|&v| v as f64 / t as f64).collect()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// JSD as entropy of the mixture minus the mean entropy.
fn oracle_jsd(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
    entropy(&m) - (entropy(p) + entropy(q)) / 2.0
}

fn oracle_rmse(p: &[f64], q: &[f64]) -> f64 {
    (p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64).sqrt()
}

fn random_counts(rng: &mut ChaCha8Rng, ids: &[String]) -> BTreeMap<String, u64> {
    loop {
        let mut m = BTreeMap::new();
        for id in ids {
            let v = if rng.random_bool(0.3) { 0 } else { rng.random_range(0..6) };
            // Zero cells are sometimes left out of the map entirely so the
            // union-support rule is exercised.
            if v > 0 || rng.random_bool(0.5) {
                m.insert(id.clone(), v);
            }
        }
        if m.values().sum::<u64>() > 0 {
            return m;
        }
    }
}

fn to_dist(m: &BTreeMap<String, u64>) -> CrimeDistribution {
    CrimeDistribution::from_counts(m.iter().map(|(k, &v)| (k.clone(), v)))
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let alphas = [Frac(1, 10), Frac(1, 5), Frac(3, 10), Frac(1, 2), Frac(1, 1)];
    let ks = [Frac(1, 2), Frac(1, 1), Frac(3, 2), Frac(2, 1)];
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for _ in 0..400 {
        let n = rng.random_range(1..=10);
        let ids: Vec<String> = (0..n).map(|i| format!("c{i:02}")).collect();
        let real = random_counts(&mut rng, &ids);
        let sim = random_counts(&mut rng, &ids);
        let universe: BTreeSet<String> = real.keys().chain(sim.keys()).cloned().collect();
        let (ru, su) = (on_universe(&real, &universe), on_universe(&sim, &universe));
        let (rd, sd) = (to_dist(&real), to_dist(&sim));

        let support = union_support(&rd, &sd);
        let (p, q) = (normalize(&rd, &support), normalize(&sd, &support));
        let (ps, qs) = (shares(&ru), shares(&su));
        let e = (jsd(&p, &q).map_err(|e| e.to_string())? - oracle_jsd(&ps, &qs)).abs();
        worst = worst.max(e);
        ensure(e <= 1e-9, || format!("jsd off by {e:e} on {real:?} vs {sim:?}"))?;
        let e = (rmse(&p, &q).map_err(|e| e.to_string())? - oracle_rmse(&ps, &qs)).abs();
        worst = worst.max(e);
        ensure(e <= 1e-9, || format!("rmse off by {e:e}"))?;

        for a in &alphas {
            let alpha = a.0 as f64 / a.1 as f64;
            let h_real = oracle_hotspots(&ru, a);
            let own = oracle_hotspots(&on_universe(&real, &real.keys().cloned().collect()), a);
            let own_cov = own.iter().map(|k| real[k]).sum::<u64>() as f64 / real.values().sum::<u64>() as f64;
            let e = (hotspot_crime_ratio(&rd, alpha).map_err(|e| e.to_string())? - own_cov).abs();
            ensure(e <= 1e-9, || format!("hotspot_crime_ratio off by {e:e}"))?;
            for k in &ks {
                let want = ceil_div(k.0 * h_real.len() as u64, k.1).min(su.len() as u64) as usize;
                let h_sim = oracle_top(&su, want);
                let oracle = h_real.intersection(&h_sim).count() as f64 / h_real.len() as f64;
                let got = hit_rate(&rd, &sd, alpha, k.0 as f64 / k.1 as f64).map_err(|e| e.to_string())?;
                ensure((got - oracle).abs() <= 1e-9, || format!("HR mismatch {got} vs {oracle} on {real:?}/{sim:?}"))?;
                checked += 1;
            }

            let rb = random_counts(&mut rng, &ids);
            let sb = random_counts(&mut rng, &ids);
            let all: BTreeSet<String> = [&rb, &real, &sb, &sim].iter().flat_map(|m| m.keys().cloned()).collect();
            let hot = |m: &BTreeMap<String, u64>| oracle_hotspots(&on_universe(m, &all), a);
            let new_real: BTreeSet<_> = hot(&real).difference(&hot(&rb)).cloned().collect();
            let new_sim: BTreeSet<_> = hot(&sim).difference(&hot(&sb)).cloned().collect();
            let oracle = if new_real.is_empty() {
                if new_sim.is_empty() {
                    1.0
                } else {
                    0.0
                }
            } else {
                new_real.intersection(&new_sim).count() as f64 / new_real.len() as f64
            };
            let got = new_hotspot_concordance(&to_dist(&rb), &rd, &to_dist(&sb), &sd, alpha).map_err(|e| e.to_string())?;
            ensure((got - oracle).abs() <= 1e-9, || format!("NHC mismatch {got} vs {oracle}"))?;
        }
    }
    within_time(start, Duration::from_secs(1))?;
    Ok(format!("{checked} HR checks plus JSD/RMSE/HCR/NHC on 400 instances, max error {worst:.1e}, {:.0?}", start.elapsed()))
}

fn hit_rate_example() -> Outcome {
    let ids: Vec<String> = (1..=10).map(|i| format!("g{i:02}")).collect();
    let real = CrimeDistribution::from_counts(ids.iter().cloned().zip([10, 9, 8, 1, 1, 1, 1, 1, 1, 1]));
    let sim = CrimeDistribution::from_counts(ids.iter().cloned().zip([2, 9, 8, 7, 1, 0, 0, 0, 0, 0]));
    let hr1 = hit_rate(&real, &sim, 0.2, 1.0).map_err(|e| e.to_string())?;
    let hr2 = hit_rate(&real, &sim, 0.2, 2.0).map_err(|e| e.to_string())?;
    ensure(hr1 == 0.5 && hr2 == 1.0, || format!("HR@1.0 = {hr1}, HR@2.0 = {hr2}"))?;
    Ok(format!("HR@1.0 = {hr1}, HR@2.0 = {hr2}"))
}

fn zipf_concentration() -> Outcome {
    let start = Instant::now();
    let d = zipf_counts(1000, 1.0, 10_000.0);
    let cov = hotspot_crime_ratio(&d, 0.2).map_err(|e| e.to_string())?;
    within_time(start, Duration::from_secs(1))?;
    ensure(cov >= 0.5, || format!("top-20% coverage {cov:.4}"))?;
    Ok(format!("top-20% coverage {cov:.4} over {} cells", d.num_cells()))
}

fn jsd_bound() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let a = dist(&[("a", 1), ("b", 0)]);
    let b = dist(&[("a", 0), ("b", 1)]);
    let s = union_support(&a, &b);
    let two = jsd(&normalize(&a, &s), &normalize(&b, &s)).map_err(|e| e.to_string())?;
    ensure((two - ln2).abs() <= 1e-9, || format!("two-cell disjoint JSD {two}"))?;

    // Larger disjoint supports reach the same maximum, and nothing exceeds it.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut max_seen: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=10);
        let split = rng.random_range(1..n);
        let ids: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let p = CrimeDistribution::from_counts(
            ids.iter().enumerate().map(|(i, k)| (k.clone(), if i < split { rng.random_range(1..9) } else { 0 })),
        );
        let q = CrimeDistribution::from_counts(
            ids.iter().enumerate().map(|(i, k)| (k.clone(), if i >= split { rng.random_range(1..9) } else { 0 })),
        );
        let s = union_support(&p, &q);
        let v = jsd(&normalize(&p, &s), &normalize(&q, &s)).map_err(|e| e.to_string())?;
        ensure((v - ln2).abs() <= 1e-9, || format!("disjoint JSD {v} on {n} cells"))?;
        let r = CrimeDistribution::from_counts(ids.iter().map(|k| (k.clone(), rng.random_range(0..9))));
        if r.total() > 0 {
            let v = jsd(&normalize(&p, &s), &normalize(&r, &s)).map_err(|e| e.to_string())?;
            max_seen = max_seen.max(v);
        }
    }
    ensure(max_seen <= ln2 + 1e-12, || format!("JSD {max_seen} above ln 2"))?;
    Ok(format!("disjoint JSD = {two:.12} (ln 2 = {ln2:.12})"))
}

fn epr_scaling() -> Outcome {
    let start = Instant::now();
    let env = SyntheticCity { heterogeneous: false, ..SyntheticCity::grid(50, 50, 1) }.build();
    let params = EprParams::default();
    let expected = 1.0 / (1.0 + params.gamma);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut state = AgentState::at(CellIdx(25 * 50 + 25));
    let steps = 10_000usize;
    let mut distinct = Vec::with_capacity(steps);
    for _ in 0..steps {
        epr_step(&mut state, &env, &params, &mut rng);
        distinct.push(state.distinct_visited());
    }
    // Least-squares slope of log S(t) on log t at 40 log-spaced times.
    let pts: Vec<(f64, f64)> = (0..40)
        .map(|i| {
            let t = (10f64 * (steps as f64 / 10.0).powf(i as f64 / 39.0)).round() as usize;
            ((t as f64).ln(), (distinct[t - 1] as f64).ln())
        })
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    within_time(start, Duration::from_secs(10))?;
    ensure((slope - expected).abs() <= 0.15, || format!("slope {slope:.3}, expected {expected:.3}"))?;
    Ok(format!("slope {slope:.3} vs 1/(1+gamma) = {expected:.3}, S(10^4) = {}, {:.2?}", distinct[steps - 1], start.elapsed()))
}

fn run_events_bytes(env: &crimesim_core::env::CityEnvironment, seed: u64) -> Result<(Vec<u8>, Duration), String> {
    let start = Instant::now();
    let mut cfg = RunConfig::new(EngineConfig::Routine { p_base: 0.05 });
    cfg.seed = seed;
    let out = run_in(env, &cfg).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_events(&out.events, &mut buf).map_err(|e| e.to_string())?;
    Ok((buf, start.elapsed()))
}

fn determinism() -> Outcome {
    let env = SyntheticCity::grid(25, 40, 7).build();
    let (a, ta) = run_events_bytes(&env, 42)?;
    let (b, tb) = run_events_bytes(&env, 42)?;
    ensure(ta <= Duration::from_secs(60) && tb <= Duration::from_secs(60), || format!("runs took {ta:.2?} and {tb:.2?}"))?;
    ensure(!a.is_empty(), || "run produced no events".into())?;
    ensure(a == b, || "event logs differ".into())?;
    Ok(format!("{} bytes of events identical, runs {ta:.2?} / {tb:.2?}", a.len()))
}

fn routine_beats_random() -> Outcome {
    let env = SyntheticCity::grid(10, 20, 7).build();
    let run = |engine: EngineConfig, seed: u64| -> Result<CrimeDistribution, String> {
        let mut cfg = RunConfig::new(engine);
        cfg.seed = seed;
        Ok(run_in(&env, &cfg).map_err(|e| e.to_string())?.per_cell_counts)
    };
    let routine = EngineConfig::Routine { p_base: 0.05 };
    let random = EngineConfig::Random { p_base: 0.05 };
    // Ground truth: crime pooled from 20 independent routine runs.
    let mut truth = run(routine.clone(), 10_000)?;
    for g in 1..20 {
        for (k, v) in run(routine.clone(), 10_000 + g)?.counts() {
            truth.add(k, *v);
        }
    }
    let (mut hr_routine, mut hr_random) = (0.0, 0.0);
    for seed in 0..10 {
        hr_routine += hit_rate(&truth, &run(routine.clone(), seed)?, 0.2, 1.0).map_err(|e| e.to_string())?;
        hr_random += hit_rate(&truth, &run(random.clone(), seed)?, 0.2, 1.0).map_err(|e| e.to_string())?;
    }
    let (r, x) = (hr_routine / 10.0, hr_random / 10.0);
    ensure(r - x >= 0.1, || format!("routine {r:.3} vs random {x:.3}, gap {:.3}", r - x))?;
    Ok(format!("mean HR@1.0 routine {r:.3} vs random {x:.3}, gap {:.3}", r - x))
}

fn scenario_monotonicity() -> Outcome {
    let env = SyntheticCity::grid(25, 40, 7).build();
    let plan = ScenarioPlan::load(&fixture("dallas_plan.json")).map_err(|e| e.to_string())?;
    let mut both = 0;
    let mut lines = Vec::new();
    for seed in 0..10 {
        let mut cfg = RunConfig::new(EngineConfig::Routine { p_base: 0.05 });
        cfg.seed = seed;
        let control = run_in(&env, &cfg).map_err(|e| e.to_string())?;
        let deps = RunDeps { plan: Some(plan.clone()), ..RunDeps::default() };
        let treated = Simulator::new(&env, cfg, deps).and_then(|mut s| s.run()).map_err(|e| e.to_string())?;
        let hc = hotspot_crime_ratio(&control.per_cell_counts, 0.2).map_err(|e| e.to_string())?;
        let ht = hotspot_crime_ratio(&treated.per_cell_counts, 0.2).map_err(|e| e.to_string())?;
        if treated.total() < control.total() && ht < hc {
            both += 1;
        }
        lines.push(format!("{}->{}", control.total(), treated.total()));
    }
    ensure(both >= 9, || format!("only {both}/10 seeds reduce both ({})", lines.join(", ")))?;
    Ok(format!("{both}/10 seeds reduce total and hotspot ratio; totals {}", lines.join(", ")))
}

fn prompt_golden() -> Outcome {
    let read = |n: &str| std::fs::read_to_string(fixture(n)).map_err(|e| format!("{n}: {e}"));
    let ctx: DecisionContext = serde_json::from_str(&read("prompt_context.json")?).map_err(|e| e.to_string())?;
    let rendered = render_prompt(&ctx, &PromptTemplate::criminal()).map_err(|e| e.to_string())?;
    ensure(rendered.system_text == read("prompt_golden_system.txt")?, || "system text differs from golden".into())?;
    ensure(rendered.user_text == read("prompt_golden_user.txt")?, || "user text differs from golden".into())?;

    let mut ctx17 = ctx.clone();
    ctx17.targets[0].agent_id = "c17".into();
    let commit =
        parse_decision(r#"{"status": true, "objective_id": "c17", "reasoning": "..."}"#, &ctx17).map_err(|e| e.to_string())?;
    ensure(commit.commit && commit.target_id.as_ref().map(|t| t.as_str()) == Some("c17"), || format!("{commit:?}"))?;
    let none = parse_decision(r#"{"status": false, "reasoning": "low opportunity"}"#, &ctx17).map_err(|e| e.to_string())?;
    ensure(!none.commit && none.reasoning == "low opportunity", || format!("{none:?}"))?;
    let bad = parse_decision(r#"Sure! {"status": true, "objective_id": "zzz", "reasoning": "x"}"#, &ctx17);
    ensure(matches!(bad, Err(crimesim_core::decision::DecisionError::InvalidTarget(Some(ref t))) if t == "zzz"), || {
        format!("{bad:?}")
    })?;
    Ok(format!("golden matched ({} + {} bytes), 3 parse cases", rendered.system_text.len(), rendered.user_text.len()))
}

/// Scores over `ids` whose sample correlation with `human` is exactly `r`:
/// the centred human vector mixed with a unit noise direction made
/// orthogonal to it by Gram-Schmidt.
fn engineered_scores(ids: &[String], human: &BTreeMap<String, f64>, r: f64, seed: u64) -> BTreeMap<String, f64> {
    let h: Vec<f64> = ids.iter().map(|id| human[id]).collect();
    let mean = h.iter().sum::<f64>() / h.len() as f64;
    let hc: Vec<f64> = h.iter().map(|x| x - mean).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let hu: Vec<f64> = hc.iter().map(|x| x / norm(&hc)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e: Vec<f64> = (0..ids.len()).map(|_| rng.random::<f64>() - 0.5).collect();
    let em = e.iter().sum::<f64>() / e.len() as f64;
    e.iter_mut().for_each(|x| *x -= em);
    let dot: f64 = e.iter().zip(&hu).map(|(a, b)| a * b).sum();
    e.iter_mut().zip(&hu).for_each(|(x, u)| *x -= dot * u);
    let en = norm(&e);
    ids.iter().enumerate().map(|(i, id)| (id.clone(), 0.5 + 0.2 * (r * hu[i] + (1.0 - r * r).sqrt() * e[i] / en))).collect()
}

fn alignment_loop() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let human: BTreeMap<String, f64> = (0..60).map(|i| (format!("img{i:03}"), rng.random::<f64>())).collect();
    let ids: Vec<&str> = human.keys().map(String::as_str).collect();
    let cfg = AlignConfig::default();
    let (train, eval) = split_ids(&ids, cfg.train_fraction, cfg.split_seed);

    let prompts = [("initial", 0.42, 0.40), ("revised", 0.80, 0.75), ("worse", 0.60, 0.55)];
    let mut scorer = FixtureScorer::default();
    for (i, (p, r_train, r_eval)) in prompts.iter().enumerate() {
        let mut table = engineered_scores(&train, &human, *r_train, 100 + i as u64);
        table.extend(engineered_scores(&eval, &human, *r_eval, 200 + i as u64));
        scorer.scores.insert(p.to_string(), table);
    }

    let with_target = AlignConfig { target_pearson: Some(0.79), ..cfg.clone() };
    let res = align_prompt(&human, "initial", &scorer, &mut ScriptedOptimizer::new(["revised", "worse"]), &with_target)
        .map_err(|a| a.error.to_string())?;
    let start = res.trace[0].train_pearson.unwrap_or(f64::NAN);
    let best = res.best_train_pearson.unwrap_or(f64::NAN);
    ensure((start - 0.42).abs() < 1e-9, || format!("initial train pearson {start}"))?;
    ensure(res.converged && res.best_prompt == "revised" && best >= 0.79, || format!("converged={} best={best}", res.converged))?;
    ensure(res.trace.len() == 2, || format!("trace length {}", res.trace.len()))?;

    // Without a target the loop keeps going; later worse proposals are not
    // adopted and the best-so-far sequence never drops.
    let res = align_prompt(&human, "initial", &scorer, &mut ScriptedOptimizer::new(["revised", "worse"]), &cfg)
        .map_err(|a| a.error.to_string())?;
    let seq = res.best_so_far();
    ensure(seq.windows(2).all(|w| w[1] >= w[0]), || format!("best-so-far decreased: {seq:?}"))?;
    ensure(res.best_prompt == "revised", || format!("best prompt {}", res.best_prompt))?;
    Ok(format!("train pearson {start:.2} -> {best:.2}, best-so-far {seq:.3?}"))
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt()
}

fn statistics() -> Outcome {
    let row = vec![0.1, 0.4, 0.35, 0.8, 0.55, 0.9];
    let alpha = cronbach_alpha(&[row.clone(), row.clone(), row.clone()]).map_err(|e| e.to_string())?;
    ensure((alpha - 1.0).abs() < 1e-12, || format!("identical raters alpha {alpha}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(3..50);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.6 * v + 0.4 * rng.random::<f64>()).collect();
        let got = pearson(&x, &y).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle_pearson(&x, &y)).abs());
    }
    ensure(worst <= 1e-12, || format!("pearson max deviation {worst:e}"))?;
    Ok(format!("cronbach = {alpha}, pearson max deviation {worst:.1e} over 100 vectors"))
}

fn gateway_bound() -> Outcome {
    let mock = Arc::new(
        MockTransport::new().with_fallback(r#"{"status": false, "reasoning": "ok"}"#).with_delay(Duration::from_millis(5)),
    );
    let config = GatewayConfig::default();
    let limit = config.max_in_flight;
    let gateway = Gateway::new(mock.clone(), config);
    let requests: Vec<CompletionRequest> = (0..200)
        .map(|i| CompletionRequest {
            system_text: "s".into(),
            user_text: format!("u{i}"),
            model: "m".into(),
            temperature: 0.0,
            max_tokens: 16,
            tag: format!("r{i:03}"),
        })
        .collect();
    let results = gateway.complete_batch(&requests);
    ensure(results.len() == 200 && results.values().all(Result::is_ok), || "not every request completed".into())?;
    let peak = mock.peak_in_flight();
    ensure(limit == 64 && peak <= limit, || format!("peak {peak} with limit {limit}"))?;
    Ok(format!("200 requests, peak in flight {peak} (bound {limit})"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("metric oracle equivalence", metric_oracles),
        ("worked hit-rate example", hit_rate_example),
        ("hotspot concentration", zipf_concentration),
        ("JSD bound", jsd_bound),
        ("EPR scaling law", epr_scaling),
        ("determinism", determinism),
        ("routine beats random", routine_beats_random),
        ("scenario monotonicity", scenario_monotonicity),
        ("prompt golden and parse cases", prompt_golden),
        ("alignment loop", alignment_loop),
        ("statistics", statistics),
        ("gateway bound", gateway_bound),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        match std::panic::catch_unwind(f) {
            Ok(Ok(detail)) => println!("PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {name}: panicked");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
