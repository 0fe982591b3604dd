//! Acceptance gate: one check per criterion, one printed pass/fail line
//! each, all run in a single test so the lines come out in order.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the
//! per-criterion lines on success.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;

use fsd_core::decoding::{
    compute_metrics, decode, residual_dist, sd_accept_prob, AcceptancePolicy, DraftingConfig,
    SamplingMode,
};
use fsd_core::divergence::DivergenceKind;
use fsd_core::models::{generate_pair, SyntheticPairSpec, TableModel};
use fsd_core::oracle::{enumerate_fsd_dist, enumerate_target_dist, sequence_divergence};
use fsd_core::prob::{ProbDist, TokenId};
use fsd_core::rng::RngStream;
use fsd_lab::config::ExperimentConfig;
use fsd_lab::corpus::{PromptRecord, Split};
use fsd_lab::remote::{RemoteModel, RemoteModelConfig, Transport};
use fsd_lab::sweep::{emit_reports, run_sweep};
use fsd_lab::tuning::tune_threshold_on_dev;
use fsd_lab::verify::{run_suite, Suite};
use fsd_lab::LabError;
use rayon::prelude::*;

type CheckResult = Result<String, String>;

fn pair(seed: u64, vocab: usize, alpha: f64) -> (TableModel, TableModel) {
    generate_pair(&SyntheticPairSpec {
        seed,
        vocab_size: vocab,
        order: 1,
        alpha,
        noise_temperature: 1.0,
    })
    .unwrap()
}

/// Composed acceptance + residual law equals the target law entrywise,
/// within 1e-12, over 1000 random pairs.
fn criterion_1() -> CheckResult {
    let mut rng = RngStream::new(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let vocab = 2 + (rng.next_u64() % 63) as usize;
        let wt: Vec<f64> = (0..vocab).map(|_| rng.next_f64()).collect();
        let wd: Vec<f64> = (0..vocab).map(|_| 1e-3 + rng.next_f64()).collect();
        let p_t = ProbDist::normalize(&wt).unwrap();
        let p_d = ProbDist::normalize(&wd).unwrap();
        let reject_mass: f64 = p_d
            .probs()
            .iter()
            .zip(p_t.probs())
            .map(|(&d, &t)| d * (1.0 - sd_accept_prob(t, d).unwrap()))
            .sum();
        let residual = (reject_mass > 0.0).then(|| residual_dist(&p_t, &p_d).unwrap());
        for i in 0..vocab {
            let tok = TokenId(i as u32);
            let emitted = p_d.prob(tok) * sd_accept_prob(p_t.prob(tok), p_d.prob(tok)).unwrap()
                + residual.as_ref().map_or(0.0, |r| reject_mass * r.prob(tok));
            worst = worst.max((emitted - p_t.prob(tok)).abs());
        }
    }
    if worst <= 1e-12 {
        Ok(format!("max entry error {worst:.2e} over 1000 pairs"))
    } else {
        Err(format!("entry error {worst:.2e} exceeds 1e-12"))
    }
}

fn suite_check(suite: Suite, seed: u64) -> CheckResult {
    let outcome = run_suite(suite, seed).map_err(|e| e.to_string())?;
    let line = format!("{}/{} instances", outcome.passed, outcome.total);
    if outcome.pass {
        Ok(line)
    } else {
        Err(line)
    }
}

/// KL and TV sequence bounds on 100 instances; JS slack reported only.
fn criterion_3() -> CheckResult {
    let outcome = run_suite(Suite::FsdBound, 103).map_err(|e| e.to_string())?;
    let mut js_min_slack = f64::INFINITY;
    let mut js_violations = 0;
    for record in &outcome.records {
        let slack = record["kinds"]["js"]["slack"].as_f64().unwrap();
        js_min_slack = js_min_slack.min(slack);
        if slack < 0.0 {
            js_violations += 1;
        }
    }
    let line = format!(
        "kl+tv {}/{}; js reported only: min slack {js_min_slack:.3e}, {js_violations} flagged",
        outcome.passed, outcome.total
    );
    if outcome.pass {
        Ok(line)
    } else {
        Err(line)
    }
}

/// T = 0 reproduces the target distribution exactly; a threshold above
/// every reachable divergence accepts every candidate.
fn criterion_5() -> CheckResult {
    for seed in 0..5u64 {
        let (target, draft) = pair(500 + seed, 4, 0.4);
        let prompt = [TokenId((seed % 4) as u32)];
        let fsd0 =
            enumerate_fsd_dist(&target, &draft, &prompt, 3, DivergenceKind::Js, 0.0, 2, true)
                .map_err(|e| e.to_string())?;
        let tgt = enumerate_target_dist(&target, &prompt, 3).map_err(|e| e.to_string())?;
        let tv = sequence_divergence(DivergenceKind::Tv, &tgt, &fsd0).map_err(|e| e.to_string())?;
        if tv > 1e-12 {
            return Err(format!("T=0 instance {seed}: tv {tv:.2e} > 1e-12"));
        }

        // JS never reaches ln 2 on overlapping supports, so T = 0.7 sits
        // above every per-context divergence of the instance.
        let cfg = DraftingConfig {
            candidate_length: 3,
            draft_mode: SamplingMode::Sampled { temperature: 1.0 },
            ..DraftingConfig::default()
        };
        let mut rng = RngStream::new(seed);
        // 16 tokens = 4 full blocks of 3 candidates + bonus.
        let (_, trace) = decode(
            &target,
            &draft,
            &prompt,
            &AcceptancePolicy::Fsd {
                kind: DivergenceKind::Js,
                threshold: 0.7,
            },
            &cfg,
            16,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let metrics = compute_metrics(&trace);
        if metrics.acceptance_pct != 100.0 {
            return Err(format!(
                "high-T instance {seed}: acceptance {}% != 100%",
                metrics.acceptance_pct
            ));
        }
    }
    Ok("5 instances: T=0 tv <= 1e-12, high-T acceptance 100%".into())
}

/// 10^5 seeded decodes per instance against the exact enumeration.
fn criterion_6() -> CheckResult {
    let runs: u64 = 100_000;
    let mut worst: f64 = 0.0;
    for instance in 0..10u64 {
        let (target, draft) = pair(600 + instance, 3, 0.3 + 0.05 * instance as f64);
        let prompt = [TokenId((instance % 3) as u32)];
        let threshold = 0.05 + 0.03 * instance as f64;
        let kind = DivergenceKind::Js;
        let cfg = DraftingConfig {
            candidate_length: 2,
            draft_mode: SamplingMode::Sampled { temperature: 1.0 },
            ..DraftingConfig::default()
        };
        let exact = enumerate_fsd_dist(&target, &draft, &prompt, 3, kind, threshold, 2, true)
            .map_err(|e| e.to_string())?;
        let root = RngStream::new(6000 + instance);
        let counts = (0..runs)
            .into_par_iter()
            .fold(BTreeMap::<Vec<TokenId>, u64>::new, |mut acc, run| {
                let mut rng = root.derive(run);
                let (tokens, _) = decode(
                    &target,
                    &draft,
                    &prompt,
                    &AcceptancePolicy::Fsd { kind, threshold },
                    &cfg,
                    3,
                    &mut rng,
                )
                .expect("table decode cannot fail");
                *acc.entry(tokens).or_insert(0) += 1;
                acc
            })
            .reduce(BTreeMap::new, |mut a, b| {
                for (k, v) in b {
                    *a.entry(k).or_insert(0) += v;
                }
                a
            });
        let mut tv = 0.0;
        for (seq, p) in exact.iter() {
            let emp = counts.get(seq).copied().unwrap_or(0) as f64 / runs as f64;
            tv += (p - emp).abs();
        }
        for (seq, &c) in &counts {
            if exact.prob(seq) == 0.0 {
                tv += c as f64 / runs as f64;
            }
        }
        tv *= 0.5;
        worst = worst.max(tv);
        if tv > 0.02 {
            return Err(format!("instance {instance}: tv {tv:.4} > 0.02"));
        }
    }
    Ok(format!("10 instances x 1e5 decodes, worst tv {worst:.4}"))
}

/// Acceptance % and ALen non-decreasing in T with greedy drafting, and
/// draft-sourced token fraction non-decreasing in alignment.
fn criterion_7() -> CheckResult {
    for instance in 0..20u64 {
        let (target, draft) = pair(700 + instance, 6, 0.5);
        let prompt = [TokenId((instance % 6) as u32)];
        let cfg = DraftingConfig {
            candidate_length: 4,
            draft_mode: SamplingMode::Greedy,
            rejection_sampling: SamplingMode::Greedy,
            ..DraftingConfig::default()
        };
        let mut prev = (-1.0, -1.0);
        for step in 0..=10 {
            let threshold = step as f64 * 0.1;
            let mut rng = RngStream::new(0);
            let (_, trace) = decode(
                &target,
                &draft,
                &prompt,
                &AcceptancePolicy::Fsd {
                    kind: DivergenceKind::Js,
                    threshold,
                },
                &cfg,
                40,
                &mut rng,
            )
            .map_err(|e| e.to_string())?;
            let m = compute_metrics(&trace);
            if m.acceptance_pct < prev.0 - 1e-9 || m.acceptance_length < prev.1 - 1e-9 {
                return Err(format!(
                    "instance {instance}, T={threshold}: acceptance not monotone"
                ));
            }
            prev = (m.acceptance_pct, m.acceptance_length);
        }
    }

    // Alignment direction: mean draft-token fraction at a fixed matched
    // grid point, across the alpha knob.
    let mut prev_mean = -1.0;
    for &alpha in &[0.1, 0.3, 0.5, 0.7, 0.9] {
        let mut total = 0.0;
        let instances = 30;
        for seed in 0..instances {
            let (target, draft) = pair(7700 + seed, 6, alpha);
            let prompt = [TokenId((seed % 6) as u32)];
            let cfg = DraftingConfig {
                candidate_length: 4,
                draft_mode: SamplingMode::Greedy,
                rejection_sampling: SamplingMode::Greedy,
                ..DraftingConfig::default()
            };
            let mut rng = RngStream::new(0);
            let (_, trace) = decode(
                &target,
                &draft,
                &prompt,
                &AcceptancePolicy::Fsd {
                    kind: DivergenceKind::Js,
                    threshold: 0.3,
                },
                &cfg,
                40,
                &mut rng,
            )
            .map_err(|e| e.to_string())?;
            total += compute_metrics(&trace).pct_from_draft;
        }
        let mean = total / instances as f64;
        if mean < prev_mean - 1e-9 {
            return Err(format!(
                "mean draft fraction fell from {prev_mean:.4} to {mean:.4} at alpha {alpha}"
            ));
        }
        prev_mean = mean;
    }
    Ok("20 instances monotone in T; draft fraction monotone in alignment".into())
}

/// Dev-size tuning error shrinks: mean |dev - test| proxy-speed error at
/// n = 32 no worse than at n = 4, for every tested threshold.
fn criterion_9() -> CheckResult {
    let cfg: ExperimentConfig = toml::from_str(
        r#"
max_new_tokens = 16
seeds = [1]

[models]
kind = "synthetic"
seed = 90
vocab_size = 8
order = 1
alpha = 0.1

[drafting]
candidate_length = 4
draft_mode = "sampled"

[sweep]
policies = [{ kind = "fsd", divergence = "js" }]
# Straddles the instance's per-context divergences (roughly 0.03-0.09),
# so acceptance actually varies from prompt to prompt.
t_grid = [0.04, 0.05, 0.06, 0.07, 0.08]
l_grid = [4]
"#,
    )
    .unwrap();
    let models = fsd_lab::config::build_models(&cfg.models, std::path::Path::new("."))
        .map_err(|e| e.to_string())?;

    let mut rng = RngStream::new(9090);
    let make = |n: usize, split: Split, rng: &mut RngStream| -> Vec<PromptRecord> {
        (0..n)
            .map(|i| {
                let len = 1 + (rng.next_u64() % 3) as usize;
                PromptRecord {
                    id: format!("{split:?}-{i}"),
                    tokens: (0..len).map(|_| (rng.next_u64() % 8) as u32).collect(),
                    split,
                }
            })
            .collect()
    };
    let train = make(512, Split::Train, &mut rng);
    let test = make(128, Split::Test, &mut rng);
    let train_refs: Vec<&PromptRecord> = train.iter().collect();
    let test_refs: Vec<&PromptRecord> = test.iter().collect();

    let rows = tune_threshold_on_dev(
        &cfg,
        &models,
        &train_refs,
        &test_refs,
        &cfg.sweep.policies[0],
        &[4, 8, 16, 32],
        10,
        909,
    )
    .map_err(|e| e.to_string())?;

    let error_at = |t: f64, n: usize| -> f64 {
        rows.iter()
            .find(|r| r.threshold == t && r.dev_size == n)
            .expect("row present")
            .mean_abs_pct_error
    };
    for &t in &cfg.sweep.t_grid {
        let e4 = error_at(t, 4);
        let e32 = error_at(t, 32);
        if e32 > e4 {
            return Err(format!("T={t}: error at n=32 ({e32:.3}%) > n=4 ({e4:.3}%)"));
        }
    }
    let worst_ratio = cfg
        .sweep
        .t_grid
        .iter()
        .map(|&t| error_at(t, 32) / error_at(t, 4).max(1e-12))
        .fold(0.0f64, f64::max);
    Ok(format!(
        "512-prompt corpus, 10 trials: n=32 error <= n=4 error at all 5 thresholds (worst ratio {worst_ratio:.2})"
    ))
}

/// Benchmark accuracies and tokens/sec from the source tables need real
/// LLMs and GPUs; this artifact asserts the distributional criteria above
/// instead and only reproduces the metrics table schema.
fn criterion_10(metrics_csv_header: &str) -> CheckResult {
    let expected =
        "policy,kind,T,L,seed,tokens,ALen,accept_pct,pct_md,target_calls,draft_calls,proxy_speed";
    if metrics_csv_header == expected {
        Ok("not desk-reproducible by design; metrics.csv schema verified".into())
    } else {
        Err(format!("schema drifted: {metrics_csv_header}"))
    }
}

/// Byte-identical reports on identical configs; 1000 clean echo-server
/// round trips; malformed row sum rejected.
fn criterion_11() -> Result<(String, String), String> {
    let cfg: ExperimentConfig = toml::from_str(
        r#"
max_new_tokens = 12
seeds = [1, 2]

[models]
kind = "synthetic"
seed = 4
vocab_size = 5
order = 1
alpha = 0.6

[sweep]
policies = [{ kind = "sd" }, { kind = "fsd", divergence = "js" }]
t_grid = [0.0, 0.2]
l_grid = [3]
"#,
    )
    .unwrap();
    let models = fsd_lab::config::build_models(&cfg.models, std::path::Path::new("."))
        .map_err(|e| e.to_string())?;
    let prompts: Vec<PromptRecord> = (0..4)
        .map(|i| PromptRecord {
            id: format!("p{i}"),
            tokens: vec![i as u32],
            split: Split::Test,
        })
        .collect();
    let refs: Vec<&PromptRecord> = prompts.iter().collect();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let result = run_sweep(&cfg, &models, &refs);
        if !result.errors.is_empty() {
            return Err(format!("sweep errors: {:?}", result.errors));
        }
        let dir = std::env::temp_dir().join(format!("fsd-acceptance-det-{run}"));
        let _ = std::fs::remove_dir_all(&dir);
        emit_reports(&result, &dir).map_err(|e| e.to_string())?;
        outputs.push((
            std::fs::read(dir.join("metrics.csv")).map_err(|e| e.to_string())?,
            std::fs::read(dir.join("summary.json")).map_err(|e| e.to_string())?,
        ));
    }
    if outputs[0] != outputs[1] {
        return Err("reports differ between identical runs".into());
    }
    let header = String::from_utf8_lossy(&outputs[0].0)
        .lines()
        .next()
        .unwrap_or_default()
        .to_string();

    // Echo server round trips.
    let model = RemoteModel::connect(&RemoteModelConfig {
        transport: Transport::Subprocess(vec![
            env!("CARGO_BIN_EXE_fsdlab").to_string(),
            "serve-echo".to_string(),
            "--vocab-size".to_string(),
            "6".to_string(),
        ]),
        timeout_ms: 5000,
        vocab_size: 6,
    })
    .map_err(|e| e.to_string())?;
    for i in 0..1000u32 {
        let tokens: Vec<TokenId> = (0..1 + i % 4).map(|t| TokenId(t % 6)).collect();
        let rows = model
            .request_dists(&tokens, 0)
            .map_err(|e| format!("round trip {i}: {e}"))?;
        if rows.len() != tokens.len() {
            return Err(format!("round trip {i}: wrong row count"));
        }
    }

    // Malformed sum over a scripted TCP server.
    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().map_err(|e| e.to_string())?.to_string();
    std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut stream = stream;
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        stream
            .write_all(b"{\"type\":\"hello\",\"vocab_size\":2,\"name\":\"bad\"}\n")
            .unwrap();
        line.clear();
        reader.read_line(&mut line).unwrap();
        stream
            .write_all(b"{\"type\":\"dists\",\"id\":0,\"probs\":[[0.25,0.25]]}\n")
            .unwrap();
    });
    let bad = RemoteModel::connect(&RemoteModelConfig {
        transport: Transport::Tcp(addr),
        timeout_ms: 2000,
        vocab_size: 2,
    })
    .map_err(|e| e.to_string())?;
    match bad.request_dists(&[TokenId(0), TokenId(1)], 1) {
        Err(LabError::ProtocolViolation(_)) => {}
        other => return Err(format!("expected ProtocolViolation, got {other:?}")),
    }
    Ok((
        "byte-identical reports; 1000/1000 echo round trips; malformed sum rejected".into(),
        header,
    ))
}

#[test]
fn acceptance_criteria() {
    let mut failures = Vec::new();
    let mut report = |n: usize, label: &str, result: CheckResult| match result {
        Ok(detail) => println!("criterion {n:2} [{label}]: PASS - {detail}"),
        Err(detail) => {
            println!("criterion {n:2} [{label}]: FAIL - {detail}");
            failures.push(n);
        }
    };

    report(1, "per-step sd identity", criterion_1());
    report(
        2,
        "sequence sd equivalence",
        suite_check(Suite::SdEquivalence, 102),
    );
    report(3, "fsd divergence bound", criterion_3());
    report(
        4,
        "rfsd(0) bitwise sd",
        suite_check(Suite::RfsdReduction, 104),
    );
    report(5, "fsd endpoints", criterion_5());
    report(6, "decode vs oracle", criterion_6());
    report(7, "monotonicity", criterion_7());
    report(
        8,
        "random-baseline dominance",
        suite_check(Suite::RandomBaseline, 108),
    );
    report(9, "tuning trend", criterion_9());

    let (c11, header) = match criterion_11() {
        Ok((detail, header)) => (Ok(detail), header),
        Err(e) => (Err(e), String::new()),
    };
    report(10, "table schema only", criterion_10(&header));
    report(11, "determinism & protocol", c11);

    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
