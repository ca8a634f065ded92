//! End-to-end acceptance checks, one PASS/FAIL line each.
//!
//! Training-based checks share one cached output directory, so a second
//! invocation resumes instead of retraining. Set `DIRLAB_ACCEPT_DIR` to move
//! it, or `DIRLAB_ACCEPT_SKIP_TRAINING=1` to report those checks as SKIP.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use dirlab::harness::{
    run_on, run_suite, DeskPreset, Mode, RunOptions, RunRecord, SuiteConfig,
};
use dirlab::mapgen::{generate, validate_topology, MappingConfig, PairSet, StringSpec, Violation};
use dirlab::metrics::{floor, tabular_oracle_loss, MetricsRecord, FloorSpec};
use dirlab::models::{Mlp, MlpConfig, Model, Transformer, TransformerConfig};
use dirlab::numerics::{GradCheckReport, ParameterStore};
use dirlab::report::cli::{gradcheck_mlp, gradcheck_transformer};
use dirlab::report::{aggregate, fmt2, ResultRow, SuiteSummary};
use dirlab::rng::rng_from_seed;
use dirlab::textcodec::{Direction, Vocab};
use rand::Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Outcome::{Fail, Pass, Skip};

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

const LN5: f64 = 1.6094379124341003;
const LN8: f64 = 2.0794415416798357;

fn c1_floors() -> Outcome {
    let cases = [(1usize, 0.0f64, "0.00"), (5, LN5, "1.61"), (8, LN8, "2.08")];
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, expect, printed) in cases {
        let inv = floor(Direction::Inverse, k);
        let fwd = floor(Direction::Forward, k);
        ok &= (inv - expect).abs() <= 1e-12 && fwd == 0.0 && fmt2(inv) == printed;
        parts.push(format!("K={k} {inv:.10}"));
    }
    verdict(ok, parts.join(", "))
}

fn c2_oracle() -> Outcome {
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for k in [1, 5, 8] {
        let ps = generate(&MappingConfig::new(StringSpec::default(), k, 1000, 17)).expect("generate");
        let inv = tabular_oracle_loss(&ps, Direction::Inverse).expect("oracle");
        let fwd = tabular_oracle_loss(&ps, Direction::Forward).expect("oracle");
        let err = (inv.per_sequence - floor(Direction::Inverse, k)).abs();
        worst = worst.max(err);
        ok &= err <= 1e-9 && fwd.per_sequence == 0.0;
    }
    verdict(ok, format!("max |oracle - floor| {worst:.2e} (tol 1e-9), forward oracle 0"))
}

/// Every group is sampled at 32 or more coordinates, or exhaustively when smaller.
fn gradcheck_ok(r: &GradCheckReport, params: &ParameterStore<f32>) -> bool {
    r.passed()
        && r.groups.len() == params.len()
        && r.groups.iter().all(|g| {
            let size = params.get(&g.name).map(|p| p.value.len()).unwrap_or(0);
            g.coords >= 32.min(size) && size > 0
        })
}

fn c3_gradients() -> Outcome {
    let t = gradcheck_transformer(0).expect("transformer gradcheck");
    let m = gradcheck_mlp(0).expect("mlp gradcheck");
    let vocab = Vocab::for_spec(&StringSpec::default()).len();
    let tp = Transformer::new(TransformerConfig::tiny(vocab)).and_then(|m| m.scratch_params(0)).expect("params");
    let mp = Mlp::new(MlpConfig::tiny(2, 6)).and_then(|m| m.scratch_params(0)).expect("params");
    let min_coords = t.groups.iter().chain(&m.groups).map(|g| g.coords).min().unwrap_or(0);
    verdict(
        gradcheck_ok(&t, &tp) && gradcheck_ok(&m, &mp),
        format!(
            "transformer max rel {:.2e} over {} groups, mlp max rel {:.2e} over {} groups, min coords/group {min_coords} (tol 1e-4)",
            t.max_rel_err(),
            t.groups.len(),
            m.max_rel_err(),
            m.groups.len()
        ),
    )
}

fn inject(ps: &PairSet, what: usize) -> PairSet {
    let mut bad = ps.clone();
    match what {
        0 => {
            let a = bad.pairs[0].0.clone();
            bad.pairs[1].0 = a;
        }
        1 => {
            let other = bad.pairs.iter().find(|p| p.1 != bad.pairs[0].1).expect("two targets").1.clone();
            bad.pairs[0].1 = other;
        }
        2 => bad.pairs[0].0.replace_range(0..1, "!"),
        _ => {
            bad.pairs.pop();
        }
    }
    bad
}

fn caught(bad: &PairSet, what: usize) -> bool {
    let v = validate_topology(bad).violations;
    v.iter().any(|x| {
        matches!(
            (what, x),
            (0, Violation::DuplicateSource { .. })
                | (1, Violation::TargetMultiplicity { .. })
                | (2, Violation::MalformedString { .. })
                | (3, Violation::PairCount { .. })
        )
    })
}

fn c4_topology() -> Outcome {
    let mut rng = rng_from_seed(4);
    let (mut valid, mut total, mut injected, mut detected) = (0, 0, 0, 0);
    for k in [1usize, 2, 5, 8] {
        for _ in 0..10 {
            let n = k * rng.gen_range(2..=250usize);
            let seed: u64 = rng.gen();
            let ps = generate(&MappingConfig::new(StringSpec::default(), k, n, seed)).expect("generate");
            total += 1;
            valid += validate_topology(&ps).passed() as usize;
            for what in 0..4 {
                injected += 1;
                detected += caught(&inject(&ps, what), what) as usize;
            }
        }
    }
    verdict(
        valid == total && detected == injected,
        format!("{valid}/{total} generated sets valid, {detected}/{injected} injected violations caught"),
    )
}

fn record<'a>(recs: &'a [RunRecord], regime: &str, k: usize, rank: Option<usize>, d: Direction) -> Option<&'a RunRecord> {
    recs.iter()
        .find(|r| r.regime == regime && r.k == k && r.rank == rank && r.direction == d)
}

fn training_dir() -> PathBuf {
    std::env::var_os("DIRLAB_ACCEPT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

/// Desk-scale runs: scratch Transformer and MLP at K=1 and K=5 in both
/// directions, plus inverse-direction finetuning and LoRA at K=5.
fn training_records() -> Result<Vec<RunRecord>, String> {
    let dir = training_dir();
    let opts = RunOptions::default();
    let arch = SuiteConfig {
        ks: vec![1, 5],
        modes: vec![Mode::Scratch, Mode::Mlp],
        ..SuiteConfig::default()
    };
    let adapt = SuiteConfig {
        ks: vec![5],
        modes: vec![Mode::Finetune, Mode::Lora],
        lora_ranks: vec![8, 64, 256],
        directions: vec![Direction::Inverse],
        ..SuiteConfig::default()
    };
    let mut out = Vec::new();
    for cfg in [arch, adapt] {
        let o = run_suite(&cfg, &dir, &opts).map_err(|e| e.to_string())?;
        if !o.failures.is_empty() {
            return Err(format!("{:?}", o.failures));
        }
        out.extend(o.records);
    }
    Ok(out)
}

fn c5_determinism(recs: &[RunRecord]) -> Outcome {
    let Some(first) = record(recs, "scratch", 1, None, Direction::Forward) else {
        return Fail("no K=1 scratch forward record".into());
    };
    let cfg = first.config.clone();
    let ps = generate(&cfg.mapping).expect("generate");
    let again = match run_on(&cfg, &ps, None, &RunOptions::default()) {
        Ok(r) => r,
        Err(e) => return Fail(e.to_string()),
    };
    let same = again.step_losses == first.step_losses && again.loss_curve() == first.loss_curve();
    verdict(
        same && again.metrics == first.metrics,
        format!(
            "{} steps, epoch curves {} (final {:.6} vs {:.6})",
            again.steps,
            if same { "bit-identical" } else { "differ" },
            again.final_loss(),
            first.final_loss()
        ),
    )
}

fn summary(recs: &[RunRecord]) -> SuiteSummary {
    aggregate(&recs.iter().map(ResultRow::from_record).collect::<Vec<_>>())
}

fn c6_symmetry(s: &SuiteSummary) -> Outcome {
    let Some(row) = s.get("scratch", 1, None) else {
        return Fail("missing K=1 scratch cell".into());
    };
    let (Some(f), Some(i), Some(gap)) = (row.forward, row.inverse, row.gap()) else {
        return Fail("incomplete K=1 scratch cell".into());
    };
    let bound = f64::max(0.1, 0.1 * (f.excess + i.excess) / 2.0);
    verdict(
        gap.abs() <= bound,
        format!("excess fwd {:.3} inv {:.3}, |gap| {:.3} <= {bound:.3}", f.excess, i.excess, gap.abs()),
    )
}

fn c7_gap_trend(s: &SuiteSummary) -> Outcome {
    let t = s.get("scratch", 5, None).and_then(|r| r.gap());
    let m = s.get("mlp", 5, None).and_then(|r| r.gap());
    let (Some(t), Some(m)) = (t, m) else {
        return Fail("missing K=5 scratch or MLP cell".into());
    };
    verdict(
        t >= 0.2 && t > m && m <= 0.3,
        format!("K=5 gap transformer {t:.3} (>= 0.2), mlp {m:.3} (<= 0.3, < transformer)"),
    )
}

fn c8_lora(recs: &[RunRecord]) -> Outcome {
    let inv = |regime: &str, rank| record(recs, regime, 5, rank, Direction::Inverse);
    let (Some(ft), Some(r8), Some(r64), Some(r256)) =
        (inv("finetune", None), inv("lora", Some(8)), inv("lora", Some(64)), inv("lora", Some(256)))
    else {
        return Fail("missing finetune or LoRA records".into());
    };
    let matched = [r8, r64, r256].iter().all(|r| r.steps == ft.steps);
    let (e_ft, e8, e64, e256) = (ft.excess(), r8.excess(), r64.excess(), r256.excess());
    let ok = matched && e8 > e_ft && e64 <= e8 + 0.05 && e256 <= e64 + 0.05;
    verdict(
        ok,
        format!(
            "inverse excess FT {e_ft:.3}, r8 {e8:.3}, r64 {e64:.3}, r256 {e256:.3}; {} steps each{}",
            ft.steps,
            if matched { "" } else { " (budgets differ)" }
        ),
    )
}

fn c9_memorization() -> Outcome {
    let mut p = DeskPreset {
        n_pairs: 16,
        ..DeskPreset::default()
    };
    for o in [&mut p.optim, &mut p.mlp_optim] {
        o.batch_size = 16;
        o.epochs = 2000;
    }
    let mut parts = Vec::new();
    let mut ok = true;
    for mode in [Mode::Scratch, Mode::Mlp] {
        let cfg = p.run_config(1, mode, None, Direction::Forward, 9).expect("config");
        let ps = generate(&cfg.mapping).expect("generate");
        match run_on(&cfg, &ps, None, &RunOptions::default()) {
            Ok(r) => {
                ok &= r.steps <= 2000 && r.final_loss() < 0.01;
                parts.push(format!("{} {:.5} after {} steps", r.model_family, r.final_loss(), r.steps));
            }
            Err(e) => {
                ok = false;
                parts.push(e.to_string());
            }
        }
    }
    verdict(ok, parts.join(", "))
}

/// Observed loss rebuilt as a result row with its floor and excess.
fn fixture_row(regime: &str, k: usize, rank: Option<usize>, d: Direction, observed: f64) -> ResultRow {
    let m = MetricsRecord::new(observed, &FloorSpec::new(d, k).expect("floor"));
    ResultRow {
        k,
        regime: regime.into(),
        rank,
        direction: d,
        floor: m.floor_nats,
        observed: m.observed_nats,
        excess: m.excess_nats,
        gap: None,
        seconds: 0.0,
        params_total: 0,
        params_trainable: 0,
    }
}

fn c10_arithmetic() -> Outcome {
    use Direction::{Forward as F, Inverse as I};
    let fl = |k| floor(I, k);
    let mut rows = Vec::new();
    // Architecture table: printed excess, observed = excess + floor.
    for (regime, k, ef, ei) in [
        ("scratch", 1, 3.60, 3.60),
        ("scratch", 5, 0.91, 2.07),
        ("scratch", 8, 0.67, 1.57),
        ("mlp", 1, 0.48, 0.50),
        ("mlp", 5, 0.46, 0.69),
        ("mlp", 8, 0.42, 0.53),
    ] {
        rows.push(fixture_row(regime, k, None, F, ef));
        rows.push(fixture_row(regime, k, None, I, ei + fl(k)));
    }
    // Finetuning table: forward excess and inverse total loss.
    for (regime, k, fwd, inv_total) in [
        ("finetune", 1, 3.03, 3.04),
        ("finetune", 5, 1.41, 3.08),
        ("finetune_reg", 5, 1.37, 3.01),
        ("finetune", 8, 1.17, 3.07),
        ("finetune_reg", 8, 1.14, 2.99),
    ] {
        rows.push(fixture_row(regime, k, None, F, fwd));
        rows.push(fixture_row(regime, k, None, I, inv_total));
    }
    // LoRA table: observed losses per direction.
    for (k, r, fwd, inv) in [
        (5, 8, 4.97, 5.06),
        (5, 64, 2.03, 4.85),
        (5, 256, 1.82, 4.75),
        (8, 8, 4.85, 5.06),
        (8, 64, 1.66, 4.85),
        (8, 256, 1.60, 4.75),
    ] {
        rows.push(fixture_row("lora", k, Some(r), F, fwd));
        rows.push(fixture_row("lora", k, Some(r), I, inv));
    }
    let s = aggregate(&rows);

    // (regime, K, rank, column, printed value); column is fwd, inv or gap.
    let expected: &[(&str, usize, Option<usize>, &str, f64)] = &[
        ("scratch", 1, None, "fwd", 3.60),
        ("scratch", 1, None, "inv", 3.60),
        ("scratch", 1, None, "gap", 0.00),
        ("scratch", 5, None, "fwd", 0.91),
        ("scratch", 5, None, "inv", 2.07),
        ("scratch", 5, None, "gap", 1.16),
        ("scratch", 8, None, "fwd", 0.67),
        ("scratch", 8, None, "inv", 1.57),
        ("scratch", 8, None, "gap", 0.90),
        ("mlp", 1, None, "fwd", 0.48),
        ("mlp", 1, None, "inv", 0.50),
        ("mlp", 1, None, "gap", 0.01),
        ("mlp", 5, None, "fwd", 0.46),
        ("mlp", 5, None, "inv", 0.69),
        ("mlp", 5, None, "gap", 0.22),
        ("mlp", 8, None, "fwd", 0.42),
        ("mlp", 8, None, "inv", 0.53),
        ("mlp", 8, None, "gap", 0.11),
        ("finetune", 1, None, "fwd", 3.03),
        ("finetune", 1, None, "inv", 3.04),
        ("finetune", 5, None, "fwd", 1.41),
        ("finetune", 5, None, "inv", 1.47),
        ("finetune_reg", 5, None, "fwd", 1.37),
        ("finetune_reg", 5, None, "inv", 1.40),
        ("finetune", 8, None, "fwd", 1.17),
        ("finetune", 8, None, "inv", 0.99),
        ("finetune_reg", 8, None, "fwd", 1.14),
        ("finetune_reg", 8, None, "inv", 0.91),
        ("lora", 5, Some(8), "fwd", 4.97),
        ("lora", 5, Some(8), "inv", 3.45),
        ("lora", 5, Some(64), "fwd", 2.03),
        ("lora", 5, Some(64), "inv", 3.24),
        ("lora", 5, Some(256), "fwd", 1.82),
        ("lora", 5, Some(256), "inv", 3.15),
        ("lora", 8, Some(8), "fwd", 4.85),
        ("lora", 8, Some(8), "inv", 2.98),
        ("lora", 8, Some(64), "fwd", 1.66),
        ("lora", 8, Some(64), "inv", 2.77),
        ("lora", 8, Some(256), "fwd", 1.60),
        ("lora", 8, Some(256), "inv", 2.67),
    ];

    let mut exact = 0;
    let mut rounding_limited = Vec::new();
    let mut wrong = Vec::new();
    for &(regime, k, rank, col, printed) in expected {
        let row = s.get(regime, k, rank).expect("fixture cell");
        let (fwd, inv) = (row.forward.expect("fwd"), row.inverse.expect("inv"));
        let value = match col {
            "fwd" => fwd.excess,
            "inv" => inv.excess,
            _ => row.gap().expect("gap"),
        };
        if fmt2(value) == fmt2(printed) {
            exact += 1;
            continue;
        }
        // Inputs are themselves rounded to 2 decimals, so each carries +-0.005.
        // A mismatch is still consistent if some admissible inputs produce the
        // printed value after rounding.
        let spread = if col == "gap" { 0.01 } else { 0.005 };
        let (lo, hi) = (value - spread, value + spread);
        let consistent = lo <= printed + 0.005 && printed - 0.005 <= hi;
        let cell = format!("{regime} K={k}{} {col}: {} vs {}", rank.map(|r| format!(" r{r}")).unwrap_or_default(), fmt2(value), fmt2(printed));
        if consistent {
            rounding_limited.push(cell);
        } else {
            wrong.push(cell);
        }
    }
    let detail = format!(
        "{exact}/{} cells exact at 2 decimals; rounding-limited but interval-consistent: [{}]{}",
        expected.len(),
        rounding_limited.join("; "),
        if wrong.is_empty() { String::new() } else { format!("; wrong: [{}]", wrong.join("; ")) }
    );
    verdict(wrong.is_empty(), detail)
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        results.push((n, name, o, t.elapsed().as_secs_f64()));
    };
    timed(1, "floor exactness", &mut c1_floors);
    timed(2, "floor attainability oracle", &mut c2_oracle);
    timed(3, "gradient fidelity", &mut c3_gradients);
    timed(4, "topology invariants", &mut c4_topology);

    let skip_training = std::env::var("DIRLAB_ACCEPT_SKIP_TRAINING").is_ok_and(|v| v == "1");
    if skip_training {
        for (n, name) in [
            (5, "determinism"),
            (6, "K=1 directional symmetry"),
            (7, "directional gap trend"),
            (8, "LoRA capacity trend"),
            (9, "memorization sanity"),
        ] {
            timed(n, name, &mut || Skip("DIRLAB_ACCEPT_SKIP_TRAINING=1".into()));
        }
    } else {
        let t = Instant::now();
        let recs = training_records();
        eprintln!("desk runs ready in {:.0} s under {}", t.elapsed().as_secs_f64(), training_dir().display());
        match recs {
            Ok(recs) => {
                let s = summary(&recs);
                timed(5, "determinism", &mut || c5_determinism(&recs));
                timed(6, "K=1 directional symmetry", &mut || c6_symmetry(&s));
                timed(7, "directional gap trend", &mut || c7_gap_trend(&s));
                timed(8, "LoRA capacity trend", &mut || c8_lora(&recs));
            }
            Err(e) => {
                for (n, name) in [
                    (5, "determinism"),
                    (6, "K=1 directional symmetry"),
                    (7, "directional gap trend"),
                    (8, "LoRA capacity trend"),
                ] {
                    timed(n, name, &mut || Fail(format!("desk runs failed: {e}")));
                }
            }
        }
        timed(9, "memorization sanity", &mut c9_memorization);
    }
    timed(10, "arithmetic reproduction", &mut c10_arithmetic);

    let mut failed = 0;
    for (n, name, outcome, secs) in &results {
        let (tag, detail) = match outcome {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("criterion {n:>2} {tag} {name}: {detail} [{secs:.1} s]");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
