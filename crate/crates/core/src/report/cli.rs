//! Command-line entry point.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::{aggregate, emit_plots, fmt2, render_tables, result_rows, write_csv};
use crate::error::{Error, Result};
use crate::harness::{
    default_out_dir, read_records, run_on, run_suite, suite_pretrain, DeskPreset, Mode, RunOptions,
    SuiteConfig, RECORDS_FILE,
};
use crate::mapgen::{check_uniformity, generate, validate_topology, MappingConfig, StringSpec};
use crate::metrics::{floor, tabular_oracle_loss};
use crate::models::{Mlp, MlpConfig, MlpExample, Model, Transformer, TransformerConfig};
use crate::numerics::{grad_check, GradCheckConfig, GradCheckReport};
use crate::textcodec::{encode_example, Direction, TaskInstance, Vocab};

#[derive(Parser, Debug)]
#[command(name = "dirlab", about = "Directional learning lab: forward vs inverse mappings")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a pair set and check its topology.
    Gen {
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 4000)]
        n_pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output TSV; printed to stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one configuration (both directions unless --direction is given).
    Run {
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value = "scratch")]
        mode: Mode,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        direction: Option<Direction>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the sweep over K, modes and LoRA ranks, then write the report.
    Suite {
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<Mode>>,
        #[arg(long, value_delimiter = ',')]
        lora_ranks: Option<Vec<usize>>,
        /// JSON suite config; flags override its fields.
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Tables, CSV and plots from a directory of run records.
    Report { dir: PathBuf },
    /// Loss of the exact conditional lookup table against the floors.
    Oracle {
        #[arg(long, value_delimiter = ',', default_value = "1,5,8")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        n_pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of both model families at tiny size.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (default: $DIRLAB_OUT or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch progress on stderr.
    #[arg(long)]
    progress: bool,
}

impl Common {
    fn apply(&self, p: &mut DeskPreset) {
        if let Some(n) = self.n_pairs {
            p.n_pairs = n;
        }
        if let Some(e) = self.epochs {
            p.optim.epochs = e;
            p.mlp_optim.epochs = e;
        }
        if let Some(lr) = self.lr {
            p.optim.base_lr = lr;
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(default_out_dir)
    }

    fn opts(&self) -> RunOptions {
        RunOptions { progress: self.progress }
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Gen { k, n_pairs, seed, out } => cmd_gen(k, n_pairs, seed, out.as_deref()),
        Cmd::Run {
            k,
            mode,
            rank,
            direction,
            common,
        } => cmd_run(k, mode, rank, direction, &common),
        Cmd::Suite {
            k,
            modes,
            lora_ranks,
            matrix,
            common,
        } => {
            let mut cfg = match matrix {
                Some(p) => SuiteConfig::from_json_file(&p)?,
                None => SuiteConfig::default(),
            };
            if let Some(k) = k {
                cfg.ks = k;
            }
            if let Some(m) = modes {
                cfg.modes = m;
            }
            if let Some(r) = lora_ranks {
                cfg.lora_ranks = r;
            }
            cfg.base_seed = common.seed;
            common.apply(&mut cfg.preset);
            cmd_suite(&cfg, &common.out_dir(), &common.opts())
        }
        Cmd::Report { dir } => write_report(&dir).map(|_| 0),
        Cmd::Oracle { k, n_pairs, seed } => cmd_oracle(&k, n_pairs, seed),
        Cmd::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

fn cmd_gen(k: usize, n_pairs: usize, seed: u64, out: Option<&Path>) -> Result<i32> {
    let ps = generate(&MappingConfig::new(StringSpec::default(), k, n_pairs, seed))?;
    let topo = validate_topology(&ps);
    let uni = check_uniformity(&ps, 5.0);
    match out {
        Some(p) => {
            ps.save(p)?;
            eprintln!("wrote {} pairs to {}", ps.len(), p.display());
        }
        None => ps.write_tsv(std::io::stdout().lock())?,
    }
    eprintln!("topology: {topo:?}");
    eprintln!("uniformity: {uni:?}");
    Ok(if topo.passed() && uni.passed() { 0 } else { 1 })
}

fn cmd_run(k: usize, mode: Mode, rank: Option<usize>, direction: Option<Direction>, common: &Common) -> Result<i32> {
    let mut preset = DeskPreset::default();
    common.apply(&mut preset);
    let out_dir = common.out_dir();
    fs::create_dir_all(&out_dir)?;
    let dirs = match direction {
        Some(d) => vec![d],
        None => Direction::BOTH.to_vec(),
    };
    let configs = dirs
        .iter()
        .map(|&d| preset.run_config(k, mode, rank, d, common.seed))
        .collect::<Result<Vec<_>>>()?;
    let ps = generate(&configs[0].mapping)?;
    let base = if configs[0].regime.needs_base() {
        let suite = SuiteConfig {
            preset: preset.clone(),
            base_seed: common.seed,
            ..SuiteConfig::default()
        };
        Some(suite_pretrain(&suite, &out_dir, &common.opts())?)
    } else {
        None
    };
    let mut sink = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join(RECORDS_FILE))?;
    for c in &configs {
        let r = run_on(c, &ps, base.as_ref(), &common.opts())?;
        writeln!(sink, "{}", serde_json::to_string(&r)?)?;
        println!(
            "{}: loss {} floor {} excess {}{}",
            r.label,
            fmt2(r.final_loss()),
            fmt2(r.metrics.floor_nats),
            fmt2(r.excess()),
            if r.below_floor { " (below floor)" } else { "" }
        );
    }
    Ok(0)
}

fn cmd_suite(cfg: &SuiteConfig, out_dir: &Path, opts: &RunOptions) -> Result<i32> {
    let outcome = run_suite(cfg, out_dir, opts)?;
    eprintln!(
        "{} runs complete ({} resumed), {} failed",
        outcome.records.len(),
        outcome.resumed,
        outcome.failures.len()
    );
    for (label, err) in &outcome.failures {
        eprintln!("failed {label}: {err}");
    }
    write_report(out_dir)?;
    Ok(if outcome.failures.is_empty() { 0 } else { 1 })
}

/// Reads `records.jsonl` under `dir` and writes `results.csv`, `tables.md` and SVG plots there.
pub fn write_report(dir: &Path) -> Result<()> {
    let path = dir.join(RECORDS_FILE);
    if !path.exists() {
        return Err(Error::Config(format!("no {} in {}", RECORDS_FILE, dir.display())));
    }
    let records = read_records(&path)?;
    let rows = result_rows(&records);
    write_csv(&rows, fs::File::create(dir.join("results.csv"))?)?;
    let tables = render_tables(&aggregate(&rows));
    fs::write(dir.join("tables.md"), &tables)?;
    print!("{tables}");
    let plots = emit_plots(&records, dir)?;
    for note in &plots.notes {
        eprintln!("{note}");
    }
    eprintln!("wrote {} plots to {}", plots.files.len(), dir.display());
    Ok(())
}

fn cmd_oracle(ks: &[usize], n_pairs: usize, seed: u64) -> Result<i32> {
    println!("K\tdirection\toracle_per_sequence\tfloor\toracle_per_token");
    let mut ok = true;
    for &k in ks {
        let ps = generate(&MappingConfig::new(StringSpec::default(), k, n_pairs, seed))?;
        for d in Direction::BOTH {
            let o = tabular_oracle_loss(&ps, d)?;
            let f = floor(d, k);
            ok &= (o.per_sequence - f).abs() <= 1e-9;
            println!("{k}\t{d}\t{:.9}\t{:.9}\t{:.9}", o.per_sequence, f, o.per_token);
        }
    }
    Ok(if ok { 0 } else { 1 })
}

/// Gradient check of the tiny Transformer on a few inverse-direction prompts.
pub fn gradcheck_transformer(seed: u64) -> Result<GradCheckReport> {
    let spec = StringSpec::default();
    let vocab = Vocab::for_spec(&spec);
    let ps = generate(&MappingConfig::new(spec, 1, 3, seed))?;
    let xs = ps
        .pairs
        .iter()
        .map(|(a, b)| encode_example(a, b, Direction::Inverse, &vocab, 32))
        .collect::<Result<Vec<_>>>()?;
    let m = Transformer::new(TransformerConfig::tiny(vocab.len()))?;
    let mut s = m.scratch_params(seed)?.cast::<f64>();
    let batch: Vec<&TaskInstance> = xs.iter().collect();
    grad_check(
        |p| m.forward(p, &batch, None).map(|f| (f.tape, f.loss)),
        &mut s,
        &GradCheckConfig::default(),
    )
}

/// Gradient check of the tiny MLP on a small alphabet.
pub fn gradcheck_mlp(seed: u64) -> Result<GradCheckReport> {
    let spec = StringSpec::new("abcdef", 2)?;
    let ps = generate(&MappingConfig::new(spec.clone(), 1, 4, seed))?;
    let xs = ps
        .pairs
        .iter()
        .map(|(a, b)| MlpExample::from_pair(a, b, Direction::Inverse, &spec))
        .collect::<Result<Vec<_>>>()?;
    let m = Mlp::new(MlpConfig::tiny(2, spec.alphabet_size()))?;
    let mut s = m.scratch_params(seed)?.cast::<f64>();
    let batch: Vec<&MlpExample> = xs.iter().collect();
    grad_check(
        |p| m.forward(p, &batch, None).map(|f| (f.tape, f.loss)),
        &mut s,
        &GradCheckConfig::default(),
    )
}

fn cmd_gradcheck(seed: u64) -> Result<i32> {
    let mut ok = true;
    for (name, report) in [
        ("transformer", gradcheck_transformer(seed)?),
        ("mlp", gradcheck_mlp(seed)?),
    ] {
        println!(
            "{name}: {} groups, max rel err {:.3e}, {}",
            report.groups.len(),
            report.max_rel_err(),
            if report.passed() { "ok" } else { "FAILED" }
        );
        for g in report.failing_groups() {
            println!("  failing: {g}");
        }
        ok &= report.passed();
    }
    Ok(if ok { 0 } else { 1 })
}
