use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{DeskPreset, Mode, RunConfig};
use super::train::{run_on, surrogate_pretrain, Pretrained, RunOptions, RunRecord, SurrogateReport, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::mapgen::{generate, PairSet};
use crate::numerics::checkpoint::{load_checkpoint, save_checkpoint};
use crate::par;
use crate::textcodec::Direction;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SURROGATE_FILE: &str = "surrogate.ck";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub ks: Vec<usize>,
    pub modes: Vec<Mode>,
    pub lora_ranks: Vec<usize>,
    /// K values that get LoRA runs; `None` means every K above 1.
    pub lora_ks: Option<Vec<usize>>,
    pub directions: Vec<Direction>,
    pub base_seed: u64,
    pub preset: DeskPreset,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            ks: vec![1, 5, 8],
            modes: Mode::DEFAULT.to_vec(),
            lora_ranks: vec![8, 64, 256],
            lora_ks: None,
            directions: Direction::BOTH.to_vec(),
            base_seed: 0,
            preset: DeskPreset::default(),
        }
    }
}

impl SuiteConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Every run of the suite in a fixed order: K, mode, rank, direction.
    pub fn plan(&self) -> Result<Vec<RunConfig>> {
        let mut out = Vec::new();
        for &k in &self.ks {
            for &mode in &self.modes {
                let ranks: Vec<Option<usize>> = if mode == Mode::Lora {
                    let allowed = match &self.lora_ks {
                        Some(ks) => ks.contains(&k),
                        None => k > 1,
                    };
                    if !allowed {
                        continue;
                    }
                    self.lora_ranks.iter().map(|&r| Some(r)).collect()
                } else {
                    vec![None]
                };
                for rank in ranks {
                    for &dir in &self.directions {
                        out.push(self.preset.run_config(k, mode, rank, dir, self.base_seed)?);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOutcome {
    /// Completed records in plan order.
    pub records: Vec<RunRecord>,
    /// `(label, error)` of runs that failed.
    pub failures: Vec<(String, String)>,
    pub resumed: usize,
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(&line)?;
        let version = v.get("schema_version").and_then(|x| x.as_u64());
        if version != Some(SCHEMA_VERSION as u64) {
            return Err(Error::Decode(format!(
                "{}:{}: record schema {version:?}, expected {SCHEMA_VERSION}",
                path.display(),
                i + 1
            )));
        }
        out.push(serde_json::from_value(v)?);
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut f = File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Loads the suite's surrogate checkpoint from `out_dir`, or trains and saves it.
pub fn suite_pretrain(cfg: &SuiteConfig, out_dir: &Path, opts: &RunOptions) -> Result<Pretrained> {
    let p = &cfg.preset;
    let sur = p.surrogate(cfg.base_seed);
    let ck = out_dir.join(SURROGATE_FILE);
    let meta = out_dir.join("surrogate.json");
    if ck.exists() && meta.exists() {
        let report: SurrogateReport = serde_json::from_str(&fs::read_to_string(&meta)?)?;
        if report.config == sur {
            let store = load_checkpoint(&ck)?;
            return Ok(Pretrained { store, report });
        }
    }
    let (store, report) = surrogate_pretrain(&p.transformer, &p.spec, &sur, p.max_len, opts)?;
    fs::create_dir_all(out_dir)?;
    save_checkpoint(&store, &ck)?;
    fs::write(&meta, serde_json::to_string_pretty(&report)?)?;
    Ok(Pretrained { store, report })
}

/// Executes every planned run not already recorded in `out_dir`. One pair set
/// per K is generated and shared by all of that K's runs; records are appended
/// to the JSON Lines file as runs finish.
pub fn run_suite(cfg: &SuiteConfig, out_dir: &Path, opts: &RunOptions) -> Result<SuiteOutcome> {
    let plan = cfg.plan()?;
    fs::create_dir_all(out_dir)?;
    let records_path = out_dir.join(RECORDS_FILE);
    let mut done: HashMap<String, RunRecord> = HashMap::new();
    if records_path.exists() {
        for r in read_records(&records_path)? {
            done.insert(r.config_hash.clone(), r);
        }
    }

    let mut pairsets: BTreeMap<usize, PairSet> = BTreeMap::new();
    for c in &plan {
        if let std::collections::btree_map::Entry::Vacant(e) = pairsets.entry(c.k()) {
            let ps = generate(&c.mapping)?;
            let path = out_dir.join(format!("pairs_k{}.tsv", c.k()));
            if !path.exists() {
                ps.save(&path)?;
            }
            e.insert(ps);
        }
    }

    let pending: Vec<&RunConfig> = plan.iter().filter(|c| !done.contains_key(&c.hash())).collect();
    let base = if pending.iter().any(|c| c.regime.needs_base() && c.base_checkpoint.is_none()) {
        Some(suite_pretrain(cfg, out_dir, opts)?)
    } else {
        None
    };

    let sink = Mutex::new(OpenOptions::new().create(true).append(true).open(&records_path)?);
    let results = par::map_collect(&pending, |c| -> (String, Result<RunRecord>) {
        let ps = &pairsets[&c.k()];
        let res = run_on(c, ps, base.as_ref(), opts).and_then(|r| {
            let line = serde_json::to_string(&r)?;
            let mut f = sink.lock().expect("record sink");
            writeln!(f, "{line}")?;
            f.flush()?;
            Ok(r)
        });
        (c.hash(), res)
    });

    let resumed = plan.len() - pending.len();
    let mut failures = Vec::new();
    for ((hash, res), c) in results.into_iter().zip(&pending) {
        match res {
            Ok(r) => {
                done.insert(hash, r);
            }
            Err(e) => failures.push((c.label(), e.to_string())),
        }
    }
    let records = plan.iter().filter_map(|c| done.get(&c.hash()).cloned()).collect();
    Ok(SuiteOutcome {
        records,
        failures,
        resumed,
    })
}
