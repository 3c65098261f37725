use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const CSV_HEADER: &str = "phase,optimiser,seed,dataset,step,loss";
pub const CSV_FILE: &str = "curves.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Steps reported in the summary, besides the last one.
pub const SUMMARY_STEPS: [usize; 3] = [100, 400, 1000];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    MetaTrain,
    MetaTest,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::MetaTrain => "meta-train",
            Phase::MetaTest => "meta-test",
        }
    }
}

/// One point of a loss curve. Steps count from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub phase: Phase,
    pub optimiser: String,
    pub seed: u64,
    pub dataset: String,
    pub step: usize,
    pub loss: Scalar,
}

/// Turns a loss sequence into records numbered from 1.
pub fn series(phase: Phase, optimiser: &str, seed: u64, dataset: &str, losses: &[Scalar]) -> Vec<CurveRecord> {
    losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| CurveRecord {
            phase,
            optimiser: optimiser.to_string(),
            seed,
            dataset: dataset.to_string(),
            step: i + 1,
            loss,
        })
        .collect()
}

/// Summary of one (phase, optimiser, seed) series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub phase: Phase,
    pub optimiser: String,
    pub seed: u64,
    pub dataset: String,
    pub steps: usize,
    /// Loss at each of [`SUMMARY_STEPS`] the series reaches.
    pub at: Vec<(usize, Scalar)>,
    pub final_loss: Scalar,
    pub diverged: bool,
}

/// Groups records by (phase, optimiser, seed) in first-appearance order.
pub fn summarise(records: &[CurveRecord], expected_steps: Option<usize>) -> Vec<SeriesSummary> {
    let mut out: Vec<SeriesSummary> = Vec::new();
    for r in records {
        let key = |s: &SeriesSummary| s.phase == r.phase && s.optimiser == r.optimiser && s.seed == r.seed;
        let idx = match out.iter().position(key) {
            Some(i) => i,
            None => {
                out.push(SeriesSummary {
                    phase: r.phase,
                    optimiser: r.optimiser.clone(),
                    seed: r.seed,
                    dataset: r.dataset.clone(),
                    steps: 0,
                    at: Vec::new(),
                    final_loss: Scalar::NAN,
                    diverged: false,
                });
                out.len() - 1
            }
        };
        let s = &mut out[idx];
        s.steps += 1;
        s.final_loss = r.loss;
        if SUMMARY_STEPS.contains(&r.step) {
            s.at.push((r.step, r.loss));
        }
    }
    if let Some(n) = expected_steps {
        for s in &mut out {
            s.diverged = s.phase == Phase::MetaTest && s.steps < n;
        }
    }
    out
}

/// Fixed-width table of the meta-test summaries.
pub fn summary_table(summaries: &[SeriesSummary]) -> String {
    let mut t = String::new();
    let _ = writeln!(
        t,
        "{:<10} {:>6} {:<18} {:>10} {:>10} {:>10} {:>10}",
        "optimiser", "seed", "dataset", "@100", "@400", "@1000", "final"
    );
    for s in summaries.iter().filter(|s| s.phase == Phase::MetaTest) {
        let at = |k: usize| {
            s.at.iter()
                .find(|(step, _)| *step == k)
                .map_or_else(|| "-".to_string(), |(_, l)| format!("{l:.4}"))
        };
        let fin = if s.diverged {
            format!("{:.4}*", s.final_loss)
        } else {
            format!("{:.4}", s.final_loss)
        };
        let _ = writeln!(
            t,
            "{:<10} {:>6} {:<18} {:>10} {:>10} {:>10} {:>10}",
            s.optimiser,
            s.seed,
            s.dataset,
            at(100),
            at(400),
            at(1000),
            fin
        );
    }
    t
}

/// CSV text of `records`; losses use the shortest round-trip decimal form.
pub fn to_csv(records: &[CurveRecord]) -> String {
    let mut s = String::with_capacity(32 * (records.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.phase.as_str(),
            r.optimiser,
            r.seed,
            r.dataset,
            r.step,
            r.loss
        );
    }
    s
}

/// `sha256("blob <len>\0" ++ bytes)`, the object-id form git uses.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash over the run configuration and every input file: each line is
/// `<blob hash> <name>`, configuration first.
pub fn input_hash(config: &impl Serialize, inputs: &[PathBuf]) -> Result<String> {
    let cfg_json = serde_json::to_vec(config).map_err(|e| Error::Persistence(e.to_string()))?;
    let mut listing = format!("{} config\n", blob_hash(&cfg_json));
    let mut sorted = inputs.to_vec();
    sorted.sort();
    for p in &sorted {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        let name = p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        let parent = p
            .parent()
            .and_then(|d| d.file_name())
            .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        let _ = writeln!(listing, "{} {parent}/{name}", blob_hash(&bytes));
    }
    Ok(blob_hash(listing.as_bytes()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: serde_json::Value,
    pub input_hash: String,
    pub summary: Vec<SeriesSummary>,
    pub checkpoint: Option<String>,
    pub created_unix: u64,
}

/// Writes `curves.csv` and `manifest.json` under `dir`.
pub fn emit_curves(
    records: &[CurveRecord],
    dir: &Path,
    manifest: &Manifest,
) -> Result<(PathBuf, PathBuf)> {
    if records.is_empty() {
        return Err(Error::Contract("no curve records to emit".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(CSV_FILE);
    std::fs::write(&csv, to_csv(records)).map_err(|e| Error::io(&csv, e))?;
    let man = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Persistence(e.to_string()))?;
    std::fs::write(&man, json + "\n").map_err(|e| Error::io(&man, e))?;
    Ok((csv, man))
}
