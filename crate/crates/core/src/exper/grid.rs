use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use super::eval::{eval_objective, Metrics};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::train::{finetune, LogRecord, LossBreakdown, TrainConfig};

/// Full-scale target sizes and their desk-scale stand-ins.
pub const SIZE_MAPPING: [(usize, usize); 5] = [(30, 10), (300, 30), (500, 50), (1000, 100), (2000, 200)];

/// Axes and shared settings of an experiment grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub omegas: Vec<f64>,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Fine-tuning settings; `omega` and `seed` are overridden per cell.
    pub train: TrainConfig,
    pub reference: PathBuf,
    pub corpus: PathBuf,
    pub workers: usize,
    /// Record wall-clock seconds in the results table. Off by default so that
    /// reruns produce identical bytes.
    pub timing: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            omegas: vec![0.0, 0.1, 0.5, 1.0],
            sizes: SIZE_MAPPING.iter().map(|&(_, desk)| desk).collect(),
            seeds: (0..5).collect(),
            train: TrainConfig::desk_finetune(),
            reference: PathBuf::from("reference.rmkd"),
            corpus: PathBuf::from("corpus.corp"),
            workers: 1,
            timing: false,
        }
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad entry `{v}` in `{key}`")))
        })
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl GridSpec {
    /// Parses `key=value` lines; `#` starts a comment. Relative paths are
    /// resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut spec = GridSpec::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "omegas" => spec.omegas = parse_list(key, value)?,
                "sizes" => spec.sizes = parse_list(key, value)?,
                "seeds" => spec.seeds = parse_list(key, value)?,
                "reference" => spec.reference = base.join(value),
                "corpus" => spec.corpus = base.join(value),
                "workers" => spec.workers = parse_one(key, value)?,
                "timing" => spec.timing = parse_one(key, value)?,
                _ => spec.train.set(key, value)?,
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.omegas.contains(&0.0) {
            return Err(Error::Config("omegas must include the 0 baseline".into()));
        }
        for &w in &self.omegas {
            crate::train::validate_omega(w)?;
        }
        if self.sizes.is_empty() || self.sizes.windows(2).any(|w| w[0] >= w[1]) || self.sizes[0] == 0 {
            return Err(Error::Config("sizes must be non-empty, positive and ascending".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.train.validate()
    }

    /// Cells in table order: omega, then size, then seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &omega in &self.omegas {
            for &size in &self.sizes {
                for &seed in &self.seeds {
                    cells.push(Cell { omega, size, seed });
                }
            }
        }
        cells
    }

    /// Resolved settings as `key=value` lines.
    pub fn describe(&self) -> String {
        let list = |v: Vec<String>| v.join(",");
        format!(
            "omegas={}\nsizes={}\nseeds={}\nreference={}\ncorpus={}\nworkers={}\ntiming={}\n{}",
            list(self.omegas.iter().map(f64::to_string).collect()),
            list(self.sizes.iter().map(usize::to_string).collect()),
            list(self.seeds.iter().map(u64::to_string).collect()),
            self.reference.display(),
            self.corpus.display(),
            self.workers,
            self.timing,
            self.train.describe()
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub omega: f64,
    pub size: usize,
    pub seed: u64,
}

impl Cell {
    /// File-name-safe identifier.
    pub fn id(&self) -> String {
        format!("omega{}_size{}_seed{}", self.omega, self.size, self.seed)
    }
}

/// Outcome of one grid cell.
#[derive(Clone, Debug)]
pub struct CellRecord {
    pub cell: Cell,
    /// `Err` holds the failure message of a cell that did not finish.
    pub outcome: std::result::Result<CellScores, String>,
    pub wall_s: f64,
    pub log: Vec<LogRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellScores {
    pub metrics: Metrics,
    pub final_loss: LossBreakdown,
}

/// All cell records in table order.
#[derive(Clone, Debug)]
pub struct GridResult {
    pub records: Vec<CellRecord>,
}

impl GridResult {
    pub fn failed(&self) -> Vec<&CellRecord> {
        self.records.iter().filter(|r| r.outcome.is_err()).collect()
    }
}

fn run_cell(
    spec: &GridSpec,
    reference: &Checkpoint,
    corpus: &Corpus,
    cell: Cell,
) -> Result<(CellScores, Vec<LogRecord>)> {
    let subset = corpus.target_subset(cell.size, cell.seed)?;
    let cfg = TrainConfig {
        omega: cell.omega,
        seed: cell.seed,
        ..spec.train.clone()
    };
    let out = finetune(reference, corpus, &subset, &cfg)?;
    let metrics = eval_objective(&out.checkpoint, corpus, &corpus.target_test())?;
    let final_loss = out
        .log
        .last()
        .map(|r| r.loss)
        .ok_or_else(|| Error::Config("grid cells need steps >= 1".into()))?;
    Ok((CellScores { metrics, final_loss }, out.log))
}

/// Runs every cell, on `spec.workers` threads. A failing cell is recorded and
/// the remaining cells still run; results do not depend on the worker count.
pub fn run_grid(spec: &GridSpec, reference: &Checkpoint, corpus: &Corpus) -> Result<GridResult> {
    spec.validate()?;
    let pool = corpus.target_train().len();
    if let Some(&big) = spec.sizes.iter().find(|&&s| s > pool) {
        return Err(Error::Config(format!(
            "size {big} exceeds the {pool} target training utterances"
        )));
    }
    let cells = spec.cells();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CellRecord>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|scope| {
        for _ in 0..spec.workers.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&cell) = cells.get(i) else { break };
                let start = Instant::now();
                let result = run_cell(spec, reference, corpus, cell);
                let wall_s = start.elapsed().as_secs_f64();
                let (outcome, log) = match result {
                    Ok((scores, log)) => (Ok(scores), log),
                    Err(e) => (Err(e.to_string()), Vec::new()),
                };
                slots.lock().unwrap()[i] = Some(CellRecord {
                    cell,
                    outcome,
                    wall_s,
                    log,
                });
            });
        }
    });
    let records = slots.into_inner().unwrap().into_iter().map(Option::unwrap).collect();
    Ok(GridResult { records })
}

/// Median of the finished cells' test mel-MSE at `(omega, size)`.
pub fn median_mse(result: &GridResult, omega: f64, size: usize) -> Option<f64> {
    let mut v: Vec<f64> = result
        .records
        .iter()
        .filter(|r| r.cell.omega == omega && r.cell.size == size)
        .filter_map(|r| r.outcome.as_ref().ok().map(|s| s.metrics.mel_mse))
        .collect();
    median(&mut v)
}

pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_spec_file() {
        let text = "# desk grid\nomegas=0, 0.1\nsizes=10,30\nseeds=1,2,3\nsteps=5\nlr=0.002\nreference=ref.rmkd\nworkers=2\n";
        let spec = GridSpec::parse(text, Path::new("/data")).unwrap();
        assert_eq!(spec.omegas, vec![0.0, 0.1]);
        assert_eq!(spec.sizes, vec![10, 30]);
        assert_eq!(spec.seeds, vec![1, 2, 3]);
        assert_eq!(spec.train.steps, 5);
        assert_eq!(spec.train.learning_rate, 0.002);
        assert_eq!(spec.reference, PathBuf::from("/data/ref.rmkd"));
        assert_eq!(spec.workers, 2);
        assert_eq!(spec.cells().len(), 12);
    }

    #[test]
    fn spec_invariants() {
        let base = Path::new(".");
        assert!(GridSpec::parse("omegas=0.1,0.5", base).is_err());
        assert!(GridSpec::parse("sizes=30,10", base).is_err());
        assert!(GridSpec::parse("seeds=", base).is_err());
        assert!(GridSpec::parse("bogus=1", base).is_err());
        assert!(GridSpec::parse("omegas=0,abc", base).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }
}
