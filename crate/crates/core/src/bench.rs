//! Latency and operation-count harness for the three attention backends.
//!
//! Every `(backend, Nv, rho)` cell gets its own seeded workload. After
//! warmup, cells are sampled round-robin so slow drift of the machine is
//! spread evenly. A sample runs enough calls to exceed one millisecond and
//! reports the per-call mean. The prototype and dense backends run
//! unguided; the masked backend gets random guidance of fixed density.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{Matrix, Real};
use crate::rng;
use crate::spotca::{attend, prototype_count, AttentionOptions, Backend, SpotCaConfig, SpotCaError, SpotCaParams};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench config: {0}")]
    InvalidConfig(String),
    #[error("{backend} Nv={nv} rho={rho}: {counter} = {got}, expected {want}")]
    CounterMismatch {
        backend: Backend,
        nv: usize,
        rho: f64,
        counter: &'static str,
        got: u64,
        want: u64,
    },
    #[error(transparent)]
    SpotCa(#[from] SpotCaError),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl TryFrom<u32> for Precision {
    type Error = String;

    fn try_from(bits: u32) -> std::result::Result<Self, String> {
        match bits {
            32 => Ok(Self::F32),
            64 => Ok(Self::F64),
            b => Err(format!("precision must be 32 or 64, got {b}")),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub backends: Vec<Backend>,
    pub nv: Vec<usize>,
    pub rho: Vec<f64>,
    pub n_queries: usize,
    pub channels: usize,
    pub heads: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub precision: Precision,
    /// Fraction of keys each masked-backend query may attend to.
    pub mask_density: f64,
    /// Supplied by the caller rather than configured.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            backends: Backend::ALL.to_vec(),
            nv: vec![10_000, 30_000, 100_000],
            rho: vec![0.08],
            n_queries: 100,
            channels: 192,
            heads: 8,
            repeats: 5,
            warmup: 2,
            precision: Precision::F32,
            mask_density: 0.5,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BenchError::InvalidConfig(m.into()));
        if self.repeats < 5 {
            return bad("repeats must be at least 5");
        }
        if self.warmup < 2 {
            return bad("warmup must be at least 2");
        }
        if self.backends.is_empty() || self.nv.is_empty() || self.rho.is_empty() {
            return bad("backend, Nv and rho sweeps must be non-empty");
        }
        if self.nv.contains(&0) || self.n_queries == 0 {
            return bad("Nv and Nq must be positive");
        }
        if !(self.mask_density > 0.0 && self.mask_density <= 1.0) {
            return bad("mask_density must be in (0, 1]");
        }
        for &rho in &self.rho {
            self.spot(rho)
                .validate(self.channels)
                .map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    }

    fn spot(&self, rho: f64) -> SpotCaConfig {
        SpotCaConfig {
            heads: self.heads,
            rho,
            ..Default::default()
        }
    }

    /// Cells in report order: backend-major, then Nv, then rho.
    pub fn cells(&self) -> Vec<(Backend, usize, f64)> {
        let mut out = Vec::new();
        for &b in &self.backends {
            for &nv in &self.nv {
                for &rho in &self.rho {
                    out.push((b, nv, rho));
                }
            }
        }
        out
    }
}

/// Measurements of one cell. Times are per forward call.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub backend: Backend,
    pub nv: usize,
    pub rho: f64,
    pub n_queries: usize,
    pub channels: usize,
    pub heads: usize,
    pub precision: Precision,
    pub repeats: usize,
    /// Calls per timed sample.
    pub batch: usize,
    pub median_us: f64,
    pub mean_us: f64,
    pub p95_us: f64,
    pub scoring_median_us: f64,
    pub post_scoring_median_us: f64,
    pub score_macs: u64,
    pub softmax_exps: u64,
    pub agg_macs: u64,
}

fn gaussian<T: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| T::from_f64(StandardNormal.sample(rng)))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

struct Workload<T> {
    queries: Matrix<T>,
    keys: Matrix<T>,
    params: SpotCaParams<T>,
    guidance: Option<Vec<Vec<bool>>>,
}

struct Cell<T> {
    backend: Backend,
    nv: usize,
    rho: f64,
    work: Workload<T>,
    batch: usize,
    totals: Vec<f64>,
    scoring: Vec<f64>,
    post: Vec<f64>,
}

const MIN_SAMPLE: Duration = Duration::from_millis(1);

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Nearest-rank 95th percentile.
fn p95(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((0.95 * s.len() as f64).ceil() as usize).max(1);
    s[rank - 1]
}

impl<T: Real> Cell<T> {
    fn call(&self, cfg: &BenchConfig) -> Result<crate::spotca::AttentionOutput<T>> {
        let opts = AttentionOptions {
            backend: self.backend,
            record_selection: false,
            time_phases: true,
            threads: 1,
        };
        Ok(attend(
            &self.work.queries,
            &self.work.keys,
            &self.work.params,
            &cfg.spot(self.rho),
            self.work.guidance.as_deref(),
            &opts,
        )?)
    }

    fn sample(&mut self, cfg: &BenchConfig) -> Result<()> {
        let (mut scoring, mut post) = (Duration::ZERO, Duration::ZERO);
        let start = Instant::now();
        for _ in 0..self.batch {
            let out = self.call(cfg)?;
            scoring += out.phases.scoring;
            post += out.phases.post_scoring;
        }
        let total = start.elapsed();
        let n = self.batch as f64;
        self.totals.push(micros(total) / n);
        self.scoring.push(micros(scoring) / n);
        self.post.push(micros(post) / n);
        Ok(())
    }
}

fn expected_agg(backend: Backend, nq: usize, nv: usize, c: usize, rho: f64) -> u64 {
    let k = match backend {
        Backend::Prototype => prototype_count(rho, nv),
        Backend::Dense | Backend::Masked => nv,
    };
    (nq * k * c) as u64
}

fn run_typed<T: Real>(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    let mut cells: Vec<Cell<T>> = Vec::new();
    for (backend, nv, rho) in cfg.cells() {
        let mut r = rng::stream(rng::stream_seed(cfg.seed, "bench"), &format!("workload-{nv}"));
        let queries = gaussian(&mut r, cfg.n_queries, cfg.channels);
        let keys = gaussian(&mut r, nv, cfg.channels);
        let params = SpotCaParams::init(cfg.channels, &mut r).cast::<T>();
        let guidance = (backend == Backend::Masked).then(|| {
            (0..cfg.n_queries)
                .map(|_| (0..nv).map(|_| r.random::<f64>() < cfg.mask_density).collect())
                .collect()
        });
        cells.push(Cell {
            backend,
            nv,
            rho,
            work: Workload {
                queries,
                keys,
                params,
                guidance,
            },
            batch: 1,
            totals: Vec::new(),
            scoring: Vec::new(),
            post: Vec::new(),
        });
    }

    let mut counters = Vec::with_capacity(cells.len());
    for cell in &mut cells {
        let mut slowest = Duration::ZERO;
        let mut last = None;
        for _ in 0..cfg.warmup {
            let t = Instant::now();
            last = Some(cell.call(cfg)?.counters);
            slowest = slowest.max(t.elapsed());
        }
        let per_call = slowest.max(Duration::from_nanos(1));
        cell.batch = (MIN_SAMPLE.as_nanos().div_ceil(per_call.as_nanos()) as usize).max(1);
        let ctr = last.expect("warmup >= 2");
        let (nq, c) = (cfg.n_queries, cfg.channels);
        let checks = [
            ("score_macs", ctr.score_macs, (nq * cell.nv * c) as u64),
            (
                "agg_macs",
                ctr.agg_macs,
                expected_agg(cell.backend, nq, cell.nv, c, cell.rho),
            ),
        ];
        for (counter, got, want) in checks {
            if got != want {
                return Err(BenchError::CounterMismatch {
                    backend: cell.backend,
                    nv: cell.nv,
                    rho: cell.rho,
                    counter,
                    got,
                    want,
                });
            }
        }
        counters.push(ctr);
    }

    for _ in 0..cfg.repeats {
        for cell in &mut cells {
            cell.sample(cfg)?;
        }
    }

    Ok(cells
        .iter()
        .zip(counters)
        .map(|(cell, ctr)| BenchRecord {
            backend: cell.backend,
            nv: cell.nv,
            rho: cell.rho,
            n_queries: cfg.n_queries,
            channels: cfg.channels,
            heads: cfg.heads,
            precision: cfg.precision,
            repeats: cfg.repeats,
            batch: cell.batch,
            median_us: median(&cell.totals),
            mean_us: cell.totals.iter().sum::<f64>() / cell.totals.len() as f64,
            p95_us: p95(&cell.totals),
            scoring_median_us: median(&cell.scoring),
            post_scoring_median_us: median(&cell.post),
            score_macs: ctr.score_macs,
            softmax_exps: ctr.softmax_exps,
            agg_macs: ctr.agg_macs,
        })
        .collect())
}

/// Times every cell of `cfg` and checks the operation counters against
/// their closed forms.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg),
        Precision::F64 => run_typed::<f64>(cfg),
    }
}

pub const BENCH_HEADER: &str = "backend,Nv,rho,repeats,median_us,mean_us,p95_us,score_macs,agg_macs";
pub const PHASES_HEADER: &str = "backend,Nv,rho,batch,scoring_median_us,post_scoring_median_us,softmax_exps";

pub fn write_bench_csv<W: Write>(mut w: W, records: &[BenchRecord]) -> std::io::Result<()> {
    writeln!(w, "{BENCH_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{:.3},{:.3},{:.3},{},{}",
            r.backend, r.nv, r.rho, r.repeats, r.median_us, r.mean_us, r.p95_us, r.score_macs, r.agg_macs
        )?;
    }
    Ok(())
}

pub fn write_phases_csv<W: Write>(mut w: W, records: &[BenchRecord]) -> std::io::Result<()> {
    writeln!(w, "{PHASES_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{:.3},{:.3},{}",
            r.backend, r.nv, r.rho, r.batch, r.scoring_median_us, r.post_scoring_median_us, r.softmax_exps
        )?;
    }
    Ok(())
}

/// Plot data: one row per `(rho, Nv)` with one median-latency column per
/// backend (empty when that backend was not run).
pub fn write_plot_data<W: Write>(mut w: W, records: &[BenchRecord]) -> std::io::Result<()> {
    write!(w, "rho,Nv")?;
    for b in Backend::ALL {
        write!(w, ",{b}_median_us")?;
    }
    writeln!(w)?;
    let mut keys: Vec<(f64, usize)> = records.iter().map(|r| (r.rho, r.nv)).collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keys.dedup();
    for (rho, nv) in keys {
        write!(w, "{rho},{nv}")?;
        for b in Backend::ALL {
            match records.iter().find(|r| r.backend == b && r.nv == nv && r.rho == rho) {
                Some(r) => write!(w, ",{:.3}", r.median_us)?,
                None => write!(w, ",")?,
            }
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Writes the three report files into `dir`: `bench.csv`, `phases.csv`
/// and `plot.csv`.
pub fn emit_report(records: &[BenchRecord], dir: &std::path::Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_bench_csv(std::fs::File::create(dir.join("bench.csv"))?, records)?;
    write_phases_csv(std::fs::File::create(dir.join("phases.csv"))?, records)?;
    write_plot_data(std::fs::File::create(dir.join("plot.csv"))?, records)?;
    Ok(())
}
