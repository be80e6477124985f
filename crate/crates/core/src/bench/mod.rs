//! Time and peak-memory scaling of single AuM blocks against a minimal
//! self-attention block.
//!
//! Every cell runs on the calling thread. Peak memory is the engine's own
//! allocation high-water mark over a forward+backward pass. A cell that
//! exceeds the optional byte budget is recorded as DNF, and so is every
//! larger token count of the same model.

mod attention;

pub use attention::{attention_block_forward, init_attention, self_attention, AttentionWeights, MLP_RATIO};

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoder::{block_forward, init_block, AumBlockWeights, BlockDims, BlockVariant, EncoderError, TokenSequence};
use crate::init;
use crate::numerics::{memory, ops, Array, NumericsError, Tape, Var};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("bench configuration error: {0}")]
    Config(String),
    #[error("not enough points to fit: {0}")]
    Insufficient(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;

/// Benchmarked block family at the small or base width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    AumS,
    AumB,
    AttnS,
    AttnB,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::AumS, ModelKind::AumB, ModelKind::AttnS, ModelKind::AttnB];

    pub fn embed_dim(self) -> usize {
        match self {
            ModelKind::AumS | ModelKind::AttnS => 384,
            ModelKind::AumB | ModelKind::AttnB => 768,
        }
    }

    pub fn heads(self) -> usize {
        self.embed_dim() / 64
    }

    pub fn is_attention(self) -> bool {
        matches!(self, ModelKind::AttnS | ModelKind::AttnB)
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::AumS => "aum-s",
            ModelKind::AumB => "aum-b",
            ModelKind::AttnS => "attn-s",
            ModelKind::AttnB => "attn-b",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelKind {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| BenchError::Config(format!("unknown model {s:?} (expected aum-s, aum-b, attn-s or attn-b)")))
    }
}

/// AuM block settings used by the harness.
pub const AUM_STATE_DIM: usize = 16;
pub const AUM_EXPAND: usize = 2;
pub const AUM_CONV_KERNEL: usize = 4;

/// Harness settings.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub reps: usize,
    /// Untimed runs before each cell.
    pub warmups: usize,
    /// Blocks stacked per forward pass.
    pub depth: usize,
    /// Live-byte cap per cell; exceeding it records DNF.
    pub budget_bytes: Option<usize>,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            reps: 3,
            warmups: 2,
            depth: 1,
            budget_bytes: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    Dnf,
}

impl fmt::Display for CellStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellStatus::Ok => "ok",
            CellStatus::Dnf => "dnf",
        })
    }
}

/// One model at one token count. Timings are medians in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub model: ModelKind,
    pub tokens: usize,
    pub fwd_ms: Option<f64>,
    pub fwdbwd_ms: Option<f64>,
    pub peak_bytes: Option<usize>,
    pub status: CellStatus,
}

impl BenchRow {
    fn dnf(model: ModelKind, tokens: usize) -> Self {
        BenchRow {
            model,
            tokens,
            fwd_ms: None,
            fwdbwd_ms: None,
            peak_bytes: None,
            status: CellStatus::Dnf,
        }
    }
}

/// Which timing column a fit reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timing {
    Forward,
    ForwardBackward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub rows: Vec<BenchRow>,
    pub environment: String,
}

enum Weights {
    Aum(AumBlockWeights<Array<f32>>),
    Attn(AttentionWeights<Array<f32>>),
}

fn block_weights(kind: ModelKind, depth: usize, seed: u64) -> Vec<Weights> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = kind.embed_dim();
    (0..depth)
        .map(|_| {
            if kind.is_attention() {
                Weights::Attn(init_attention(d, &mut rng))
            } else {
                let dims = BlockDims {
                    embed_dim: d,
                    expand: AUM_EXPAND,
                    state_dim: AUM_STATE_DIM,
                    conv_kernel: AUM_CONV_KERNEL,
                };
                Weights::Aum(init_block(dims, BlockVariant::FoBi, &mut rng))
            }
        })
        .collect()
}

fn stack_forward<'t>(
    tape: &'t Tape<f32>,
    x: Var<'t, f32>,
    blocks: &[Weights],
    kind: ModelKind,
    trainable: bool,
) -> Result<Var<'t, f32>> {
    let mut h = x;
    for b in blocks {
        h = match b {
            Weights::Aum(w) => {
                let w = if trainable { w.map(|a| tape.param(a.clone())) } else { w.map(|a| tape.constant(a.clone())) };
                let ts = TokenSequence { tokens: h, cls_index: 0 };
                block_forward(ts, &w, BlockVariant::FoBi)?.tokens
            }
            Weights::Attn(w) => {
                let w = if trainable { w.on_tape(tape) } else { w.constants(tape) };
                attention_block_forward(h, &w, kind.heads())?
            }
        };
    }
    Ok(h)
}

/// One timed pass; returns elapsed milliseconds.
fn run_once(input: &Array<f32>, blocks: &[Weights], kind: ModelKind, backward: bool) -> Result<f64> {
    let start = Instant::now();
    {
        let tape = Tape::new();
        let x = if backward { tape.param(input.clone()) } else { tape.constant(input.clone()) };
        let y = stack_forward(&tape, x, blocks, kind, backward)?;
        if backward {
            tape.backward(ops::mean(y)?)?;
        }
    }
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn is_oom<T>(r: &Result<T>) -> bool {
    matches!(
        r,
        Err(BenchError::Numerics(NumericsError::OutOfMemory { .. }))
            | Err(BenchError::Encoder(EncoderError::Numerics(NumericsError::OutOfMemory { .. })))
    )
}

/// Peak-memory pass and warmups for one cell; `None` when the budget is
/// exceeded.
fn prepare_cell(kind: ModelKind, n: usize, blocks: &[Weights], opts: &BenchOptions) -> Result<Option<(Array<f32>, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ n as u64);
    let input: Array<f32> = init::normal(&[n, kind.embed_dim()], 1.0, &mut rng);
    let base = memory::live_bytes();
    memory::set_budget(opts.budget_bytes.map(|b| base + b));
    let outcome = (|| -> Result<Option<usize>> {
        memory::reset_peak();
        let first = run_once(&input, blocks, kind, true);
        if is_oom(&first) {
            return Ok(None);
        }
        first?;
        let peak = memory::peak_bytes() - base;
        for backward in [false, true] {
            for _ in 0..opts.warmups {
                run_once(&input, blocks, kind, backward)?;
            }
        }
        Ok(Some(peak))
    })();
    memory::set_budget(None);
    Ok(outcome?.map(|peak| (input, peak)))
}

/// Sweeps `token_counts` (strictly increasing) for one model.
///
/// Repetitions are taken in rounds over all cells, so a slow stretch on a
/// shared machine lands on every token count rather than on one of them.
pub fn measure(kind: ModelKind, token_counts: &[usize], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if memory::engine_threads() != 1 {
        return Err(BenchError::Config("timing requires a single-threaded engine".into()));
    }
    if token_counts.is_empty() || token_counts.contains(&0) {
        return Err(BenchError::Config("token counts must be positive and non-empty".into()));
    }
    if token_counts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BenchError::Config(format!("token counts must be strictly increasing: {token_counts:?}")));
    }
    if opts.reps == 0 || opts.depth == 0 {
        return Err(BenchError::Config("reps and depth must be positive".into()));
    }
    let finite = memory::finite_checks_enabled();
    memory::set_finite_checks(false);
    let result = sweep(kind, token_counts, opts);
    memory::set_finite_checks(finite);
    result
}

fn sweep(kind: ModelKind, token_counts: &[usize], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let blocks = block_weights(kind, opts.depth, opts.seed);
    let mut cells = Vec::new();
    for &n in token_counts {
        match prepare_cell(kind, n, &blocks, opts)? {
            Some((input, peak)) => cells.push((n, input, peak)),
            None => {
                log::warn!("{kind} n={n}: over memory budget, DNF");
                break;
            }
        }
    }
    let mut times = vec![(Vec::new(), Vec::new()); cells.len()];
    for _ in 0..opts.reps {
        for ((_, input, _), (fwd, fwdbwd)) in cells.iter().zip(&mut times) {
            fwd.push(run_once(input, &blocks, kind, false)?);
            fwdbwd.push(run_once(input, &blocks, kind, true)?);
        }
    }
    let mut rows: Vec<BenchRow> = cells
        .iter()
        .zip(times)
        .map(|(&(n, _, peak), (fwd, fwdbwd))| {
            let row = BenchRow {
                model: kind,
                tokens: n,
                fwd_ms: Some(median(fwd)),
                fwdbwd_ms: Some(median(fwdbwd)),
                peak_bytes: Some(peak),
                status: CellStatus::Ok,
            };
            log::info!("{kind} n={n}: fwd {:.2} ms, fwd+bwd {:.2} ms", row.fwd_ms.unwrap_or(0.0), row.fwdbwd_ms.unwrap_or(0.0));
            row
        })
        .collect();
    rows.extend(token_counts[cells.len()..].iter().map(|&n| BenchRow::dnf(kind, n)));
    Ok(rows)
}

/// Sweeps every model in `models` and collects a report.
pub fn measure_all(models: &[ModelKind], token_counts: &[usize], opts: &BenchOptions) -> Result<ScalingReport> {
    let mut rows = Vec::new();
    for &m in models {
        rows.extend(measure(m, token_counts, opts)?);
    }
    Ok(ScalingReport {
        rows,
        environment: format!(
            "single thread, f32, {} rep(s) after {} warmup(s), median; depth {}; peak = engine high-water mark over forward+backward",
            opts.reps, opts.warmups, opts.depth
        ),
    })
}

/// Least-squares slope of `log(time)` against `log(tokens)`.
pub fn fit_exponent(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(BenchError::Insufficient(format!("{} point(s), need at least 3", points.len())));
    }
    if points.iter().any(|&(n, t)| n == 0 || !(t > 0.0) || !t.is_finite()) {
        return Err(BenchError::Insufficient("times and token counts must be positive".into()));
    }
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, t)| t.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(BenchError::Insufficient("all token counts are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

impl ScalingReport {
    pub fn models(&self) -> Vec<ModelKind> {
        let mut out: Vec<ModelKind> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.model) {
                out.push(r.model);
            }
        }
        out
    }

    /// Completed `(tokens, ms)` points for one model.
    pub fn points(&self, model: ModelKind, timing: Timing) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.model == model)
            .filter_map(|r| {
                let t = match timing {
                    Timing::Forward => r.fwd_ms,
                    Timing::ForwardBackward => r.fwdbwd_ms,
                };
                t.map(|t| (r.tokens, t))
            })
            .collect()
    }

    pub fn fit_exponent(&self, model: ModelKind, timing: Timing) -> Result<f64> {
        fit_exponent(&self.points(model, timing))
    }

    pub fn row(&self, model: ModelKind, tokens: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.model == model && r.tokens == tokens)
    }

    /// `time(n) / time(m)` for two completed cells.
    pub fn ratio(&self, model: ModelKind, m: usize, n: usize, timing: Timing) -> Option<f64> {
        let pts = self.points(model, timing);
        let at = |k: usize| pts.iter().find(|p| p.0 == k).map(|p| p.1);
        Some(at(n)? / at(m)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| BenchError::Io(e.into());
        w.write_record(["model", "tokens", "fwd_ms", "fwdbwd_ms", "peak_bytes", "status"]).map_err(io)?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.3}"));
        for r in &self.rows {
            w.write_record([
                r.model.label().to_string(),
                r.tokens.to_string(),
                opt(r.fwd_ms),
                opt(r.fwdbwd_ms),
                r.peak_bytes.map_or(String::new(), |b| b.to_string()),
                r.status.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Fitted slopes per model, one line each, after the environment note.
    pub fn summary(&self) -> String {
        let mut s = format!("# {}\n", self.environment);
        for m in self.models() {
            let fit = |t| match self.fit_exponent(m, t) {
                Ok(v) => format!("{v:.3}"),
                Err(_) => "n/a".into(),
            };
            s.push_str(&format!(
                "{m}: slope fwd {} fwd+bwd {}\n",
                fit(Timing::Forward),
                fit(Timing::ForwardBackward)
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests;
