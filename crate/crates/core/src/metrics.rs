//! Alignment, distribution distance and paired guided-vs-vanilla comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aligner::Task;
use crate::binder::{BinderModel, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub mean: f64,
    pub std: f64,
    pub per_pair: Vec<f64>,
}

/// Mean binder-space cosine between generated rows and their references.
/// `pairing[i]` is the reference row of generated row `i`.
pub fn alignment_score(
    binder: &BinderModel,
    generated: (Modality, &Tensor),
    reference: (Modality, &Tensor),
    pairing: &[usize],
) -> Result<AlignmentScore> {
    let (gm, gen) = generated;
    let (rm, refs) = reference;
    if pairing.is_empty() {
        return Err(Error::Empty("alignment pairs"));
    }
    if pairing.len() != gen.rows() {
        return Err(Error::Unpaired(format!(
            "{} generated rows, {} pairings",
            gen.rows(),
            pairing.len()
        )));
    }
    if let Some(&bad) = pairing.iter().find(|&&j| j >= refs.rows()) {
        return Err(Error::Unpaired(format!(
            "pairing index {bad} but {} references",
            refs.rows()
        )));
    }
    let eg = binder.embed(gm, gen)?;
    let er = binder.embed(rm, refs)?;
    let per_pair: Vec<f64> = pairing
        .iter()
        .enumerate()
        .map(|(i, &j)| eg.row(i).iter().zip(er.row(j)).map(|(a, b)| a * b).sum())
        .collect();
    let (mean, std) = mean_std(&per_pair);
    Ok(AlignmentScore {
        mean,
        std,
        per_pair,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    /// Unbiased estimate; may be slightly negative.
    pub raw: f64,
    /// `max(raw, 0)`.
    pub value: f64,
    pub bandwidth: f64,
}

/// Unbiased Gaussian-kernel MMD² between the row sets `a` and `b`.
/// `bandwidth = None` uses the median pairwise distance of the pooled set.
/// Each set needs at least two rows.
pub fn mmd(a: &Tensor, b: &Tensor, bandwidth: Option<f64>) -> Result<MmdEstimate> {
    if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols() {
        return Err(Error::shape(
            "mmd",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(Error::InvalidArgument(
            "mmd needs at least two samples per set".into(),
        ));
    }
    let bw = match bandwidth {
        Some(h) if h > 0.0 => h,
        Some(h) => {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {h}"
            )))
        }
        None => median_distance(a, b),
    };
    let gamma = 1.0 / (2.0 * bw * bw);
    let k = |x: &[f64], y: &[f64]| (-gamma * sq_dist(x, y)).exp();
    let within = |s: &Tensor| {
        let n = s.rows();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += k(s.row(i), s.row(j));
                }
            }
        }
        acc / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            cross += k(a.row(i), b.row(j));
        }
    }
    cross /= (a.rows() * b.rows()) as f64;
    let raw = within(a) + within(b) - 2.0 * cross;
    Ok(MmdEstimate {
        raw,
        value: raw.max(0.0),
        bandwidth: bw,
    })
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn median_distance(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.rows())
        .map(|i| a.row(i))
        .chain((0..b.rows()).map(|i| b.row(i)))
        .collect();
    let mut d = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    pub p_value: f64,
}

/// Exact two-sided sign test on paired differences; zeros are dropped.
pub fn sign_test(diffs: &[f64]) -> SignTest {
    let positive = diffs.iter().filter(|&&d| d > 0.0).count();
    let negative = diffs.iter().filter(|&&d| d < 0.0).count();
    let ties = diffs.len() - positive - negative;
    let n = positive + negative;
    let k = positive.min(negative);
    let p_value = if n == 0 {
        1.0
    } else {
        (2.0 * binomial_lower_tail(n, k)).min(1.0)
    };
    SignTest {
        positive,
        negative,
        ties,
        p_value,
    }
}

/// `P(X <= k)` for `X ~ Binomial(n, 1/2)`.
fn binomial_lower_tail(n: usize, k: usize) -> f64 {
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_c = 0.0;
    let mut total = 0.0;
    for i in 0..=k {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        total += (ln_c + ln_half_n).exp();
    }
    total
}

/// Per-run measurements of one generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub seed: u64,
    /// Held-out sample used as the condition (cross-modal tasks).
    pub condition_index: Option<usize>,
    pub class: usize,
    /// Cosine between the generated sample and its condition; `v` vs `a` in joint mode.
    pub alignment: f64,
    /// Triangle loss of the final sample(s).
    pub triangle_final: f64,
    /// Generated sample; `v` followed by `a` in joint mode.
    pub sample: Vec<f64>,
}

/// A batch of runs sharing one configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSet {
    pub task: Task,
    pub lambda1: f64,
    pub lambda2: f64,
    pub inf_steps: usize,
    pub optim_start: f64,
    pub records: Vec<RunRecord>,
}

impl RunSet {
    pub fn samples(&self) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.records.iter().map(|r| r.sample.clone()).collect();
        if rows.is_empty() {
            return Err(Error::Empty("run set"));
        }
        Ok(Tensor::matrix(&rows))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Alignment,
    Mmd,
    TriangleFinal,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [
        MetricKind::Alignment,
        MetricKind::Mmd,
        MetricKind::TriangleFinal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Alignment => "alignment",
            MetricKind::Mmd => "mmd",
            MetricKind::TriangleFinal => "triangle_final",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, MetricKind::Alignment)
    }
}

/// Paired statistics for one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: MetricKind,
    pub vanilla_mean: f64,
    pub guided_mean: f64,
    /// Mean of `guided - vanilla`.
    pub mean_diff: f64,
    /// `mean_diff / |vanilla_mean|`, signed so that positive means better.
    pub relative_improvement: f64,
    pub sign: SignTest,
}

/// One CSV row: a vanilla run and its guided counterpart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub task: Task,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub inf_steps: usize,
    pub optim_start: f64,
    pub align_vanilla: f64,
    pub align_guided: f64,
    pub mmd_vanilla: f64,
    pub mmd_guided: f64,
    pub triangle_final_vanilla: f64,
    pub triangle_final_guided: f64,
    pub runtime_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub rows: Vec<CsvRow>,
    pub summary: Vec<SummaryRow>,
    pub mmd_vanilla: MmdEstimate,
    pub mmd_guided: MmdEstimate,
    /// `key = value` lines written as a comment header.
    pub config_echo: Vec<(String, String)>,
}

/// Pairs vanilla and guided runs by run index and compares them.
/// MMD is measured against `reference` (real samples of the generated
/// modality) at the set level and repeated on every row.
/// `runtime_ms[i]`, when given, is the guided runtime of run `i`.
pub fn compare_runs(
    vanilla: &RunSet,
    guided: &RunSet,
    reference: &Tensor,
    runtime_ms: Option<&[f64]>,
) -> Result<EvalReport> {
    check_paired(vanilla, guided)?;
    let mmd_v = mmd(&vanilla.samples()?, reference, None)?;
    let mmd_g = mmd(&guided.samples()?, reference, None)?;
    let rows: Vec<CsvRow> = vanilla
        .records
        .iter()
        .zip(&guided.records)
        .enumerate()
        .map(|(i, (v, g))| CsvRow {
            task: guided.task,
            seed: g.seed,
            lambda1: guided.lambda1,
            lambda2: guided.lambda2,
            inf_steps: guided.inf_steps,
            optim_start: guided.optim_start,
            align_vanilla: v.alignment,
            align_guided: g.alignment,
            mmd_vanilla: mmd_v.value,
            mmd_guided: mmd_g.value,
            triangle_final_vanilla: v.triangle_final,
            triangle_final_guided: g.triangle_final,
            runtime_ms: runtime_ms.and_then(|r| r.get(i)).copied().unwrap_or(0.0),
        })
        .collect();
    let summary = MetricKind::ALL
        .iter()
        .map(|&m| {
            let pick = |r: &CsvRow| match m {
                MetricKind::Alignment => (r.align_vanilla, r.align_guided),
                MetricKind::Mmd => (r.mmd_vanilla, r.mmd_guided),
                MetricKind::TriangleFinal => (r.triangle_final_vanilla, r.triangle_final_guided),
            };
            summarize(m, rows.iter().map(pick))
        })
        .collect();
    Ok(EvalReport {
        task: guided.task,
        rows,
        summary,
        mmd_vanilla: mmd_v,
        mmd_guided: mmd_g,
        config_echo: vec![],
    })
}

fn check_paired(vanilla: &RunSet, guided: &RunSet) -> Result<()> {
    if vanilla.task != guided.task {
        return Err(Error::Unpaired(format!(
            "tasks {} and {}",
            vanilla.task, guided.task
        )));
    }
    if vanilla.records.len() != guided.records.len() {
        return Err(Error::Unpaired(format!(
            "{} vanilla runs, {} guided runs",
            vanilla.records.len(),
            guided.records.len()
        )));
    }
    for (v, g) in vanilla.records.iter().zip(&guided.records) {
        if (v.run_index, v.seed, v.condition_index, v.class)
            != (g.run_index, g.seed, g.condition_index, g.class)
        {
            return Err(Error::Unpaired(format!(
                "run {} (seed {}, condition {:?}, class {}) vs run {} (seed {}, condition {:?}, class {})",
                v.run_index, v.seed, v.condition_index, v.class, g.run_index, g.seed, g.condition_index, g.class
            )));
        }
    }
    Ok(())
}

fn summarize(metric: MetricKind, pairs: impl Iterator<Item = (f64, f64)>) -> SummaryRow {
    let pairs: Vec<(f64, f64)> = pairs.collect();
    let n = pairs.len() as f64;
    let vanilla_mean = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let guided_mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let diffs: Vec<f64> = pairs.iter().map(|(v, g)| g - v).collect();
    let mean_diff = diffs.iter().sum::<f64>() / n;
    let better = if metric.higher_is_better() {
        mean_diff
    } else {
        -mean_diff
    };
    let relative_improvement = if vanilla_mean == 0.0 {
        if better == 0.0 {
            0.0
        } else {
            better.signum() * f64::INFINITY
        }
    } else {
        better / vanilla_mean.abs()
    };
    SummaryRow {
        metric,
        vanilla_mean,
        guided_mean,
        mean_diff,
        relative_improvement,
        sign: sign_test(&diffs),
    }
}

pub const CSV_COLUMNS: [&str; 13] = [
    "task",
    "seed",
    "lambda1",
    "lambda2",
    "inf_steps",
    "optim_start",
    "align_vanilla",
    "align_guided",
    "mmd_vanilla",
    "mmd_guided",
    "triangle_final_vanilla",
    "triangle_final_guided",
    "runtime_ms",
];

impl EvalReport {
    pub fn summary_for(&self, metric: MetricKind) -> &SummaryRow {
        self.summary
            .iter()
            .find(|s| s.metric == metric)
            .expect("every metric is summarized")
    }

    /// Config echo as `#` comment lines, then a header row and one row per run.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = echo_header(&self.config_echo);
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(CSV_COLUMNS)?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        let body = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        out.push_str(&String::from_utf8_lossy(&body));
        Ok(out)
    }

    pub fn summary_text(&self) -> String {
        let mut s = echo_header(&self.config_echo);
        let _ = writeln!(s, "task: {}", self.task);
        let _ = writeln!(s, "pairs: {}", self.rows.len());
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{}: vanilla {:.6} guided {:.6} diff {:+.6} relative {:+.4} wins {} losses {} ties {} p {:.3e}",
                r.metric.name(),
                r.vanilla_mean,
                r.guided_mean,
                r.mean_diff,
                r.relative_improvement,
                if r.metric.higher_is_better() { r.sign.positive } else { r.sign.negative },
                if r.metric.higher_is_better() { r.sign.negative } else { r.sign.positive },
                r.sign.ties,
                r.sign.p_value
            );
        }
        let _ = writeln!(
            s,
            "mmd raw: vanilla {:.6e} guided {:.6e}",
            self.mmd_vanilla.raw, self.mmd_guided.raw
        );
        s
    }
}

/// Reads rows written by [`EvalReport::to_csv`], skipping comment lines.
pub fn read_csv_rows(text: &str) -> Result<Vec<CsvRow>> {
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<CsvRow>, _>>()?)
}

pub(crate) fn echo_header(echo: &[(String, String)]) -> String {
    echo.iter().map(|(k, v)| format!("# {k} = {v}\n")).collect()
}
