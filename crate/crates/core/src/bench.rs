//! Latency measurement and classifier multiply-accumulate accounting.
//!
//! Timing runs on the calling thread with batch size 1. Every timed run is
//! preceded by a short untimed warmup, and the reported latency is the mean
//! of the per-run means. MAC counts come from the counters inside the
//! classifier kernels and are deterministic, so they are taken once.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ListPair, Vocabulary};
use crate::inference::{DecodeMode, Decoder, GenerationRequest, StageTimes};
use crate::model::{ClassifierMode, Model, ModelConfig};
use crate::{CategoryId, Error, ItemId, Result};

/// Untimed samples decoded before each timed run.
pub const DEFAULT_WARMUP: usize = 10;
/// Timed runs averaged into one report.
pub const DEFAULT_RUNS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestTemplate {
    pub mode: DecodeMode,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingPlan {
    pub runs: usize,
    pub warmup: usize,
}

impl Default for TimingPlan {
    fn default() -> Self {
        TimingPlan {
            runs: DEFAULT_RUNS,
            warmup: DEFAULT_WARMUP,
        }
    }
}

/// Mean milliseconds per sample spent in each stage. `classify` includes
/// the top-K sort.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageMs {
    pub embed: f64,
    pub encode: f64,
    pub classify: f64,
    pub dedup: f64,
}

impl StageMs {
    pub fn total(&self) -> f64 {
        self.embed + self.encode + self.classify + self.dedup
    }

    fn scaled(times: &StageTimes, per: f64) -> Self {
        StageMs {
            embed: ms(times.embed) / per,
            encode: ms(times.encode) / per,
            classify: ms(times.classify) / per,
            dedup: ms(times.dedup) / per,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: DecodeMode,
    pub classifier: ClassifierMode,
    #[serde(rename = "M")]
    pub num_items: usize,
    #[serde(rename = "N")]
    pub num_categories: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub d: usize,
    #[serde(rename = "H")]
    pub layers: usize,
    pub samples: usize,
    pub per_sample_ms: f64,
    pub per_run_ms: Vec<f64>,
    pub stage_ms: StageMs,
    /// Classifier MACs for one pass over the samples.
    pub mac_count: u64,
    pub speedup_vs_baseline: Option<f64>,
    /// Set when the clock resolution exceeds 1% of the shortest timed run.
    pub clock_warning: bool,
}

impl LatencyReport {
    /// Stage shares of the per-sample wall time.
    pub fn stage_fractions(&self) -> StageMs {
        let total = self.per_sample_ms;
        StageMs {
            embed: self.stage_ms.embed / total,
            encode: self.stage_ms.encode / total,
            classify: self.stage_ms.classify / total,
            dedup: self.stage_ms.dedup / total,
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Smallest observable step of the monotonic clock.
pub fn clock_resolution() -> Duration {
    (0..5)
        .map(|_| {
            let start = Instant::now();
            loop {
                let d = start.elapsed();
                if !d.is_zero() {
                    break d;
                }
            }
        })
        .min()
        .unwrap_or_default()
}

/// Number of rows the classifier sees for one request.
pub fn classified_rows(mode: DecodeMode, k: usize) -> usize {
    match mode {
        DecodeMode::Ar | DecodeMode::Nar => k,
        DecodeMode::Recall => 1,
    }
}

/// Analytic classifier MACs. `realized` holds, for every classified row,
/// the categories whose local heads were evaluated; it is ignored by the
/// flat classifier beyond its length.
///
/// Flat: `rows * d * M`. Two-stage: `rows * d * N + sum d * M^c`.
pub fn count_classifier_macs(
    classifier: ClassifierMode,
    dim: usize,
    vocab: &Vocabulary,
    realized: &[Vec<CategoryId>],
) -> u64 {
    let rows = realized.len() as u64;
    let d = dim as u64;
    match classifier {
        ClassifierMode::Vanilla => rows * d * vocab.num_items() as u64,
        ClassifierMode::TwoStage => {
            let local: u64 = realized
                .iter()
                .flatten()
                .map(|&c| vocab.members(c).len() as u64)
                .sum();
            rows * d * vocab.num_categories() as u64 + d * local
        }
    }
}

/// Analytic MACs for `k` rows over balanced categories, assuming each row
/// is served by its argmax category alone. Equal-size categories make the
/// count independent of which category wins.
pub fn balanced_macs(classifier: ClassifierMode, num_items: usize, num_categories: usize, k: usize, dim: usize) -> u64 {
    let (m, n, k, d) = (num_items as u64, num_categories as u64, k as u64, dim as u64);
    match classifier {
        ClassifierMode::Vanilla => k * d * m,
        ClassifierMode::TwoStage => k * d * n + k * d * m.div_ceil(n),
    }
}

/// Decodes every input `plan.runs` times and reports mean latency, stage
/// times and the classifier MAC count.
pub fn time_inference(
    model: &Model,
    inputs: &[Vec<ItemId>],
    template: RequestTemplate,
    plan: TimingPlan,
) -> Result<LatencyReport> {
    if inputs.is_empty() {
        return Err(Error::invalid("no samples to time"));
    }
    if plan.runs == 0 {
        return Err(Error::invalid("runs must be at least 1"));
    }
    let request = |input: &Vec<ItemId>| GenerationRequest {
        input: input.clone(),
        k: template.k,
        mode: template.mode,
    };
    let n = inputs.len();
    let mut per_run_ms = Vec::with_capacity(plan.runs);
    let mut stages = StageTimes::default();
    let mut mac_count = 0;
    for run in 0..plan.runs {
        let mut warm = Decoder::new(model);
        for input in inputs.iter().cycle().take(plan.warmup) {
            warm.generate(&request(input))?;
        }

        model.reset_counters();
        let mut decoder = Decoder::new(model);
        let start = Instant::now();
        for input in inputs {
            decoder.generate(&request(input))?;
        }
        let elapsed = start.elapsed();
        if run == 0 {
            mac_count = model.classifier_macs();
        }
        per_run_ms.push(ms(elapsed) / n as f64);
        stages.embed += decoder.times.embed;
        stages.encode += decoder.times.encode;
        stages.classify += decoder.times.classify;
        stages.dedup += decoder.times.dedup;
    }

    let shortest = per_run_ms.iter().cloned().fold(f64::INFINITY, f64::min) * n as f64;
    let clock_warning = ms(clock_resolution()) > 0.01 * shortest;
    if clock_warning {
        log::warn!("clock resolution is coarser than 1% of the shortest timed run");
    }
    let config = model.config();
    Ok(LatencyReport {
        mode: template.mode,
        classifier: config.classifier,
        num_items: model.vocab().num_items(),
        num_categories: model.vocab().num_categories(),
        k: template.k,
        d: config.dim,
        layers: config.layers,
        samples: n,
        per_sample_ms: per_run_ms.iter().sum::<f64>() / plan.runs as f64,
        stage_ms: StageMs::scaled(&stages, (n * plan.runs) as f64),
        per_run_ms,
        mac_count,
        speedup_vs_baseline: None,
        clock_warning,
    })
}

/// Stage shares of total decode time, sort included in `classify`.
pub fn stage_breakdown(
    model: &Model,
    inputs: &[Vec<ItemId>],
    template: RequestTemplate,
    plan: TimingPlan,
) -> Result<StageMs> {
    Ok(time_inference(model, inputs, template, plan)?.stage_fractions())
}

/// Sets `speedup_vs_baseline` to `baseline / report` per-sample latency.
pub fn with_speedup(mut report: LatencyReport, baseline: &LatencyReport) -> LatencyReport {
    report.speedup_vs_baseline = Some(baseline.per_sample_ms / report.per_sample_ms);
    report
}

/// Inputs of uniformly random items, for latency runs on random weights.
pub fn random_inputs(num_items: usize, count: usize, len: usize, seed: u64) -> Vec<Vec<ItemId>> {
    let mut rng = crate::seeded_rng(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.random_range(0..num_items as ItemId)).collect())
        .collect()
}

/// Input sides of `pairs`, keeping the most recent items so that the input,
/// `k` slots and three special tokens fit in `max_len`.
pub fn fit_inputs(pairs: &[ListPair], k: usize, max_len: usize) -> Result<Vec<Vec<ItemId>>> {
    let room = max_len
        .checked_sub(k + 3)
        .filter(|&r| r > 0)
        .ok_or_else(|| Error::invalid(format!("K = {k} leaves no room for input in max_len {max_len}")))?;
    Ok(pairs
        .iter()
        .map(|p| p.input[p.input.len().saturating_sub(room)..].to_vec())
        .collect())
}

/// Everything held fixed across a category sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub model: ModelConfig,
    pub num_items: usize,
    pub template: RequestTemplate,
    pub plan: TimingPlan,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Flat-classifier run that every row's speedup is measured against.
    pub baseline: LatencyReport,
    pub rows: Vec<LatencyReport>,
}

/// Times a randomly initialised two-stage model over balanced categories
/// for every `N` in `ns`, against a flat-classifier baseline of the same size.
pub fn sweep_categories(config: &SweepConfig, ns: &[usize], inputs: &[Vec<ItemId>]) -> Result<SweepResult> {
    let build = |classifier: ClassifierMode, n: usize| -> Result<Model> {
        let vocab = Vocabulary::balanced(config.num_items, n)?;
        let model_config = ModelConfig {
            classifier,
            ..config.model
        };
        Model::new(model_config, vocab, config.seed)
    };
    let baseline = {
        let model = build(ClassifierMode::Vanilla, 1)?;
        time_inference(&model, inputs, config.template, config.plan)?
    };
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        log::info!("sweep: N = {n}");
        let model = build(ClassifierMode::TwoStage, n)?;
        let report = time_inference(&model, inputs, config.template, config.plan)?;
        rows.push(with_speedup(report, &baseline));
    }
    Ok(SweepResult { baseline, rows })
}

pub const CSV_HEADER: &str = "mode,classifier,M,N,K,d,H,per_sample_ms,mac_count,speedup";

/// One CSV row per report under [`CSV_HEADER`]. A missing speedup is empty.
pub fn write_csv<W: Write>(reports: &[LatencyReport], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in reports {
        let speedup = r.speedup_vs_baseline.map(|s| format!("{s:.4}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{},{}",
            r.mode, r.classifier, r.num_items, r.num_categories, r.k, r.d, r.layers, r.per_sample_ms, r.mac_count, speedup
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(classifier: ClassifierMode, m: usize, n: usize) -> Model {
        let config = ModelConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            max_len: 32,
            classifier,
            ..ModelConfig::default()
        };
        Model::new(config, Vocabulary::balanced(m, n).unwrap(), 5).unwrap()
    }

    const PLAN: TimingPlan = TimingPlan { runs: 3, warmup: 2 };

    #[test]
    fn formula_examples() {
        assert_eq!(balanced_macs(ClassifierMode::Vanilla, 100_000, 1, 10, 64), 64_000_000);
        assert_eq!(balanced_macs(ClassifierMode::TwoStage, 100_000, 10, 10, 64), 6_406_400);
        for m in [7, 1000] {
            assert_eq!(
                balanced_macs(ClassifierMode::TwoStage, m, 1, 10, 64),
                balanced_macs(ClassifierMode::Vanilla, m, 1, 10, 64) + 640
            );
        }
    }

    #[test]
    fn report_matches_counters_and_formula() {
        let inputs = random_inputs(60, 4, 5, 1);
        for classifier in [ClassifierMode::Vanilla, ClassifierMode::TwoStage] {
            for mode in [DecodeMode::Nar, DecodeMode::Ar, DecodeMode::Recall] {
                let model = small(classifier, 60, 6);
                let template = RequestTemplate { mode, k: 4 };
                let report = time_inference(&model, &inputs, template, PLAN).unwrap();
                assert_eq!(report.per_run_ms.len(), 3);
                assert!(report.per_sample_ms > 0.0);

                let mut decoder = Decoder::new(&model);
                let mut expected = 0;
                for input in &inputs {
                    let g = decoder
                        .generate(&GenerationRequest { input: input.clone(), k: 4, mode })
                        .unwrap();
                    assert_eq!(g.realized_categories.len(), classified_rows(mode, 4));
                    expected += count_classifier_macs(classifier, 8, model.vocab(), &g.realized_categories);
                }
                assert_eq!(report.mac_count, expected, "{classifier} {mode}");
            }
        }
    }

    #[test]
    fn more_runs_only_change_timings() {
        let model = small(ClassifierMode::TwoStage, 40, 4);
        let inputs = random_inputs(40, 3, 4, 2);
        let template = RequestTemplate { mode: DecodeMode::Nar, k: 3 };
        let a = time_inference(&model, &inputs, template, TimingPlan { runs: 1, warmup: 0 }).unwrap();
        let b = time_inference(&model, &inputs, template, TimingPlan { runs: 4, warmup: 1 }).unwrap();
        assert_eq!(a.mac_count, b.mac_count);
        assert_eq!(b.per_run_ms.len(), 4);
    }

    #[test]
    fn stages_account_for_the_total() {
        let model = small(ClassifierMode::Vanilla, 2000, 1);
        let inputs = random_inputs(2000, 20, 10, 3);
        let template = RequestTemplate { mode: DecodeMode::Nar, k: 10 };
        let report = time_inference(&model, &inputs, template, PLAN).unwrap();
        let f = report.stage_fractions();
        assert!(f.total() <= 1.0 + 1e-9 && f.total() >= 0.9, "{f:?}");
    }

    #[test]
    fn sweep_emits_one_row_per_n() {
        let config = SweepConfig {
            model: ModelConfig {
                dim: 8,
                layers: 1,
                heads: 1,
                max_len: 16,
                ..ModelConfig::default()
            },
            num_items: 100,
            template: RequestTemplate { mode: DecodeMode::Nar, k: 5 },
            plan: TimingPlan { runs: 1, warmup: 1 },
            seed: 0,
        };
        let inputs = random_inputs(100, 3, 4, 4);
        let sweep = sweep_categories(&config, &[1, 10], &inputs).unwrap();
        assert_eq!(sweep.rows.len(), 2);
        assert!(sweep.baseline.speedup_vs_baseline.is_none());
        assert!(sweep.rows.iter().all(|r| r.speedup_vs_baseline.is_some()));
        // N = 1 pays the flat cost plus one category row per slot
        assert_eq!(sweep.rows[0].mac_count, sweep.baseline.mac_count + 3 * 5 * 8);
        assert_eq!(sweep.rows[1].mac_count, 3 * balanced_macs(ClassifierMode::TwoStage, 100, 10, 5, 8));

        let mut csv = Vec::new();
        write_csv(&sweep.rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    }

    #[test]
    fn fit_inputs_keeps_the_tail() {
        let pairs = vec![ListPair::new((0..10).collect(), vec![10])];
        assert_eq!(fit_inputs(&pairs, 3, 10).unwrap(), vec![vec![6, 7, 8, 9]]);
        assert!(fit_inputs(&pairs, 7, 10).is_err());
    }
}
