//! Decoding under three regimes and the ranking metrics used to score
//! generated lists.
//!
//! - `ar`: one encoder pass per generated item, each appended to the context
//! - `nar`: all `K` slots predicted from a single encoder pass
//! - `recall`: the top `K` items of a single next-item distribution
//!
//! Every mode returns `K` distinct items.

mod dedup;
mod metrics;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

pub use dedup::{dedup, RankedCandidates};
pub use metrics::{hr_at_k, ndcg_at_k, MetricReport};

use crate::masker::{prefix_query_bundle, TokenBundle};
use crate::model::{top_k, ClassifierMode, Model};
use crate::{CategoryId, Error, ItemId, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Ar,
    Nar,
    Recall,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Ar => "ar",
            DecodeMode::Nar => "nar",
            DecodeMode::Recall => "recall",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(DecodeMode::Ar),
            "nar" => Ok(DecodeMode::Nar),
            "recall" => Ok(DecodeMode::Recall),
            other => Err(Error::invalid(format!("unknown decode mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub input: Vec<ItemId>,
    pub k: usize,
    pub mode: DecodeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generation {
    pub items: Vec<ItemId>,
    /// Ranked candidates behind each generated position.
    pub candidates: RankedCandidates,
    /// Local heads evaluated for each classified row, in evaluation order.
    /// Empty rows for the flat classifier.
    pub realized_categories: Vec<Vec<CategoryId>>,
}

/// Wall time spent per stage. Classification includes top-K selection.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimes {
    pub embed: Duration,
    pub encode: Duration,
    pub classify: Duration,
    pub dedup: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.embed + self.encode + self.classify + self.dedup
    }
}

/// Candidates for one row and the local heads that produced them.
type Ranked = (Vec<(ItemId, f64)>, Vec<CategoryId>);

/// Generates continuations with a model, accumulating stage timings.
pub struct Decoder<'a> {
    model: &'a Model,
    pub times: StageTimes,
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a Model) -> Self {
        Decoder {
            model,
            times: StageTimes::default(),
        }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn generate(&mut self, request: &GenerationRequest) -> Result<Generation> {
        let m = self.model.vocab().num_items();
        if request.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if request.k > m {
            return Err(Error::invalid(format!("K = {} exceeds the {m} items", request.k)));
        }
        let max_len = self.model.config().max_len;
        if request.input.len() + request.k + 3 > max_len {
            return Err(Error::invalid(format!(
                "|x| + K + 3 = {} exceeds max_len {max_len}",
                request.input.len() + request.k + 3
            )));
        }
        match request.mode {
            DecodeMode::Nar => self.nar(&request.input, request.k),
            DecodeMode::Ar => self.ar(&request.input, request.k),
            DecodeMode::Recall => self.recall(&request.input, request.k),
        }
    }

    fn hidden_rows(&mut self, bundle: &TokenBundle, rows: std::ops::Range<usize>) -> Result<Array2<f64>> {
        let t = Instant::now();
        let e0 = self.model.embed(bundle)?;
        self.times.embed += t.elapsed();
        let t = Instant::now();
        let e = self.model.encode(e0)?;
        self.times.encode += t.elapsed();
        Ok(e.slice(s![rows, ..]).to_owned())
    }

    /// Best `need` candidates for every row, with the local heads evaluated.
    fn rank(&mut self, rows: &Array2<f64>, need: usize) -> Result<Vec<Ranked>> {
        let t = Instant::now();
        let out = match self.model.config().classifier {
            ClassifierMode::Vanilla => {
                let probs = self.model.flat_probs(rows)?;
                probs
                    .rows()
                    .into_iter()
                    .map(|p| {
                        let p = p.as_slice().expect("row-major probabilities");
                        let ranked = top_k(p, need).into_iter().map(|i| (i as ItemId, p[i])).collect();
                        (ranked, Vec::new())
                    })
                    .collect()
            }
            ClassifierMode::TwoStage => {
                let cats = self.model.category_probs(rows)?;
                self.rank_two_stage(rows, &cats, need)?
            }
        };
        self.times.classify += t.elapsed();
        Ok(out)
    }

    /// Candidates from the most probable category, scored `p(c) p(i | c)`.
    /// Rows sharing an argmax category go through its local head together.
    /// When that category holds fewer than `need` items the next categories
    /// by `p(c)` are added one row at a time, and the pool is ordered by score.
    fn rank_two_stage(&self, rows: &Array2<f64>, category_probs: &Array2<f64>, need: usize) -> Result<Vec<Ranked>> {
        let vocab = self.model.vocab();
        let orders: Vec<Vec<usize>> = category_probs
            .rows()
            .into_iter()
            .map(|p| top_k(p.as_slice().expect("row-major probabilities"), p.len()))
            .collect();
        let mut out: Vec<Ranked> = vec![(Vec::with_capacity(need), Vec::with_capacity(1)); rows.nrows()];

        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (r, order) in orders.iter().enumerate() {
            match groups.iter_mut().find(|(c, _)| *c == order[0]) {
                Some((_, members)) => members.push(r),
                None => groups.push((order[0], vec![r])),
            }
        }
        let add = |out: &mut Ranked, r: usize, c: usize, local: &[f64]| {
            let members = vocab.members(c as CategoryId);
            let (pool, realized) = out;
            realized.push(c as CategoryId);
            for j in top_k(local, need - pool.len()) {
                pool.push((members[j], category_probs[[r, c]] * local[j]));
            }
        };
        for (c, members) in &groups {
            let local = self.model.local_probs_rows(&rows.select(Axis(0), members), *c as CategoryId)?;
            for (row, &r) in local.rows().into_iter().zip(members) {
                add(&mut out[r], r, *c, row.as_slice().expect("row-major probabilities"));
            }
        }
        for (r, order) in orders.iter().enumerate() {
            for &c in &order[1..] {
                if out[r].0.len() >= need {
                    break;
                }
                let local = self.model.local_probs(rows.row(r), c as CategoryId)?;
                add(&mut out[r], r, c, local.as_slice().expect("contiguous probabilities"));
            }
            out[r].0.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        }
        Ok(out)
    }

    fn finish(&mut self, ranked: Vec<Ranked>, k: usize) -> Result<Generation> {
        let (positions, realized_categories): (Vec<_>, Vec<_>) = ranked.into_iter().unzip();
        let candidates = RankedCandidates { positions };
        let t = Instant::now();
        let items = dedup(&candidates, k)?;
        self.times.dedup += t.elapsed();
        Ok(Generation {
            items,
            candidates,
            realized_categories,
        })
    }

    fn nar(&mut self, input: &[ItemId], k: usize) -> Result<Generation> {
        let vocab = self.model.vocab();
        let bundle = prefix_query_bundle(input, &[], k, vocab, self.model.config().max_len)?;
        let slots = TokenBundle::target_range(input.len(), k);
        let rows = self.hidden_rows(&bundle, slots)?;
        // K candidates per slot always leave one unused item for dedup
        let ranked = self.rank(&rows, k)?;
        self.finish(ranked, k)
    }

    fn ar(&mut self, input: &[ItemId], k: usize) -> Result<Generation> {
        let max_len = self.model.config().max_len;
        let mut generated = Vec::with_capacity(k);
        let mut positions = Vec::with_capacity(k);
        let mut realized_categories = Vec::with_capacity(k);
        for step in 0..k {
            let bundle = prefix_query_bundle(input, &generated, 1, self.model.vocab(), max_len)?;
            let slot = input.len() + 2 + step;
            let rows = self.hidden_rows(&bundle, slot..slot + 1)?;
            let (ranked, realized) = self.rank(&rows, step + 1)?.remove(0);
            let t = Instant::now();
            let pick = ranked
                .iter()
                .map(|&(i, _)| i)
                .find(|i| !generated.contains(i))
                .ok_or(Error::CandidatesExhausted {
                    position: step,
                    requested: k,
                })?;
            self.times.dedup += t.elapsed();
            generated.push(pick);
            positions.push(ranked);
            realized_categories.push(realized);
        }
        Ok(Generation {
            items: generated,
            candidates: RankedCandidates { positions },
            realized_categories,
        })
    }

    fn recall(&mut self, input: &[ItemId], k: usize) -> Result<Generation> {
        let vocab = self.model.vocab();
        let bundle = prefix_query_bundle(input, &[], 1, vocab, self.model.config().max_len)?;
        let slot = input.len() + 2;
        let rows = self.hidden_rows(&bundle, slot..slot + 1)?;
        let (ranked, realized) = self.rank(&rows, k)?.remove(0);
        let items = ranked.iter().map(|&(i, _)| i).collect();
        Ok(Generation {
            items,
            candidates: RankedCandidates {
                positions: vec![ranked],
            },
            realized_categories: vec![realized],
        })
    }
}

/// Generates `|y|` items for every pair with the given mode and scores them.
pub fn evaluate_pairs(
    model: &Model,
    pairs: &[crate::corpus::ListPair],
    mode: DecodeMode,
) -> Result<MetricReport> {
    let mut decoder = Decoder::new(model);
    let mut generated = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let request = GenerationRequest {
            input: pair.input.clone(),
            k: pair.target.len(),
            mode,
        };
        generated.push(decoder.generate(&request)?.items);
    }
    Ok(MetricReport::from_lists(
        generated
            .iter()
            .zip(pairs)
            .map(|(g, p)| (&g[..], &p.target[..])),
    ))
}
