//! Retrieval, recognition and reconstruction evaluation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Granularity, Mvlt};
use crate::params::ParamStore;
use crate::rng::{rng_for, Rng};
use crate::tensor::Float;
use crate::text::Vocab;
use crate::vision::{apply_mask, make_mask_plan, MaskStyle};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
pub const DEFAULT_NEGATIVES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Image query, text candidates.
    Tir,
    /// Text query, image candidates.
    Itr,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Tir => "tir",
            Direction::Itr => "itr",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tir" => Ok(Direction::Tir),
            "itr" => Ok(Direction::Itr),
            _ => Err(Error::invalid(format!("unknown retrieval direction {s:?}; expected tir or itr"))),
        }
    }
}

/// Where negatives come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativePool {
    #[default]
    SameSubCategory,
    AllProducts,
}

/// Whether each image of a product forms its own set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Pairs,
    /// One set per product, using its first image.
    Products,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateOptions {
    pub direction: Direction,
    pub n_neg: usize,
    pub pool: NegativePool,
    pub aggregation: Aggregation,
}

impl CandidateOptions {
    pub fn new(direction: Direction) -> Self {
        CandidateOptions {
            direction,
            n_neg: DEFAULT_NEGATIVES,
            pool: NegativePool::default(),
            aggregation: Aggregation::default(),
        }
    }
}

/// One image-caption pair to score: `image` is `(product, view)`, `caption`
/// a product index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub image: (usize, usize),
    pub caption: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub direction: Direction,
    /// Product whose image (TIR) or caption (ITR) is the query.
    pub query: usize,
    /// Shared sub-category, absent when negatives span all products.
    pub sub: Option<usize>,
    pub candidates: Vec<Candidate>,
    pub positive: usize,
}

/// One set per query with its positive and `n_neg` mismatched candidates,
/// shuffled. Pools too small for `n_neg` shrink it with a warning; queries
/// with no possible negative are skipped.
pub fn build_candidate_sets(dataset: &Dataset, opts: &CandidateOptions, rng: &mut Rng) -> Result<Vec<CandidateSet>> {
    if dataset.len() < 2 {
        return Err(Error::Dataset("retrieval needs at least two products".into()));
    }
    let groups = dataset.by_sub_category();
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut warned = std::collections::BTreeSet::new();
    let describe = |sub: Option<usize>| {
        sub.map_or("the product pool".to_string(), |s| format!("sub-category {:?}", dataset.sub_names[s]))
    };
    let queries: Vec<(usize, usize)> = match opts.aggregation {
        Aggregation::Pairs => dataset.pairs(),
        Aggregation::Products => (0..dataset.len()).map(|p| (p, 0)).collect(),
    };
    let mut sets = Vec::with_capacity(queries.len());
    for (p, view) in queries {
        let (pool, sub) = match opts.pool {
            NegativePool::SameSubCategory => {
                let s = dataset.products[p].sub;
                (&groups[&s], Some(s))
            }
            NegativePool::AllProducts => (&all, None),
        };
        let others: Vec<usize> = pool.iter().copied().filter(|&q| q != p).collect();
        let n_neg = opts.n_neg.min(others.len());
        if n_neg == 0 {
            if warned.insert(sub) {
                log::warn!("no negatives for {}; its queries are skipped", describe(sub));
            }
            continue;
        }
        if n_neg < opts.n_neg && warned.insert(sub) {
            log::warn!(
                "{} candidates available for {}; using {n_neg} negatives instead of {}",
                others.len(),
                describe(sub),
                opts.n_neg
            );
        }
        let picked = index::sample(rng, others.len(), n_neg);
        let mut candidates = Vec::with_capacity(n_neg + 1);
        candidates.push(Candidate {
            image: (p, view),
            caption: p,
        });
        for i in picked.iter() {
            let q = others[i];
            candidates.push(match opts.direction {
                Direction::Tir => Candidate {
                    image: (p, view),
                    caption: q,
                },
                Direction::Itr => Candidate {
                    image: (q, rng.gen_range(0..dataset.products[q].images.len())),
                    caption: p,
                },
            });
        }
        let positive = candidates[0];
        candidates.shuffle(rng);
        let positive = candidates
            .iter()
            .position(|c| *c == positive)
            .expect("positive survives the shuffle");
        sets.push(CandidateSet {
            direction: opts.direction,
            query: p,
            sub,
            candidates,
            positive,
        });
    }
    Ok(sets)
}

/// Matching probability of every candidate, on unmasked inputs.
pub fn score_candidates(
    model: &Mvlt,
    store: &ParamStore,
    dataset: &Dataset,
    vocab: &Vocab,
    set: &CandidateSet,
) -> Result<Vec<Float>> {
    let text_len = model.config.encoder.text_len;
    set.candidates
        .iter()
        .map(|c| {
            let (p, v) = c.image;
            let tokens = vocab.encode(&dataset.products[c.caption].caption, text_len);
            model.match_score(store, &dataset.products[p].images[v], &tokens)
        })
        .collect()
}

/// 1-based rank of the positive. Candidates with equal scores keep their
/// order, so an earlier tie outranks the positive.
pub fn positive_rank(scores: &[Float], positive: usize) -> Result<usize> {
    let Some(&s) = scores.get(positive) else {
        return Err(Error::invalid(format!(
            "positive index {positive} outside {} candidates",
            scores.len()
        )));
    };
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > s || (x == s && i < positive))
        .count();
    Ok(above + 1)
}

/// Hit flags for each `k`.
pub fn recall_at_k(scores: &[Float], positive: usize, ks: &[usize]) -> Result<Vec<bool>> {
    let rank = positive_rank(scores, positive)?;
    Ok(ks.iter().map(|&k| rank <= k).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub direction: String,
    pub sets: usize,
    /// Percentages.
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub sum_r: f64,
}

impl RetrievalReport {
    pub fn from_percentages(direction: &str, sets: usize, r1: f64, r5: f64, r10: f64) -> Self {
        RetrievalReport {
            direction: direction.to_string(),
            sets,
            r1,
            r5,
            r10,
            sum_r: sum_r(r1 / 100.0, r5 / 100.0, r10 / 100.0),
        }
    }

    pub fn from_ranks(direction: &str, ranks: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        let pct = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Self::from_percentages(direction, ranks.len(), pct(1), pct(5), pct(10))
    }

    pub fn to_text(&self) -> String {
        format!(
            "{}: R@1 {:.2}  R@5 {:.2}  R@10 {:.2}  Sum {:.2}  ({} sets)\n",
            self.direction.to_uppercase(),
            self.r1,
            self.r5,
            self.r10,
            self.sum_r,
            self.sets
        )
    }
}

/// `(R@1 + R@5 + R@10)·100` with recalls as fractions.
pub fn sum_r(r1: f64, r5: f64, r10: f64) -> f64 {
    (r1 + r5 + r10) * 100.0
}

/// `(A + macro-F)·100` with both as fractions.
pub fn sum_c(accuracy: f64, macro_f: f64) -> f64 {
    (accuracy + macro_f) * 100.0
}

/// Per-set outcome for the CSV report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SetOutcome {
    pub query: String,
    pub candidates: usize,
    pub rank: usize,
}

/// Scores every set in parallel and aggregates the ranks.
pub fn evaluate_retrieval(
    model: &Mvlt,
    store: &ParamStore,
    dataset: &Dataset,
    vocab: &Vocab,
    sets: &[CandidateSet],
) -> Result<(RetrievalReport, Vec<SetOutcome>)> {
    let direction = sets.first().map_or("tir", |s| s.direction.as_str());
    let outcomes = sets
        .par_iter()
        .map(|set| {
            let scores = score_candidates(model, store, dataset, vocab, set)?;
            Ok(SetOutcome {
                query: dataset.products[set.query].id.clone(),
                candidates: set.candidates.len(),
                rank: positive_rank(&scores, set.positive)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ranks: Vec<usize> = outcomes.iter().map(|o| o.rank).collect();
    Ok((RetrievalReport::from_ranks(direction, &ranks), outcomes))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecognitionReport {
    pub samples: usize,
    /// Fractions.
    pub accuracy: f64,
    pub macro_f: f64,
    pub sum_c: f64,
    #[serde(skip)]
    pub per_class_f1: Vec<f64>,
}

impl RecognitionReport {
    pub fn to_text(&self, label: &str) -> String {
        format!(
            "{label}: accuracy {:.4}  macro-F {:.4}  Sum {:.2}  ({} samples)\n",
            self.accuracy, self.macro_f, self.sum_c, self.samples
        )
    }
}

/// Accuracy and macro-F over all `n_classes`, absent classes included.
/// Undefined precision or recall counts as 0.
pub fn category_metrics(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<RecognitionReport> {
    if n_classes < 2 {
        return Err(Error::invalid(format!("{n_classes} classes; recognition needs at least 2")));
    }
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(Error::invalid(format!("class {bad} outside {n_classes} classes")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    let mut actual = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        predicted[p] += 1;
        actual[l] += 1;
        if p == l {
            tp[l] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class_f1: Vec<f64> = (0..n_classes)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], actual[c]);
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    let accuracy = ratio(tp.iter().sum(), labels.len());
    let macro_f = per_class_f1.iter().sum::<f64>() / n_classes as f64;
    Ok(RecognitionReport {
        samples: labels.len(),
        accuracy,
        macro_f,
        sum_c: sum_c(accuracy, macro_f),
        per_class_f1,
    })
}

/// Classifies every image-caption pair with the attached head.
pub fn evaluate_recognition(
    model: &Mvlt,
    store: &ParamStore,
    dataset: &Dataset,
    vocab: &Vocab,
    gran: Granularity,
) -> Result<RecognitionReport> {
    let text_len = model.config.encoder.text_len;
    let pairs = dataset.pairs();
    let outcomes = pairs
        .par_iter()
        .map(|&(p, v)| {
            let prod = &dataset.products[p];
            let tokens = vocab.encode(&prod.caption, text_len);
            let pred = model.classify(store, gran, &prod.images[v], &tokens)?;
            let label = match gran {
                Granularity::Main => prod.main,
                Granularity::Sub => prod.sub,
            };
            Ok((pred, label))
        })
        .collect::<Result<Vec<_>>>()?;
    let (preds, labels): (Vec<usize>, Vec<usize>) = outcomes.into_iter().unzip();
    let n = match gran {
        Granularity::Main => dataset.main_names.len(),
        Granularity::Sub => dataset.sub_names.len(),
    };
    category_metrics(&preds, &labels, n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MigSettings {
    pub ratio: f64,
    pub patch: usize,
    pub alpha: usize,
    pub style: MaskStyle,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MigRow {
    pub product: String,
    pub view: usize,
    pub masked_ratio: f64,
    /// Mean per-pixel smooth-ℓ1 between reconstruction and original.
    pub smooth_l1: f64,
}

pub const MIG_SCORES: &str = "scores.csv";

fn mean_smooth_l1(a: &[Float], b: &[Float]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum();
    total / a.len().max(1) as f64
}

/// Masks every image, reconstructs it with its caption, and writes
/// `{id}_v{view}_{masked,recon,gt}.png` plus a score CSV to `out_dir`.
pub fn mig_dump(
    model: &Mvlt,
    store: &ParamStore,
    dataset: &Dataset,
    vocab: &Vocab,
    settings: &MigSettings,
    out_dir: &Path,
) -> Result<Vec<MigRow>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let text_len = model.config.encoder.text_len;
    let pairs = dataset.pairs();
    let rows = pairs
        .par_iter()
        .enumerate()
        .map(|(i, &(p, v))| {
            let prod = &dataset.products[p];
            let gt = &prod.images[v];
            let mut rng = rng_for(settings.seed, "mig-mask", i as u64);
            let plan = make_mask_plan(
                gt.height(),
                gt.width(),
                settings.patch,
                settings.alpha,
                settings.ratio,
                settings.style,
                &mut rng,
            )?;
            let masked = apply_mask(gt, &plan)?;
            let tokens = vocab.encode(&prod.caption, text_len);
            let recon = model.reconstruct(store, &masked, &tokens)?;
            let stem = format!("{}_v{v}", prod.id);
            masked.save_png(&out_dir.join(format!("{stem}_masked.png")))?;
            recon.save_png(&out_dir.join(format!("{stem}_recon.png")))?;
            gt.save_png(&out_dir.join(format!("{stem}_gt.png")))?;
            Ok(MigRow {
                product: prod.id.clone(),
                view: v,
                masked_ratio: plan.achieved_ratio(),
                smooth_l1: mean_smooth_l1(recon.data(), gt.data()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(&out_dir.join(MIG_SCORES), &rows)?;
    Ok(rows)
}

/// Writes serialisable rows with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Ranks under random scores, for chance baselines.
pub fn random_ranks(sets: usize, candidates: usize, rng: &mut Rng) -> Vec<usize> {
    (0..sets)
        .map(|_| {
            let scores: Vec<Float> = (0..candidates).map(|_| rng.gen()).collect();
            let positive = rng.gen_range(0..candidates);
            positive_rank(&scores, positive).expect("positive within range")
        })
        .collect()
}
