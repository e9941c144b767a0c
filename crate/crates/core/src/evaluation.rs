//! Verified/anonymous splits, cumulative match curves, background-size
//! sweeps and rank-n tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::embedding::EmbeddingVector;
use crate::gallery::{Gallery, GalleryError, ProfileEmbeddings, RankedEntry};
use crate::ingestion::ProfileMeta;
use crate::seeding::derive_seed;

pub const DEFAULT_RANK_POINTS: [usize; 5] = [1, 50, 100, 1000, 5000];

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("users with too few sequences: {}", format_short(.0))]
    InsufficientSequences(Vec<(String, usize)>),
    #[error("query user `{0}` is not in the gallery")]
    QueryUserNotInGallery(String),
    #[error("background size {size} exceeds population {population}")]
    SizeExceedsPopulation { size: usize, population: usize },
    #[error("background size must be at least 1")]
    ZeroSize,
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error(transparent)]
    Gallery(#[from] GalleryError),
}

fn format_short(users: &[(String, usize)]) -> String {
    users
        .iter()
        .map(|(u, n)| format!("{u} ({n})"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationConfig {
    pub verified_per_user: usize,
    pub anonymous_per_user: usize,
    pub background_sizes: Vec<usize>,
    pub prescreen_attribute: Option<String>,
    pub rng_seed: u64,
    pub rank_report_points: Vec<usize>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            verified_per_user: 10,
            anonymous_per_user: 5,
            background_sizes: Vec::new(),
            prescreen_attribute: None,
            rng_seed: 0,
            rank_report_points: DEFAULT_RANK_POINTS.to_vec(),
        }
    }
}

impl EvaluationConfig {
    /// `key=value` lines recorded in output file headers.
    pub fn describe(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        format!(
            "seed={} verified_per_user={} anonymous_per_user={} background_sizes={} rank_points={} prescreen={}",
            self.rng_seed,
            self.verified_per_user,
            self.anonymous_per_user,
            list(&self.background_sizes),
            list(&self.rank_report_points),
            self.prescreen_attribute.as_deref().unwrap_or("none"),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileSplit<T> {
    pub user_id: String,
    pub verified: Vec<T>,
    pub anonymous: Vec<T>,
}

/// Shuffles each user's items with a seed derived from the user id and takes
/// the first `verified` as verified and the next `anonymous` as anonymous.
/// Surplus items are dropped. Every short user is reported at once.
pub fn split_profiles<T: Clone>(
    users: &BTreeMap<String, Vec<T>>,
    verified: usize,
    anonymous: usize,
    rng_seed: u64,
) -> Result<Vec<ProfileSplit<T>>, EvaluationError> {
    let need = verified + anonymous;
    let short: Vec<(String, usize)> = users
        .iter()
        .filter(|(_, items)| items.len() < need)
        .map(|(u, items)| (u.clone(), items.len()))
        .collect();
    if !short.is_empty() {
        return Err(EvaluationError::InsufficientSequences(short));
    }
    Ok(users
        .iter()
        .map(|(user, items)| {
            let mut order: Vec<usize> = (0..items.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, user)));
            let pick = |range: std::ops::Range<usize>| {
                order[range].iter().map(|&i| items[i].clone()).collect()
            };
            ProfileSplit {
                user_id: user.clone(),
                verified: pick(0..verified),
                anonymous: pick(verified..need),
            }
        })
        .collect())
}

/// Fraction of queries whose true match lies within the top `r`, for
/// `r = 1..=population`.
#[derive(Clone, Debug, PartialEq)]
pub struct CmcCurve {
    values: Vec<f64>,
    queries: usize,
}

impl CmcCurve {
    /// Builds a curve from 1-based true-match ranks.
    pub fn from_ranks(ranks: &[usize], population: usize) -> Self {
        let mut counts = vec![0usize; population];
        for &r in ranks {
            assert!(
                r >= 1 && r <= population,
                "rank {r} outside 1..={population}"
            );
            counts[r - 1] += 1;
        }
        let mut cumulative = 0;
        let values = counts
            .into_iter()
            .map(|c| {
                cumulative += c;
                cumulative as f64 / ranks.len() as f64
            })
            .collect();
        Self {
            values,
            queries: ranks.len(),
        }
    }

    pub fn population(&self) -> usize {
        self.values.len()
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    /// Value at 1-based rank `r`; ranks past the population give 1.0.
    pub fn at(&self, r: usize) -> f64 {
        assert!(r >= 1, "ranks are 1-based");
        self.values.get(r - 1).copied().unwrap_or(1.0)
    }

    /// Values for ranks 1..=population.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[0] <= w[1])
    }

    /// `rank,fraction` CSV with a `#` comment header.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: &str) -> std::io::Result<()> {
        let mut text = String::new();
        for line in comment.lines() {
            writeln!(text, "# {line}").unwrap();
        }
        text.push_str("rank,fraction\n");
        for (i, v) in self.values.iter().enumerate() {
            writeln!(text, "{},{v}", i + 1).unwrap();
        }
        out.write_all(text.as_bytes())
    }
}

/// One anonymous sample with its ground-truth identity. `meta` carries the
/// attribute values used for pre-screening.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub meta: ProfileMeta,
    pub anonymous: Vec<EmbeddingVector>,
}

impl Query {
    pub fn user_id(&self) -> &str {
        &self.meta.user_id
    }
}

/// A query for every profile that carries anonymous embeddings.
pub fn queries_from_gallery(gallery: &Gallery) -> Vec<Query> {
    gallery
        .profiles()
        .iter()
        .filter(|p| !p.anonymous.is_empty())
        .map(|p| Query {
            meta: p.meta.clone(),
            anonymous: p.anonymous.clone(),
        })
        .collect()
}

fn true_match_rank(gallery: &Gallery, query: &Query) -> Result<usize, EvaluationError> {
    let ranked = gallery.rank(&query.anonymous)?;
    ranked
        .rank_of(query.user_id())
        .ok_or_else(|| EvaluationError::QueryUserNotInGallery(query.user_id().to_string()))
}

/// Rank of each query's true match in `gallery`, in query order.
pub fn true_match_ranks(
    gallery: &Gallery,
    queries: &[Query],
) -> Result<Vec<usize>, EvaluationError> {
    if queries.is_empty() {
        return Err(EvaluationError::NoQueries);
    }
    if let Some(q) = queries.iter().find(|q| gallery.get(q.user_id()).is_none()) {
        return Err(EvaluationError::QueryUserNotInGallery(
            q.user_id().to_string(),
        ));
    }
    queries
        .par_iter()
        .map(|q| true_match_rank(gallery, q))
        .collect()
}

pub fn compute_cmc(gallery: &Gallery, queries: &[Query]) -> Result<CmcCurve, EvaluationError> {
    let ranks = true_match_ranks(gallery, queries)?;
    Ok(CmcCurve::from_ranks(&ranks, gallery.len()))
}

fn query_attribute<'q>(query: &'q Query, attribute: &str) -> Result<&'q str, EvaluationError> {
    query
        .meta
        .get(attribute)
        .ok_or_else(|| EvaluationError::UnknownAttribute(attribute.to_string()))
}

/// Raw and pre-screened curves over the same gallery. Each query is ranked
/// within the profiles sharing its own attribute value. The pre-screened
/// curve keeps the raw population so both are comparable rank for rank.
pub fn prescreen_sweep(
    gallery: &Gallery,
    queries: &[Query],
    attribute: &str,
) -> Result<(CmcCurve, CmcCurve), EvaluationError> {
    if gallery
        .profiles()
        .iter()
        .any(|p| p.meta.get(attribute).is_none())
    {
        return Err(EvaluationError::UnknownAttribute(attribute.to_string()));
    }
    let raw = compute_cmc(gallery, queries)?;
    let ranks = queries
        .par_iter()
        .map(|q| {
            let sub = gallery.prescreen(attribute, query_attribute(q, attribute)?)?;
            true_match_rank(&sub, q)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((raw, CmcCurve::from_ranks(&ranks, gallery.len())))
}

/// Nested background galleries drawn from one seeded permutation of the
/// population. The background of size `n` for a query user is that user plus
/// the first `n - 1` other users of the permutation, so every background
/// contains the true match and each size's background contains all smaller
/// ones.
#[derive(Clone, Debug)]
pub struct BackgroundSweep {
    order: Vec<String>,
    sizes: Vec<usize>,
}

pub fn background_sweep(
    population: &Gallery,
    sizes: &[usize],
    rng_seed: u64,
) -> Result<BackgroundSweep, EvaluationError> {
    for &size in sizes {
        if size == 0 {
            return Err(EvaluationError::ZeroSize);
        }
        if size > population.len() {
            return Err(EvaluationError::SizeExceedsPopulation {
                size,
                population: population.len(),
            });
        }
    }
    let mut order: Vec<String> = population.user_ids().map(str::to_string).collect();
    order.sort_unstable();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        rng_seed,
        "background",
    )));
    Ok(BackgroundSweep {
        order,
        sizes: sizes.to_vec(),
    })
}

impl BackgroundSweep {
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// The population in sampling order.
    pub fn order(&self) -> &[String] {
        &self.order
    }

    /// User ids of the size-`size` background for `query_user`.
    pub fn background<'a>(&'a self, size: usize, query_user: &'a str) -> Vec<&'a str> {
        let mut out = vec![query_user];
        out.extend(
            self.order
                .iter()
                .map(String::as_str)
                .filter(|u| *u != query_user)
                .take(size - 1),
        );
        out
    }

    pub fn sub_gallery(&self, population: &Gallery, size: usize, query_user: &str) -> Gallery {
        let keep: std::collections::HashSet<&str> =
            self.background(size, query_user).into_iter().collect();
        population.subset(|p| keep.contains(p.user_id()))
    }

    /// Raw curve per size, plus a pre-screened curve per size when
    /// `attribute` is given. Distances are computed once per query and
    /// reused across sizes.
    pub fn evaluate(
        &self,
        population: &Gallery,
        queries: &[Query],
        attribute: Option<&str>,
    ) -> Result<Vec<SweepResult>, EvaluationError> {
        if queries.is_empty() {
            return Err(EvaluationError::NoQueries);
        }
        let profiles = population.profiles();
        let position: HashMap<&str, usize> = self
            .order
            .iter()
            .enumerate()
            .map(|(i, u)| (u.as_str(), i))
            .collect();
        let index: HashMap<&str, usize> = profiles
            .iter()
            .enumerate()
            .map(|(i, p)| (p.user_id(), i))
            .collect();
        if let Some(attr) = attribute {
            if profiles.iter().any(|p| p.meta.get(attr).is_none()) {
                return Err(EvaluationError::UnknownAttribute(attr.to_string()));
            }
        }

        // Per query, per size: (raw rank, pre-screened rank).
        let per_query: Vec<Vec<(usize, usize)>> = queries
            .par_iter()
            .map(|q| {
                let &own = index.get(q.user_id()).ok_or_else(|| {
                    EvaluationError::QueryUserNotInGallery(q.user_id().to_string())
                })?;
                let screen = attribute.map(|a| query_attribute(q, a)).transpose()?;
                let distances = population.distances(&q.anonymous)?;
                let truth = RankedEntry {
                    user_id: q.user_id().to_string(),
                    distance: distances[own],
                };
                let own_pos = position[q.user_id()];
                // Sampling positions of every profile that outranks the true match.
                let mut beaters_all = Vec::new();
                let mut beaters_screened = Vec::new();
                for (p, &distance) in profiles.iter().zip(&distances) {
                    if p.user_id() == q.user_id() {
                        continue;
                    }
                    let entry = RankedEntry {
                        user_id: p.user_id().to_string(),
                        distance,
                    };
                    if RankedEntry::order(&entry, &truth).is_lt() {
                        let pos = position[p.user_id()];
                        beaters_all.push(pos);
                        if screen.is_none_or(|v| p.meta.get(attribute.unwrap()) == Some(v)) {
                            beaters_screened.push(pos);
                        }
                    }
                }
                beaters_all.sort_unstable();
                beaters_screened.sort_unstable();
                Ok(self
                    .sizes
                    .iter()
                    .map(|&n| {
                        // Others come from the first n - 1 positions, skipping the query's own.
                        let cutoff = if own_pos < n - 1 { n } else { n - 1 };
                        let below = |v: &[usize]| v.partition_point(|&p| p < cutoff);
                        (1 + below(&beaters_all), 1 + below(&beaters_screened))
                    })
                    .collect())
            })
            .collect::<Result<_, EvaluationError>>()?;

        Ok(self
            .sizes
            .iter()
            .enumerate()
            .map(|(s, &size)| {
                let raw: Vec<usize> = per_query.iter().map(|r| r[s].0).collect();
                let screened: Vec<usize> = per_query.iter().map(|r| r[s].1).collect();
                SweepResult {
                    size,
                    raw: CmcCurve::from_ranks(&raw, size),
                    prescreened: attribute.map(|_| CmcCurve::from_ranks(&screened, size)),
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub size: usize,
    pub raw: CmcCurve,
    pub prescreened: Option<CmcCurve>,
}

/// Rank-n accuracies in percent; `None` where the rank exceeds the
/// background size.
#[derive(Clone, Debug, PartialEq)]
pub struct RankTable {
    pub sizes: Vec<usize>,
    pub points: Vec<usize>,
    /// `raw[point][size]`
    pub raw: Vec<Vec<Option<f64>>>,
    pub prescreened: Option<Vec<Vec<Option<f64>>>>,
}

const DASH: &str = "—";

fn cell(curve: &CmcCurve, rank: usize) -> Option<f64> {
    (rank <= curve.population()).then(|| 100.0 * curve.at(rank))
}

fn fmt_cell(c: Option<f64>) -> String {
    c.map_or_else(|| DASH.to_string(), |v| format!("{v:.1}"))
}

pub fn rank_table(results: &[SweepResult], points: &[usize]) -> RankTable {
    let grid = |pick: &dyn Fn(&SweepResult) -> Option<&CmcCurve>| -> Vec<Vec<Option<f64>>> {
        points
            .iter()
            .map(|&r| {
                results
                    .iter()
                    .map(|s| pick(s).and_then(|c| cell(c, r)))
                    .collect()
            })
            .collect()
    };
    let prescreened = results.iter().all(|s| s.prescreened.is_some()) && !results.is_empty();
    RankTable {
        sizes: results.iter().map(|s| s.size).collect(),
        points: points.to_vec(),
        raw: grid(&|s| Some(&s.raw)),
        prescreened: prescreened.then(|| grid(&|s| s.prescreened.as_ref())),
    }
}

impl RankTable {
    /// One row per (rank point, variant); raw rows first.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: &str) -> std::io::Result<()> {
        let mut text = String::new();
        for line in comment.lines() {
            writeln!(text, "# {line}").unwrap();
        }
        text.push_str("rank,prescreened");
        for s in &self.sizes {
            write!(text, ",N={s}").unwrap();
        }
        text.push('\n');
        let variants =
            std::iter::once((false, &self.raw)).chain(self.prescreened.iter().map(|p| (true, p)));
        for (flag, grid) in variants {
            for (point, row) in self.points.iter().zip(grid) {
                write!(text, "Rank-{point},{flag}").unwrap();
                for c in row {
                    write!(text, ",{}", fmt_cell(*c)).unwrap();
                }
                text.push('\n');
            }
        }
        out.write_all(text.as_bytes())
    }

    /// Plain-text layout with pre-screened values in brackets.
    pub fn render(&self) -> String {
        let mut text = String::from("rank");
        for s in &self.sizes {
            write!(text, "\tN={s}").unwrap();
        }
        text.push('\n');
        for (i, point) in self.points.iter().enumerate() {
            write!(text, "Rank-{point}").unwrap();
            for j in 0..self.sizes.len() {
                write!(text, "\t{}", fmt_cell(self.raw[i][j])).unwrap();
                if let Some(p) = &self.prescreened {
                    write!(text, " ({})", fmt_cell(p[i][j])).unwrap();
                }
            }
            text.push('\n');
        }
        text
    }
}

/// Builds a gallery from split profiles and their embeddings.
pub fn gallery_from_splits(
    splits: Vec<ProfileSplit<EmbeddingVector>>,
    metas: &[ProfileMeta],
) -> Result<Gallery, EvaluationError> {
    let by_id: HashMap<&str, &ProfileMeta> =
        metas.iter().map(|m| (m.user_id.as_str(), m)).collect();
    let profiles = splits
        .into_iter()
        .map(|s| {
            let meta = by_id
                .get(s.user_id.as_str())
                .map_or_else(|| ProfileMeta::new(&s.user_id), |m| (*m).clone());
            ProfileEmbeddings::new(meta, s.verified, s.anonymous)
        })
        .collect();
    Ok(Gallery::new(profiles)?)
}
