//! Synthetic typists with controllable separability.
//!
//! Each typist has log-normal hold and press-to-press gap distributions and
//! a table of per-digraph gap offsets. `separability` shrinks every
//! between-user difference toward a shared centre: at 0 all typists share
//! one parameter set, at 1 they spread over the full population range.
//! Within-user noise does not depend on separability.

use std::collections::BTreeMap;
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::ingestion::{KeyEvent, KeystrokeSequence, ProfileMeta};
use crate::seeding::derive_seed;

/// Population typing rate, keys per second.
pub const RATE_MEAN: f64 = 5.1;
pub const RATE_SD: f64 = 2.1;

const HOLD_MEDIAN: f64 = 0.1;
const HOLD_LOG_SPREAD: f64 = 0.4;
const CV_CENTRE: f64 = 0.10;
const CV_SPREAD: f64 = 0.03;
const DIGRAPH_SD: f64 = 0.05;
const TRUNCATE_Z: f64 = 3.0;
const MIN_MS: i64 = 1;

pub const DEFAULT_COUNTRIES: [&str; 10] =
    ["FI", "US", "GB", "IN", "DE", "ES", "FR", "BR", "CA", "AU"];
pub const DEFAULT_SENTENCES_PER_USER: usize = 15;

/// Characters with their own digraph offsets; uppercase letters share the
/// lowercase entries.
const DIGRAPH_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ";

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("character {0:?} has no keycode")]
    UnmappableCharacter(char),
    #[error("empty text")]
    EmptyText,
    #[error("sentence pool is empty")]
    EmptyPool,
    #[error("population is empty")]
    EmptyPopulation,
    #[error("separability {0} outside [0, 1]")]
    BadSeparability(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TypistModel {
    pub user_id: String,
    /// Seconds.
    pub base_hold_mean: f64,
    pub base_hold_sd: f64,
    /// Press-to-press interval, seconds.
    pub base_gap_mean: f64,
    pub base_gap_sd: f64,
    /// Added to the gap before the second key of a digraph, seconds.
    pub digraph_offsets: BTreeMap<(u8, u8), f64>,
    pub country: String,
    pub rng_seed: u64,
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z = standard_normal(rng);
        if z.abs() <= TRUNCATE_Z {
            return z;
        }
    }
}

/// Draws a positive value with the given mean and sd, log-normal with its
/// log-space deviate truncated at three sd. `sd = 0` returns `mean`.
fn log_normal(rng: &mut impl Rng, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean;
    }
    let sigma2 = (1.0 + (sd / mean).powi(2)).ln();
    let mu = mean.ln() - sigma2 / 2.0;
    (mu + sigma2.sqrt() * truncated_normal(rng)).exp()
}

fn keycode(c: char) -> Result<u8, SynthError> {
    if c.is_ascii_graphic() || c == ' ' {
        Ok(c as u8)
    } else {
        Err(SynthError::UnmappableCharacter(c))
    }
}

/// Samples `num_users` typists. Countries are assigned round-robin.
pub fn sample_population(
    num_users: usize,
    separability: f64,
    countries: &[&str],
    rng_seed: u64,
) -> Result<Vec<TypistModel>, SynthError> {
    if num_users == 0 {
        return Err(SynthError::EmptyPopulation);
    }
    if !(0.0..=1.0).contains(&separability) {
        return Err(SynthError::BadSeparability(separability));
    }
    let countries: Vec<&str> = if countries.is_empty() {
        DEFAULT_COUNTRIES.to_vec()
    } else {
        countries.to_vec()
    };
    let rate_sigma = (1.0 + (RATE_SD / RATE_MEAN).powi(2)).ln().sqrt();
    let rate_mu = RATE_MEAN.ln() - rate_sigma * rate_sigma / 2.0;
    let width = (num_users - 1).to_string().len().max(4);
    Ok((0..num_users)
        .map(|i| {
            let user_id = format!("user{i:0width$}");
            let seed = derive_seed(rng_seed, &user_id);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "parameters"));
            let s = separability;
            let rate = (rate_mu + s * rate_sigma * standard_normal(&mut rng)).exp();
            let hold = (HOLD_MEDIAN.ln() + s * HOLD_LOG_SPREAD * standard_normal(&mut rng)).exp();
            let hold_cv = CV_CENTRE + s * CV_SPREAD * (rng.random::<f64>() * 2.0 - 1.0);
            let gap_cv = CV_CENTRE + s * CV_SPREAD * (rng.random::<f64>() * 2.0 - 1.0);
            let mut digraph_offsets = BTreeMap::new();
            for &a in DIGRAPH_ALPHABET {
                for &b in DIGRAPH_ALPHABET {
                    digraph_offsets.insert((a, b), s * DIGRAPH_SD * standard_normal(&mut rng));
                }
            }
            TypistModel {
                user_id,
                base_hold_mean: hold,
                base_hold_sd: hold * hold_cv,
                base_gap_mean: 1.0 / rate,
                base_gap_sd: gap_cv / rate,
                digraph_offsets,
                country: countries[i % countries.len()].to_string(),
                rng_seed: seed,
            }
        })
        .collect())
}

impl TypistModel {
    fn offset(&self, prev: u8, next: u8) -> f64 {
        let key = (prev.to_ascii_lowercase(), next.to_ascii_lowercase());
        self.digraph_offsets.get(&key).copied().unwrap_or(0.0)
    }

    /// Types `text`; deterministic given the model seed and `session_id`.
    pub fn type_sentence(
        &self,
        text: &str,
        session_id: &str,
    ) -> Result<KeystrokeSequence, SynthError> {
        let codes = text.chars().map(keycode).collect::<Result<Vec<u8>, _>>()?;
        if codes.is_empty() {
            return Err(SynthError::EmptyText);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.rng_seed, session_id));
        let to_ms = |s: f64| ((s * 1000.0).round() as i64).max(MIN_MS);
        let mut press = 0i64;
        let mut events = Vec::with_capacity(codes.len());
        for (i, &code) in codes.iter().enumerate() {
            if i > 0 {
                let gap = log_normal(&mut rng, self.base_gap_mean, self.base_gap_sd)
                    + self.offset(codes[i - 1], code);
                press += to_ms(gap);
            }
            let hold = to_ms(log_normal(&mut rng, self.base_hold_mean, self.base_hold_sd));
            events.push(KeyEvent::new(code, press, press + hold).expect("hold is positive"));
        }
        Ok(KeystrokeSequence::new(&self.user_id, session_id, events)
            .expect("generated events are valid"))
    }
}

pub fn type_sentence(
    model: &TypistModel,
    text: &str,
    session_id: &str,
) -> Result<KeystrokeSequence, SynthError> {
    model.type_sentence(text, session_id)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<KeystrokeSequence>,
    pub profiles: Vec<ProfileMeta>,
}

/// Every user types `sentences_per_user` sentences drawn with replacement
/// from `pool`.
pub fn generate_corpus(
    population: &[TypistModel],
    sentences_per_user: usize,
    pool: &[String],
    rng_seed: u64,
) -> Result<Corpus, SynthError> {
    if pool.is_empty() {
        return Err(SynthError::EmptyPool);
    }
    let per_user = population
        .par_iter()
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, &m.user_id));
            (0..sentences_per_user)
                .map(|k| {
                    let text = &pool[rng.random_range(0..pool.len())];
                    m.type_sentence(text, &format!("{}-s{k:02}", m.user_id))
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus {
        sequences: per_user.into_iter().flatten().collect(),
        profiles: population
            .iter()
            .map(|m| ProfileMeta::new(&m.user_id).with("country", &m.country))
            .collect(),
    })
}

/// Mean and sample sd of per-user typing rates, each rate being total
/// keystroke intervals over total press-to-press time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateStats {
    pub users: usize,
    pub mean: f64,
    pub sd: f64,
}

pub fn rate_stats(sequences: &[KeystrokeSequence]) -> RateStats {
    let mut per_user: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for s in sequences {
        let e = s.events();
        let (Some(first), Some(last)) = (e.first(), e.last()) else {
            continue;
        };
        let entry = per_user.entry(s.user_id()).or_default();
        entry.0 += (e.len() - 1) as f64;
        entry.1 += (last.press_ms - first.press_ms) as f64 / 1000.0;
    }
    let rates: Vec<f64> = per_user
        .values()
        .filter(|(_, t)| *t > 0.0)
        .map(|(k, t)| k / t)
        .collect();
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let sd = (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    RateStats {
        users: rates.len(),
        mean,
        sd,
    }
}

/// One sentence per non-blank line.
pub fn load_sentence_pool<R: Read>(mut input: R) -> std::io::Result<Vec<String>> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn default_sentence_pool() -> Vec<String> {
    DEFAULT_SENTENCES.iter().map(|s| s.to_string()).collect()
}

const DEFAULT_SENTENCES: &[&str] = &[
    "the ferry leaves the harbor before seven",
    "she painted the fence a pale shade of green",
    "our neighbor keeps bees on the roof",
    "a cold wind came down from the hills at night",
    "please return the library books by friday",
    "the train was late again this morning",
    "he forgot his umbrella at the cafe",
    "bright lanterns hung along the narrow street",
    "we planted tomatoes and beans in the spring",
    "the old clock in the hall stopped at noon",
    "my brother fixed the bicycle with a spoon",
    "the museum opens late on thursdays",
    "a small boat drifted past the lighthouse",
    "they argued about the map for an hour",
    "fresh bread smells best in the early morning",
    "the kitten slept inside the laundry basket",
    "snow covered the quiet village overnight",
    "the meeting moved to the second floor",
    "she wrote the recipe on the back of a receipt",
    "the river rose after three days of rain",
    "i left the keys next to the kettle",
    "the choir practiced every tuesday evening",
    "an owl called from the tall pine trees",
    "the market sells cheese from the valley",
    "his letter arrived two weeks after he did",
    "the garden gate squeaks when it opens",
    "we watched the storm from the porch",
    "the bus driver waved at every child",
    "a jar of buttons sat on the windowsill",
    "the orchestra tuned up behind the curtain",
    "our flight was moved to the next day",
    "the baker ran out of rye bread by ten",
    "she found a coin in the pocket of her coat",
    "the mountain road closes in the winter",
    "the dog chased its tail around the yard",
    "he keeps his notes in a yellow folder",
    "the stars looked sharp above the desert",
    "a quiet room is hard to find in this city",
    "the carpenter measured the door twice",
    "we shared a pot of tea by the fire",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingestion::{parse_canonical, write_canonical};

    #[test]
    fn zero_separability_gives_identical_parameters() {
        let pop = sample_population(20, 0.0, &[], 3).unwrap();
        for m in &pop[1..] {
            assert_eq!(m.base_hold_mean, pop[0].base_hold_mean);
            assert_eq!(m.base_hold_sd, pop[0].base_hold_sd);
            assert_eq!(m.base_gap_mean, pop[0].base_gap_mean);
            assert_eq!(m.base_gap_sd, pop[0].base_gap_sd);
            assert_eq!(m.digraph_offsets, pop[0].digraph_offsets);
            assert_ne!(m.rng_seed, pop[0].rng_seed);
        }
    }

    #[test]
    fn single_user_and_round_robin_countries() {
        assert_eq!(sample_population(1, 0.5, &[], 0).unwrap().len(), 1);
        let pop = sample_population(5, 1.0, &["FI", "ES"], 0).unwrap();
        let c: Vec<&str> = pop.iter().map(|m| m.country.as_str()).collect();
        assert_eq!(c, ["FI", "ES", "FI", "ES", "FI"]);
        assert!(pop
            .iter()
            .all(|m| m.base_hold_mean > 0.0 && m.base_gap_mean > 0.0));
    }

    #[test]
    fn population_rate_matches_calibration() {
        let pop = sample_population(600, 1.0, &[], 11).unwrap();
        let corpus = generate_corpus(
            &pop,
            DEFAULT_SENTENCES_PER_USER,
            &default_sentence_pool(),
            11,
        )
        .unwrap();
        let stats = rate_stats(&corpus.sequences);
        assert_eq!(stats.users, 600);
        assert!(
            (stats.mean - RATE_MEAN).abs() <= 0.1 * RATE_MEAN,
            "mean rate {}",
            stats.mean
        );
        assert!(
            (stats.sd - RATE_SD).abs() <= 0.1 * RATE_SD,
            "rate sd {}",
            stats.sd
        );
    }

    #[test]
    fn eight_characters_give_eight_events() {
        let m = &sample_population(1, 1.0, &[], 1).unwrap()[0];
        let s = m.type_sentence("COVID-19", "s").unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.events().windows(2).all(|w| w[0].press_ms < w[1].press_ms));
    }

    #[test]
    fn zero_sd_gives_mean_timings() {
        let mut m = sample_population(1, 0.0, &[], 1).unwrap().remove(0);
        m.base_hold_sd = 0.0;
        m.base_gap_sd = 0.0;
        let s = m.type_sentence("hello world", "x").unwrap();
        for (i, e) in s.events().iter().enumerate() {
            assert_eq!(e.hold_ms(), (m.base_hold_mean * 1000.0).round() as i64);
            if i > 0 {
                assert_eq!(
                    e.press_ms - s.events()[i - 1].press_ms,
                    (m.base_gap_mean * 1000.0).round() as i64
                );
            }
        }
    }

    #[test]
    fn sessions_are_deterministic() {
        let m = &sample_population(2, 1.0, &[], 4).unwrap()[1];
        assert_eq!(
            m.type_sentence("same text", "a").unwrap(),
            m.type_sentence("same text", "a").unwrap()
        );
        assert_ne!(
            m.type_sentence("same text", "a").unwrap(),
            m.type_sentence("same text", "b").unwrap()
        );
    }

    #[test]
    fn unmappable_and_empty() {
        let m = &sample_population(1, 1.0, &[], 1).unwrap()[0];
        assert_eq!(
            m.type_sentence("caf\u{e9}", "s"),
            Err(SynthError::UnmappableCharacter('\u{e9}'))
        );
        assert_eq!(m.type_sentence("", "s"), Err(SynthError::EmptyText));
        let pop = sample_population(1, 1.0, &[], 1).unwrap();
        assert_eq!(generate_corpus(&pop, 3, &[], 0), Err(SynthError::EmptyPool));
    }

    #[test]
    fn corpus_counts_and_round_trip() {
        let pop = sample_population(10, 1.0, &[], 2).unwrap();
        let corpus = generate_corpus(&pop, 15, &default_sentence_pool(), 2).unwrap();
        assert_eq!(corpus.sequences.len(), 150);
        let mut buf = Vec::new();
        write_canonical(&mut buf, &corpus.sequences).unwrap();
        let parsed = parse_canonical(buf.as_slice()).unwrap();
        assert_eq!(parsed.len(), 150);
        assert_eq!(
            generate_corpus(&pop, 15, &default_sentence_pool(), 2).unwrap(),
            corpus
        );
    }

    #[test]
    fn sentence_pool_lines() {
        let pool = load_sentence_pool("one line\n\n  two  \n".as_bytes()).unwrap();
        assert_eq!(pool, ["one line", "two"]);
        assert!(DEFAULT_SENTENCES
            .iter()
            .all(|s| s.len() <= 70 && s.chars().all(|c| keycode(c).is_ok())));
    }
}
