//! The background set of verified profiles and 1:N matching against it.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::embedding::EmbeddingVector;
use crate::ingestion::ProfileMeta;

#[derive(Debug, Error)]
pub enum GalleryError {
    #[error("empty embedding set")]
    EmptySet,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("duplicate user `{0}`")]
    DuplicateUser(String),
    #[error("corrupt embeddings file: {0}")]
    CorruptFile(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Mean Euclidean distance over every (verified, anonymous) pair.
pub fn profile_distance(
    verified: &[EmbeddingVector],
    anonymous: &[EmbeddingVector],
) -> Result<f64, GalleryError> {
    let (Some(first), false) = (verified.first(), anonymous.is_empty()) else {
        return Err(GalleryError::EmptySet);
    };
    let dim = first.dim();
    if let Some(bad) = verified.iter().chain(anonymous).find(|e| e.dim() != dim) {
        return Err(GalleryError::DimensionMismatch {
            expected: dim,
            found: bad.dim(),
        });
    }
    let mut total = 0.0;
    for v in verified {
        for a in anonymous {
            total += v.euclidean(a);
        }
    }
    Ok(total / (verified.len() * anonymous.len()) as f64)
}

/// Embeddings of one user, split by role.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileEmbeddings {
    pub meta: ProfileMeta,
    pub verified: Vec<EmbeddingVector>,
    pub anonymous: Vec<EmbeddingVector>,
}

impl ProfileEmbeddings {
    pub fn new(
        meta: ProfileMeta,
        verified: Vec<EmbeddingVector>,
        anonymous: Vec<EmbeddingVector>,
    ) -> Self {
        Self {
            meta,
            verified,
            anonymous,
        }
    }

    pub fn user_id(&self) -> &str {
        &self.meta.user_id
    }

    fn dim(&self) -> Option<usize> {
        self.verified
            .iter()
            .chain(&self.anonymous)
            .map(EmbeddingVector::dim)
            .next()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gallery {
    profiles: Vec<ProfileEmbeddings>,
}

impl Gallery {
    /// Checks that user ids are unique and all embeddings share one dimension.
    pub fn new(profiles: Vec<ProfileEmbeddings>) -> Result<Self, GalleryError> {
        let mut seen = HashSet::new();
        let mut dim = None;
        for p in &profiles {
            if !seen.insert(p.user_id()) {
                return Err(GalleryError::DuplicateUser(p.user_id().to_string()));
            }
            for e in p.verified.iter().chain(&p.anonymous) {
                let expected = *dim.get_or_insert(e.dim());
                if e.dim() != expected {
                    return Err(GalleryError::DimensionMismatch {
                        expected,
                        found: e.dim(),
                    });
                }
            }
        }
        Ok(Self { profiles })
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn profiles(&self) -> &[ProfileEmbeddings] {
        &self.profiles
    }

    pub fn get(&self, user_id: &str) -> Option<&ProfileEmbeddings> {
        self.profiles.iter().find(|p| p.user_id() == user_id)
    }

    pub fn dim(&self) -> Option<usize> {
        self.profiles.iter().find_map(ProfileEmbeddings::dim)
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.profiles.iter().map(ProfileEmbeddings::user_id)
    }

    /// Replaces profile metadata with the matching entries of `metas`.
    /// Profiles without an entry keep theirs.
    pub fn attach_meta(&mut self, metas: &[ProfileMeta]) {
        let by_id: HashMap<&str, &ProfileMeta> =
            metas.iter().map(|m| (m.user_id.as_str(), m)).collect();
        for p in &mut self.profiles {
            if let Some(m) = by_id.get(p.user_id()) {
                p.meta = (*m).clone();
            }
        }
    }

    /// Attribute names present on any profile.
    pub fn attribute_names(&self) -> BTreeSet<&str> {
        self.profiles
            .iter()
            .flat_map(|p| p.meta.attributes.keys().map(String::as_str))
            .collect()
    }

    /// Builds a gallery from a subset of this one's profiles, in this
    /// gallery's order.
    pub fn subset<F: Fn(&ProfileEmbeddings) -> bool>(&self, keep: F) -> Gallery {
        Gallery {
            profiles: self.profiles.iter().filter(|p| keep(p)).cloned().collect(),
        }
    }

    /// Distances from `query` to every profile, in gallery order.
    pub fn distances(&self, query: &[EmbeddingVector]) -> Result<Vec<f64>, GalleryError> {
        self.profiles
            .par_iter()
            .map(|p| profile_distance(&p.verified, query))
            .collect()
    }

    /// All profiles ordered by ascending distance to `query`, ties broken by
    /// user id.
    pub fn rank(&self, query: &[EmbeddingVector]) -> Result<RankedList, GalleryError> {
        if self.is_empty() {
            return Err(GalleryError::EmptyGallery);
        }
        let distances = self.distances(query)?;
        let mut entries: Vec<RankedEntry> = self
            .profiles
            .iter()
            .zip(distances)
            .map(|(p, distance)| RankedEntry {
                user_id: p.user_id().to_string(),
                distance,
            })
            .collect();
        entries.sort_by(RankedEntry::order);
        Ok(RankedList {
            entries,
            query_user_id: None,
        })
    }

    /// The closest profile's user id.
    pub fn identify(&self, query: &[EmbeddingVector]) -> Result<String, GalleryError> {
        Ok(self.rank(query)?.entries.swap_remove(0).user_id)
    }

    /// Profiles whose `attribute` equals `value`. An empty result is not an
    /// error; an attribute no profile carries is.
    pub fn prescreen(&self, attribute: &str, value: &str) -> Result<Gallery, GalleryError> {
        if !self.attribute_names().contains(attribute) {
            return Err(GalleryError::UnknownAttribute(attribute.to_string()));
        }
        Ok(self.subset(|p| p.meta.get(attribute) == Some(value)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedEntry {
    pub user_id: String,
    pub distance: f64,
}

impl RankedEntry {
    /// Ascending distance, then user id.
    pub fn order(a: &Self, b: &Self) -> Ordering {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.user_id.cmp(&b.user_id))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
    pub query_user_id: Option<String>,
}

impl RankedList {
    /// 1-based rank of `user_id`, if present.
    pub fn rank_of(&self, user_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.user_id == user_id)
            .map(|i| i + 1)
    }

    pub fn truncate(&mut self, top: usize) {
        self.entries.truncate(top);
    }

    /// `rank,user_id,distance` CSV.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "rank,user_id,distance")?;
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(out, "{},{},{}", i + 1, e.user_id, fmt_float(e.distance))?;
        }
        Ok(())
    }
}

/// 17 significant digits; parses back to the same bits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

const ROLE_VERIFIED: &str = "verified";
const ROLE_ANONYMOUS: &str = "anonymous";

/// Writes `user_id,role,seq_index,v0,...` rows, verified before anonymous
/// within each profile.
pub fn export_embeddings<W: Write>(gallery: &Gallery, out: W) -> Result<(), GalleryError> {
    let mut out = std::io::BufWriter::new(out);
    let dim = gallery.dim().unwrap_or(0);
    let mut header = String::from("user_id,role,seq_index");
    for i in 0..dim {
        header.push_str(&format!(",v{i}"));
    }
    writeln!(out, "{header}")?;
    for p in gallery.profiles() {
        for (role, set) in [(ROLE_VERIFIED, &p.verified), (ROLE_ANONYMOUS, &p.anonymous)] {
            for (i, e) in set.iter().enumerate() {
                let mut line = format!("{},{role},{i}", p.user_id());
                for v in e.iter() {
                    line.push(',');
                    line.push_str(&fmt_float(*v));
                }
                writeln!(out, "{line}")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads the embeddings CSV. Profiles appear in first-seen order; within a
/// role, embeddings are ordered by `seq_index`. Metadata is empty apart from
/// the user id.
pub fn import_embeddings<R: Read>(input: R) -> Result<Gallery, GalleryError> {
    let corrupt = |line: u64, why: &str| GalleryError::CorruptFile(format!("line {line}: {why}"));
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| GalleryError::CorruptFile(e.to_string()))?
        .clone();
    if headers.len() < 3
        || &headers[0] != "user_id"
        || &headers[1] != "role"
        || &headers[2] != "seq_index"
    {
        return Err(corrupt(
            1,
            "expected header `user_id,role,seq_index,v0,...`",
        ));
    }
    let dim = headers.len() - 3;
    let mut order: Vec<String> = Vec::new();
    type Indexed = Vec<(usize, EmbeddingVector)>;
    let mut rows: HashMap<String, (Indexed, Indexed)> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| GalleryError::CorruptFile(e.to_string()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() < 3 {
            return Err(corrupt(line, "too few columns"));
        }
        if record.len() - 3 != dim {
            return Err(GalleryError::DimensionMismatch {
                expected: dim,
                found: record.len() - 3,
            });
        }
        let user = record[0].to_string();
        let index: usize = record[2]
            .parse()
            .map_err(|_| corrupt(line, "bad seq_index"))?;
        let values = record
            .iter()
            .skip(3)
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| corrupt(line, "non-numeric embedding value"))?;
        let embedding = EmbeddingVector::new(values)
            .ok_or_else(|| corrupt(line, "non-finite embedding value"))?;
        let entry = rows.entry(user.clone()).or_insert_with(|| {
            order.push(user.clone());
            (Vec::new(), Vec::new())
        });
        match &record[1] {
            ROLE_VERIFIED => entry.0.push((index, embedding)),
            ROLE_ANONYMOUS => entry.1.push((index, embedding)),
            other => return Err(corrupt(line, &format!("unknown role `{other}`"))),
        }
    }
    let profiles = order
        .into_iter()
        .map(|user| {
            let (mut verified, mut anonymous) = rows.remove(&user).unwrap();
            verified.sort_by_key(|(i, _)| *i);
            anonymous.sort_by_key(|(i, _)| *i);
            ProfileEmbeddings::new(
                ProfileMeta::new(user),
                verified.into_iter().map(|(_, e)| e).collect(),
                anonymous.into_iter().map(|(_, e)| e).collect(),
            )
        })
        .collect();
    Gallery::new(profiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn random_set(rng: &mut impl Rng, n: usize, dim: usize) -> Vec<EmbeddingVector> {
        (0..n)
            .map(|_| {
                ev(&(0..dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<_>>())
            })
            .collect()
    }

    fn profile(
        id: &str,
        verified: Vec<EmbeddingVector>,
        anonymous: Vec<EmbeddingVector>,
    ) -> ProfileEmbeddings {
        ProfileEmbeddings::new(ProfileMeta::new(id), verified, anonymous)
    }

    /// Double loop written independently of `profile_distance`.
    fn distance_oracle(verified: &[EmbeddingVector], anonymous: &[EmbeddingVector]) -> f64 {
        let mut sum = 0.0;
        for g in 0..verified.len() {
            for l in 0..anonymous.len() {
                let mut sq = 0.0;
                for k in 0..verified[g].dim() {
                    sq += (verified[g][k] - anonymous[l][k]).powi(2);
                }
                sum += sq.sqrt();
            }
        }
        sum / (verified.len() as f64 * anonymous.len() as f64)
    }

    #[test]
    fn identical_single_vectors_have_zero_distance() {
        let v = vec![ev(&[0.4, -0.1, 0.7])];
        assert_eq!(profile_distance(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn three_four_five() {
        let mut a = vec![0.0; 128];
        a[0] = 3.0;
        a[1] = 4.0;
        assert_eq!(
            profile_distance(&[ev(&[0.0; 128])], &[ev(&a)]).unwrap(),
            5.0
        );
    }

    #[test]
    fn distance_errors() {
        assert!(matches!(
            profile_distance(&[], &[ev(&[1.0])]),
            Err(GalleryError::EmptySet)
        ));
        assert!(matches!(
            profile_distance(&[ev(&[1.0])], &[]),
            Err(GalleryError::EmptySet)
        ));
        assert!(matches!(
            profile_distance(&[ev(&[1.0])], &[ev(&[1.0, 2.0])]),
            Err(GalleryError::DimensionMismatch {
                expected: 1,
                found: 2
            })
        ));
    }

    #[test]
    fn random_ten_by_five_matches_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let v = random_set(&mut rng, 10, 128);
            let a = random_set(&mut rng, 5, 128);
            assert!((profile_distance(&v, &a).unwrap() - distance_oracle(&v, &a)).abs() < 1e-12);
        }
    }

    #[test]
    fn gallery_of_one() {
        let g = Gallery::new(vec![profile("solo", vec![ev(&[1.0, 1.0])], vec![])]).unwrap();
        let r = g.rank(&[ev(&[9.0, -3.0])]).unwrap();
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.entries[0].user_id, "solo");
    }

    #[test]
    fn self_query_ranks_first_with_separated_clusters() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let profiles: Vec<ProfileEmbeddings> = (0..20)
            .map(|i| {
                let centre = i as f64 * 10.0;
                let set = (0..10)
                    .map(|_| {
                        ev(&[
                            centre + rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ])
                    })
                    .collect();
                profile(&format!("u{i:02}"), set, vec![])
            })
            .collect();
        let g = Gallery::new(profiles).unwrap();
        for p in g.profiles() {
            assert_eq!(g.identify(&p.verified).unwrap(), p.user_id());
        }
    }

    #[test]
    fn ties_broken_by_user_id() {
        let e = vec![ev(&[1.0, 2.0])];
        let g = Gallery::new(vec![
            profile("zed", e.clone(), vec![]),
            profile("amy", e.clone(), vec![]),
        ])
        .unwrap();
        let r = g.rank(&[ev(&[0.0, 0.0])]).unwrap();
        assert_eq!(r.entries[0].user_id, "amy");
        assert_eq!(r.entries[0].distance, r.entries[1].distance);
    }

    #[test]
    fn identify_matches_brute_force_argmin() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let profiles: Vec<_> = (0..30)
            .map(|i| profile(&format!("p{i}"), random_set(&mut rng, 10, 8), vec![]))
            .collect();
        let g = Gallery::new(profiles).unwrap();
        for _ in 0..20 {
            let q = random_set(&mut rng, 5, 8);
            let best = g
                .profiles()
                .iter()
                .map(|p| (distance_oracle(&p.verified, &q), p.user_id()))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)))
                .unwrap();
            assert_eq!(g.identify(&q).unwrap(), best.1);
        }
    }

    #[test]
    fn adding_a_farther_profile_keeps_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut profiles: Vec<_> = (0..10)
            .map(|i| profile(&format!("p{i}"), random_set(&mut rng, 4, 3), vec![]))
            .collect();
        let q = random_set(&mut rng, 2, 3);
        let before = Gallery::new(profiles.clone())
            .unwrap()
            .identify(&q)
            .unwrap();
        profiles.push(profile("far", vec![ev(&[100.0, 100.0, 100.0])], vec![]));
        assert_eq!(
            Gallery::new(profiles).unwrap().identify(&q).unwrap(),
            before
        );
    }

    #[test]
    fn empty_gallery_errors() {
        assert!(matches!(
            Gallery::default().rank(&[ev(&[1.0])]),
            Err(GalleryError::EmptyGallery)
        ));
        assert!(matches!(
            Gallery::default().identify(&[ev(&[1.0])]),
            Err(GalleryError::EmptyGallery)
        ));
    }

    fn country_gallery(countries: &[&str]) -> Gallery {
        let profiles = countries
            .iter()
            .enumerate()
            .map(|(i, c)| {
                ProfileEmbeddings::new(
                    ProfileMeta::new(format!("u{i}")).with("country", *c),
                    vec![ev(&[i as f64])],
                    vec![],
                )
            })
            .collect();
        Gallery::new(profiles).unwrap()
    }

    #[test]
    fn prescreen_cases() {
        let all_fi = country_gallery(&["FI", "FI", "FI"]);
        assert_eq!(all_fi.prescreen("country", "FI").unwrap(), all_fi);
        assert!(all_fi.prescreen("country", "ES").unwrap().is_empty());
        assert!(matches!(
            all_fi.prescreen("planet", "earth"),
            Err(GalleryError::UnknownAttribute(_))
        ));

        let mixed = ["FI", "ES", "FI", "US", "ES", "FI", "BR"];
        let g = country_gallery(&mixed);
        for c in ["FI", "ES", "US", "BR", "DE"] {
            let expected = mixed.iter().filter(|&&m| m == c).count();
            let sub = g.prescreen("country", c).unwrap();
            assert_eq!(sub.len(), expected);
            assert!(sub
                .profiles()
                .iter()
                .all(|p| p.meta.get("country") == Some(c)));
        }
        assert_eq!(g.len(), mixed.len());
    }

    #[test]
    fn export_import_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let profiles: Vec<_> = (0..4)
            .map(|i| {
                profile(
                    &format!("u{i}"),
                    random_set(&mut rng, 3, 6),
                    random_set(&mut rng, 2, 6),
                )
            })
            .collect();
        let g = Gallery::new(profiles).unwrap();
        let mut buf = Vec::new();
        export_embeddings(&g, &mut buf).unwrap();
        assert_eq!(import_embeddings(buf.as_slice()).unwrap(), g);
    }

    #[test]
    fn short_row_is_dimension_mismatch() {
        let mut text = String::from("user_id,role,seq_index");
        for i in 0..128 {
            text.push_str(&format!(",v{i}"));
        }
        text.push_str("\nu1,verified,0");
        for _ in 0..127 {
            text.push_str(",0.5");
        }
        text.push('\n');
        assert!(matches!(
            import_embeddings(text.as_bytes()),
            Err(GalleryError::DimensionMismatch {
                expected: 128,
                found: 127
            })
        ));
    }

    #[test]
    fn empty_gallery_exports_header_only() {
        let mut buf = Vec::new();
        export_embeddings(&Gallery::default(), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "user_id,role,seq_index\n"
        );
        assert!(import_embeddings(buf.as_slice()).unwrap().is_empty());
    }

    fn arb_gallery() -> impl Strategy<Value = (Gallery, Vec<EmbeddingVector>)> {
        (2usize..12, 1usize..6, any::<u64>()).prop_map(|(n, dim, seed)| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let profiles = (0..n)
                .map(|i| {
                    profile(
                        &format!("u{i}"),
                        random_set(&mut rng, 1 + i % 4, dim),
                        vec![],
                    )
                })
                .collect();
            (
                Gallery::new(profiles).unwrap(),
                random_set(&mut rng, 1 + n % 3, dim),
            )
        })
    }

    proptest! {
        #[test]
        fn distance_is_symmetric_and_non_negative(seed in any::<u64>(), g in 1usize..6, l in 1usize..6) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v = random_set(&mut rng, g, 4);
            let a = random_set(&mut rng, l, 4);
            let d = profile_distance(&v, &a).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!((d - profile_distance(&a, &v).unwrap()).abs() < 1e-15);
            prop_assert!((d - distance_oracle(&v, &a)).abs() < 1e-12);
        }

        #[test]
        fn rank_is_permutation((g, q) in arb_gallery()) {
            let r = g.rank(&q).unwrap();
            let mut ids: Vec<&str> = r.entries.iter().map(|e| e.user_id.as_str()).collect();
            ids.sort_unstable();
            let mut expected: Vec<&str> = g.user_ids().collect();
            expected.sort_unstable();
            prop_assert_eq!(ids, expected);
            prop_assert!(r.entries.windows(2).all(|w| w[0].distance <= w[1].distance));
        }

        #[test]
        fn rank_invariant_under_insertion_order((g, q) in arb_gallery(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = g.profiles().to_vec();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let g2 = Gallery::new(shuffled).unwrap();
            prop_assert_eq!(g.rank(&q).unwrap(), g2.rank(&q).unwrap());
        }

        #[test]
        fn ranking_invariant_under_positive_scaling((g, q) in arb_gallery(), exp in -8i32..8) {
            // Powers of two scale every distance exactly.
            let scale = 2f64.powi(exp);
            let scaled = |set: &[EmbeddingVector]| -> Vec<EmbeddingVector> {
                set.iter().map(|e| ev(&e.iter().map(|v| v * scale).collect::<Vec<_>>())).collect()
            };
            let g2 = Gallery::new(g.profiles().iter().map(|p| profile(p.user_id(), scaled(&p.verified), vec![])).collect()).unwrap();
            let ids = |r: RankedList| r.entries.into_iter().map(|e| e.user_id).collect::<Vec<_>>();
            prop_assert_eq!(ids(g.rank(&q).unwrap()), ids(g2.rank(&scaled(&q)).unwrap()));
        }

        #[test]
        fn prescreen_never_worsens_true_match((g, _q) in arb_gallery(), seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let countries = ["FI", "ES", "US"];
            let profiles: Vec<_> = g.profiles().iter().map(|p| {
                let mut p = p.clone();
                p.meta = p.meta.clone().with("country", countries[rng.random_range(0..3)]);
                p
            }).collect();
            let g = Gallery::new(profiles).unwrap();
            let target = &g.profiles()[rng.random_range(0..g.len())];
            let query = random_set(&mut rng, 3, g.dim().unwrap());
            let before = g.rank(&query).unwrap().rank_of(target.user_id()).unwrap();
            let sub = g.prescreen("country", target.meta.get("country").unwrap()).unwrap();
            let after = sub.rank(&query).unwrap().rank_of(target.user_id()).unwrap();
            prop_assert!(after <= before);
        }
    }
}
