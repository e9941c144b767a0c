//! Timing features of a keystroke sequence and their fixed-length, masked
//! packing for the recurrent network.

use std::io::Write;

use crate::ingestion::KeystrokeSequence;

/// Columns per timestep: keycode, hold, inter-key, press and release latency.
pub const FEATURE_DIM: usize = 5;

/// Default fixed time dimension.
pub const DEFAULT_SEQUENCE_LEN: usize = 50;

/// Per-key and per-transition features, timings in seconds.
///
/// `keycodes` and `hold` have `L` entries; the three latency lists have
/// `L - 1`, where entry `i` describes the transition from key `i` to key `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawFeatures {
    pub keycodes: Vec<f64>,
    pub hold: Vec<f64>,
    pub inter_key: Vec<f64>,
    pub press_latency: Vec<f64>,
    pub release_latency: Vec<f64>,
}

impl RawFeatures {
    pub fn len(&self) -> usize {
        self.keycodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keycodes.is_empty()
    }

    /// Total scalar count, `2L + 3(L - 1)`.
    pub fn scalar_count(&self) -> usize {
        self.keycodes.len()
            + self.hold.len()
            + self.inter_key.len()
            + self.press_latency.len()
            + self.release_latency.len()
    }
}

fn ms_to_s(ms: i64) -> f64 {
    ms as f64 / 1000.0
}

pub fn extract_features(seq: &KeystrokeSequence) -> RawFeatures {
    let events = seq.events();
    let pairs = events.windows(2);
    RawFeatures {
        keycodes: events.iter().map(|e| f64::from(e.keycode)).collect(),
        hold: events
            .iter()
            .map(|e| ms_to_s(e.release_ms - e.press_ms))
            .collect(),
        inter_key: pairs
            .clone()
            .map(|w| ms_to_s(w[1].press_ms - w[0].release_ms))
            .collect(),
        press_latency: pairs
            .clone()
            .map(|w| ms_to_s(w[1].press_ms - w[0].press_ms))
            .collect(),
        release_latency: pairs
            .map(|w| ms_to_s(w[1].release_ms - w[0].release_ms))
            .collect(),
    }
}

/// Scales keycodes into [0, 1]. Timings are already in seconds and pass
/// through unchanged, including values above 1 and negative latencies.
pub fn normalize(raw: &RawFeatures) -> RawFeatures {
    RawFeatures {
        keycodes: raw.keycodes.iter().map(|k| k / 255.0).collect(),
        ..raw.clone()
    }
}

/// A fixed-length `M x 5` feature matrix with a prefix validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    rows: Vec<[f64; FEATURE_DIM]>,
    mask: Vec<bool>,
    original_length: usize,
}

impl FeatureSequence {
    /// Builds from already-packed rows. The first `valid` rows are real
    /// timesteps; the remaining rows must be zero.
    pub fn from_rows(
        rows: Vec<[f64; FEATURE_DIM]>,
        valid: usize,
        original_length: usize,
    ) -> Option<Self> {
        if valid == 0 || valid > rows.len() || original_length < valid {
            return None;
        }
        if rows[valid..].iter().any(|r| r.iter().any(|&v| v != 0.0)) {
            return None;
        }
        let mask = (0..rows.len()).map(|i| i < valid).collect();
        Some(Self {
            rows,
            mask,
            original_length,
        })
    }

    pub fn rows(&self) -> &[[f64; FEATURE_DIM]] {
        &self.rows
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// `L` before truncation.
    pub fn original_length(&self) -> usize {
        self.original_length
    }

    /// `M`.
    pub fn time_steps(&self) -> usize {
        self.rows.len()
    }

    /// Number of unmasked timesteps, `min(L, M)`.
    pub fn valid_len(&self) -> usize {
        self.original_length.min(self.rows.len())
    }

    /// Returns a copy with `extra` zero rows appended to the masked tail.
    pub fn padded(&self, extra: usize) -> Self {
        let mut out = self.clone();
        out.rows
            .extend(std::iter::repeat_n([0.0; FEATURE_DIM], extra));
        out.mask.extend(std::iter::repeat_n(false, extra));
        out
    }

    /// Writes the matrix as CSV, one row per timestep plus a mask column.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "keycode,hold,inter_key,press_latency,release_latency,mask"
        )?;
        for (row, valid) in self.rows.iter().zip(&self.mask) {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                row[0],
                row[1],
                row[2],
                row[3],
                row[4],
                u8::from(*valid)
            )?;
        }
        Ok(())
    }
}

/// Packs normalized features into `m` timesteps. Timestep `i` carries
/// `[k_i, t_H(i), t_IL(i), t_PL(i), t_RL(i)]`; the last key's latency slots
/// are zero. Sequences longer than `m` lose their tail, shorter ones are
/// zero-padded and masked.
///
/// # Panics
/// If `m == 0` or `features` is empty.
pub fn shape_fixed(features: &RawFeatures, m: usize) -> FeatureSequence {
    assert!(m >= 1, "sequence length must be at least 1");
    let len = features.len();
    assert!(len >= 1, "empty feature list");
    let valid = len.min(m);
    let mut rows = vec![[0.0; FEATURE_DIM]; m];
    for (i, row) in rows.iter_mut().take(valid).enumerate() {
        let latency = |v: &[f64]| v.get(i).copied().unwrap_or(0.0);
        *row = [
            features.keycodes[i],
            features.hold[i],
            latency(&features.inter_key),
            latency(&features.press_latency),
            latency(&features.release_latency),
        ];
    }
    let mask = (0..m).map(|i| i < valid).collect();
    FeatureSequence {
        rows,
        mask,
        original_length: len,
    }
}

/// Full pipeline for one sequence: extract, normalize, pack to `m` steps.
pub fn featurize(seq: &KeystrokeSequence, m: usize) -> FeatureSequence {
    shape_fixed(&normalize(&extract_features(seq)), m)
}
