//! Token-level differential-privacy mechanisms.
//!
//! * Metric-DP: perturb the token's embedding with noise whose density is
//!   proportional to `exp(-epsilon * |z|)` (gamma-distributed magnitude,
//!   uniform direction) and decode to the nearest vocabulary row.
//! * RANTEXT: draw a Laplace-perturbed adjacency-list size, fetch that many
//!   nearest neighbours (the token included) and pick one with the
//!   exponential mechanism on negative distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embeddings::{EmbeddingStore, Neighbor, StoreError};

pub type MechRng = ChaCha8Rng;

#[derive(Debug, Error)]
pub enum MechanismError {
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("dimension must be at least 2, got {0}")]
    InvalidDimension(usize),
    #[error("invalid mechanism configuration: {0}")]
    InvalidConfig(String),
    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error("token index {0} is not in the vocabulary")]
    UnknownToken(usize),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Seed plus stream id of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngState {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngState { seed, stream_id }
    }

    /// Stream derived from a stable hash of `(master_seed, doc_id)`.
    pub fn for_document(master_seed: u64, doc_id: &str) -> Self {
        RngState {
            seed: master_seed,
            stream_id: stable_hash(master_seed, doc_id),
        }
    }

    pub fn rng(&self) -> MechRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// First 8 bytes of SHA-256 over the seed and a label.
pub fn stable_hash(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

fn check_epsilon(epsilon: f64) -> Result<(), MechanismError> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(MechanismError::InvalidEpsilon(epsilon));
    }
    Ok(())
}

/// Uniform point on the unit (d-1)-sphere.
pub fn sample_unit_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Noise magnitude `r ~ Gamma(shape = d, scale = 1/epsilon)`.
pub fn sample_gamma_magnitude<R: Rng + ?Sized>(
    d: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<f64, MechanismError> {
    check_epsilon(epsilon)?;
    if d < 2 {
        return Err(MechanismError::InvalidDimension(d));
    }
    let gamma = Gamma::new(d as f64, 1.0 / epsilon)
        .map_err(|e| MechanismError::InvalidConfig(e.to_string()))?;
    Ok(gamma.sample(rng))
}

/// d-dimensional metric-DP noise vector `r * u`.
pub fn sample_metric_noise<R: Rng + ?Sized>(
    d: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<f64>, MechanismError> {
    let r = sample_gamma_magnitude(d, epsilon, rng)?;
    Ok(sample_unit_direction(d, rng)
        .into_iter()
        .map(|u| r * u)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricDpConfig {
    pub epsilon: f64,
}

impl MetricDpConfig {
    pub fn new(epsilon: f64) -> Result<Self, MechanismError> {
        check_epsilon(epsilon)?;
        Ok(MetricDpConfig { epsilon })
    }
}

fn check_token(token: usize, store: &EmbeddingStore) -> Result<(), MechanismError> {
    if token >= store.len() {
        return Err(MechanismError::UnknownToken(token));
    }
    Ok(())
}

/// Decode `embedding(token) + noise` to the nearest vocabulary row.
///
/// The original token is not excluded; surviving unchanged is possible.
pub fn metric_dp_with_noise(
    token: usize,
    store: &EmbeddingStore,
    noise: &[f64],
) -> Result<usize, MechanismError> {
    check_token(token, store)?;
    if noise.len() != store.dim() {
        return Err(StoreError::DimensionMismatch {
            expected: store.dim(),
            got: noise.len(),
        }
        .into());
    }
    let query: Vec<f32> = store
        .embedding(token)
        .iter()
        .zip(noise)
        .map(|(&e, &n)| (f64::from(e) + n) as f32)
        .collect();
    Ok(store.exact_nearest(&query, None)?.token_index)
}

pub fn metric_dp_token<R: Rng + ?Sized>(
    token: usize,
    store: &EmbeddingStore,
    config: &MetricDpConfig,
    rng: &mut R,
) -> Result<usize, MechanismError> {
    check_token(token, store)?;
    let noise = sample_metric_noise(store.dim(), config.epsilon, rng)?;
    metric_dp_with_noise(token, store, &noise)
}

/// Sensitivity used to scale utilities in the exponential mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DeltaU {
    /// Largest candidate distance of each list.
    #[default]
    PerList,
    Global(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RantextConfig {
    pub epsilon: f64,
    /// Share of epsilon spent on the list size; the rest goes to selection.
    pub rho: f64,
    pub k0: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub size_sensitivity: f64,
    pub delta_u: DeltaU,
}

impl RantextConfig {
    pub fn new(epsilon: f64) -> Self {
        RantextConfig {
            epsilon,
            rho: 0.5,
            k0: 50,
            k_min: 10,
            k_max: 200,
            size_sensitivity: 1.0,
            delta_u: DeltaU::PerList,
        }
    }

    pub fn validate(&self) -> Result<(), MechanismError> {
        check_epsilon(self.epsilon)?;
        let bad = |m: String| Err(MechanismError::InvalidConfig(m));
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho = {} must lie in (0, 1)", self.rho));
        }
        if !(1 <= self.k_min && self.k_min <= self.k0 && self.k0 <= self.k_max) {
            return bad(format!(
                "need 1 <= k_min <= k0 <= k_max, got {} / {} / {}",
                self.k_min, self.k0, self.k_max
            ));
        }
        if !(self.size_sensitivity.is_finite() && self.size_sensitivity > 0.0) {
            return bad(format!(
                "size_sensitivity = {} must be positive",
                self.size_sensitivity
            ));
        }
        if let DeltaU::Global(d) = self.delta_u {
            if !(d.is_finite() && d > 0.0) {
                return bad(format!("delta_u = {d} must be positive"));
            }
        }
        Ok(())
    }

    /// Validation against a concrete vocabulary.
    pub fn validate_for(&self, store: &EmbeddingStore) -> Result<(), MechanismError> {
        self.validate()?;
        if self.k_max > store.len() - 1 {
            return Err(MechanismError::InvalidConfig(format!(
                "k_max = {} exceeds vocabulary size - 1 = {}",
                self.k_max,
                store.len() - 1
            )));
        }
        Ok(())
    }

    pub fn size_epsilon(&self) -> f64 {
        self.rho * self.epsilon
    }

    pub fn selection_epsilon(&self) -> f64 {
        (1.0 - self.rho) * self.epsilon
    }
}

/// Laplace(0, scale) by inversion.
pub fn sample_laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// `clamp(round(k0 + Laplace(0, size_sensitivity / (rho * epsilon))), k_min, k_max)`.
pub fn rantext_list_size<R: Rng + ?Sized>(
    config: &RantextConfig,
    rng: &mut R,
) -> Result<usize, MechanismError> {
    config.validate()?;
    let scale = config.size_sensitivity / config.size_epsilon();
    let raw = (config.k0 as f64 + sample_laplace(scale, rng)).round();
    Ok(raw.clamp(config.k_min as f64, config.k_max as f64) as usize)
}

/// Exponential mechanism with utility `-distance`.
///
/// Candidate `c` is drawn with probability proportional to
/// `exp(epsilon_sel * u(c) / (2 * delta_u))`, normalised in log space.
/// `epsilon_sel = 0` gives a uniform draw.
pub fn exponential_select<R: Rng + ?Sized>(
    candidates: &[Neighbor],
    epsilon_sel: f64,
    delta_u: f64,
    rng: &mut R,
) -> Result<usize, MechanismError> {
    if candidates.is_empty() {
        return Err(MechanismError::EmptyCandidates);
    }
    if !(epsilon_sel.is_finite() && epsilon_sel >= 0.0) {
        return Err(MechanismError::InvalidEpsilon(epsilon_sel));
    }
    if !(delta_u.is_finite() && delta_u > 0.0) {
        return Err(MechanismError::InvalidConfig(format!(
            "delta_u = {delta_u} must be positive"
        )));
    }
    if let Some(c) = candidates.iter().find(|c| !c.distance.is_finite()) {
        return Err(MechanismError::InvalidConfig(format!(
            "candidate {} has non-finite distance",
            c.token_index
        )));
    }
    let scale = epsilon_sel / (2.0 * delta_u);
    let scores: Vec<f64> = candidates.iter().map(|c| -c.distance * scale).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut target = rng.random::<f64>() * total;
    for (c, w) in candidates.iter().zip(&weights) {
        if target < *w {
            return Ok(c.token_index);
        }
        target -= w;
    }
    // floating-point slack: fall back to the last candidate with positive weight
    let last = weights
        .iter()
        .rposition(|&w| w > 0.0)
        .unwrap_or(candidates.len() - 1);
    Ok(candidates[last].token_index)
}

/// Select from an already-sized candidate list.
pub fn rantext_select<R: Rng + ?Sized>(
    candidates: &[Neighbor],
    config: &RantextConfig,
    rng: &mut R,
) -> Result<usize, MechanismError> {
    let delta_u = match config.delta_u {
        DeltaU::Global(d) => d,
        DeltaU::PerList => {
            let max = candidates.iter().map(|c| c.distance).fold(0.0, f64::max);
            // all candidates at distance 0: utilities are equal, any scale works
            if max > 0.0 {
                max
            } else {
                1.0
            }
        }
    };
    exponential_select(candidates, config.selection_epsilon(), delta_u, rng)
}

pub fn rantext_token<R: Rng + ?Sized>(
    token: usize,
    store: &EmbeddingStore,
    config: &RantextConfig,
    rng: &mut R,
) -> Result<usize, MechanismError> {
    check_token(token, store)?;
    let k = rantext_list_size(config, rng)?.min(store.len());
    let candidates = store.approx_nearest(store.embedding(token), k)?;
    rantext_select(&candidates, config, rng)
}

/// A token-level substitution mechanism.
pub trait TokenMechanism: Send + Sync {
    fn name(&self) -> &str;

    fn epsilon(&self) -> Option<f64>;

    /// Check the configuration against a store before any document is processed.
    fn prepare(&self, _store: &EmbeddingStore) -> Result<(), MechanismError> {
        Ok(())
    }

    fn privatize(
        &self,
        token: usize,
        store: &EmbeddingStore,
        rng: &mut MechRng,
    ) -> Result<usize, MechanismError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricDp(pub MetricDpConfig);

impl TokenMechanism for MetricDp {
    fn name(&self) -> &str {
        "metric_dp"
    }

    fn epsilon(&self) -> Option<f64> {
        Some(self.0.epsilon)
    }

    fn privatize(
        &self,
        token: usize,
        store: &EmbeddingStore,
        rng: &mut MechRng,
    ) -> Result<usize, MechanismError> {
        metric_dp_token(token, store, &self.0, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rantext(pub RantextConfig);

impl TokenMechanism for Rantext {
    fn name(&self) -> &str {
        "rantext"
    }

    fn epsilon(&self) -> Option<f64> {
        Some(self.0.epsilon)
    }

    fn prepare(&self, store: &EmbeddingStore) -> Result<(), MechanismError> {
        self.0.validate_for(store)?;
        // build the index up front rather than inside the first document
        store.index();
        Ok(())
    }

    fn privatize(
        &self,
        token: usize,
        store: &EmbeddingStore,
        rng: &mut MechRng,
    ) -> Result<usize, MechanismError> {
        rantext_token(token, store, &self.0, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    MetricDp,
    Rantext,
}

impl MechanismKind {
    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::MetricDp => "metric_dp",
            MechanismKind::Rantext => "rantext",
        }
    }
}

/// RANTEXT knobs as they appear in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RantextParams {
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_k0")]
    pub k0: usize,
    #[serde(default = "default_k_min")]
    pub k_min: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_size_sensitivity")]
    pub size_sensitivity: f64,
    /// Fixed utility sensitivity; absent means per-list normalisation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_u: Option<f64>,
}

fn default_rho() -> f64 {
    0.5
}
fn default_k0() -> usize {
    50
}
fn default_k_min() -> usize {
    10
}
fn default_k_max() -> usize {
    200
}
fn default_size_sensitivity() -> f64 {
    1.0
}

impl Default for RantextParams {
    fn default() -> Self {
        RantextParams {
            rho: default_rho(),
            k0: default_k0(),
            k_min: default_k_min(),
            k_max: default_k_max(),
            size_sensitivity: default_size_sensitivity(),
            delta_u: None,
        }
    }
}

/// Mechanism config file: `{"mechanism": "metric_dp" | "rantext", "epsilon": f, "rantext": {...}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismConfig {
    pub mechanism: MechanismKind,
    pub epsilon: f64,
    #[serde(default)]
    pub rantext: RantextParams,
}

impl MechanismConfig {
    pub fn metric_dp(epsilon: f64) -> Self {
        MechanismConfig {
            mechanism: MechanismKind::MetricDp,
            epsilon,
            rantext: RantextParams::default(),
        }
    }

    pub fn rantext(epsilon: f64) -> Self {
        MechanismConfig {
            mechanism: MechanismKind::Rantext,
            epsilon,
            rantext: RantextParams::default(),
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn rantext_config(&self) -> RantextConfig {
        let p = &self.rantext;
        RantextConfig {
            epsilon: self.epsilon,
            rho: p.rho,
            k0: p.k0,
            k_min: p.k_min,
            k_max: p.k_max,
            size_sensitivity: p.size_sensitivity,
            delta_u: p.delta_u.map_or(DeltaU::PerList, DeltaU::Global),
        }
    }

    pub fn build(&self) -> Result<Box<dyn TokenMechanism>, MechanismError> {
        match self.mechanism {
            MechanismKind::MetricDp => Ok(Box::new(MetricDp(MetricDpConfig::new(self.epsilon)?))),
            MechanismKind::Rantext => {
                let cfg = self.rantext_config();
                cfg.validate()?;
                Ok(Box::new(Rantext(cfg)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::random_store;

    fn rng(seed: u64) -> MechRng {
        RngState::new(seed, 0).rng()
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let a = RngState::for_document(7, "doc-1");
        let b = RngState::for_document(7, "doc-1");
        let c = RngState::for_document(7, "doc-2");
        assert_eq!(a, b);
        assert_ne!(a.stream_id, c.stream_id);
        let xs: Vec<u64> = (0..4).map(|_| a.rng().random()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.rng().random()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn zero_noise_is_identity() {
        let store = random_store(50, 6, 1);
        for t in 0..store.len() {
            assert_eq!(metric_dp_with_noise(t, &store, &[0.0; 6]).unwrap(), t);
        }
    }

    #[test]
    fn invalid_parameters() {
        let mut r = rng(0);
        assert!(matches!(
            sample_metric_noise(8, 0.0, &mut r),
            Err(MechanismError::InvalidEpsilon(_))
        ));
        assert!(matches!(
            sample_metric_noise(8, f64::NAN, &mut r),
            Err(MechanismError::InvalidEpsilon(_))
        ));
        assert!(matches!(
            sample_metric_noise(1, 1.0, &mut r),
            Err(MechanismError::InvalidDimension(1))
        ));
        assert!(matches!(
            exponential_select(&[], 1.0, 1.0, &mut r),
            Err(MechanismError::EmptyCandidates)
        ));
        let c = [Neighbor {
            token_index: 0,
            distance: 0.0,
        }];
        assert!(matches!(
            exponential_select(&c, -1.0, 1.0, &mut r),
            Err(MechanismError::InvalidEpsilon(_))
        ));
        let mut cfg = RantextConfig::new(1.0);
        cfg.rho = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RantextConfig::new(1.0);
        cfg.k_min = 60;
        assert!(cfg.validate().is_err());
        let store = random_store(100, 4, 0);
        assert!(RantextConfig::new(1.0).validate_for(&store).is_err());
    }

    #[test]
    fn list_size_without_noise_is_k0() {
        let mut cfg = RantextConfig::new(2e6);
        cfg.rho = 0.5;
        let mut r = rng(3);
        for _ in 0..1000 {
            assert_eq!(rantext_list_size(&cfg, &mut r).unwrap(), cfg.k0);
        }
    }

    #[test]
    fn list_size_is_clamped() {
        let mut cfg = RantextConfig::new(0.001);
        cfg.k_min = 10;
        cfg.k_max = 200;
        let mut r = rng(4);
        let mut hit = (false, false);
        for _ in 0..10_000 {
            let k = rantext_list_size(&cfg, &mut r).unwrap();
            assert!((10..=200).contains(&k));
            hit.0 |= k == 10;
            hit.1 |= k == 200;
        }
        assert!(hit.0 && hit.1);
    }

    #[test]
    fn single_candidate_is_identity() {
        let store = random_store(40, 4, 9);
        let mut cfg = RantextConfig::new(1.0);
        cfg.k0 = 1;
        cfg.k_min = 1;
        cfg.k_max = 1;
        let mut r = rng(5);
        for t in 0..store.len() {
            assert_eq!(rantext_token(t, &store, &cfg, &mut r).unwrap(), t);
        }
    }

    #[test]
    fn selection_never_overflows() {
        let cands: Vec<Neighbor> = (0..5)
            .map(|i| Neighbor {
                token_index: i,
                distance: 1000.0 * i as f64,
            })
            .collect();
        let mut r = rng(6);
        for _ in 0..100 {
            assert_eq!(exponential_select(&cands, 1e6, 1e-3, &mut r).unwrap(), 0);
        }
    }

    #[test]
    fn config_json() {
        let cfg: MechanismConfig =
            serde_json::from_str(r#"{"mechanism":"rantext","epsilon":8,"rantext":{"rho":0.25,"k0":20,"k_min":5,"k_max":40,"size_sensitivity":2}}"#)
                .unwrap();
        let r = cfg.rantext_config();
        assert_eq!((r.rho, r.k0, r.k_min, r.k_max), (0.25, 20, 5, 40));
        assert_eq!(r.delta_u, DeltaU::PerList);
        let md: MechanismConfig =
            serde_json::from_str(r#"{"mechanism":"metric_dp","epsilon":16}"#).unwrap();
        assert_eq!(md.build().unwrap().name(), "metric_dp");
        assert!(
            serde_json::from_str::<MechanismConfig>(r#"{"mechanism":"other","epsilon":1}"#)
                .is_err()
        );
    }
}
