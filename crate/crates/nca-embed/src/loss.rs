//! The scalable NCA objective: leave-one-out neighbor distribution, class
//! probability, the negative-log-likelihood objective, exact and
//! memory-approximated gradients, and support-set statistics.

use thiserror::Error;

use crate::embedding::{EmbeddingStore, EmbeddingVector};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("temperature must be > 0, got {0}")]
    InvalidTemperature(f64),
    #[error("epsilon must be in (0, 1e-6], got {0:e}")]
    InvalidEpsilon(f64),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("class probability {p:e} <= epsilon for sample {index}; gradient undefined")]
    ZeroClassProbability { index: usize, p: f64 },
    #[error("gradient of J_{index} w.r.t. its own embedding requested through the j-path")]
    SelfIndex { index: usize },
}

/// Temperature and numerical floor for the NCA objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NcaConfig {
    /// Scale dividing similarities inside the softmax. Smaller values
    /// concentrate probability on the nearest neighbors.
    pub temperature: f64,
    /// Floor for log arguments in the objective.
    pub epsilon: f64,
}

impl NcaConfig {
    pub const DEFAULT_EPSILON: f64 = 1e-12;

    pub fn new(temperature: f64) -> Result<Self, LossError> {
        Self::with_epsilon(temperature, Self::DEFAULT_EPSILON)
    }

    pub fn with_epsilon(temperature: f64, epsilon: f64) -> Result<Self, LossError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(LossError::InvalidTemperature(temperature));
        }
        if !(epsilon > 0.0 && epsilon <= 1e-6) {
            return Err(LossError::InvalidEpsilon(epsilon));
        }
        Ok(NcaConfig { temperature, epsilon })
    }
}

/// Per-label index sets: `omega(i)` is every sample sharing `i`'s label.
#[derive(Debug, Clone)]
pub struct ClassIndexSets {
    sets: Vec<Vec<usize>>,
    label_of: Vec<usize>,
}

impl ClassIndexSets {
    /// Build from dense labels. Labels need not be contiguous, but sets are
    /// indexed by label value, so keep them small integers.
    pub fn from_labels(labels: &[usize]) -> Self {
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut sets = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            sets[y].push(i);
        }
        ClassIndexSets { sets, label_of: labels.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.label_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_of.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.sets.len()
    }

    pub fn label(&self, i: usize) -> usize {
        self.label_of[i]
    }

    /// Indices sharing sample `i`'s label (including `i` itself).
    pub fn omega(&self, i: usize) -> &[usize] {
        &self.sets[self.label_of[i]]
    }

    pub fn members_of(&self, label: usize) -> &[usize] {
        &self.sets[label]
    }

    /// Labels that occur exactly once; their objective terms clamp to epsilon.
    pub fn singleton_classes(&self) -> Vec<usize> {
        (0..self.sets.len()).filter(|&c| self.sets[c].len() == 1).collect()
    }
}

/// Leave-one-out distribution of one sample over the whole set:
/// `probs[j] = p_ij`, with `probs[self_index] = 0` exactly.
#[derive(Debug, Clone)]
pub struct NeighborDistribution {
    probs: Vec<f64>,
    self_index: usize,
}

impl NeighborDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn self_index(&self) -> usize {
        self.self_index
    }
}

/// Softmax over similarity scores with the self entry (when any) forced to
/// zero.
///
/// `sims` enters holding `s_ik` and leaves holding `p_ik`. Max-subtraction
/// (over `k != i`) keeps the exponentials finite at small temperatures.
pub fn probs_from_sims_leave_one_out(
    sims: &mut [f64],
    self_index: Option<usize>,
    temperature: f64,
) {
    let mut max = f64::NEG_INFINITY;
    for (k, &s) in sims.iter().enumerate() {
        if Some(k) != self_index && s > max {
            max = s;
        }
    }
    let mut sum = 0.0f64;
    for (k, s) in sims.iter_mut().enumerate() {
        if Some(k) == self_index {
            *s = 0.0;
        } else {
            *s = ((*s - max) / temperature).exp();
            sum += *s;
        }
    }
    for s in sims.iter_mut() {
        *s /= sum;
    }
}

/// Eq.-2-style leave-one-out distribution of sample `i` against a store.
pub fn neighbor_distribution<S: EmbeddingStore + ?Sized>(
    i: usize,
    query: &EmbeddingVector,
    store: &S,
    cfg: &NcaConfig,
) -> Result<NeighborDistribution, LossError> {
    let n = store.count();
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }
    assert!(i < n, "sample index {i} out of range for {n} entries");
    let mut sims = vec![0.0f64; n];
    for (k, s) in sims.iter_mut().enumerate() {
        *s = store.dot_with(k, query.as_slice());
    }
    probs_from_sims_leave_one_out(&mut sims, Some(i), cfg.temperature);
    Ok(NeighborDistribution { probs: sims, self_index: i })
}

/// Probability mass the distribution assigns to an index set (Eq. 3).
pub fn class_probability(dist: &NeighborDistribution, omega: &[usize]) -> f64 {
    omega.iter().map(|&j| dist.probs[j]).sum()
}

/// Objective value plus the classes whose terms clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    /// Labels with a single member: their `p_i` is structurally zero and the
    /// log argument clamps to epsilon.
    pub singleton_classes: Vec<usize>,
}

/// Mean negative log class probability over the dataset (Eq. 4).
pub fn objective(
    embeddings: &[EmbeddingVector],
    classes: &ClassIndexSets,
    cfg: &NcaConfig,
) -> Result<ObjectiveValue, LossError> {
    let n = embeddings.len();
    if n < 2 {
        return Err(LossError::TooFewSamples(n));
    }
    assert_eq!(classes.len(), n, "labels/embeddings length mismatch");
    let mut total = 0.0f64;
    for i in 0..n {
        let dist = neighbor_distribution(i, &embeddings[i], embeddings, cfg)?;
        let p_i = class_probability(&dist, classes.omega(i));
        total -= p_i.max(cfg.epsilon).ln();
    }
    Ok(ObjectiveValue {
        value: total / n as f64,
        singleton_classes: classes.singleton_classes(),
    })
}

/// Turn a probability row into the Eq. 5/9 accumulation weights, in place.
///
/// On success `probs` holds `w_k = (p_ik - [k in omega] * p_ik / p_i) / sigma`,
/// so the gradient w.r.t. `v_i` is `sum_k w_k v_k`. Returns `p_i`.
pub fn nca_weights_in_place(
    probs: &mut [f64],
    omega: &[usize],
    sample: usize,
    cfg: &NcaConfig,
) -> Result<f64, LossError> {
    let p_i: f64 = omega.iter().map(|&j| probs[j]).sum();
    if p_i <= cfg.epsilon {
        return Err(LossError::ZeroClassProbability { index: sample, p: p_i });
    }
    let inv_sigma = 1.0 / cfg.temperature;
    for w in probs.iter_mut() {
        *w *= inv_sigma;
    }
    // p_ik - p~_ik = p_ik * (1 - 1/p_i) on the ground-truth class.
    let keep = 1.0 - 1.0 / p_i;
    for &j in omega {
        probs[j] *= keep;
    }
    Ok(p_i)
}

fn grad_from_store<S: EmbeddingStore + ?Sized>(
    i: usize,
    query: &EmbeddingVector,
    store: &S,
    classes: &ClassIndexSets,
    cfg: &NcaConfig,
) -> Result<Vec<f64>, LossError> {
    let dist = neighbor_distribution(i, query, store, cfg)?;
    let mut weights = dist.probs;
    nca_weights_in_place(&mut weights, classes.omega(i), i, cfg)?;
    let mut grad = vec![0.0f64; store.dim()];
    for (k, &w) in weights.iter().enumerate() {
        if w != 0.0 {
            store.add_scaled_to(k, w, &mut grad);
        }
    }
    Ok(grad)
}

/// Exact gradient of `J_i` w.r.t. the sample's own embedding (Eq. 5):
/// `(1/sigma) (sum_k p_ik v_k - sum_{k in omega_i} p~_ik v_k)`.
pub fn grad_exact_vi(
    i: usize,
    embeddings: &[EmbeddingVector],
    classes: &ClassIndexSets,
    cfg: &NcaConfig,
) -> Result<Vec<f64>, LossError> {
    grad_from_store(i, &embeddings[i], embeddings, classes, cfg)
}

/// Exact gradient of `J_i` w.r.t. another sample's embedding (Eq. 6).
pub fn grad_exact_vj(
    i: usize,
    j: usize,
    embeddings: &[EmbeddingVector],
    classes: &ClassIndexSets,
    cfg: &NcaConfig,
) -> Result<Vec<f64>, LossError> {
    if i == j {
        return Err(LossError::SelfIndex { index: i });
    }
    let dist = neighbor_distribution(i, &embeddings[i], embeddings, cfg)?;
    let omega = classes.omega(i);
    let p_i = class_probability(&dist, omega);
    if p_i <= cfg.epsilon {
        return Err(LossError::ZeroClassProbability { index: i, p: p_i });
    }
    let p_ij = dist.probs[j];
    let coeff = if classes.label(j) == classes.label(i) {
        (p_ij - p_ij / p_i) / cfg.temperature
    } else {
        p_ij / cfg.temperature
    };
    Ok(embeddings[i].as_slice().iter().map(|&v| coeff * v).collect())
}

/// Memory-approximated gradient (Eq. 9): similarities use the fresh embedding
/// of sample `i` against stored rows, including the stale row `i` itself,
/// whose probability is then forced to zero exactly as in Eq. 2.
pub fn grad_memory_vi<S: EmbeddingStore + ?Sized>(
    i: usize,
    fresh_embedding: &EmbeddingVector,
    bank: &S,
    classes: &ClassIndexSets,
    cfg: &NcaConfig,
) -> Result<Vec<f64>, LossError> {
    grad_from_store(i, fresh_embedding, bank, classes, cfg)
}

/// Smallest number of top-probability neighbors whose mass reaches `threshold`.
///
/// Ties in the top-m selection break by ascending index, so the result is
/// deterministic.
pub fn support_set_size<S: EmbeddingStore + ?Sized>(
    i: usize,
    store: &S,
    cfg: &NcaConfig,
    threshold: f64,
) -> Result<usize, LossError> {
    assert!(
        threshold > 0.0 && threshold <= 1.0,
        "threshold must be in (0, 1], got {threshold}"
    );
    let query = EmbeddingVector::from_unit_unchecked(store.row_f64(i));
    let dist = neighbor_distribution(i, &query, store, cfg)?;
    Ok(support_size_of_probs(dist.probs(), threshold))
}

/// Shared prefix computation for callers that already hold a probability row.
pub fn support_size_of_probs(probs: &[f64], threshold: f64) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b].partial_cmp(&probs[a]).expect("finite probabilities").then(a.cmp(&b))
    });
    let mut mass = 0.0f64;
    for (m, &idx) in order.iter().enumerate() {
        mass += probs[idx];
        if mass >= threshold {
            return m + 1;
        }
    }
    probs.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{l2_normalize, RawFeature};

    fn unit(values: &[f64]) -> EmbeddingVector {
        l2_normalize(&RawFeature(values.to_vec())).unwrap()
    }

    fn basis(d: usize, axis: usize) -> EmbeddingVector {
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        unit(&v)
    }

    #[test]
    fn config_validation() {
        assert!(NcaConfig::new(0.05).is_ok());
        assert_eq!(NcaConfig::new(0.0).unwrap_err(), LossError::InvalidTemperature(0.0));
        assert_eq!(
            NcaConfig::with_epsilon(1.0, 1e-3).unwrap_err(),
            LossError::InvalidEpsilon(1e-3)
        );
        assert_eq!(NcaConfig::with_epsilon(1.0, 0.0).unwrap_err(), LossError::InvalidEpsilon(0.0));
    }

    #[test]
    fn two_samples_give_single_competitor() {
        let embeddings = vec![basis(4, 0), basis(4, 1)];
        let cfg = NcaConfig::new(0.5).unwrap();
        let dist = neighbor_distribution(0, &embeddings[0], embeddings.as_slice(), &cfg).unwrap();
        assert_eq!(dist.probs(), &[0.0, 1.0]);
    }

    #[test]
    fn orthogonal_triple_splits_evenly() {
        let embeddings = vec![basis(3, 0), basis(3, 1), basis(3, 2)];
        let cfg = NcaConfig::new(1.0).unwrap();
        let dist = neighbor_distribution(0, &embeddings[0], embeddings.as_slice(), &cfg).unwrap();
        assert_eq!(dist.probs()[0], 0.0);
        assert!((dist.probs()[1] - 0.5).abs() < 1e-12);
        assert!((dist.probs()[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_rejected() {
        let embeddings = vec![basis(2, 0)];
        let cfg = NcaConfig::new(1.0).unwrap();
        let err = neighbor_distribution(0, &embeddings[0], embeddings.as_slice(), &cfg).unwrap_err();
        assert_eq!(err, LossError::TooFewSamples(1));
    }

    #[test]
    fn class_probability_full_self_and_symmetric() {
        let embeddings = vec![basis(3, 0), basis(3, 1), basis(3, 2)];
        let cfg = NcaConfig::new(1.0).unwrap();
        let dist = neighbor_distribution(0, &embeddings[0], embeddings.as_slice(), &cfg).unwrap();
        let all: Vec<usize> = (0..3).collect();
        assert!((class_probability(&dist, &all) - 1.0).abs() < 1e-9);
        assert_eq!(class_probability(&dist, &[0]), 0.0);
        // Half of the symmetric 3-point configuration.
        assert!((class_probability(&dist, &[0, 1]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn objective_uniform_closed_form() {
        // All embeddings identical, 2 balanced classes of size n/2:
        // p_ij uniform = 1/(n-1), so p_i = (n/2 - 1)/(n - 1).
        let n = 8;
        let embeddings: Vec<_> = (0..n).map(|_| basis(4, 1)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let classes = ClassIndexSets::from_labels(&labels);
        let cfg = NcaConfig::new(0.7).unwrap();
        let got = objective(&embeddings, &classes, &cfg).unwrap();
        let expect = -(((n / 2 - 1) as f64) / ((n - 1) as f64)).ln();
        assert!((got.value - expect).abs() < 1e-12, "{} vs {expect}", got.value);
        assert!(got.singleton_classes.is_empty());
    }

    #[test]
    fn objective_tends_to_zero_for_tight_separated_pairs() {
        // Two classes, each a pair of identical embeddings, well separated:
        // as temperature shrinks, p_i -> 1 and the objective -> 0.
        let embeddings = vec![basis(2, 0), basis(2, 0), basis(2, 1), basis(2, 1)];
        let classes = ClassIndexSets::from_labels(&[0, 0, 1, 1]);
        let mut last = f64::INFINITY;
        for sigma in [0.5, 0.1, 0.05] {
            let cfg = NcaConfig::new(sigma).unwrap();
            let value = objective(&embeddings, &classes, &cfg).unwrap().value;
            assert!(value < last);
            last = value;
        }
        assert!(last < 1e-8, "objective {last} should vanish at small temperature");
    }

    #[test]
    fn objective_flags_singleton_classes() {
        let embeddings = vec![basis(2, 0), basis(2, 0), basis(2, 1)];
        let classes = ClassIndexSets::from_labels(&[0, 0, 1]);
        let cfg = NcaConfig::new(1.0).unwrap();
        let got = objective(&embeddings, &classes, &cfg).unwrap();
        assert_eq!(got.singleton_classes, vec![1]);
        assert!(got.value.is_finite());
    }

    #[test]
    fn grad_vanishes_when_perfectly_classified() {
        // Sample 0's class holds all probability mass, split evenly, so
        // p_ik = p~_ik on omega and 0 elsewhere: Eq. 5 cancels.
        let far = unit(&[-1.0, 1e-8, 0.0]);
        let embeddings = vec![basis(3, 0), basis(3, 0), basis(3, 0), far];
        let classes = ClassIndexSets::from_labels(&[0, 0, 0, 1]);
        let cfg = NcaConfig::new(0.01).unwrap();
        let g = grad_exact_vi(0, &embeddings, &classes, &cfg).unwrap();
        let norm: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-9, "gradient norm {norm}");
    }

    #[test]
    fn grad_vj_rejects_self() {
        let embeddings = vec![basis(2, 0), basis(2, 1)];
        let classes = ClassIndexSets::from_labels(&[0, 0]);
        let cfg = NcaConfig::new(1.0).unwrap();
        let err = grad_exact_vj(1, 1, &embeddings, &classes, &cfg).unwrap_err();
        assert_eq!(err, LossError::SelfIndex { index: 1 });
    }

    #[test]
    fn grad_vj_sole_positive_case() {
        // Omega_i = {i, j} with j the only other member: p~_ij = 1, so the
        // gradient is (1/sigma)(p_ij - 1) v_i.
        let embeddings = vec![unit(&[1.0, 0.2]), unit(&[0.8, 0.6]), unit(&[-0.5, 1.0])];
        let classes = ClassIndexSets::from_labels(&[0, 0, 1]);
        let cfg = NcaConfig::new(0.7).unwrap();
        let dist = neighbor_distribution(0, &embeddings[0], embeddings.as_slice(), &cfg).unwrap();
        let p01 = dist.probs()[1];
        let got = grad_exact_vj(0, 1, &embeddings, &classes, &cfg).unwrap();
        for (g, v) in got.iter().zip(embeddings[0].as_slice()) {
            assert!((g - (p01 - 1.0) / 0.7 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_vj_vanished_competitor() {
        // j not in Omega_i with p_ij ~ 0 (antipodal at tiny temperature).
        let embeddings = vec![basis(2, 0), basis(2, 0), unit(&[-1.0, 1e-6])];
        let classes = ClassIndexSets::from_labels(&[0, 0, 1]);
        let cfg = NcaConfig::new(0.01).unwrap();
        let g = grad_exact_vj(0, 2, &embeddings, &classes, &cfg).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-30), "{g:?}");
    }

    #[test]
    fn zero_class_probability_is_an_error() {
        // Sample 2 is a singleton class: p_2 = 0.
        let embeddings = vec![basis(2, 0), basis(2, 0), basis(2, 1)];
        let classes = ClassIndexSets::from_labels(&[0, 0, 1]);
        let cfg = NcaConfig::new(1.0).unwrap();
        let err = grad_exact_vi(2, &embeddings, &classes, &cfg).unwrap_err();
        assert!(matches!(err, LossError::ZeroClassProbability { index: 2, .. }));
    }

    #[test]
    fn memory_grad_with_fresh_bank_matches_exact() {
        // Zero staleness: the store holds exactly the fresh embeddings.
        let embeddings = vec![
            unit(&[0.9, 0.1, 0.2]),
            unit(&[0.7, -0.4, 0.1]),
            unit(&[-0.2, 0.8, 0.3]),
            unit(&[0.1, -0.6, 0.9]),
        ];
        let classes = ClassIndexSets::from_labels(&[0, 1, 0, 1]);
        let cfg = NcaConfig::new(0.3).unwrap();
        for i in 0..embeddings.len() {
            let exact = grad_exact_vi(i, &embeddings, &classes, &cfg).unwrap();
            let memory =
                grad_memory_vi(i, &embeddings[i], embeddings.as_slice(), &classes, &cfg).unwrap();
            for (a, b) in exact.iter().zip(&memory) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn support_size_boundaries() {
        let cfg = NcaConfig::new(1.0).unwrap();
        // n=2: the single neighbor holds all mass.
        let pair = vec![basis(2, 0), basis(2, 1)];
        for t in [0.1, 0.5, 1.0] {
            assert_eq!(support_set_size(0, pair.as_slice(), &cfg, t).unwrap(), 1);
        }
        // Uniform mass over n-1 neighbors at threshold 0.5 needs ceil((n-1)/2).
        let n = 9usize;
        let same: Vec<_> = (0..n).map(|_| basis(3, 2)).collect();
        let got = support_set_size(0, same.as_slice(), &cfg, 0.5).unwrap();
        assert_eq!(got, (n - 1).div_ceil(2));
    }

    #[test]
    fn support_size_breaks_ties_by_index() {
        let probs = vec![0.25, 0.25, 0.25, 0.25];
        assert_eq!(support_size_of_probs(&probs, 0.5), 2);
        assert_eq!(support_size_of_probs(&probs, 0.51), 3);
    }
}
