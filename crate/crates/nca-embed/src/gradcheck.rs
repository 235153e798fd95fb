//! Finite-difference verification of the analytic gradients: the per-sample
//! gradient w.r.t. the sample's own embedding, the cross-sample gradient, the
//! memory-consistency limit, and the full pipeline through normalization and
//! the encoder against a frozen bank.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bank::MemoryBank;
use crate::embedding::{l2_normalize, l2_normalize_backward, EmbeddingStore, EmbeddingVector, RawFeature};
use crate::encoder::EncoderNetwork;
use crate::kernels;
use crate::loss::{grad_exact_vi, grad_exact_vj, grad_memory_vi, ClassIndexSets, NcaConfig};

/// Central finite differences of a scalar function, step `h` per coordinate.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut grads = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let plus = f(&x);
        x[i] = point[i] - h;
        let minus = f(&x);
        x[i] = point[i];
        grads.push((plus - minus) / (2.0 * h));
    }
    grads
}

/// `max_i |a_i - r_i|` relative to the max magnitude of the reference vector.
pub fn relative_max_error(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference.iter().fold(0.0f64, |m, &x| m.max(x.abs())).max(1e-12);
    analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (&a, &r)| m.max((a - r).abs()))
        / scale
}

/// One named check with its observed error and pinned tolerance.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    pub seed: u64,
    pub instances: usize,
    /// Test hook: negate the analytic gradients so every check must fail.
    pub fault_sign_flip: bool,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings { seed: 0, instances: 20, fault_sign_flip: false }
    }
}

/// A random clustered instance with geometry scaled to the temperature:
/// pairwise similarity gaps of order `sigma`, so the leave-one-out
/// distribution is neither saturated (vanishing gradients that finite
/// differences cannot resolve) nor degenerate (`p_i ~ 0`).
pub struct Instance {
    pub embeddings: Vec<EmbeddingVector>,
    pub classes: ClassIndexSets,
    pub cfg: NcaConfig,
}

pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, d: usize, sigma: f64) -> Instance {
    let class_count = 2 + (n % 2);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    // Similarity deficits grow with the squared perturbation radius, so a
    // sqrt(sigma) radius keeps the exp arguments O(1) at every temperature.
    let scale = sigma.sqrt().min(1.0);
    let per_comp = |r: f64| r / (d as f64).sqrt();
    let anchor: Vec<f64> = {
        let v: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    };
    let centers: Vec<Vec<f64>> = (0..class_count)
        .map(|_| {
            anchor.iter().map(|&a| a + per_comp(1.4 * scale) * gauss(rng)).collect()
        })
        .collect();
    let mut embeddings = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % class_count;
        let raw: Vec<f64> =
            centers[c].iter().map(|&x| x + per_comp(0.9 * scale) * gauss(rng)).collect();
        embeddings.push(l2_normalize(&RawFeature(raw)).expect("clustered raw is non-degenerate"));
        labels.push(c);
    }
    Instance {
        embeddings,
        classes: ClassIndexSets::from_labels(&labels),
        cfg: NcaConfig::new(sigma).unwrap(),
    }
}

/// Independent evaluation of the objective term `J_i = -ln p_i` with the
/// embedding of `free` replaced by `x`. Straight exponential arithmetic over
/// raw dot products; shares nothing with the library's probability path.
pub fn objective_term_with_replacement(
    instance: &Instance,
    i: usize,
    free: usize,
    x: &[f64],
) -> f64 {
    let sigma = instance.cfg.temperature;
    let vec_of = |k: usize| -> &[f64] {
        if k == free {
            x
        } else {
            instance.embeddings[k].as_slice()
        }
    };
    let query = vec_of(i);
    let n = instance.embeddings.len();
    let mut sims = Vec::with_capacity(n);
    let mut max = f64::NEG_INFINITY;
    for k in 0..n {
        let s = kernels::dot_f64(query, vec_of(k));
        if k != i && s > max {
            max = s;
        }
        sims.push(s);
    }
    let mut denom = 0.0f64;
    for (k, &s) in sims.iter().enumerate() {
        if k != i {
            denom += ((s - max) / sigma).exp();
        }
    }
    let mut numer = 0.0f64;
    for &j in instance.classes.omega(i) {
        if j != i {
            numer += ((sims[j] - max) / sigma).exp();
        }
    }
    -(numer / denom).ln()
}

const FD_STEP: f64 = 1e-6;

fn flip(mut grads: Vec<f64>, fault: bool) -> Vec<f64> {
    if fault {
        for g in grads.iter_mut() {
            *g = -*g;
        }
    }
    grads
}

/// Gradient of `J_i` w.r.t. the sample's own embedding vs finite differences.
pub fn check_grad_vi(settings: &GradCheckSettings) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let sigmas = [1.0, 0.1, 0.05];
    let mut worst = 0.0f64;
    for t in 0..settings.instances {
        let n = 6 + t % 15;
        let d = 3 + t % 6;
        let instance = random_instance(&mut rng, n, d, sigmas[t % sigmas.len()]);
        let i = t % n;
        let analytic = flip(
            grad_exact_vi(i, &instance.embeddings, &instance.classes, &instance.cfg).unwrap(),
            settings.fault_sign_flip,
        );
        let mut f = |x: &[f64]| objective_term_with_replacement(&instance, i, i, x);
        let fd = central_difference(&mut f, instance.embeddings[i].as_slice(), FD_STEP);
        worst = worst.max(relative_max_error(&analytic, &fd));
    }
    CheckResult { name: "grad_vi_vs_fd", max_rel_error: worst, tolerance: 1e-5 }
}

/// Gradient of `J_i` w.r.t. every other embedding vs finite differences.
///
/// All `j != i` gradients of one instance are compared as a single
/// concatenated vector: individually a vanished competitor has a near-zero
/// gradient that finite differences can only resolve to roundoff, which says
/// nothing about correctness.
pub fn check_grad_vj(settings: &GradCheckSettings) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(1));
    let sigmas = [1.0, 0.1, 0.05];
    let mut worst = 0.0f64;
    for t in 0..settings.instances {
        let n = 6 + t % 15;
        let d = 3 + t % 6;
        let instance = random_instance(&mut rng, n, d, sigmas[t % sigmas.len()]);
        let i = t % n;
        let mut analytic = Vec::with_capacity((n - 1) * d);
        let mut fd = Vec::with_capacity((n - 1) * d);
        for j in (0..n).filter(|&j| j != i) {
            analytic.extend(
                grad_exact_vj(i, j, &instance.embeddings, &instance.classes, &instance.cfg)
                    .unwrap(),
            );
            let mut f = |x: &[f64]| objective_term_with_replacement(&instance, i, j, x);
            fd.extend(central_difference(&mut f, instance.embeddings[j].as_slice(), FD_STEP));
        }
        let analytic = flip(analytic, settings.fault_sign_flip);
        worst = worst.max(relative_max_error(&analytic, &fd));
    }
    CheckResult { name: "grad_vj_vs_fd", max_rel_error: worst, tolerance: 1e-5 }
}

/// Zero-staleness limit: a bank holding exactly the fresh embeddings must
/// reproduce the exact gradient.
pub fn check_memory_consistency(settings: &GradCheckSettings) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(2));
    let mut worst = 0.0f64;
    for t in 0..settings.instances {
        let n = 6 + t % 15;
        let d = 3 + t % 6;
        let mut instance = random_instance(&mut rng, n, d, [1.0, 0.1, 0.05][t % 3]);
        // Zero staleness: the fresh embeddings are exactly the bank rows
        // (bank ingestion renormalizes in f32, so round-trip through it).
        let bank = MemoryBank::from_embeddings(&instance.embeddings).unwrap();
        for (k, e) in instance.embeddings.iter_mut().enumerate() {
            *e = EmbeddingVector::from_unit_unchecked(bank.row_f64(k));
        }
        let i = t % n;
        let exact =
            grad_exact_vi(i, &instance.embeddings, &instance.classes, &instance.cfg).unwrap();
        let memory = flip(
            grad_memory_vi(i, &instance.embeddings[i], &bank, &instance.classes, &instance.cfg)
                .unwrap(),
            settings.fault_sign_flip,
        );
        worst = worst.max(relative_max_error(&memory, &exact));
    }
    CheckResult { name: "memory_consistency", max_rel_error: worst, tolerance: 1e-12 }
}

pub fn flatten_params(net: &EncoderNetwork) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.param_count());
    for layer in net.layers() {
        out.extend_from_slice(&layer.weight);
        out.extend_from_slice(&layer.bias);
    }
    out
}

pub fn load_params(net: &mut EncoderNetwork, flat: &[f64]) {
    let mut cursor = 0;
    for layer in net.layers_mut() {
        let w_len = layer.weight.len();
        layer.weight.copy_from_slice(&flat[cursor..cursor + w_len]);
        cursor += w_len;
        let b_len = layer.bias.len();
        layer.bias.copy_from_slice(&flat[cursor..cursor + b_len]);
        cursor += b_len;
    }
    assert_eq!(cursor, flat.len());
}

/// The function the memory-mode trainer actually optimizes per step: mean of
/// `-ln p_i` with fresh query embeddings against a frozen bank.
fn frozen_bank_objective(
    net: &EncoderNetwork,
    inputs: &[Vec<f32>],
    bank: &MemoryBank,
    classes: &ClassIndexSets,
    cfg: &NcaConfig,
) -> f64 {
    let n = inputs.len();
    let mut total = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let raw = net.embed_raw(input).unwrap();
        let fresh = l2_normalize(&raw).unwrap();
        let mut sims: Vec<f64> = (0..bank.len()).map(|k| bank.dot_with(k, fresh.as_slice())).collect();
        crate::loss::probs_from_sims_leave_one_out(&mut sims, Some(i), cfg.temperature);
        let p_i: f64 = classes.omega(i).iter().map(|&j| sims[j]).sum();
        total -= p_i.max(cfg.epsilon).ln();
    }
    total / n as f64
}

/// Analytic gradient of the same function: Eq. 9 weights, the normalization
/// Jacobian, then encoder backprop; compared against finite differences over
/// every parameter.
pub fn check_full_pipeline(settings: &GradCheckSettings) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(3));
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut worst = 0.0f64;
    let runs = settings.instances.clamp(1, 10);
    for t in 0..runs {
        let in_dim = 5;
        let d = 4;
        let n = 10;
        let net = EncoderNetwork::mlp(in_dim, &[8], d, settings.seed.wrapping_add(t as u64));
        let cfg = NcaConfig::new(0.2).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let classes = ClassIndexSets::from_labels(&labels);
        // Clustered inputs keep p_i healthy.
        let inputs: Vec<Vec<f32>> = (0..n)
            .map(|i| {
                let base = if i % 2 == 0 { 1.0 } else { -1.0 };
                (0..in_dim).map(|_| (base + 0.4 * gauss(&mut rng)) as f32).collect()
            })
            .collect();
        let embeddings: Vec<EmbeddingVector> = inputs
            .iter()
            .map(|x| l2_normalize(&net.embed_raw(x).unwrap()).unwrap())
            .collect();
        let bank = MemoryBank::from_embeddings(&embeddings).unwrap();

        // Analytic route.
        let mut analytic = vec![0.0f64; net.param_count()];
        for (i, input) in inputs.iter().enumerate() {
            let (raw, tape) = net.forward(input).unwrap();
            let fresh = l2_normalize(&raw).unwrap();
            let grad_v = grad_memory_vi(i, &fresh, &bank, &classes, &cfg).unwrap();
            let g_raw = l2_normalize_backward(&raw, &grad_v).unwrap();
            let g = net.backward(&tape, &g_raw).unwrap();
            let mut cursor = 0;
            for lg in &g.layers {
                for &w in lg.weight.iter().chain(&lg.bias) {
                    analytic[cursor] += w / n as f64;
                    cursor += 1;
                }
            }
        }
        let analytic = flip(analytic, settings.fault_sign_flip);

        let theta0 = flatten_params(&net);
        let mut probe = net.clone();
        let mut f = |theta: &[f64]| {
            load_params(&mut probe, theta);
            frozen_bank_objective(&probe, &inputs, &bank, &classes, &cfg)
        };
        let fd = central_difference(&mut f, &theta0, FD_STEP);
        worst = worst.max(relative_max_error(&analytic, &fd));
    }
    CheckResult { name: "full_pipeline_vs_fd", max_rel_error: worst, tolerance: 1e-4 }
}

/// The four standard checks, in reporting order.
pub fn run_standard_checks(settings: &GradCheckSettings) -> Vec<CheckResult> {
    vec![
        check_grad_vi(settings),
        check_grad_vj(settings),
        check_memory_consistency(settings),
        check_full_pipeline(settings),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_checks_pass() {
        let results = run_standard_checks(&GradCheckSettings {
            seed: 1,
            instances: 6,
            fault_sign_flip: false,
        });
        for r in &results {
            assert!(r.passed(), "{}: {} >= {}", r.name, r.max_rel_error, r.tolerance);
        }
    }

    #[test]
    fn sign_flip_fault_is_caught() {
        let results = run_standard_checks(&GradCheckSettings {
            seed: 1,
            instances: 3,
            fault_sign_flip: true,
        });
        assert!(results.iter().any(|r| !r.passed()));
    }

    #[test]
    fn checks_are_deterministic() {
        let settings = GradCheckSettings { seed: 5, instances: 4, fault_sign_flip: false };
        let a = run_standard_checks(&settings);
        let b = run_standard_checks(&settings);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.max_rel_error.to_bits(), y.max_rel_error.to_bits());
        }
    }

    #[test]
    fn central_difference_on_quadratic() {
        let mut f = |v: &[f64]| v[0] * v[0] + 3.0 * v[0] * v[1];
        let g = central_difference(&mut f, &[2.0, 1.0], 1e-6);
        assert!((g[0] - 7.0).abs() < 1e-8);
        assert!((g[1] - 6.0).abs() < 1e-8);
    }
}
