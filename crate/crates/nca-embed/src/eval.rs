//! Weighted k-nearest-neighbor classification over embedding galleries, and
//! the three evaluation protocols: closed-set accuracy, sub-category
//! induction, and episodic few-shot recognition.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{LabelHierarchy, LabeledDataset};
use crate::embedding::{l2_normalize, EmbeddingError, EmbeddingStore, EmbeddingVector};
use crate::encoder::{EncoderError, EncoderNetwork};
use crate::kernels::{self, BLOCK};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid knn config: {0}")]
    InvalidConfig(String),
    #[error("gallery of {gallery} usable entries is smaller than k={k}")]
    GalleryTooSmall { gallery: usize, k: usize },
    #[error("label {label} outside hierarchy of {classes} fine classes")]
    LabelMapMismatch { label: usize, classes: usize },
    #[error("pool has {eligible} classes with >= {per_class} items; episode needs {way}")]
    InsufficientPool { way: usize, per_class: usize, eligible: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Weighted kNN parameters. The vote weight mirrors the training kernel:
/// `exp(similarity / temperature)`.
#[derive(Debug, Clone, Copy)]
pub struct KnnConfig {
    pub k: usize,
    pub temperature: f64,
}

impl KnnConfig {
    pub fn new(k: usize, temperature: f64) -> Result<Self, EvalError> {
        if k < 1 {
            return Err(EvalError::InvalidConfig("k must be >= 1".into()));
        }
        if !(temperature > 0.0) {
            return Err(EvalError::InvalidConfig(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        Ok(KnnConfig { k, temperature })
    }
}

/// Unit-norm embeddings (f32 rows) with labels; the search database.
#[derive(Debug, Clone)]
pub struct Gallery {
    rows: Vec<f32>,
    d: usize,
    labels: Vec<usize>,
}

impl Gallery {
    pub fn new(rows: Vec<f32>, d: usize, labels: Vec<usize>) -> Self {
        assert_eq!(rows.len(), labels.len() * d, "gallery shape mismatch");
        Gallery { rows, d, labels }
    }

    pub fn from_embeddings(embeddings: &[EmbeddingVector], labels: Vec<usize>) -> Self {
        assert_eq!(embeddings.len(), labels.len());
        let d = embeddings.first().map_or(0, EmbeddingVector::dim);
        let mut rows = Vec::with_capacity(labels.len() * d);
        for e in embeddings {
            rows.extend(e.as_slice().iter().map(|&x| x as f32));
        }
        Gallery { rows, d, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn rows_flat(&self) -> &[f32] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    /// Copy of the selected rows and labels.
    pub fn subset(&self, indices: &[usize]) -> Gallery {
        let mut rows = Vec::with_capacity(indices.len() * self.d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            rows.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Gallery { rows, d: self.d, labels }
    }
}

impl EmbeddingStore for Gallery {
    fn count(&self) -> usize {
        self.labels.len()
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn dot_with(&self, row: usize, query: &[f64]) -> f64 {
        kernels::row_dot(self.row(row), query)
    }

    fn add_scaled_to(&self, row: usize, scale: f64, out: &mut [f64]) {
        kernels::row_axpy(self.row(row), scale, out);
    }

    fn row_f64(&self, row: usize) -> Vec<f64> {
        self.row(row).iter().map(|&x| x as f64).collect()
    }
}

/// Embed every dataset sample with the encoder and L2-normalize.
pub fn embed_dataset(
    net: &EncoderNetwork,
    dataset: &LabeledDataset,
) -> Result<Gallery, EvalError> {
    let mut rows = Vec::with_capacity(dataset.len() * net.output_dim());
    for i in 0..dataset.len() {
        let raw = net.embed_raw(dataset.sample(i))?;
        let e = l2_normalize(&raw)?;
        rows.extend(e.as_slice().iter().map(|&x| x as f32));
    }
    Ok(Gallery::new(rows, net.output_dim(), dataset.labels().to_vec()))
}

/// A classification outcome: winning label plus the full class ranking.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub label: usize,
    /// Summed vote per class id.
    pub scores: Vec<f64>,
    /// Class ids ranked by vote (desc), absent classes after present ones,
    /// ties by ascending id.
    pub ranking: Vec<usize>,
}

/// Deterministic top-k selection from a similarity row: similarity
/// descending, index ascending on ties. `exclude` drops one gallery index
/// (leave-one-out evaluation).
fn top_k_neighbors(sims: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut top: Vec<usize> = Vec::with_capacity(k + 1);
    for idx in 0..sims.len() {
        if Some(idx) == exclude {
            continue;
        }
        let s = sims[idx];
        if top.len() == k && s <= sims[top[k - 1]] {
            continue;
        }
        let pos = top.partition_point(|&t| sims[t] > s);
        top.insert(pos, idx);
        if top.len() > k {
            top.pop();
        }
    }
    top
}

/// Classify from a precomputed similarity row (shared by the scalar and
/// blocked paths).
fn classify_from_sims(
    sims: &[f64],
    gallery_labels: &[usize],
    classes: usize,
    cfg: &KnnConfig,
    exclude: Option<usize>,
) -> Result<Prediction, EvalError> {
    let usable = sims.len() - usize::from(exclude.is_some());
    if usable < cfg.k {
        return Err(EvalError::GalleryTooSmall { gallery: usable, k: cfg.k });
    }
    let top = top_k_neighbors(sims, cfg.k, exclude);
    // Vote weights are shifted by the best similarity; the common factor
    // exp(-s_top / T) cancels in the ranking and keeps exp() bounded.
    let s_top = sims[top[0]];
    let mut scores = vec![0.0f64; classes];
    for &idx in &top {
        scores[gallery_labels[idx]] += ((sims[idx] - s_top) / cfg.temperature).exp();
    }
    let mut ranking: Vec<usize> = (0..classes).collect();
    ranking.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b))
    });
    Ok(Prediction { label: ranking[0], scores, ranking })
}

/// Weighted kNN vote of a query against a gallery.
pub fn knn_classify(
    query: &[f64],
    gallery: &Gallery,
    cfg: &KnnConfig,
    exclude: Option<usize>,
) -> Result<Prediction, EvalError> {
    if query.len() != gallery.dim() {
        return Err(EvalError::ShapeMismatch { expected: gallery.dim(), got: query.len() });
    }
    let mut sims = vec![0.0f64; gallery.len()];
    for (i, s) in sims.iter_mut().enumerate() {
        *s = kernels::row_dot(gallery.row(i), query);
    }
    classify_from_sims(&sims, gallery.labels(), gallery.num_classes(), cfg, exclude)
}

/// Per-class tallies inside an [`EvalReport`].
#[derive(Debug, Clone)]
pub struct PerClass {
    pub label: usize,
    pub correct: usize,
    pub total: usize,
}

/// Episode statistics for few-shot runs.
#[derive(Debug, Clone)]
pub struct EpisodeStats {
    pub episodes: usize,
    pub mean: f64,
    /// `1.96 * stderr` over episode accuracies; `None` for a single episode.
    pub half_width: Option<f64>,
    pub k_used: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: Option<f64>,
    pub per_class: Vec<PerClass>,
    /// `confusion[true * classes + predicted]`, when tracked.
    pub confusion: Option<Vec<usize>>,
    pub classes: usize,
    pub n_queries: usize,
    pub episodes: Option<EpisodeStats>,
}

impl EvalReport {
    /// Machine-readable `metric,value,stderr` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,stderr\n");
        out.push_str(&format!("top1,{:.6},\n", self.top1));
        if let Some(t5) = self.top5 {
            out.push_str(&format!("top5,{t5:.6},\n"));
        }
        if let Some(ep) = &self.episodes {
            let stderr = ep.half_width.map(|h| h / 1.96);
            out.push_str(&format!(
                "episode_mean,{:.6},{}\n",
                ep.mean,
                stderr.map_or(String::new(), |s| format!("{s:.6}"))
            ));
            out.push_str(&format!("episodes,{},\n", ep.episodes));
            out.push_str(&format!("k,{},\n", ep.k_used));
        }
        for pc in &self.per_class {
            if pc.total > 0 {
                out.push_str(&format!(
                    "class_{},{:.6},\n",
                    pc.label,
                    pc.correct as f64 / pc.total as f64
                ));
            }
        }
        out
    }

    /// Human-readable table.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("queries      {}\n", self.n_queries));
        out.push_str(&format!("top-1        {:.2}%\n", 100.0 * self.top1));
        if let Some(t5) = self.top5 {
            out.push_str(&format!("top-5        {:.2}%\n", 100.0 * t5));
        }
        if let Some(ep) = &self.episodes {
            match ep.half_width {
                Some(h) => out.push_str(&format!(
                    "episodes     {} -> {:.1} +/- {:.1}% (k={})\n",
                    ep.episodes,
                    100.0 * ep.mean,
                    100.0 * h,
                    ep.k_used
                )),
                None => out.push_str(&format!(
                    "episodes     {} -> {:.1}% (k={})\n",
                    ep.episodes,
                    100.0 * ep.mean,
                    ep.k_used
                )),
            }
        }
        out
    }
}

/// Closed-set evaluation: classify every query against the gallery.
///
/// With `exclude_self`, query `i` may not match gallery entry `i` (the two
/// sets must then be index-aligned) — leave-one-out accuracy on the training
/// set.
pub fn closed_set_accuracy(
    gallery: &Gallery,
    queries: &Gallery,
    cfg: &KnnConfig,
    exclude_self: bool,
) -> Result<EvalReport, EvalError> {
    if gallery.dim() != queries.dim() {
        return Err(EvalError::ShapeMismatch { expected: gallery.dim(), got: queries.dim() });
    }
    if exclude_self {
        assert_eq!(gallery.len(), queries.len(), "exclude_self needs aligned sets");
    }
    let classes = gallery.num_classes().max(queries.num_classes());
    let n_g = gallery.len();
    let d = gallery.dim();
    let mut correct = 0usize;
    let mut correct5 = 0usize;
    let mut per_class: Vec<PerClass> =
        (0..classes).map(|label| PerClass { label, correct: 0, total: 0 }).collect();
    let mut confusion = vec![0usize; classes * classes];

    let mut block_queries = vec![0.0f64; BLOCK * d];
    let mut sims = vec![0.0f64; BLOCK * n_g];
    let mut start = 0usize;
    while start < queries.len() {
        let q = BLOCK.min(queries.len() - start);
        for b in 0..q {
            for (j, &x) in queries.row(start + b).iter().enumerate() {
                block_queries[b * d + j] = x as f64;
            }
        }
        kernels::sim_block(gallery.rows_flat(), n_g, d, &block_queries[..q * d], q, &mut sims);
        for b in 0..q {
            let i = start + b;
            let exclude = exclude_self.then_some(i);
            let pred = classify_from_sims(
                &sims[b * n_g..(b + 1) * n_g],
                gallery.labels(),
                classes,
                cfg,
                exclude,
            )?;
            let truth = queries.labels()[i];
            per_class[truth].total += 1;
            confusion[truth * classes + pred.label] += 1;
            if pred.label == truth {
                correct += 1;
                per_class[truth].correct += 1;
            }
            if pred.ranking.iter().take(5).any(|&c| c == truth) {
                correct5 += 1;
            }
        }
        start += q;
    }

    let n_q = queries.len();
    Ok(EvalReport {
        top1: correct as f64 / n_q as f64,
        top5: Some(correct5 as f64 / n_q as f64),
        per_class,
        confusion: Some(confusion),
        classes,
        n_queries: n_q,
        episodes: None,
    })
}

/// Fine-grained kNN accuracy of features from a model that never saw fine
/// labels: gallery and queries both carry fine labels, the hierarchy only
/// validates them.
pub fn induction_accuracy(
    gallery_fine: &Gallery,
    queries_fine: &Gallery,
    hierarchy: &LabelHierarchy,
    cfg: &KnnConfig,
) -> Result<EvalReport, EvalError> {
    for &label in gallery_fine.labels().iter().chain(queries_fine.labels()) {
        if label >= hierarchy.fine_count() {
            return Err(EvalError::LabelMapMismatch { label, classes: hierarchy.fine_count() });
        }
    }
    closed_set_accuracy(gallery_fine, queries_fine, cfg, false)
}

/// A c-way s-shot observation set plus query items, as pool indices.
#[derive(Debug, Clone)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub observations: Vec<usize>,
    pub queries: Vec<usize>,
}

impl Episode {
    /// Check the episode invariants against its pool's labels.
    pub fn validate(&self, pool_labels: &[usize]) -> Result<(), String> {
        if self.observations.len() != self.way * self.shot {
            return Err(format!(
                "observation count {} != way*shot {}",
                self.observations.len(),
                self.way * self.shot
            ));
        }
        let mut class_counts = std::collections::BTreeMap::new();
        for &i in &self.observations {
            *class_counts.entry(pool_labels[i]).or_insert(0usize) += 1;
        }
        if class_counts.len() != self.way {
            return Err(format!("{} distinct classes, expected {}", class_counts.len(), self.way));
        }
        if class_counts.values().any(|&c| c != self.shot) {
            return Err("per-class observation counts are uneven".into());
        }
        for &q in &self.queries {
            if self.observations.contains(&q) {
                return Err(format!("query {q} also appears in the observation set"));
            }
            if !class_counts.contains_key(&pool_labels[q]) {
                return Err(format!("query {q} label outside the episode's classes"));
            }
        }
        Ok(())
    }
}

/// Sample a valid episode from a labeled pool. Deterministic per RNG state.
pub fn sample_episode(
    pool_labels: &[usize],
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode, EvalError> {
    assert!(way >= 1 && shot >= 1 && queries >= 1);
    let classes = pool_labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in pool_labels.iter().enumerate() {
        members[y].push(i);
    }
    let per_class = shot + queries;
    let mut eligible: Vec<usize> =
        (0..classes).filter(|&c| members[c].len() >= per_class).collect();
    if eligible.len() < way {
        return Err(EvalError::InsufficientPool { way, per_class, eligible: eligible.len() });
    }
    eligible.shuffle(rng);
    let chosen = &eligible[..way];

    let mut observations = Vec::with_capacity(way * shot);
    let mut spares: Vec<Vec<usize>> = Vec::with_capacity(way);
    for &c in chosen {
        let mut items = members[c].clone();
        items.shuffle(rng);
        observations.extend_from_slice(&items[..shot]);
        spares.push(items[shot..].to_vec());
    }
    let mut query_items = Vec::with_capacity(queries);
    for _ in 0..queries {
        let slot = rng.random_range(0..way);
        let item = spares[slot].pop().expect("per_class reserve guarantees spares");
        query_items.push(item);
    }
    Ok(Episode { way, shot, observations, queries: query_items })
}

/// Neighbor count rule: k=1 for 1-shot, k=5 otherwise, capped by the
/// observation count.
pub fn k_for_shot(way: usize, shot: usize) -> usize {
    let rule = if shot == 1 { 1 } else { 5 };
    rule.min(way * shot)
}

/// Episodic few-shot evaluation over a pool of embedded, labeled samples.
///
/// Per-episode RNG streams are derived from the master seed, so episodes are
/// reproducible independent of evaluation order.
pub fn fewshot_eval(
    pool: &Gallery,
    way: usize,
    shot: usize,
    episodes: usize,
    queries_per_episode: usize,
    temperature: f64,
    master_seed: u64,
) -> Result<EvalReport, EvalError> {
    let k = k_for_shot(way, shot);
    let cfg = KnnConfig::new(k, temperature)?;
    let mut accuracies = Vec::with_capacity(episodes);
    let mut correct_total = 0usize;
    let mut queries_total = 0usize;
    for ep in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(master_seed, ep as u64));
        let episode = sample_episode(pool.labels(), way, shot, queries_per_episode, &mut rng)?;
        let observation = pool.subset(&episode.observations);
        let mut correct = 0usize;
        for &q in &episode.queries {
            let pred = knn_classify(&pool.row_f64(q), &observation, &cfg, None)?;
            if pred.label == pool.labels()[q] {
                correct += 1;
            }
        }
        correct_total += correct;
        queries_total += episode.queries.len();
        accuracies.push(correct as f64 / episode.queries.len() as f64);
    }
    let mean = accuracies.iter().sum::<f64>() / episodes as f64;
    let half_width = (episodes >= 2).then(|| {
        let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
            / (episodes as f64 - 1.0);
        1.96 * (var / episodes as f64).sqrt()
    });
    Ok(EvalReport {
        top1: correct_total as f64 / queries_total as f64,
        top5: None,
        per_class: Vec::new(),
        confusion: None,
        classes: pool.num_classes(),
        n_queries: queries_total,
        episodes: Some(EpisodeStats { episodes, mean, half_width, k_used: k }),
    })
}

fn splitmix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::RawFeature;

    fn unit(values: &[f64]) -> EmbeddingVector {
        l2_normalize(&RawFeature(values.to_vec())).unwrap()
    }

    fn toy_gallery() -> Gallery {
        Gallery::from_embeddings(
            &[
                unit(&[1.0, 0.0]),
                unit(&[0.9, 0.5]),
                unit(&[0.0, 1.0]),
                unit(&[-0.2, 1.0]),
            ],
            vec![0, 0, 1, 1],
        )
    }

    #[test]
    fn k1_reduces_to_nearest_neighbor() {
        let g = toy_gallery();
        let cfg = KnnConfig::new(1, 0.05).unwrap();
        let pred = knn_classify(&[0.99, 0.05], &g, &cfg, None).unwrap();
        assert_eq!(pred.label, 0);
        let pred = knn_classify(&[0.05, 0.99], &g, &cfg, None).unwrap();
        assert_eq!(pred.label, 1);
    }

    #[test]
    fn identical_query_matches_its_gallery_item() {
        let g = toy_gallery();
        let cfg = KnnConfig::new(1, 0.05).unwrap();
        let pred = knn_classify(&g.row_f64(2), &g, &cfg, None).unwrap();
        assert_eq!(pred.label, 1);
    }

    #[test]
    fn gallery_too_small_is_an_error() {
        let g = toy_gallery();
        let cfg = KnnConfig::new(5, 0.05).unwrap();
        assert!(matches!(
            knn_classify(&[1.0, 0.0], &g, &cfg, None),
            Err(EvalError::GalleryTooSmall { gallery: 4, k: 5 })
        ));
        // Exclusion shrinks the usable gallery.
        let cfg = KnnConfig::new(4, 0.05).unwrap();
        assert!(matches!(
            knn_classify(&[1.0, 0.0], &g, &cfg, Some(0)),
            Err(EvalError::GalleryTooSmall { gallery: 3, k: 4 })
        ));
    }

    #[test]
    fn argmax_tie_breaks_by_smaller_class_id() {
        // Two gallery points exactly symmetric around the query.
        let g = Gallery::from_embeddings(&[unit(&[1.0, 0.1]), unit(&[1.0, -0.1])], vec![1, 0]);
        let cfg = KnnConfig::new(2, 0.5).unwrap();
        let pred = knn_classify(&[1.0, 0.0], &g, &cfg, None).unwrap();
        assert_eq!(pred.label, 0);
        assert!((pred.scores[0] - pred.scores[1]).abs() < 1e-12);
    }

    #[test]
    fn closed_set_self_query_is_perfect() {
        let g = toy_gallery();
        let cfg = KnnConfig::new(1, 0.05).unwrap();
        let report = closed_set_accuracy(&g, &g, &cfg, false).unwrap();
        assert_eq!(report.top1, 1.0);
        assert_eq!(report.n_queries, 4);
    }

    #[test]
    fn single_class_gallery_predicts_that_class() {
        let g = Gallery::from_embeddings(&[unit(&[1.0, 0.0]), unit(&[0.8, 0.6])], vec![3, 3]);
        let queries = Gallery::from_embeddings(&[unit(&[0.0, 1.0])], vec![1]);
        let cfg = KnnConfig::new(2, 0.1).unwrap();
        let report = closed_set_accuracy(&g, &queries, &cfg, false).unwrap();
        assert_eq!(report.top1, 0.0);
        assert_eq!(report.confusion.as_ref().unwrap()[1 * report.classes + 3], 1);
    }

    #[test]
    fn induction_identity_hierarchy_equals_closed_set() {
        let g = toy_gallery();
        let cfg = KnnConfig::new(1, 0.05).unwrap();
        let h = LabelHierarchy::identity(2);
        let a = induction_accuracy(&g, &g, &h, &cfg).unwrap();
        let b = closed_set_accuracy(&g, &g, &cfg, false).unwrap();
        assert_eq!(a.top1, b.top1);

        let short = LabelHierarchy::identity(1);
        assert!(matches!(
            induction_accuracy(&g, &g, &short, &cfg),
            Err(EvalError::LabelMapMismatch { label: 1, classes: 1 })
        ));
    }

    #[test]
    fn episode_sampler_respects_invariants() {
        let labels: Vec<usize> = (0..20).flat_map(|c| std::iter::repeat_n(c, 8)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ep = sample_episode(&labels, 5, 1, 3, &mut rng).unwrap();
        ep.validate(&labels).unwrap();
        assert_eq!(ep.observations.len(), 5);
        assert_eq!(ep.queries.len(), 3);
    }

    #[test]
    fn episode_sampler_boundary_and_errors() {
        // c = all classes, s = all but one item.
        let labels: Vec<usize> = (0..4).flat_map(|c| std::iter::repeat_n(c, 5)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = sample_episode(&labels, 4, 4, 1, &mut rng).unwrap();
        ep.validate(&labels).unwrap();
        assert_eq!(ep.observations.len(), 16);

        assert!(matches!(
            sample_episode(&labels, 5, 1, 1, &mut rng),
            Err(EvalError::InsufficientPool { way: 5, .. })
        ));
        assert!(matches!(
            sample_episode(&labels, 4, 5, 1, &mut rng),
            Err(EvalError::InsufficientPool { .. })
        ));
    }

    #[test]
    fn k_rule_matches_protocol() {
        assert_eq!(k_for_shot(5, 1), 1);
        assert_eq!(k_for_shot(5, 5), 5);
        assert_eq!(k_for_shot(20, 1), 1);
        assert_eq!(k_for_shot(20, 5), 5);
        // Capped by the observation count.
        assert_eq!(k_for_shot(2, 2), 4);
    }

    #[test]
    fn fewshot_degenerate_single_class_is_perfect() {
        let pool = Gallery::from_embeddings(
            &[unit(&[1.0, 0.0]), unit(&[0.9, 0.4]), unit(&[0.8, 0.5])],
            vec![0, 0, 0],
        );
        let report = fewshot_eval(&pool, 1, 1, 1, 1, 0.05, 3).unwrap();
        assert_eq!(report.top1, 1.0);
        let stats = report.episodes.unwrap();
        assert_eq!(stats.episodes, 1);
        assert!(stats.half_width.is_none());
    }

    #[test]
    fn csv_has_metric_rows() {
        let g = toy_gallery();
        let cfg = KnnConfig::new(1, 0.05).unwrap();
        let report = closed_set_accuracy(&g, &g, &cfg, false).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,value,stderr\n"));
        assert!(csv.contains("top1,1.000000,"));
        assert!(csv.contains("class_0,"));
    }
}
