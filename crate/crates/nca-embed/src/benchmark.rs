//! Desk-scale image benchmark generator.
//!
//! Produces an MNIST-format dataset (IDX files, 28x28 u8 pixels, byte labels)
//! from a latent mixture: every class owns a set of appearance modes
//! scattered across latent space, and samples are rendered to pixels through
//! a fixed random two-layer nonlinear map plus pixel noise and u8
//! quantization. Class structure is multi-modal on purpose: closed-set
//! accuracy requires keeping hundreds of modes apart in embedding space,
//! which is what separates embedding sizes and temperatures in the ablations.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{write_idx_images, DataError};

#[derive(Debug, Clone)]
pub struct ImageBenchmarkSpec {
    pub classes: usize,
    /// Appearance modes per class; mode centers are scattered globally, so
    /// class identity is not a single latent direction.
    pub modes_per_class: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Images are `side x side`.
    pub side: usize,
    pub latent_dim: usize,
    /// Width of the tanh layer in the fixed rendering map.
    pub render_hidden: usize,
    /// Scale of mode centers in latent space.
    pub mode_spread: f64,
    /// Sample spread around its mode center, relative to `mode_spread`.
    pub intra_mode_stddev: f64,
    /// Additive pixel noise, in u8 units.
    pub pixel_noise: f64,
    /// Pixel units per rendered activation unit.
    pub render_gain: f64,
    pub seed: u64,
}

impl Default for ImageBenchmarkSpec {
    fn default() -> Self {
        ImageBenchmarkSpec {
            classes: 10,
            modes_per_class: 40,
            train_per_class: 6000,
            test_per_class: 1000,
            side: 28,
            latent_dim: 48,
            render_hidden: 96,
            mode_spread: 1.0,
            intra_mode_stddev: 0.32,
            pixel_noise: 24.0,
            render_gain: 72.0,
            seed: 2024,
        }
    }
}

impl ImageBenchmarkSpec {
    /// The 60k/10k configuration used by the closed-set benchmark.
    pub fn desk_default() -> Self {
        Self::default()
    }

    /// Same distribution at a reduced sample count.
    pub fn with_scale(mut self, train_per_class: usize, test_per_class: usize) -> Self {
        self.train_per_class = train_per_class;
        self.test_per_class = test_per_class;
        self
    }
}

/// Generated u8 image data, MNIST-format in memory.
#[derive(Debug, Clone)]
pub struct ImageBenchmark {
    pub train_pixels: Vec<u8>,
    pub train_labels: Vec<u8>,
    pub test_pixels: Vec<u8>,
    pub test_labels: Vec<u8>,
    pub side: usize,
}

/// File paths written by [`ImageBenchmark::write_idx`].
#[derive(Debug, Clone)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl ImageBenchmark {
    pub fn write_idx(&self, dir: &Path) -> Result<IdxPaths, DataError> {
        let paths = IdxPaths {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        };
        write_idx_images(
            &paths.train_images,
            &paths.train_labels,
            &self.train_pixels,
            &self.train_labels,
            self.side,
            self.side,
        )?;
        write_idx_images(
            &paths.test_images,
            &paths.test_labels,
            &self.test_pixels,
            &self.test_labels,
            self.side,
            self.side,
        )?;
        Ok(paths)
    }
}

struct Renderer {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    latent: usize,
    hidden: usize,
    pixels: usize,
    gain: f64,
}

impl Renderer {
    fn render(&self, z: &[f64], noise: &mut impl FnMut() -> f64, noise_scale: f64) -> Vec<u8> {
        let mut h = vec![0.0f64; self.hidden];
        for (o, h_o) in h.iter_mut().enumerate() {
            let row = &self.w1[o * self.latent..(o + 1) * self.latent];
            let mut acc = self.b1[o];
            for (w, x) in row.iter().zip(z) {
                acc += w * x;
            }
            *h_o = acc.tanh();
        }
        let mut out = Vec::with_capacity(self.pixels);
        for p in 0..self.pixels {
            let row = &self.w2[p * self.hidden..(p + 1) * self.hidden];
            let mut acc = 0.0f64;
            for (w, x) in row.iter().zip(&h) {
                acc += w * x;
            }
            let value = 128.0 + self.gain * acc + noise_scale * noise();
            out.push(value.round().clamp(0.0, 255.0) as u8);
        }
        out
    }
}

/// Generate the benchmark deterministically from its spec.
pub fn synth_image_benchmark(spec: &ImageBenchmarkSpec) -> Result<ImageBenchmark, DataError> {
    if spec.classes < 2 || spec.classes > 256 {
        return Err(DataError::InvalidSpec(format!(
            "classes must be in [2, 256] for byte labels, got {}",
            spec.classes
        )));
    }
    if spec.modes_per_class < 1 || spec.train_per_class < 1 || spec.test_per_class < 1 {
        return Err(DataError::InvalidSpec("counts must be >= 1".into()));
    }
    if spec.side < 2 || spec.latent_dim < 2 || spec.render_hidden < 2 {
        return Err(DataError::InvalidSpec("dimensions must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let pixels = spec.side * spec.side;
    let renderer = Renderer {
        w1: (0..spec.render_hidden * spec.latent_dim)
            .map(|_| gauss(&mut rng) / (spec.latent_dim as f64).sqrt())
            .collect(),
        b1: (0..spec.render_hidden).map(|_| 0.4 * gauss(&mut rng)).collect(),
        w2: (0..pixels * spec.render_hidden)
            .map(|_| gauss(&mut rng) / (spec.render_hidden as f64).sqrt())
            .collect(),
        latent: spec.latent_dim,
        hidden: spec.render_hidden,
        pixels,
        gain: spec.render_gain,
    };

    let total_modes = spec.classes * spec.modes_per_class;
    let mode_centers: Vec<f64> = (0..total_modes * spec.latent_dim)
        .map(|_| spec.mode_spread * gauss(&mut rng))
        .collect();

    let emit = |per_class: usize, rng: &mut ChaCha8Rng| -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::with_capacity(spec.classes * per_class * pixels);
        let mut labels = Vec::with_capacity(spec.classes * per_class);
        let mut z = vec![0.0f64; spec.latent_dim];
        for class in 0..spec.classes {
            for s in 0..per_class {
                let mode = class * spec.modes_per_class + s % spec.modes_per_class;
                let center = &mode_centers[mode * spec.latent_dim..(mode + 1) * spec.latent_dim];
                for (zi, &c) in z.iter_mut().zip(center) {
                    *zi = c + spec.intra_mode_stddev * spec.mode_spread * gauss(rng);
                }
                let mut noise = || gauss(rng);
                images.extend_from_slice(&renderer.render(&z, &mut noise, spec.pixel_noise));
                labels.push(class as u8);
            }
        }
        (images, labels)
    };

    let (train_pixels, train_labels) = emit(spec.train_per_class, &mut rng);
    let (test_pixels, test_labels) = emit(spec.test_per_class, &mut rng);
    Ok(ImageBenchmark { train_pixels, train_labels, test_pixels, test_labels, side: spec.side })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ImageBenchmarkSpec {
        ImageBenchmarkSpec {
            classes: 3,
            modes_per_class: 2,
            train_per_class: 4,
            test_per_class: 2,
            side: 6,
            latent_dim: 4,
            render_hidden: 5,
            ..ImageBenchmarkSpec::default()
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = synth_image_benchmark(&tiny_spec()).unwrap();
        let b = synth_image_benchmark(&tiny_spec()).unwrap();
        assert_eq!(a.train_pixels, b.train_pixels);
        assert_eq!(a.test_pixels, b.test_pixels);
        assert_eq!(a.train_labels, b.train_labels);
    }

    #[test]
    fn shapes_and_label_balance() {
        let bench = synth_image_benchmark(&tiny_spec()).unwrap();
        assert_eq!(bench.train_labels.len(), 12);
        assert_eq!(bench.test_labels.len(), 6);
        assert_eq!(bench.train_pixels.len(), 12 * 36);
        for class in 0..3u8 {
            assert_eq!(bench.train_labels.iter().filter(|&&l| l == class).count(), 4);
            assert_eq!(bench.test_labels.iter().filter(|&&l| l == class).count(), 2);
        }
    }

    #[test]
    fn idx_round_trip_matches_memory() {
        let bench = synth_image_benchmark(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = bench.write_idx(dir.path()).unwrap();
        let train = crate::data::load_idx_images(&paths.train_images, &paths.train_labels).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(train.input_dim(), 36);
        for (i, &l) in bench.train_labels.iter().enumerate() {
            assert_eq!(train.labels()[i], l as usize);
            for (p, &byte) in train.sample(i).iter().zip(&bench.train_pixels[i * 36..]) {
                assert!((p - byte as f32 / 255.0).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = tiny_spec();
        spec.classes = 1;
        assert!(synth_image_benchmark(&spec).is_err());
        let mut spec = tiny_spec();
        spec.classes = 300;
        assert!(synth_image_benchmark(&spec).is_err());
    }
}
