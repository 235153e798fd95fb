//! Dataset ingestion and generation: IDX image files, delimited feature
//! files, label hierarchies for induction experiments, class splits, and the
//! synthetic generators used by the desk-scale benchmarks.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: bad magic {got:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, got: u32 },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: file truncated ({detail})")]
    TruncatedFile { path: PathBuf, detail: String },
    #[error("{path}:{line}: {msg}")]
    ParseError { path: PathBuf, line: usize, msg: String },
    #[error("{path}:{line}: row has {got} fields, expected {expected}")]
    InconsistentWidth { path: PathBuf, line: usize, expected: usize, got: usize },
    #[error("label {label} outside hierarchy of {classes} fine classes")]
    LabelMapMismatch { label: usize, classes: usize },
    #[error("class sets overlap on class {class}")]
    OverlappingClassSets { class: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// Samples with integer labels, optional class names, and an optional
/// side-channel of finer labels kept through [`coarsen`].
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    samples: Vec<f32>,
    in_dim: usize,
    labels: Vec<usize>,
    class_names: Option<Vec<String>>,
    fine_labels: Option<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(samples: Vec<f32>, in_dim: usize, labels: Vec<usize>) -> Self {
        assert_eq!(samples.len(), labels.len() * in_dim, "sample/label shape mismatch");
        assert!(samples.iter().all(|x| x.is_finite()), "non-finite feature");
        LabeledDataset { samples, in_dim, labels, class_names: None, fine_labels: None }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.in_dim
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.samples[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub fn samples_flat(&self) -> &[f32] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of label values, i.e. `max(label) + 1`.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn set_class_names(&mut self, names: Vec<String>) {
        self.class_names = Some(names);
    }

    /// Finer labels retained by [`coarsen`], if any.
    pub fn fine_labels(&self) -> Option<&[usize]> {
        self.fine_labels.as_deref()
    }

    /// Copy of the selected rows, keeping side-channel labels.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut samples = Vec::with_capacity(indices.len() * self.in_dim);
        let mut labels = Vec::with_capacity(indices.len());
        let mut fine = self.fine_labels.as_ref().map(|_| Vec::with_capacity(indices.len()));
        for &i in indices {
            samples.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
            if let (Some(list), Some(src)) = (fine.as_mut(), self.fine_labels.as_ref()) {
                list.push(src[i]);
            }
        }
        LabeledDataset {
            samples,
            in_dim: self.in_dim,
            labels,
            class_names: self.class_names.clone(),
            fine_labels: fine,
        }
    }
}

fn read_be_u32(reader: &mut impl Read, path: &Path) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|e| truncated(path, e))?;
    Ok(u32::from_be_bytes(buf))
}

fn truncated(path: &Path, source: io::Error) -> DataError {
    if source.kind() == io::ErrorKind::UnexpectedEof {
        DataError::TruncatedFile { path: path.to_path_buf(), detail: "unexpected EOF".into() }
    } else {
        DataError::Io { path: path.to_path_buf(), source }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, DataError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Load an IDX image/label file pair. Pixels are scaled to `[0, 1]` and
/// flattened row-major.
pub fn load_idx_images(
    images_path: &Path,
    labels_path: &Path,
) -> Result<LabeledDataset, DataError> {
    let mut r = open(images_path)?;
    let magic = read_be_u32(&mut r, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let n = read_be_u32(&mut r, images_path)? as usize;
    let rows = read_be_u32(&mut r, images_path)? as usize;
    let cols = read_be_u32(&mut r, images_path)? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    r.read_exact(&mut pixels).map_err(|e| truncated(images_path, e))?;

    let mut lr = open(labels_path)?;
    let magic = read_be_u32(&mut lr, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let n_labels = read_be_u32(&mut lr, labels_path)? as usize;
    if n_labels != n {
        return Err(DataError::CountMismatch { images: n, labels: n_labels });
    }
    let mut labels = vec![0u8; n_labels];
    lr.read_exact(&mut labels).map_err(|e| truncated(labels_path, e))?;

    let samples: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Ok(LabeledDataset::new(samples, rows * cols, labels.iter().map(|&l| l as usize).collect()))
}

/// Write an IDX image/label file pair (big-endian headers, u8 payloads).
pub fn write_idx_images(
    images_path: &Path,
    labels_path: &Path,
    pixels: &[u8],
    labels: &[u8],
    rows: usize,
    cols: usize,
) -> Result<(), DataError> {
    assert_eq!(pixels.len(), labels.len() * rows * cols, "pixel/label shape mismatch");
    fn io_err(path: &Path) -> impl Fn(io::Error) -> DataError + '_ {
        move |source| DataError::Io { path: path.to_path_buf(), source }
    }
    let mut w = BufWriter::new(File::create(images_path).map_err(io_err(images_path))?);
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).map_err(io_err(images_path))?;
    w.write_all(&(labels.len() as u32).to_be_bytes()).map_err(io_err(images_path))?;
    w.write_all(&(rows as u32).to_be_bytes()).map_err(io_err(images_path))?;
    w.write_all(&(cols as u32).to_be_bytes()).map_err(io_err(images_path))?;
    w.write_all(pixels).map_err(io_err(images_path))?;
    w.flush().map_err(io_err(images_path))?;

    let mut w = BufWriter::new(File::create(labels_path).map_err(io_err(labels_path))?);
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).map_err(io_err(labels_path))?;
    w.write_all(&(labels.len() as u32).to_be_bytes()).map_err(io_err(labels_path))?;
    w.write_all(labels).map_err(io_err(labels_path))?;
    w.flush().map_err(io_err(labels_path))?;
    Ok(())
}

/// Field separator for delimited feature files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delimiter {
    Comma,
    Whitespace,
}

#[derive(Debug, Clone, Copy)]
pub struct DelimitedSchema {
    pub delimiter: Delimiter,
    pub has_header: bool,
}

impl Default for DelimitedSchema {
    fn default() -> Self {
        DelimitedSchema { delimiter: Delimiter::Whitespace, has_header: false }
    }
}

/// Load a delimited feature file: `in_dim` numeric fields then one integer
/// label per row. Fails loudly; no silent row skipping.
pub fn load_delimited(path: &Path, schema: &DelimitedSchema) -> Result<LabeledDataset, DataError> {
    let reader = open(path)?;
    let mut samples: Vec<f32> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut width: Option<usize> = None;
    let mut rows = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| truncated(path, e))?;
        let line_no = idx + 1;
        if idx == 0 && schema.has_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = match schema.delimiter {
            Delimiter::Comma => line.split(',').map(str::trim).collect(),
            Delimiter::Whitespace => line.split_whitespace().collect(),
        };
        let expected = *width.get_or_insert(fields.len());
        if fields.len() != expected {
            return Err(DataError::InconsistentWidth {
                path: path.to_path_buf(),
                line: line_no,
                expected,
                got: fields.len(),
            });
        }
        if expected < 2 {
            return Err(DataError::ParseError {
                path: path.to_path_buf(),
                line: line_no,
                msg: "need at least one feature and one label field".into(),
            });
        }
        for f in &fields[..expected - 1] {
            let v: f32 = f.parse().map_err(|_| DataError::ParseError {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("non-numeric feature field {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::ParseError {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("non-finite feature {v}"),
                });
            }
            samples.push(v);
        }
        let label: usize = fields[expected - 1].parse().map_err(|_| DataError::ParseError {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("non-integer label field {:?}", fields[expected - 1]),
        })?;
        labels.push(label);
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::ParseError {
            path: path.to_path_buf(),
            line: 0,
            msg: "no data rows".into(),
        });
    }
    let in_dim = samples.len() / rows;
    Ok(LabeledDataset::new(samples, in_dim, labels))
}

/// Write a dataset in the delimited format read by [`load_delimited`].
pub fn write_delimited(
    dataset: &LabeledDataset,
    path: &Path,
    schema: &DelimitedSchema,
) -> Result<(), DataError> {
    let sep = match schema.delimiter {
        Delimiter::Comma => ",",
        Delimiter::Whitespace => " ",
    };
    let mut w = BufWriter::new(
        File::create(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?,
    );
    let mut emit = |s: String| {
        w.write_all(s.as_bytes())
            .map_err(|source| DataError::Io { path: path.to_path_buf(), source })
    };
    if schema.has_header {
        let mut header: Vec<String> =
            (0..dataset.input_dim()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        emit(header.join(sep) + "\n")?;
    }
    for i in 0..dataset.len() {
        let mut fields: Vec<String> = dataset.sample(i).iter().map(|v| format!("{v}")).collect();
        fields.push(dataset.labels()[i].to_string());
        emit(fields.join(sep) + "\n")?;
    }
    w.flush().map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Total map from fine label ids to coarse label ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelHierarchy {
    fine_to_coarse: Vec<usize>,
}

impl LabelHierarchy {
    pub fn new(fine_to_coarse: Vec<usize>) -> Self {
        LabelHierarchy { fine_to_coarse }
    }

    pub fn identity(classes: usize) -> Self {
        LabelHierarchy { fine_to_coarse: (0..classes).collect() }
    }

    pub fn fine_count(&self) -> usize {
        self.fine_to_coarse.len()
    }

    pub fn coarse_count(&self) -> usize {
        self.fine_to_coarse.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn coarse_of(&self, fine: usize) -> Result<usize, DataError> {
        self.fine_to_coarse.get(fine).copied().ok_or(DataError::LabelMapMismatch {
            label: fine,
            classes: self.fine_to_coarse.len(),
        })
    }

    pub fn map(&self) -> &[usize] {
        &self.fine_to_coarse
    }

    /// Parse lines of `fine_id coarse_id`. Fine ids must cover `0..F` exactly.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let reader = open(path)?;
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| truncated(path, e))?;
            let line_no = idx + 1;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let mut it = t.split_whitespace();
            let parse = |field: Option<&str>| -> Result<usize, DataError> {
                field
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| DataError::ParseError {
                        path: path.to_path_buf(),
                        line: line_no,
                        msg: format!("expected 'fine_id coarse_id', got {t:?}"),
                    })
            };
            let fine = parse(it.next())?;
            let coarse = parse(it.next())?;
            pairs.push((fine, coarse));
        }
        let count = pairs.len();
        let mut map = vec![usize::MAX; count];
        for (fine, coarse) in pairs {
            if fine >= count || map[fine] != usize::MAX {
                return Err(DataError::ParseError {
                    path: path.to_path_buf(),
                    line: 0,
                    msg: format!("fine ids must cover 0..{count} exactly once (saw {fine})"),
                });
            }
            map[fine] = coarse;
        }
        Ok(LabelHierarchy { fine_to_coarse: map })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut w = BufWriter::new(
            File::create(path)
                .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?,
        );
        for (fine, &coarse) in self.fine_to_coarse.iter().enumerate() {
            writeln!(w, "{fine} {coarse}")
                .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        }
        w.flush().map_err(|source| DataError::Io { path: path.to_path_buf(), source })
    }
}

/// Map labels fine -> coarse, retaining the fine labels as a side channel for
/// later induction evaluation. Samples are byte-identical to the input.
pub fn coarsen(
    dataset: &LabeledDataset,
    hierarchy: &LabelHierarchy,
) -> Result<LabeledDataset, DataError> {
    let mut coarse = Vec::with_capacity(dataset.len());
    for &label in dataset.labels() {
        coarse.push(hierarchy.coarse_of(label)?);
    }
    Ok(LabeledDataset {
        samples: dataset.samples.clone(),
        in_dim: dataset.in_dim,
        labels: coarse,
        class_names: None,
        fine_labels: Some(dataset.labels.clone()),
    })
}

/// Parameters of the hierarchical Gaussian generator.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub coarse_count: usize,
    pub fine_per_coarse: usize,
    pub samples_per_fine: usize,
    pub input_dim: usize,
    pub intra_fine_stddev: f64,
    pub inter_fine_scale: f64,
    pub inter_coarse_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            coarse_count: 5,
            fine_per_coarse: 4,
            samples_per_fine: 100,
            input_dim: 32,
            intra_fine_stddev: 0.35,
            inter_fine_scale: 1.2,
            inter_coarse_scale: 4.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), DataError> {
        if self.coarse_count < 1
            || self.fine_per_coarse < 1
            || self.samples_per_fine < 1
            || self.input_dim < 1
        {
            return Err(DataError::InvalidSpec("all counts must be >= 1".into()));
        }
        if !(self.intra_fine_stddev > 0.0) {
            return Err(DataError::InvalidSpec("intra_fine_stddev must be > 0".into()));
        }
        Ok(())
    }
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Hierarchical mixture: coarse centers on a sphere of radius
/// `inter_coarse_scale`, fine centers offset from their coarse center by
/// `inter_fine_scale`, samples Gaussian around the fine center. Fine label is
/// `coarse * fine_per_coarse + fine_offset`; deterministic per seed.
pub fn synth_hierarchical(
    spec: &SyntheticSpec,
) -> Result<(LabeledDataset, LabelHierarchy), DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.input_dim;
    let fine_total = spec.coarse_count * spec.fine_per_coarse;
    let n = fine_total * spec.samples_per_fine;

    let mut fine_centers = Vec::with_capacity(fine_total);
    let mut fine_to_coarse = Vec::with_capacity(fine_total);
    for c in 0..spec.coarse_count {
        let coarse_center: Vec<f64> = random_direction(&mut rng, d)
            .into_iter()
            .map(|x| x * spec.inter_coarse_scale)
            .collect();
        for _ in 0..spec.fine_per_coarse {
            let offset = random_direction(&mut rng, d);
            let center: Vec<f64> = coarse_center
                .iter()
                .zip(&offset)
                .map(|(&cc, &o)| cc + o * spec.inter_fine_scale)
                .collect();
            fine_centers.push(center);
            fine_to_coarse.push(c);
        }
    }

    let mut samples = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (fine, center) in fine_centers.iter().enumerate() {
        for _ in 0..spec.samples_per_fine {
            for &c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                samples.push((c + z * spec.intra_fine_stddev) as f32);
            }
            labels.push(fine);
        }
    }
    Ok((LabeledDataset::new(samples, d, labels), LabelHierarchy::new(fine_to_coarse)))
}

/// Result of a class-membership partition.
#[derive(Debug)]
pub struct ClassSplit {
    pub first: LabeledDataset,
    pub second: LabeledDataset,
    pub warnings: Vec<String>,
}

/// Partition a dataset into two pools by class membership, e.g. seen/unseen
/// classes for few-shot evaluation. The seed shuffles sample order within
/// each pool. Empty pools are allowed and reported as warnings.
pub fn split_classes(
    dataset: &LabeledDataset,
    first_classes: &[usize],
    second_classes: &[usize],
    seed: u64,
) -> Result<ClassSplit, DataError> {
    for c in first_classes {
        if second_classes.contains(c) {
            return Err(DataError::OverlappingClassSets { class: *c });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut collect = |classes: &[usize]| -> LabeledDataset {
        let mut indices: Vec<usize> = (0..dataset.len())
            .filter(|&i| classes.contains(&dataset.labels()[i]))
            .collect();
        indices.shuffle(&mut rng);
        dataset.subset(&indices)
    };
    let first = collect(first_classes);
    let second = collect(second_classes);
    let mut warnings = Vec::new();
    for (name, pool) in [("first", &first), ("second", &second)] {
        if pool.is_empty() {
            warnings.push(format!("{name} pool is empty"));
        }
    }
    Ok(ClassSplit { first, second, warnings })
}

/// Stratified train/test split: per class, `train_fraction` of the samples
/// (rounded down, at least one in each side when possible) go to the first
/// pool. Deterministic per seed.
pub fn stratified_split(
    dataset: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> (LabeledDataset, LabeledDataset) {
    assert!((0.0..=1.0).contains(&train_fraction));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        per_class[y].push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for members in per_class.iter_mut() {
        members.shuffle(&mut rng);
        let mut cut = (members.len() as f64 * train_fraction).floor() as usize;
        cut = cut.clamp(usize::from(members.len() > 1), members.len());
        train_idx.extend_from_slice(&members[..cut]);
        test_idx.extend_from_slice(&members[cut..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    (dataset.subset(&train_idx), dataset.subset(&test_idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write(path: &Path, content: &str) {
        std::fs::write(path, content).unwrap();
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempdir().unwrap();
        let images = dir.path().join("img.idx");
        let labels = dir.path().join("lab.idx");
        let pixels: Vec<u8> = (0..3 * 4).map(|i| (i * 17) as u8).collect();
        write_idx_images(&images, &labels, &pixels, &[0, 1, 2], 2, 2).unwrap();
        let ds = load_idx_images(&images, &labels).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.input_dim(), 4);
        assert_eq!(ds.labels(), &[0, 1, 2]);
        assert!((ds.sample(1)[0] - pixels[4] as f32 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn idx_bad_magic() {
        let dir = tempdir().unwrap();
        let images = dir.path().join("img.idx");
        let labels = dir.path().join("lab.idx");
        std::fs::write(&images, 99u32.to_be_bytes()).unwrap();
        std::fs::write(&labels, IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        match load_idx_images(&images, &labels) {
            Err(DataError::BadMagic { got: 99, .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncated_and_count_mismatch() {
        let dir = tempdir().unwrap();
        let images = dir.path().join("img.idx");
        let labels = dir.path().join("lab.idx");
        let pixels: Vec<u8> = vec![0; 2 * 4];
        write_idx_images(&images, &labels, &pixels, &[0, 1], 2, 2).unwrap();

        // Truncate the image payload.
        let bytes = std::fs::read(&images).unwrap();
        std::fs::write(&images, &bytes[..bytes.len() - 3]).unwrap();
        match load_idx_images(&images, &labels) {
            Err(DataError::TruncatedFile { .. }) => {}
            other => panic!("expected TruncatedFile, got {other:?}"),
        }

        // Rewrite images for 2 samples but labels for 3.
        write_idx_images(&images, &labels, &pixels, &[0, 1], 2, 2).unwrap();
        let lab3 = dir.path().join("lab3.idx");
        let mut buf = Vec::new();
        buf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        buf.extend_from_slice(&3u32.to_be_bytes());
        buf.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&lab3, buf).unwrap();
        match load_idx_images(&images, &lab3) {
            Err(DataError::CountMismatch { images: 2, labels: 3 }) => {}
            other => panic!("expected CountMismatch, got {other:?}"),
        }
    }

    #[test]
    fn delimited_loads_toy_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("toy.tsv");
        write(&path, "1.0 2.0 0\n3.0 4.0 1\n-1.5 0.25 0\n");
        let ds = load_delimited(&path, &DelimitedSchema::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.input_dim(), 2);
        assert_eq!(ds.labels(), &[0, 1, 0]);
    }

    #[test]
    fn delimited_rejects_bad_rows() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        write(&path, "1.0 2.0 0\n1.0 oops 1\n");
        match load_delimited(&path, &DelimitedSchema::default()) {
            Err(DataError::ParseError { line: 2, .. }) => {}
            other => panic!("expected ParseError at line 2, got {other:?}"),
        }

        let path = dir.path().join("width.tsv");
        write(&path, "1.0 2.0 0\n1.0 1\n");
        match load_delimited(&path, &DelimitedSchema::default()) {
            Err(DataError::InconsistentWidth { line: 2, expected: 3, got: 2, .. }) => {}
            other => panic!("expected InconsistentWidth, got {other:?}"),
        }

        let path = dir.path().join("empty.tsv");
        write(&path, "");
        assert!(matches!(
            load_delimited(&path, &DelimitedSchema::default()),
            Err(DataError::ParseError { .. })
        ));
    }

    #[test]
    fn delimited_round_trip_preserves_f32() {
        let (ds, _) = synth_hierarchical(&SyntheticSpec {
            coarse_count: 2,
            fine_per_coarse: 2,
            samples_per_fine: 5,
            input_dim: 6,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let schema = DelimitedSchema { delimiter: Delimiter::Comma, has_header: true };
        write_delimited(&ds, &path, &schema).unwrap();
        let back = load_delimited(&path, &schema).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.samples_flat(), ds.samples_flat());
    }

    #[test]
    fn coarsen_maps_and_keeps_fine_labels() {
        let ds = LabeledDataset::new(vec![0.0; 8], 2, vec![0, 1, 2, 3]);
        let h = LabelHierarchy::new(vec![0, 0, 1, 1]);
        let coarse = coarsen(&ds, &h).unwrap();
        assert_eq!(coarse.labels(), &[0, 0, 1, 1]);
        assert_eq!(coarse.fine_labels().unwrap(), &[0, 1, 2, 3]);
        assert_eq!(coarse.samples_flat(), ds.samples_flat());

        let identity = LabelHierarchy::identity(4);
        let same = coarsen(&ds, &identity).unwrap();
        assert_eq!(same.labels(), ds.labels());

        let short = LabelHierarchy::new(vec![0, 0]);
        assert!(matches!(
            coarsen(&ds, &short),
            Err(DataError::LabelMapMismatch { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn hierarchy_file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("map.txt");
        let h = LabelHierarchy::new(vec![0, 0, 1, 1, 2]);
        h.save(&path).unwrap();
        assert_eq!(LabelHierarchy::load(&path).unwrap(), h);
        assert_eq!(h.coarse_count(), 3);
    }

    #[test]
    fn synth_is_reproducible_and_shaped() {
        let spec = SyntheticSpec::default();
        let (a, ha) = synth_hierarchical(&spec).unwrap();
        let (b, hb) = synth_hierarchical(&spec).unwrap();
        assert_eq!(a.samples_flat(), b.samples_flat());
        assert_eq!(a.labels(), b.labels());
        assert_eq!(ha, hb);
        assert_eq!(a.len(), 5 * 4 * 100);
        assert_eq!(a.num_classes(), 20);
        assert_eq!(ha.coarse_count(), 5);
    }

    #[test]
    fn synth_single_fine_is_bijection() {
        let spec = SyntheticSpec { fine_per_coarse: 1, ..SyntheticSpec::default() };
        let (_, h) = synth_hierarchical(&spec).unwrap();
        assert_eq!(h.map(), (0..5).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn synth_tiny_stddev_collapses_fine_classes() {
        let spec = SyntheticSpec {
            intra_fine_stddev: 1e-9,
            samples_per_fine: 3,
            ..SyntheticSpec::default()
        };
        let (ds, _) = synth_hierarchical(&spec).unwrap();
        for class in 0..ds.num_classes() {
            let members: Vec<usize> =
                (0..ds.len()).filter(|&i| ds.labels()[i] == class).collect();
            let first = ds.sample(members[0]);
            for &m in &members[1..] {
                for (a, b) in ds.sample(m).iter().zip(first) {
                    assert!((a - b).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn split_classes_partitions_and_warns() {
        let (ds, _) = synth_hierarchical(&SyntheticSpec {
            coarse_count: 10,
            fine_per_coarse: 1,
            samples_per_fine: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let first: Vec<usize> = (0..6).collect();
        let second: Vec<usize> = (6..10).collect();
        let split = split_classes(&ds, &first, &second, 1).unwrap();
        assert_eq!(split.first.len(), 24);
        assert_eq!(split.second.len(), 16);
        assert!(split.warnings.is_empty());
        assert!(split.first.labels().iter().all(|l| first.contains(l)));
        assert!(split.second.labels().iter().all(|l| second.contains(l)));

        let overlap = split_classes(&ds, &[0, 1], &[1, 2], 1);
        assert!(matches!(overlap, Err(DataError::OverlappingClassSets { class: 1 })));

        let empty = split_classes(&ds, &first, &[], 1).unwrap();
        assert!(empty.second.is_empty());
        assert_eq!(empty.warnings.len(), 1);
    }

    #[test]
    fn stratified_split_is_disjoint_and_stratified() {
        let (ds, _) = synth_hierarchical(&SyntheticSpec {
            coarse_count: 3,
            fine_per_coarse: 2,
            samples_per_fine: 10,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (train, test) = stratified_split(&ds, 0.8, 42);
        assert_eq!(train.len() + test.len(), ds.len());
        for class in 0..ds.num_classes() {
            let count = |d: &LabeledDataset| d.labels().iter().filter(|&&y| y == class).count();
            assert_eq!(count(&train), 8);
            assert_eq!(count(&test), 2);
        }
    }
}
