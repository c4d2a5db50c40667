//! Dataset model, the `VGCD` feature file, the confounded synthetic
//! generator and seeded batch sampling.
//!
//! Feature vectors are stored as `f32` because that is what the file holds;
//! models convert to their own scalar type on the way in.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FILE_MAGIC: [u8; 4] = *b"VGCD";
pub const FILE_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("bad magic bytes {0:?}, expected \"VGCD\"")]
    BadMagic([u8; 4]),
    #[error("unsupported feature file version {0}, expected {FILE_VERSION}")]
    VersionMismatch(u16),
    #[error("feature file truncated inside the header")]
    TruncatedHeader,
    #[error("feature file truncated inside record {index}")]
    TruncatedRecord { index: u64 },
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("feature dimension mismatch: expected {expected}, file has {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("batch size must be at least 2, got {0}")]
    BatchSize(usize),
    #[error("no eligible records to batch")]
    NoEligibleRecords,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One instance: the spatial, temporal and spatiotemporal feature views plus
/// label metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: u64,
    pub f_s: Vec<f32>,
    pub f_t: Vec<f32>,
    pub f_st: Vec<f32>,
    /// Ground truth class, `-1` when withheld. Present for unlabeled records
    /// in generated data so evaluation can score them.
    pub gt_label: i32,
    pub is_labeled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<FeatureRecord>,
    pub dim: usize,
    pub num_classes_total: usize,
    /// Sorted known-class ids.
    pub known_classes: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_known(&self, class: i32) -> bool {
        class >= 0 && self.known_classes.binary_search(&(class as u32)).is_ok()
    }

    /// Label visible to training code: `Some` only for records in the labeled split.
    #[inline]
    pub fn train_label(&self, i: usize) -> Option<usize> {
        let r = &self.records[i];
        r.is_labeled.then_some(r.gt_label as usize)
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].is_labeled).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.records[i].is_labeled).collect()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::Invalid(m));
        if self.num_classes_total < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes_total));
        }
        if self.dim == 0 {
            return bad("feature dimension must be positive".into());
        }
        if !self.known_classes.windows(2).all(|w| w[0] < w[1]) {
            return bad("known classes must be sorted and unique".into());
        }
        if let Some(&c) = self
            .known_classes
            .iter()
            .find(|&&c| c as usize >= self.num_classes_total)
        {
            return bad(format!("known class {c} outside 0..{}", self.num_classes_total));
        }
        let mut ids = BTreeSet::new();
        for (i, r) in self.records.iter().enumerate() {
            if !ids.insert(r.id) {
                return bad(format!("duplicate record id {}", r.id));
            }
            if [&r.f_s, &r.f_t, &r.f_st].iter().any(|v| v.len() != self.dim) {
                return bad(format!("record {i} has a feature vector of the wrong length"));
            }
            if [&r.f_s, &r.f_t, &r.f_st]
                .iter()
                .any(|v| v.iter().any(|x| !x.is_finite()))
            {
                return bad(format!("record {i} has non-finite features"));
            }
            if r.gt_label < -1 || r.gt_label >= self.num_classes_total as i32 {
                return bad(format!("record {i} has label {} out of range", r.gt_label));
            }
            if r.is_labeled && !self.is_known(r.gt_label) {
                return bad(format!(
                    "labeled record {i} has label {} outside the known classes",
                    r.gt_label
                ));
            }
        }
        Ok(())
    }
}

/// How classes are divided into known and novel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassSplit {
    /// Even-indexed classes are known.
    #[default]
    EvenOdd,
    /// The first half (rounded up) is known.
    FirstHalf,
}

impl ClassSplit {
    pub fn known_classes(self, total: usize) -> Vec<u32> {
        match self {
            ClassSplit::EvenOdd => (0..total as u32).step_by(2).collect(),
            ClassSplit::FirstHalf => (0..total.div_ceil(2) as u32).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_spatial_protos: usize,
    /// Classes sharing each spatial prototype; class count is the product.
    pub temporal_per_spatial: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub samples_per_class: usize,
    pub labeled_fraction: f64,
    pub split: ClassSplit,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_spatial_protos: 4,
            temporal_per_spatial: 2,
            dim: 16,
            noise_sigma: 0.1,
            samples_per_class: 200,
            labeled_fraction: 0.5,
            split: ClassSplit::EvenOdd,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn num_classes(&self) -> usize {
        self.n_spatial_protos * self.temporal_per_spatial
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: &str| Err(FeatureError::InvalidConfig(m.to_string()));
        if self.num_classes() == 0 {
            return bad("zero classes");
        }
        if self.num_classes() < 2 {
            return bad("need at least 2 classes");
        }
        if self.dim < 1 {
            return bad("dim must be at least 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and nonnegative");
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be positive");
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return bad("labeled_fraction must lie in (0, 1]");
        }
        Ok(())
    }
}

fn unit_normal_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

/// Builds a dataset whose classes pair up on the spatial view: every group of
/// `temporal_per_spatial` consecutive classes shares one spatial prototype and
/// differs only in its temporal prototype.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset, FeatureError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes = cfg.num_classes();
    let spatial: Vec<Vec<f32>> = (0..cfg.n_spatial_protos)
        .map(|_| unit_normal_vector(&mut rng, cfg.dim))
        .collect();
    let temporal: Vec<Vec<f32>> = (0..classes)
        .map(|_| unit_normal_vector(&mut rng, cfg.dim))
        .collect();

    let known = cfg.split.known_classes(classes);
    let n_labeled = (cfg.labeled_fraction * cfg.samples_per_class as f64).ceil() as usize;
    let sigma = cfg.noise_sigma as f32;
    let noise = |rng: &mut ChaCha8Rng| -> f32 {
        let z: f64 = rng.sample(StandardNormal);
        sigma * z as f32
    };

    let mut records = Vec::with_capacity(classes * cfg.samples_per_class);
    for c in 0..classes {
        let s = &spatial[c / cfg.temporal_per_spatial];
        let t = &temporal[c];
        let is_known = known.binary_search(&(c as u32)).is_ok();
        for k in 0..cfg.samples_per_class {
            let mut f_s = Vec::with_capacity(cfg.dim);
            let mut f_t = Vec::with_capacity(cfg.dim);
            let mut f_st = Vec::with_capacity(cfg.dim);
            for d in 0..cfg.dim {
                f_s.push(s[d] + noise(&mut rng));
                f_t.push(t[d] + noise(&mut rng));
                f_st.push((s[d] + t[d]) / 2.0 + noise(&mut rng));
            }
            records.push(FeatureRecord {
                id: records.len() as u64,
                f_s,
                f_t,
                f_st,
                gt_label: c as i32,
                is_labeled: is_known && k < n_labeled,
            });
        }
    }
    Ok(Dataset {
        records,
        dim: cfg.dim,
        num_classes_total: classes,
        known_classes: known,
    })
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let rec_bytes = 16 + 12 * ds.dim;
    let mut out = Vec::with_capacity(26 + 4 * ds.known_classes.len() + rec_bytes * ds.len());
    out.extend_from_slice(&FILE_MAGIC);
    out.extend_from_slice(&FILE_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.dim as u32).to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.num_classes_total as u32).to_le_bytes());
    out.extend_from_slice(&(ds.known_classes.len() as u32).to_le_bytes());
    for c in &ds.known_classes {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for r in &ds.records {
        out.extend_from_slice(&r.id.to_le_bytes());
        out.extend_from_slice(&r.gt_label.to_le_bytes());
        out.push(r.is_labeled as u8);
        out.extend_from_slice(&[0u8; 3]);
        for v in [&r.f_s, &r.f_t, &r.f_st] {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().unwrap())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, FeatureError> {
    let mut rd = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = rd.array().ok_or(FeatureError::TruncatedHeader)?;
    if magic != FILE_MAGIC {
        return Err(FeatureError::BadMagic(magic));
    }
    let hdr = FeatureError::TruncatedHeader;
    let version = u16::from_le_bytes(rd.array().ok_or(hdr)?);
    if version != FILE_VERSION {
        return Err(FeatureError::VersionMismatch(version));
    }
    let head = |rd: &mut Reader| -> Result<[u8; 4], FeatureError> {
        rd.array().ok_or(FeatureError::TruncatedHeader)
    };
    let dim = u32::from_le_bytes(head(&mut rd)?) as usize;
    let count = u64::from_le_bytes(rd.array().ok_or(FeatureError::TruncatedHeader)?);
    let num_classes_total = u32::from_le_bytes(head(&mut rd)?) as usize;
    let n_known = u32::from_le_bytes(head(&mut rd)?) as usize;
    let mut known_classes = Vec::with_capacity(n_known.min(1 << 20));
    for _ in 0..n_known {
        known_classes.push(u32::from_le_bytes(head(&mut rd)?));
    }

    let mut records = Vec::with_capacity((count as usize).min(1 << 20));
    for index in 0..count {
        let trunc = || FeatureError::TruncatedRecord { index };
        let id = u64::from_le_bytes(rd.array().ok_or_else(trunc)?);
        let gt_label = i32::from_le_bytes(rd.array().ok_or_else(trunc)?);
        let flags: [u8; 4] = rd.array().ok_or_else(trunc)?;
        let payload = rd.take(12 * dim).ok_or_else(trunc)?;
        let mut views = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
        let f_s: Vec<f32> = views.by_ref().take(dim).collect();
        let f_t: Vec<f32> = views.by_ref().take(dim).collect();
        let f_st: Vec<f32> = views.collect();
        records.push(FeatureRecord {
            id,
            f_s,
            f_t,
            f_st,
            gt_label,
            is_labeled: flags[0] != 0,
        });
    }
    if rd.pos != bytes.len() {
        return Err(FeatureError::TrailingBytes(bytes.len() - rd.pos));
    }
    let ds = Dataset {
        records,
        dim,
        num_classes_total,
        known_classes,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    ds.validate()?;
    fs::write(path, encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, FeatureError> {
    decode_dataset(&fs::read(path)?)
}

/// Loads a dataset and checks its feature width against what a model expects.
pub fn load_dataset_with_dim(
    path: impl AsRef<Path>,
    expected_dim: usize,
) -> Result<Dataset, FeatureError> {
    let ds = load_dataset(path)?;
    if ds.dim != expected_dim {
        return Err(FeatureError::DimMismatch {
            expected: expected_dim,
            found: ds.dim,
        });
    }
    Ok(ds)
}

/// Shuffles the eligible record indices with `seed` and cuts them into
/// consecutive batches. A trailing batch with fewer than two records is dropped.
pub fn make_batches(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    labeled_only: bool,
) -> Result<Vec<Vec<usize>>, FeatureError> {
    if batch_size < 2 {
        return Err(FeatureError::BatchSize(batch_size));
    }
    let mut idx: Vec<usize> = if labeled_only {
        ds.labeled_indices()
    } else {
        (0..ds.len()).collect()
    };
    if idx.is_empty() {
        return Err(FeatureError::NoEligibleRecords);
    }
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx
        .chunks(batch_size)
        .filter(|b| b.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(sigma: f64) -> SyntheticConfig {
        SyntheticConfig {
            n_spatial_protos: 2,
            temporal_per_spatial: 2,
            dim: 4,
            noise_sigma: sigma,
            samples_per_class: 1,
            labeled_fraction: 1.0,
            split: ClassSplit::EvenOdd,
            seed: 3,
        }
    }

    #[test]
    fn zero_noise_records_sit_on_prototypes() {
        let ds = generate_synthetic(&tiny(0.0)).unwrap();
        assert_eq!(ds.len(), 4);
        for r in &ds.records {
            for d in 0..4 {
                assert_eq!(r.f_st[d], (r.f_s[d] + r.f_t[d]) / 2.0);
            }
        }
        assert_eq!(ds.records[0].f_s, ds.records[1].f_s);
        assert_ne!(ds.records[1].f_s, ds.records[2].f_s);
        assert_ne!(ds.records[0].f_t, ds.records[1].f_t);
    }

    #[test]
    fn acceptance_sized_config_counts() {
        let cfg = SyntheticConfig {
            n_spatial_protos: 4,
            temporal_per_spatial: 2,
            dim: 16,
            noise_sigma: 0.1,
            samples_per_class: 200,
            labeled_fraction: 0.5,
            split: ClassSplit::EvenOdd,
            seed: 1,
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.num_classes_total, 8);
        assert_eq!(ds.len(), 1600);
        assert_eq!(ds.known_classes, vec![0, 2, 4, 6]);
        assert_eq!(ds.labeled_indices().len(), 400);
        assert!(ds
            .records
            .iter()
            .filter(|r| r.gt_label % 2 == 1)
            .all(|r| !r.is_labeled));
    }

    #[test]
    fn labeled_count_rounds_up() {
        let mut cfg = tiny(0.1);
        cfg.samples_per_class = 3;
        cfg.labeled_fraction = 0.1;
        let ds = generate_synthetic(&cfg).unwrap();
        // two known classes, ceil(0.3) = 1 labeled each
        assert_eq!(ds.labeled_indices().len(), 2);
    }

    #[test]
    fn rejects_degenerate_configs() {
        let mut cfg = tiny(0.0);
        cfg.n_spatial_protos = 0;
        assert!(matches!(
            generate_synthetic(&cfg),
            Err(FeatureError::InvalidConfig(_))
        ));
        let mut cfg = tiny(0.0);
        cfg.dim = 0;
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn first_half_split() {
        assert_eq!(ClassSplit::FirstHalf.known_classes(5), vec![0, 1, 2]);
        assert_eq!(ClassSplit::EvenOdd.known_classes(5), vec![0, 2, 4]);
    }

    #[test]
    fn batch_partition_rule() {
        let mut cfg = tiny(0.1);
        cfg.n_spatial_protos = 5;
        cfg.temporal_per_spatial = 2;
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.len(), 10);
        let sizes: Vec<usize> = make_batches(&ds, 4, 9, false)
            .unwrap()
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let five = Dataset {
            records: ds.records[..5].to_vec(),
            ..ds.clone()
        };
        let sizes: Vec<usize> = make_batches(&five, 4, 9, false)
            .unwrap()
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![4]);
        assert!(matches!(
            make_batches(&ds, 1, 0, false),
            Err(FeatureError::BatchSize(1))
        ));
    }

    #[test]
    fn labeled_only_batches_skip_unlabeled() {
        let mut cfg = tiny(0.1);
        cfg.samples_per_class = 10;
        cfg.labeled_fraction = 0.5;
        let ds = generate_synthetic(&cfg).unwrap();
        for b in make_batches(&ds, 3, 1, true).unwrap() {
            assert!(b.iter().all(|&i| ds.records[i].is_labeled));
        }
        let no_labels = Dataset {
            records: ds
                .records
                .iter()
                .cloned()
                .map(|mut r| {
                    r.is_labeled = false;
                    r
                })
                .collect(),
            ..ds
        };
        assert!(matches!(
            make_batches(&no_labels, 2, 0, true),
            Err(FeatureError::NoEligibleRecords)
        ));
    }

    #[test]
    fn train_label_hides_unlabeled_ground_truth() {
        let mut cfg = tiny(0.1);
        cfg.labeled_fraction = 1.0;
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.train_label(0), Some(0));
        assert_eq!(ds.train_label(1), None);
        assert_eq!(ds.records[1].gt_label, 1);
    }
}
