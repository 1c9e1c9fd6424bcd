//! Datasets (IDX files and synthetic blobs) and evaluation-time corruptions.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, DenseVector, SeededRng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images with pixels in `[0, 1]`, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: DenseMatrix,
    pub labels: Vec<usize>,
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        images: DenseMatrix,
        labels: Vec<usize>,
        width: usize,
        height: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::shape("Dataset", images.rows(), labels.len()));
        }
        if images.cols() != width * height {
            return Err(Error::shape("Dataset pixels", width * height, images.cols()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Config(format!("label {bad} >= {num_classes} classes")));
        }
        if let Some(bad) = images.as_slice().iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("pixel {bad} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            width,
            height,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Rows `idx` gathered into a batch.
    pub fn batch(&self, idx: &[usize]) -> (DenseMatrix, Vec<usize>) {
        let dim = self.dim();
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        (
            DenseMatrix::from_vec(idx.len(), dim, data).expect("batch shape"),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The first `n` samples (or all of them).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx);
        Dataset {
            images,
            labels,
            width: self.width,
            height: self.height,
            num_classes: self.num_classes,
        }
    }
}

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::ShortRead(format!("{what} header")))?;
    Ok(u32::from_be_bytes(buf))
}

fn read_payload(r: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(len);
    r.take(len as u64).read_to_end(&mut data)?;
    if data.len() != len {
        return Err(Error::ShortRead(format!(
            "{what}: expected {len} bytes, got {}",
            data.len()
        )));
    }
    Ok(data)
}

/// Parses an IDX image/label pair (uncompressed). Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let open = |p: &Path| -> Result<BufReader<File>> {
        File::open(p)
            .map(BufReader::new)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))
    };
    let mut img = open(images_path)?;
    let mut lab = open(labels_path)?;
    parse_idx(&mut img, &mut lab, &images_path.display().to_string())
}

/// [`load_idx`] over arbitrary readers.
pub fn parse_idx(images: &mut impl Read, labels: &mut impl Read, name: &str) -> Result<Dataset> {
    let magic = read_u32_be(images, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::NotIdx(format!("{name}: image magic {magic:#010x}")));
    }
    let count = read_u32_be(images, "image")? as usize;
    let rows = read_u32_be(images, "image")? as usize;
    let cols = read_u32_be(images, "image")? as usize;

    let lmagic = read_u32_be(labels, "label")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::NotIdx(format!("{name}: label magic {lmagic:#010x}")));
    }
    let lcount = read_u32_be(labels, "label")? as usize;
    if lcount != count {
        return Err(Error::CorruptPair(format!(
            "{count} images but {lcount} labels"
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::CorruptPair(format!("image size {rows}x{cols}")));
    }

    let pixels = read_payload(images, count * rows * cols, "image payload")?;
    let raw_labels = read_payload(labels, count, "label payload")?;
    let num_classes = raw_labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(10);
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let images = DenseMatrix::from_vec(count, rows * cols, data)?;
    Dataset::new(
        images,
        raw_labels.into_iter().map(usize::from).collect(),
        cols,
        rows,
        num_classes,
    )
}

/// Gaussian blob parameters for [`synthetic_blobs`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub low: f64,
    pub high: f64,
    pub sigma: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            low: 0.2,
            high: 0.8,
            sigma: 0.05,
        }
    }
}

/// Class prototype: `high` on the class's own contiguous block of
/// dimensions, `low` elsewhere.
pub fn blob_prototype(class: usize, classes: usize, dim: usize, spec: &BlobSpec) -> DenseVector {
    (0..dim)
        .map(|d| if d * classes / dim == class { spec.high } else { spec.low })
        .collect::<Vec<_>>()
        .into()
}

/// `n_per_class` samples of each class around its prototype, clamped to
/// `[0, 1]`, classes interleaved.
pub fn synthetic_blobs(
    rng: &mut SeededRng,
    n_per_class: usize,
    classes: usize,
    dim: usize,
    spec: &BlobSpec,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("blobs need >= 2 classes, got {classes}")));
    }
    if dim < classes {
        return Err(Error::Config(format!(
            "blobs need dim >= classes, got dim {dim} for {classes} classes"
        )));
    }
    let protos: Vec<DenseVector> = (0..classes)
        .map(|c| blob_prototype(c, classes, dim, spec))
        .collect();
    let mut data = Vec::with_capacity(n_per_class * classes * dim);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for _ in 0..n_per_class {
        for (c, proto) in protos.iter().enumerate() {
            data.extend(proto.iter().map(|&m| rng.normal(m, spec.sigma).clamp(0.0, 1.0)));
            labels.push(c);
        }
    }
    let side = (dim as f64).sqrt().round() as usize;
    let (width, height) = if side * side == dim { (side, side) } else { (dim, 1) };
    let images = DenseMatrix::from_vec(labels.len(), dim, data)?;
    Dataset::new(images, labels, width, height, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PerturbKind {
    Gaussian,
    SaltPepper,
    CenterCrop,
}

impl PerturbKind {
    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Gaussian => "gaussian",
            PerturbKind::SaltPepper => "salt-pepper",
            PerturbKind::CenterCrop => "center-crop",
        }
    }
}

impl std::str::FromStr for PerturbKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(PerturbKind::Gaussian),
            "salt-pepper" | "salt_pepper" | "sp" => Ok(PerturbKind::SaltPepper),
            "center-crop" | "crop" => Ok(PerturbKind::CenterCrop),
            other => Err(Error::Config(format!(
                "unknown perturbation kind {other:?} (expected gaussian, salt-pepper or center-crop)"
            ))),
        }
    }
}

/// A corruption and its magnitude: `σ` for Gaussian noise, corrupted-pixel
/// fraction for salt-and-pepper, retained square side for center crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub kind: PerturbKind,
    pub level: f64,
}

impl PerturbationSpec {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let ok = match self.kind {
            PerturbKind::Gaussian => self.level >= 0.0,
            PerturbKind::SaltPepper => (0.0..=1.0).contains(&self.level),
            PerturbKind::CenterCrop => {
                self.level.fract() == 0.0
                    && self.level >= 1.0
                    && self.level as usize <= width.min(height)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{} level {} invalid for a {width}x{height} image",
                self.kind.name(),
                self.level
            )))
        }
    }
}

/// Applies `spec` to one `width × height` image.
pub fn perturb(
    x: &[f64],
    width: usize,
    height: usize,
    spec: &PerturbationSpec,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if x.len() != width * height {
        return Err(Error::shape("perturb", width * height, x.len()));
    }
    spec.validate(width, height)?;
    let mut out = x.to_vec();
    match spec.kind {
        PerturbKind::Gaussian => {
            if spec.level > 0.0 {
                for p in &mut out {
                    *p = (*p + rng.normal(0.0, spec.level)).clamp(0.0, 1.0);
                }
            }
        }
        PerturbKind::SaltPepper => {
            let n = (spec.level * out.len() as f64).floor() as usize;
            for i in rng.sample_indices(out.len(), n) {
                out[i] = if rng.coin() { 1.0 } else { 0.0 };
            }
        }
        PerturbKind::CenterCrop => {
            let side = spec.level as usize;
            let (x0, y0) = ((width - side) / 2, (height - side) / 2);
            for y in 0..height {
                for xx in 0..width {
                    let inside = (x0..x0 + side).contains(&xx) && (y0..y0 + side).contains(&y);
                    if !inside {
                        out[y * width + xx] = 0.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Perturbs every sample with a per-sample stream derived from `seed`.
pub fn perturb_dataset(data: &Dataset, spec: &PerturbationSpec, seed: u64) -> Result<Dataset> {
    let mut images = DenseMatrix::zeros(data.len(), data.dim());
    for i in 0..data.len() {
        let mut rng = SeededRng::derive(seed, i as u64);
        let p = perturb(data.image(i), data.width, data.height, spec, &mut rng)?;
        images.row_mut(i).copy_from_slice(&p);
    }
    Ok(Dataset {
        images,
        labels: data.labels.clone(),
        width: data.width,
        height: data.height,
        num_classes: data.num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn idx_images(magic: u32, count: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for h in [magic, count, rows, cols] {
            v.extend_from_slice(&h.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    fn idx_labels(magic: u32, count: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&magic.to_be_bytes());
        v.extend_from_slice(&count.to_be_bytes());
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn idx_parses_and_scales() {
        let img = idx_images(0x803, 2, 2, 2, &[0, 255, 51, 0, 255, 255, 0, 0]);
        let lab = idx_labels(0x801, 2, &[3, 7]);
        let d = parse_idx(&mut img.as_slice(), &mut lab.as_slice(), "t").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![3, 7]);
        assert_eq!(d.image(0), &[0.0, 1.0, 0.2, 0.0]);
        assert_eq!((d.width, d.height, d.num_classes), (2, 2, 10));
    }

    #[test]
    fn idx_rejects_wrong_magic() {
        let img = idx_images(0x801, 1, 1, 1, &[0]);
        let lab = idx_labels(0x801, 1, &[0]);
        let e = parse_idx(&mut img.as_slice(), &mut lab.as_slice(), "t").unwrap_err();
        assert!(matches!(e, Error::NotIdx(_)));
        assert!(e.to_string().contains("not an IDX file"));

        let img = idx_images(0x803, 1, 1, 1, &[0]);
        let lab = idx_labels(0x803, 1, &[0]);
        assert!(matches!(
            parse_idx(&mut img.as_slice(), &mut lab.as_slice(), "t"),
            Err(Error::NotIdx(_))
        ));
    }

    #[test]
    fn idx_rejects_count_mismatch() {
        let img = idx_images(0x803, 2, 1, 1, &[0, 0]);
        let lab = idx_labels(0x801, 3, &[0, 0, 0]);
        let e = parse_idx(&mut img.as_slice(), &mut lab.as_slice(), "t").unwrap_err();
        assert!(matches!(e, Error::CorruptPair(_)));
        assert!(e.to_string().contains("corrupt pair"));
    }

    #[test]
    fn idx_rejects_truncated_payload() {
        let img = idx_images(0x803, 2, 2, 2, &[0, 1, 2]);
        let lab = idx_labels(0x801, 2, &[0, 1]);
        let e = parse_idx(&mut img.as_slice(), &mut lab.as_slice(), "t").unwrap_err();
        assert!(matches!(e, Error::ShortRead(_)));
        assert!(e.to_string().contains("short read"));

        let img = idx_images(0x803, 1, 1, 1, &[9]);
        let lab = idx_labels(0x801, 1, &[]);
        assert!(matches!(
            parse_idx(&mut img.as_slice(), &mut lab.as_slice(), "t"),
            Err(Error::ShortRead(_))
        ));
        let e = parse_idx(&mut [0u8, 0].as_slice(), &mut lab.as_slice(), "t").unwrap_err();
        assert!(matches!(e, Error::ShortRead(_)));
    }

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let spec = BlobSpec::default();
        let a = synthetic_blobs(&mut SeededRng::new(1), 50, 3, 9, &spec).unwrap();
        let b = synthetic_blobs(&mut SeededRng::new(1), 50, 3, 9, &spec).unwrap();
        assert_eq!(a, b);
        for c in 0..3 {
            assert_eq!(a.labels.iter().filter(|&&y| y == c).count(), 50);
        }
        assert_eq!((a.width, a.height), (3, 3));
        assert!(synthetic_blobs(&mut SeededRng::new(1), 5, 1, 4, &spec).is_err());
    }

    #[test]
    fn two_class_blobs_are_linearly_separable() {
        // Prototypes differ by 0.6 on each of 4 dims; the midpoint hyperplane
        // sits 0.6 away (12σ along the unit normal), so P(misclassify) ≈ 1e-33.
        let spec = BlobSpec::default();
        let d = synthetic_blobs(&mut SeededRng::new(77), 2000, 2, 4, &spec).unwrap();
        let p0 = blob_prototype(0, 2, 4, &spec);
        let p1 = blob_prototype(1, 2, 4, &spec);
        for i in 0..d.len() {
            let score: f64 = d
                .image(i)
                .iter()
                .zip(p0.iter().zip(p1.iter()))
                .map(|(x, (a, b))| (b - a) * (x - (a + b) / 2.0))
                .sum();
            assert_eq!(score > 0.0, d.labels[i] == 1);
        }
    }

    #[test]
    fn identity_perturbations() {
        let mut rng = SeededRng::new(3);
        let x: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let g = PerturbationSpec {
            kind: PerturbKind::Gaussian,
            level: 0.0,
        };
        assert_eq!(perturb(&x, 4, 4, &g, &mut rng).unwrap(), x);
        let c = PerturbationSpec {
            kind: PerturbKind::CenterCrop,
            level: 4.0,
        };
        assert_eq!(perturb(&x, 4, 4, &c, &mut rng).unwrap(), x);
    }

    #[test]
    fn full_salt_pepper_is_binary() {
        let x = vec![0.5; 28 * 28];
        let sp = PerturbationSpec {
            kind: PerturbKind::SaltPepper,
            level: 1.0,
        };
        let out = perturb(&x, 28, 28, &sp, &mut SeededRng::new(1)).unwrap();
        assert!(out.iter().all(|&p| p == 0.0 || p == 1.0));
    }

    #[test]
    fn center_crop_zeroes_border() {
        let x = vec![1.0; 36];
        let c = PerturbationSpec {
            kind: PerturbKind::CenterCrop,
            level: 2.0,
        };
        let out = perturb(&x, 6, 6, &c, &mut SeededRng::new(1)).unwrap();
        assert_eq!(out.iter().filter(|&&p| p == 1.0).count(), 4);
        for (y, xx) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
            assert_eq!(out[y * 6 + xx], 1.0);
        }
    }

    #[test]
    fn oversized_crop_is_an_error() {
        let c = PerturbationSpec {
            kind: PerturbKind::CenterCrop,
            level: 29.0,
        };
        assert!(perturb(&[0.0; 784], 28, 28, &c, &mut SeededRng::new(1)).is_err());
        assert!("blur".parse::<PerturbKind>().is_err());
    }

    proptest! {
        #[test]
        fn perturbed_pixels_stay_in_unit_interval(
            x in prop::collection::vec(0.0f64..=1.0, 49),
            kind in 0usize..3, level in 0.0f64..1.0, seed in any::<u64>(),
        ) {
            let spec = match kind {
                0 => PerturbationSpec { kind: PerturbKind::Gaussian, level: level * 2.0 },
                1 => PerturbationSpec { kind: PerturbKind::SaltPepper, level },
                _ => PerturbationSpec { kind: PerturbKind::CenterCrop, level: (1.0 + (level * 6.0).floor()).min(7.0) },
            };
            let out = perturb(&x, 7, 7, &spec, &mut SeededRng::new(seed)).unwrap();
            prop_assert!(out.iter().all(|p| (0.0..=1.0).contains(p)));
            let again = perturb(&x, 7, 7, &spec, &mut SeededRng::new(seed)).unwrap();
            prop_assert_eq!(out, again);
        }

        #[test]
        fn salt_pepper_corrupts_exact_count(level in 0.0f64..=1.0, seed in any::<u64>()) {
            // 0.5 is never produced by salt-and-pepper, so changed pixels are countable.
            let x = vec![0.5; 100];
            let spec = PerturbationSpec { kind: PerturbKind::SaltPepper, level };
            let out = perturb(&x, 10, 10, &spec, &mut SeededRng::new(seed)).unwrap();
            let changed = out.iter().filter(|&&p| p != 0.5).count();
            prop_assert_eq!(changed, (level * 100.0).floor() as usize);
        }
    }
}
