//! Dataset ingestion and checkpoint persistence.
//!
//! IDX files follow the standard big-endian layout (magic, dimension
//! sizes, unsigned-byte payload). Checkpoints use a custom versioned
//! container: an 8-byte magic, a length-prefixed textual header, raw
//! little-endian f32 weight blocks in layer order, and a trailing CRC32
//! over everything after the magic.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoding::EncoderConfig;
use crate::error::{Error, Result};
use crate::neuron::DenseLayerParams;
use crate::topology::{parse_architecture, ConvLayerParams, Layer, LayerSpec, Network, SignalShape};
use crate::training::KernelKind;

/// Which part of a dataset a `Dataset` value holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A labelled set of grayscale images, intensities in `[0, 255]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// First `n` samples (all of them if `n` is zero or exceeds the size).
    pub fn truncated(&self, n: usize) -> Dataset {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        Dataset {
            h: self.h,
            w: self.w,
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                self.images.len(),
                self.labels.len()
            )));
        }
        let px = self.pixels();
        if let Some(bad) = self.images.iter().position(|img| img.len() != px) {
            return Err(Error::Dataset(format!(
                "image {bad} has {} pixels, expected {px}",
                self.images[bad].len()
            )));
        }
        Ok(())
    }
}

/// Raw decoded IDX file: dimension sizes plus the unsigned-byte payload.
#[derive(Clone, Debug)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;

/// Parses an IDX file, validating the magic, dimension sizes, and payload
/// length. Each failure mode is a distinct error carrying the byte offset.
pub fn load_idx(path: &Path) -> Result<IdxTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format_err = |reason: String, offset: u64| Error::IdxFormat {
        path: path.to_path_buf(),
        reason,
        offset,
    };
    if bytes.len() < 4 {
        return Err(format_err(
            format!("file too short for magic ({} bytes)", bytes.len()),
            bytes.len() as u64,
        ));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let ndim = match magic {
        IDX_MAGIC_LABELS => 1,
        IDX_MAGIC_IMAGES => 3,
        other => {
            return Err(format_err(
                format!("bad magic {other:#010x} (expected {IDX_MAGIC_LABELS:#010x} for labels or {IDX_MAGIC_IMAGES:#010x} for images)"),
                0,
            ))
        }
    };
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(format_err(
            format!("truncated header: {} of {header_len} bytes", bytes.len()),
            bytes.len() as u64,
        ));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut expected: usize = 1;
    for d in 0..ndim {
        let off = 4 + 4 * d;
        let size = u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        expected = expected.checked_mul(size).ok_or_else(|| {
            format_err(format!("dimension overflow at dim {d} (size {size})"), off as u64)
        })?;
        dims.push(size);
    }
    let actual = bytes.len() - header_len;
    if actual < expected {
        return Err(format_err(
            format!("truncated payload: {actual} of {expected} bytes"),
            bytes.len() as u64,
        ));
    }
    if actual > expected {
        return Err(format_err(
            format!("payload too long: {actual} bytes, expected {expected}"),
            (header_len + expected) as u64,
        ));
    }
    Ok(IdxTensor {
        dims,
        data: bytes[header_len..].to_vec(),
    })
}

/// Loads an image IDX file as `(count, h, w, pixels)`.
pub fn load_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let t = load_idx(path)?;
    if t.dims.len() != 3 {
        return Err(Error::IdxFormat {
            path: path.to_path_buf(),
            reason: format!("expected 3 dimensions for images, got {}", t.dims.len()),
            offset: 0,
        });
    }
    Ok((t.dims[0], t.dims[1], t.dims[2], t.data))
}

/// Loads a label IDX file.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let t = load_idx(path)?;
    if t.dims.len() != 1 {
        return Err(Error::IdxFormat {
            path: path.to_path_buf(),
            reason: format!("expected 1 dimension for labels, got {}", t.dims.len()),
            offset: 0,
        });
    }
    Ok(t.data)
}

fn idx_split(dir: &Path, images_name: &str, labels_name: &str, split: Split) -> Result<Dataset> {
    let (n, h, w, pixels) = load_idx_images(&dir.join(images_name))?;
    let labels = load_idx_labels(&dir.join(labels_name))?;
    if labels.len() != n {
        return Err(Error::Dataset(format!(
            "{images_name}: {n} images but {labels_name} has {} labels",
            labels.len()
        )));
    }
    let px = h * w;
    let images = pixels.chunks_exact(px).map(|c| c.to_vec()).collect();
    let ds = Dataset {
        h,
        w,
        images,
        labels,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

/// Loads the conventional four-file IDX layout
/// (`train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
/// `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`) from a directory.
pub fn load_idx_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = idx_split(
        dir,
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        Split::Train,
    )?;
    let test = idx_split(
        dir,
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
        Split::Test,
    )?;
    Ok((train, test))
}

/// Grayscale conversion with the usual luma weights.
fn to_luma(img: &image::DynamicImage) -> Vec<u8> {
    let rgb = img.to_rgb8();
    rgb.pixels()
        .map(|p| {
            let y = 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// Loads a two-or-more-class image directory (one subdirectory per class,
/// class order alphabetical), converting every image to grayscale
/// (luma 0.299/0.587/0.114), bilinearly resizing to `target_h x target_w`,
/// and splitting each class into `n_train`/`n_val`/rest with a seeded
/// shuffle. Unreadable images are skipped with a warning; an empty class is
/// fatal.
pub fn load_caltech(
    dir: &Path,
    target_h: usize,
    target_w: usize,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no class subdirectories",
            dir.display()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits: [Vec<(Vec<u8>, u8)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (label, class_dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = fs::read_dir(class_dir)
            .map_err(|e| Error::io(class_dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut images = Vec::new();
        for file in files {
            match image::open(&file) {
                Ok(img) => {
                    let gray = to_luma(&img);
                    let gray_img = image::GrayImage::from_raw(img.width(), img.height(), gray)
                        .expect("luma buffer matches dimensions");
                    let resized = image::imageops::resize(
                        &gray_img,
                        target_w as u32,
                        target_h as u32,
                        image::imageops::FilterType::Triangle,
                    );
                    images.push(resized.into_raw());
                }
                Err(e) => log::warn!("skipping unreadable image {}: {e}", file.display()),
            }
        }
        if images.is_empty() {
            return Err(Error::Dataset(format!(
                "class directory {} contains no readable images",
                class_dir.display()
            )));
        }
        if images.len() <= n_train + n_val {
            return Err(Error::Dataset(format!(
                "class {} has {} images, need more than {} for a {}+{}+rest split",
                class_dir.display(),
                images.len(),
                n_train + n_val,
                n_train,
                n_val
            )));
        }
        images.shuffle(&mut rng);
        for (i, img) in images.into_iter().enumerate() {
            let bucket = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            splits[bucket].push((img, label as u8));
        }
    }

    let mut out = Vec::with_capacity(3);
    for (bucket, split) in splits.into_iter().zip([Split::Train, Split::Val, Split::Test]) {
        let mut bucket = bucket;
        bucket.shuffle(&mut rng);
        let (images, labels) = bucket.into_iter().unzip();
        let ds = Dataset {
            h: target_h,
            w: target_w,
            images,
            labels,
            split,
        };
        ds.validate()?;
        out.push(ds);
    }
    let test = out.pop().unwrap();
    let val = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok((train, val, test))
}

// CRC32 (IEEE, reflected polynomial 0xEDB88320)
const fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

const CRC32_TABLE: [u32; 256] = crc32_table();

pub(crate) fn crc32(data: &[u8]) -> u32 {
    let mut c = 0xFFFF_FFFFu32;
    for &b in data {
        c = CRC32_TABLE[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

const CKPT_MAGIC: &[u8; 8] = b"SNNTCKP1";

/// A trained model in portable form: architecture string, kernel choice,
/// window and thresholds, encoder settings, step counter, and the weight
/// tensors in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub kernel: KernelKind,
    pub tau: f64,
    pub t_max: f64,
    pub thresholds: Vec<f32>,
    pub encoder: EncoderConfig,
    pub step: u64,
    pub weights: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_network(
        net: &Network<f32>,
        encoder: EncoderConfig,
        kernel: KernelKind,
        tau: f64,
        step: u64,
    ) -> Self {
        Checkpoint {
            arch: net.arch().text().to_string(),
            kernel,
            tau,
            t_max: net.t_max() as f64,
            thresholds: net.thresholds(),
            encoder,
            step,
            weights: net.trainable().iter().map(|w| w.to_vec()).collect(),
        }
    }

    /// Rebuilds the network, validating every tensor against the
    /// architecture's shape chain.
    pub fn build_network(&self) -> Result<Network<f32>> {
        let arch = parse_architecture(&self.arch)?;
        let lens = arch.trainable_lens();
        if lens.len() != self.weights.len() || lens.len() != self.thresholds.len() {
            return Err(Error::Dataset(format!(
                "checkpoint has {} weight tensors for {} trainable layers",
                self.weights.len(),
                lens.len()
            )));
        }
        let mut layers = Vec::new();
        let mut t_idx = 0;
        for (idx, spec) in arch.layers().iter().enumerate() {
            match *spec {
                LayerSpec::Dense { units } => {
                    let n_pre = arch.shape_before(idx).units();
                    let p = DenseLayerParams::new(
                        n_pre,
                        units,
                        self.thresholds[t_idx],
                        self.weights[t_idx].clone(),
                    )?;
                    layers.push(Layer::Dense(p));
                    t_idx += 1;
                }
                LayerSpec::Conv { kernels, size } => {
                    let c_in = match arch.shape_before(idx) {
                        SignalShape::Grid { c, .. } => c,
                        SignalShape::Flat(_) => unreachable!("validated at parse"),
                    };
                    let p = ConvLayerParams::new(
                        kernels,
                        c_in,
                        size,
                        self.thresholds[t_idx],
                        self.weights[t_idx].clone(),
                    )?;
                    layers.push(Layer::Conv(p));
                    t_idx += 1;
                }
                LayerSpec::Pool { size } => layers.push(Layer::Pool { size }),
            }
        }
        Network::from_layers(arch, layers, self.t_max as f32)
    }

    fn header_text(&self) -> String {
        let thresholds: Vec<String> = self.thresholds.iter().map(|t| format!("{t}")).collect();
        let mut s = String::new();
        s.push_str(&format!("arch={}\n", self.arch));
        s.push_str(&format!(
            "kernel={}\n",
            match self.kernel {
                KernelKind::Rel => "rel",
                KernelKind::Alpha => "alpha",
            }
        ));
        s.push_str(&format!("tau={}\n", self.tau));
        s.push_str(&format!("t_max={}\n", self.t_max));
        s.push_str(&format!("thresholds={}\n", thresholds.join(",")));
        s.push_str(&format!("encoder.t_min={}\n", self.encoder.t_min));
        s.push_str(&format!("encoder.t_max_input={}\n", self.encoder.t_max_input));
        s.push_str(&format!("encoder.intensity_max={}\n", self.encoder.intensity_max));
        s.push_str(&format!("step={}\n", self.step));
        s.push_str(&format!("layers={}\n", self.weights.len()));
        for (i, w) in self.weights.iter().enumerate() {
            s.push_str(&format!("layer{i}.len={}\n", w.len()));
        }
        s
    }
}

/// Serializes a checkpoint: magic, u32-LE length-prefixed textual header,
/// raw little-endian f32 weight blocks in layer order, trailing CRC32 over
/// everything after the magic.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = ckpt.header_text().into_bytes();
    let mut payload = Vec::with_capacity(
        4 + header.len() + ckpt.weights.iter().map(|w| w.len() * 4).sum::<usize>(),
    );
    payload.extend_from_slice(&(header.len() as u32).to_le_bytes());
    payload.extend_from_slice(&header);
    for w in &ckpt.weights {
        for &x in w {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32(&payload);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(CKPT_MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_all(&payload).map_err(|e| Error::io(path, e))?;
    file.write_all(&crc.to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn header_field<'a>(fields: &'a [(String, String)], key: &str, path: &Path) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("header missing `{key}`"),
        })
}

fn parse_header_num<T: std::str::FromStr>(value: &str, key: &str, path: &Path) -> Result<T> {
    value.parse().map_err(|_| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("header field `{key}` has invalid value `{value}`"),
    })
}

/// Reads a checkpoint back, validating magic, version, structure, weight
/// shapes against the architecture string, and the trailing CRC32.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 {
        return Err(fail(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[0..7] != &CKPT_MAGIC[0..7] {
        return Err(fail("bad magic (not a checkpoint file)".into()));
    }
    if bytes[7] != CKPT_MAGIC[7] {
        return Err(fail(format!(
            "unsupported version `{}` (expected `{}`)",
            bytes[7] as char, CKPT_MAGIC[7] as char
        )));
    }
    let payload = &bytes[8..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(payload);
    if stored_crc != computed {
        return Err(fail(format!(
            "checksum mismatch: stored {stored_crc:#010x}, computed {computed:#010x}"
        )));
    }
    let header_len = u32::from_le_bytes(payload[0..4].try_into().unwrap()) as usize;
    if payload.len() < 4 + header_len {
        return Err(fail("truncated header".into()));
    }
    let header = std::str::from_utf8(&payload[4..4 + header_len])
        .map_err(|_| fail("header is not valid UTF-8".into()))?;
    let fields: Vec<(String, String)> = header
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap_or((l, ""));
            (k.to_string(), v.to_string())
        })
        .collect();

    let arch = header_field(&fields, "arch", path)?.to_string();
    let kernel = match header_field(&fields, "kernel", path)? {
        "rel" => KernelKind::Rel,
        "alpha" => KernelKind::Alpha,
        other => return Err(fail(format!("unknown kernel `{other}`"))),
    };
    let tau: f64 = parse_header_num(header_field(&fields, "tau", path)?, "tau", path)?;
    let t_max: f64 = parse_header_num(header_field(&fields, "t_max", path)?, "t_max", path)?;
    let thresholds: Vec<f32> = header_field(&fields, "thresholds", path)?
        .split(',')
        .map(|s| parse_header_num(s, "thresholds", path))
        .collect::<Result<_>>()?;
    let encoder = EncoderConfig {
        t_min: parse_header_num(
            header_field(&fields, "encoder.t_min", path)?,
            "encoder.t_min",
            path,
        )?,
        t_max_input: parse_header_num(
            header_field(&fields, "encoder.t_max_input", path)?,
            "encoder.t_max_input",
            path,
        )?,
        intensity_max: parse_header_num(
            header_field(&fields, "encoder.intensity_max", path)?,
            "encoder.intensity_max",
            path,
        )?,
    };
    let step: u64 = parse_header_num(header_field(&fields, "step", path)?, "step", path)?;
    let n_layers: usize =
        parse_header_num(header_field(&fields, "layers", path)?, "layers", path)?;

    // validate declared tensor lengths against the architecture string
    let spec = parse_architecture(&arch)?;
    let expected_lens = spec.trainable_lens();
    if expected_lens.len() != n_layers {
        return Err(fail(format!(
            "architecture `{arch}` has {} trainable layers, header declares {n_layers}",
            expected_lens.len()
        )));
    }
    let mut declared = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let key = format!("layer{i}.len");
        let len: usize = parse_header_num(header_field(&fields, &key, path)?, &key, path)?;
        if len != expected_lens[i] {
            return Err(fail(format!(
                "trainable layer {i}: header declares {len} weights, architecture `{arch}` requires {}",
                expected_lens[i]
            )));
        }
        declared.push(len);
    }
    if thresholds.len() != n_layers {
        return Err(fail(format!(
            "{} thresholds for {n_layers} trainable layers",
            thresholds.len()
        )));
    }

    let total_weight_bytes: usize = declared.iter().map(|l| l * 4).sum();
    let body = &payload[4 + header_len..];
    if body.len() != total_weight_bytes {
        return Err(fail(format!(
            "weight payload is {} bytes, expected {total_weight_bytes}",
            body.len()
        )));
    }
    let mut weights = Vec::with_capacity(n_layers);
    let mut off = 0;
    for len in declared {
        let mut tensor = Vec::with_capacity(len);
        for k in 0..len {
            let start = off + k * 4;
            tensor.push(f32::from_le_bytes(body[start..start + 4].try_into().unwrap()));
        }
        off += len * 4;
        weights.push(tensor);
    }

    Ok(Checkpoint {
        arch,
        kernel,
        tau,
        t_max,
        thresholds,
        encoder,
        step,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn repo_data(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../data")
            .join(name)
    }

    #[test]
    fn crc32_check_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn bundled_subset_loads() {
        let (train, test) = load_idx_dir(&repo_data("mnist-10k")).unwrap();
        assert_eq!(train.h, 28);
        assert_eq!(train.w, 28);
        assert_eq!(train.len() + test.len(), 10000);
        assert_eq!(train.n_classes(), 10);
        assert!(train.labels.iter().all(|&l| l < 10));
    }

    #[test]
    fn idx_bad_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels");
        // images magic on a labels-shaped file: rejected as images with
        // wrong dimensionality by the typed loader
        let mut bytes = 0x0000_0803u32.to_be_bytes().to_vec();
        bytes.extend(10u32.to_be_bytes());
        bytes.extend([0u8; 10]);
        fs::write(&path, &bytes).unwrap();
        let err = load_idx_labels(&path).unwrap_err();
        assert!(err.to_string().contains("dimension"), "{err}");

        // unknown magic
        let path2 = dir.path().join("junk");
        fs::write(&path2, 0xDEADBEEFu32.to_be_bytes()).unwrap();
        let err = load_idx(&path2).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn idx_truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc");
        let mut bytes = IDX_MAGIC_LABELS.to_be_bytes().to_vec();
        bytes.extend(100u32.to_be_bytes());
        bytes.extend([7u8; 40]); // 60 bytes short
        fs::write(&path, &bytes).unwrap();
        let err = load_idx(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated payload"), "{msg}");
        assert!(msg.contains("40 of 100"), "{msg}");
    }

    fn sample_checkpoint() -> Checkpoint {
        Checkpoint {
            arch: "4-3-2".into(),
            kernel: KernelKind::Rel,
            tau: 1.0,
            t_max: 4.0,
            thresholds: vec![1.0, 1.0],
            encoder: EncoderConfig::default(),
            step: 77,
            weights: vec![
                (0..12).map(|i| i as f32 * 0.125 - 0.5).collect(),
                (0..6).map(|i| (i as f32).sin()).collect(),
            ],
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt, loaded);
        for (a, b) in ckpt.weights.iter().flatten().zip(loaded.weights.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // and the rebuilt network matches
        let net = loaded.build_network().unwrap();
        assert_eq!(net.trainable()[0], &ckpt.weights[0][..]);
    }

    #[test]
    fn checkpoint_corruption_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn checkpoint_arch_mismatch_names_layer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ckpt = sample_checkpoint();
        ckpt.arch = "4-5-2".into(); // layer 0 should be 20 weights, not 12
        save_checkpoint(&ckpt, &path).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("layer 0"), "{msg}");
    }

    #[test]
    fn checkpoint_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[7] = b'2';
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn caltech_style_directory_loads_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["faces", "motorbikes"] {
            let cdir = dir.path().join(class);
            fs::create_dir(&cdir).unwrap();
            for i in 0..12 {
                let shade = if class == "faces" { 40 } else { 200 };
                let img = image::RgbImage::from_pixel(
                    6 + i as u32 % 3,
                    5,
                    image::Rgb([shade, shade / 2, 255 - shade]),
                );
                img.save(cdir.join(format!("img_{i:03}.png"))).unwrap();
            }
        }
        // junk file that must be skipped with a warning
        fs::write(dir.path().join("faces").join("notes.txt"), b"not an image").unwrap();

        let (train, val, test) = load_caltech(dir.path(), 16, 25, 8, 2, 9).unwrap();
        assert_eq!(train.len(), 16); // 8 per class
        assert_eq!(val.len(), 4);
        assert_eq!(test.len(), 4);
        assert_eq!(train.h, 16);
        assert_eq!(train.w, 25);
        assert_eq!(train.pixels(), 400);
        assert_eq!(train.n_classes(), 2);

        // same seed, same split
        let (train2, _, _) = load_caltech(dir.path(), 16, 25, 8, 2, 9).unwrap();
        assert_eq!(train.images, train2.images);
        assert_eq!(train.labels, train2.labels);

        // too few images for the split is fatal
        assert!(load_caltech(dir.path(), 16, 25, 11, 1, 9).is_err());
    }

    #[test]
    fn white_image_encodes_to_earliest_spikes() {
        let dir = tempfile::tempdir().unwrap();
        let cdir = dir.path().join("white");
        let cdir2 = dir.path().join("black");
        fs::create_dir(&cdir).unwrap();
        fs::create_dir(&cdir2).unwrap();
        for i in 0..3 {
            image::RgbImage::from_pixel(8, 8, image::Rgb([255, 255, 255]))
                .save(cdir.join(format!("w{i}.png")))
                .unwrap();
            image::RgbImage::from_pixel(8, 8, image::Rgb([0, 0, 0]))
                .save(cdir2.join(format!("b{i}.png")))
                .unwrap();
        }
        let (train, _, _) = load_caltech(dir.path(), 8, 8, 1, 1, 3).unwrap();
        let white = train
            .images
            .iter()
            .zip(&train.labels)
            .find(|(_, &l)| l == 1)
            .unwrap()
            .0;
        assert!(white.iter().all(|&p| p == 255));
        let enc = EncoderConfig::default();
        let pattern = enc.encode_bytes::<f32>(white, 4.0).unwrap();
        assert!(pattern.times().iter().all(|&t| t == 0.0));
    }
}
