//! Labelled image bundles, the `ATD1` binary format, deterministic synthetic
//! generators and batch iteration.
//!
//! `ATD1` layout, all fields little-endian:
//!
//! ```text
//! offset 0   b"ATD1"
//! offset 4   u32 N, u32 C, u32 H, u32 W, u32 class_count
//! offset 24  f32 pixels[N*C*H*W]   (N, C, H, W order)
//!            u32 labels[N]
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

const MAGIC: &[u8; 4] = b"ATD1";
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Unsplit,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub images: Tensor4<f32>,
    pub labels: Vec<u32>,
    pub class_count: usize,
    pub split: Split,
}

impl DatasetBundle {
    pub fn new(
        images: Tensor4<f32>,
        labels: Vec<u32>,
        class_count: usize,
        split: Split,
    ) -> Result<Self> {
        if labels.len() != images.shape().n {
            return Err(Error::data(format!(
                "{} labels for {} images",
                labels.len(),
                images.shape().n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(Error::data(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(DatasetBundle {
            images,
            labels,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s.c, s.h, s.w)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Gathers the given samples, in order, into a new bundle.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Self> {
        let s = self.images.shape();
        let per = s.c * s.plane();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::data(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..][..per]);
            labels.push(self.labels[i]);
        }
        let images = Tensor4::from_vec(Shape::new(indices.len(), s.c, s.h, s.w), data)?;
        DatasetBundle::new(images, labels, self.class_count, split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Class is the grid cell holding a bright square, drawn in every channel.
    Spatial,
    /// Class is the channel whose level is raised everywhere.
    Channel,
    /// Class is a grid cell, drawn only in channel `class % C`.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub class_count: usize,
    pub noise_sigma: f32,
    /// Height of the class signal above the background level.
    pub amplitude: f32,
    pub seed: u64,
}

pub const BACKGROUND: f32 = 0.3;

impl SynthSpec {
    pub fn new(
        kind: SynthKind,
        n: usize,
        (c, h, w): (usize, usize, usize),
        class_count: usize,
    ) -> Self {
        SynthSpec {
            kind,
            n,
            c,
            h,
            w,
            class_count,
            noise_sigma: 0.0,
            amplitude: 0.4,
            seed: 0,
        }
    }

    pub fn noise(mut self, sigma: f32) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn amplitude(mut self, a: f32) -> Self {
        self.amplitude = a;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Side of the square class grid used by spatial and mixed data.
    pub fn grid_side(&self) -> usize {
        let mut g = 1;
        while g * g < self.class_count {
            g += 1;
        }
        g
    }

    fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::config("synthetic data needs at least 2 classes"));
        }
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::config("synthetic dimensions must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise sigma must be finite and non-negative"));
        }
        if !self.amplitude.is_finite() {
            return Err(Error::config("amplitude must be finite"));
        }
        match self.kind {
            SynthKind::Channel if self.class_count > self.c => Err(Error::config(format!(
                "channel-coded data with {} classes needs at least as many channels, got {}",
                self.class_count, self.c
            ))),
            SynthKind::Spatial | SynthKind::Mixed
                if self.h < self.grid_side() || self.w < self.grid_side() =>
            {
                Err(Error::config(format!(
                    "{}x{} image cannot hold a {g}x{g} class grid",
                    self.h,
                    self.w,
                    g = self.grid_side()
                )))
            }
            _ => Ok(()),
        }
    }

    /// Rows and columns `[y0, y1) x [x0, x1)` of the square for class `k`.
    pub fn blob_rect(&self, k: usize) -> (usize, usize, usize, usize) {
        let g = self.grid_side();
        let (ch, cw) = (self.h / g, self.w / g);
        let (bh, bw) = ((ch / 2).max(1), (cw / 2).max(1));
        let y0 = (k / g) * ch + (ch - bh) / 2;
        let x0 = (k % g) * cw + (cw - bw) / 2;
        (y0, y0 + bh, x0, x0 + bw)
    }
}

/// Balanced labels (`i % K` before shuffling), then one image per label with
/// Gaussian pixel noise, clamped to `[0, 1]`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<u32> = (0..spec.n).map(|i| (i % spec.class_count) as u32).collect();
    labels.shuffle(&mut rng);

    let noise = Normal::new(0.0f32, spec.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let shape = Shape::new(spec.n, spec.c, spec.h, spec.w);
    let mut data = Vec::with_capacity(shape.numel());
    for &label in &labels {
        let k = label as usize;
        let rect = match spec.kind {
            SynthKind::Channel => (0, 0, 0, 0),
            SynthKind::Spatial | SynthKind::Mixed => spec.blob_rect(k),
        };
        for c in 0..spec.c {
            for y in 0..spec.h {
                for x in 0..spec.w {
                    let in_blob = y >= rect.0 && y < rect.1 && x >= rect.2 && x < rect.3;
                    let lit = match spec.kind {
                        SynthKind::Channel => c == k,
                        SynthKind::Spatial => in_blob,
                        SynthKind::Mixed => in_blob && c == k % spec.c,
                    };
                    let mut v = BACKGROUND + if lit { spec.amplitude } else { 0.0 };
                    if spec.noise_sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    DatasetBundle::new(
        Tensor4::from_vec(shape, data)?,
        labels,
        spec.class_count,
        Split::Unsplit,
    )
}

pub fn encode_dataset(bundle: &DatasetBundle) -> Vec<u8> {
    let s = bundle.images.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (s.numel() + s.n));
    out.extend_from_slice(MAGIC);
    for v in [s.n, s.c, s.h, s.w, bundle.class_count] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in bundle.images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &bundle.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetBundle> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)
        .map_err(|_| Error::format(0, "file shorter than the magic"))?
        != MAGIC
    {
        return Err(Error::format(0, "bad magic, expected \"ATD1\""));
    }
    let [n, c, h, w, classes] =
        [r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
    let numel = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::format(4, "image dimensions overflow"))?;
    let needed = numel
        .checked_add(n)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(4, "payload size overflows"))?;
    if bytes.len() < needed {
        // Report where the payload runs out: inside the pixels or the labels.
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated payload: {} bytes present, {needed} required",
                bytes.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(r.f32()?);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let l = r.u32()?;
        if l as usize >= classes {
            return Err(Error::format(
                at,
                format!("label {l} not below class count {classes}"),
            ));
        }
        labels.push(l);
    }
    r.expect_end()?;
    let images = Tensor4::from_vec(Shape::new(n, c, h, w), data)?;
    DatasetBundle::new(images, labels, classes, Split::Unsplit)
}

pub fn save_dataset(bundle: &DatasetBundle, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_dataset(bundle))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    let path = path.as_ref();
    decode_dataset(&fs::read(path).map_err(Error::io_at(path))?)
}

/// Stratified three-way split. Each class is shuffled with `seed` and cut at
/// the rounded cumulative fractions, so per-class proportions are kept within
/// one sample. Indices inside each split are in ascending order.
pub fn split(
    bundle: &DatasetBundle,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(DatasetBundle, DatasetBundle, DatasetBundle)> {
    if fractions.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
        return Err(Error::config(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions sum to {total}, not 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..bundle.class_count {
        let mut idx: Vec<usize> = (0..bundle.len())
            .filter(|&i| bundle.labels[i] as usize == class)
            .collect();
        idx.shuffle(&mut rng);
        let m = idx.len() as f64;
        let a = (fractions[0] * m).round() as usize;
        let b = ((fractions[0] + fractions[1]) * m).round() as usize;
        parts[0].extend_from_slice(&idx[..a]);
        parts[1].extend_from_slice(&idx[a..b.max(a)]);
        parts[2].extend_from_slice(&idx[b.max(a)..]);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((
        bundle.subset(&parts[0], Split::Train)?,
        bundle.subset(&parts[1], Split::Val)?,
        bundle.subset(&parts[2], Split::Test)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor4<f32>,
    pub labels: Vec<u32>,
}

/// Sample order for one epoch, a pure function of `(shuffle_seed, epoch)`.
pub fn epoch_order(len: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Lazily materialized batches of one epoch; the last one may be short.
pub struct Batches<'a> {
    bundle: &'a DatasetBundle,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let sub = self
            .bundle
            .subset(&indices, self.bundle.split)
            .expect("indices in range");
        Some(Batch {
            indices,
            images: sub.images,
            labels: sub.labels,
        })
    }
}

pub fn batches(
    bundle: &DatasetBundle,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    Ok(Batches {
        bundle,
        order: epoch_order(bundle.len(), shuffle_seed, epoch),
        batch_size,
        pos: 0,
    })
}

/// Little-endian cursor that reports the byte offset of every failure.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::format(
                self.pos as u64,
                format!("unexpected end of data, wanted {len} more bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
