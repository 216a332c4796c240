//! Synthetic shapes dataset and its `PNK1` container.
//!
//! Container layout, little-endian:
//!
//! ```text
//! "PNK1" | count:u32 | image_size:u32 | channels:u32
//! per record: channels·H·W f32 planes | n:u32 | n × (class:u16, x1,y1,x2,y2:f32)
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::boxes::{self, Annotation, BBox, SizeBand};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PNK1";
pub const HEADER_BYTES: usize = 16;
pub const CHANNELS: usize = 3;
pub const ANNOTATION_BYTES: usize = 2 + 4 * 4;
pub const MAX_PLACEMENT_RETRIES: usize = 100;
pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Circle = 0,
    Square = 1,
    Triangle = 2,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle];

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
        }
    }

    /// Whether `(x, y)` lies inside this shape inscribed in square box `b`.
    /// The triangle is isosceles with its base on the bottom edge.
    pub fn contains(self, b: &BBox, x: f64, y: f64) -> bool {
        if x < b[0] || x > b[2] || y < b[1] || y > b[3] {
            return false;
        }
        match self {
            ShapeClass::Square => true,
            ShapeClass::Circle => {
                let (cx, cy) = boxes::center(b);
                let r = boxes::width(b) / 2.0;
                (x - cx).powi(2) + (y - cy).powi(2) <= r * r
            }
            ShapeClass::Triangle => {
                let (cx, _) = boxes::center(b);
                let depth = (y - b[1]) / boxes::height(b);
                (x - cx).abs() <= depth * boxes::width(b) / 2.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    /// Fractions of small, medium and large objects.
    pub mix: [f64; 3],
    /// Standard deviation of the background noise.
    pub noise: f64,
    pub max_objects: usize,
}

impl DatasetSpec {
    pub fn new(seed: u64, count: usize, image_size: usize) -> Self {
        DatasetSpec {
            seed,
            count,
            image_size,
            mix: [1.0 / 3.0; 3],
            noise: 0.05,
            max_objects: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if ![64, 128, 256].contains(&self.image_size) {
            return Err(Error::config(format!("image size must be 64, 128 or 256, got {}", self.image_size)));
        }
        if self.count == 0 {
            return Err(Error::config("dataset count must be at least 1"));
        }
        if self.mix.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (self.mix.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::config(format!("size mix {:?} must be non-negative and sum to 1", self.mix)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("noise level {} must be non-negative", self.noise)));
        }
        if self.max_objects == 0 {
            return Err(Error::config("max_objects must be at least 1"));
        }
        Ok(())
    }

    /// Smallest object side in pixels.
    pub fn min_side(&self) -> f64 {
        (6.0 * self.image_size as f64 / 256.0).max(4.0)
    }

    /// Side range `[lo, hi)` for a size band.
    pub fn side_range(&self, band: SizeBand) -> (f64, f64) {
        let [lo, hi] = SizeBand::edges(self.image_size);
        let s = self.image_size as f64;
        match band {
            SizeBand::Small => (self.min_side(), lo),
            SizeBand::Medium => (lo, hi),
            SizeBand::Large => (hi.next_up(), 0.75 * s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub records: Vec<DatasetRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GenerationStats {
    pub objects: usize,
    /// Objects dropped because no free spot was found.
    pub skipped: usize,
    pub bands: [usize; 3],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Objects per size band.
    pub fn band_histogram(&self) -> [usize; 3] {
        let mut h = [0; 3];
        for r in &self.records {
            for a in &r.annotations {
                h[SizeBand::of_box(&a.bbox, self.image_size).index()] += 1;
            }
        }
        h
    }

    pub fn annotations(&self) -> Vec<Vec<Annotation>> {
        self.records.iter().map(|r| r.annotations.clone()).collect()
    }
}

fn round_f32(b: BBox) -> BBox {
    b.map(|v| v as f32 as f64)
}

/// Fraction of a 4×4 subsample grid inside the shape, per pixel.
fn coverage(class: ShapeClass, b: &BBox, px: usize, py: usize) -> f64 {
    const SS: usize = 4;
    let mut hits = 0;
    for sy in 0..SS {
        for sx in 0..SS {
            let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
            let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
            hits += usize::from(class.contains(b, x, y));
        }
    }
    hits as f64 / (SS * SS) as f64
}

/// Coverage grid of a shape at `ss` samples per pixel side, size `(S·ss)²`.
pub fn shape_mask(class: ShapeClass, b: &BBox, image_size: usize, ss: usize) -> Vec<bool> {
    let n = image_size * ss;
    let mut m = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let fx = (x as f64 + 0.5) / ss as f64;
            let fy = (y as f64 + 0.5) / ss as f64;
            m[y * n + x] = class.contains(b, fx, fy);
        }
    }
    m
}

/// Tight box of a mask from [`shape_mask`], in pixels.
pub fn mask_bbox(mask: &[bool], image_size: usize, ss: usize) -> Option<BBox> {
    let n = image_size * ss;
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..n {
        for x in 0..n {
            if mask[y * n + x] {
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
    }
    (x1 != usize::MAX).then(|| [x1, y1, x2, y2].map(|v| v as f64 / ss as f64))
}

fn pick_band<R: Rng>(rng: &mut R, mix: &[f64; 3]) -> SizeBand {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (band, &f) in SizeBand::ALL.iter().zip(mix) {
        acc += f;
        if u < acc && f > 0.0 {
            return *band;
        }
    }
    *SizeBand::ALL.iter().zip(mix).rev().find(|(_, &f)| f > 0.0).map(|(b, _)| b).unwrap_or(&SizeBand::Medium)
}

/// Record `index` of the dataset; depends only on `(spec, index)`.
pub fn generate_record(spec: &DatasetSpec, index: usize) -> (DatasetRecord, GenerationStats) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let s = spec.image_size;
    let sf = s as f64;
    let mut stats = GenerationStats::default();

    let bg: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let mut img = vec![0.0f64; CHANNELS * s * s];
    for (c, &base) in bg.iter().enumerate() {
        for v in &mut img[c * s * s..(c + 1) * s * s] {
            *v = base + if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        }
    }

    let n_objects = rng.gen_range(1..=spec.max_objects);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let band = pick_band(&mut rng, &spec.mix);
        let class = ShapeClass::ALL[rng.gen_range(0..NUM_CLASSES)];
        let (lo, hi) = spec.side_range(band);
        let side = rng.gen_range(lo..hi);
        let mut color = [0.0; 3];
        for _ in 0..100 {
            color = [rng.gen(), rng.gen(), rng.gen()];
            let contrast: f64 = color.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
            if contrast >= 0.3 {
                break;
            }
        }
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_RETRIES {
            let x1 = rng.gen_range(0.0..=sf - side);
            let y1 = rng.gen_range(0.0..=sf - side);
            let b = round_f32([x1, y1, x1 + side, y1 + side]);
            // f32 rounding must not push the box out of the image or its band
            if b[2] > sf || b[3] > sf || SizeBand::of_box(&b, s) != band {
                continue;
            }
            if annotations.iter().all(|a| boxes::iou(&a.bbox, &b) == 0.0) {
                placed = Some(b);
                break;
            }
        }
        let Some(b) = placed else {
            stats.skipped += 1;
            continue;
        };
        let (px0, py0) = (b[0].floor() as usize, b[1].floor() as usize);
        let (px1, py1) = ((b[2].ceil() as usize).min(s), (b[3].ceil() as usize).min(s));
        for py in py0..py1 {
            for px in px0..px1 {
                let cov = coverage(class, &b, px, py);
                if cov == 0.0 {
                    continue;
                }
                for (c, &col) in color.iter().enumerate() {
                    let v = &mut img[c * s * s + py * s + px];
                    *v = (1.0 - cov) * *v + cov * col;
                }
            }
        }
        stats.objects += 1;
        stats.bands[SizeBand::of_box(&b, s).index()] += 1;
        annotations.push(Annotation {
            class_id: class as usize,
            bbox: b,
        });
    }

    let data: Vec<f32> = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    let image = Tensor::from_vec(&[CHANNELS, s, s], data).expect("image buffer matches shape");
    (DatasetRecord { image, annotations }, stats)
}

pub fn generate(spec: &DatasetSpec) -> Result<(Dataset, GenerationStats)> {
    spec.validate()?;
    let mut total = GenerationStats::default();
    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let (r, st) = generate_record(spec, i);
        total.objects += st.objects;
        total.skipped += st.skipped;
        for (t, b) in total.bands.iter_mut().zip(st.bands) {
            *t += b;
        }
        records.push(r);
    }
    Ok((
        Dataset {
            image_size: spec.image_size,
            records,
        },
        total,
    ))
}

// ------------------------------------------------------------- container

pub fn to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let s = ds.image_size;
    let mut out = Vec::with_capacity(HEADER_BYTES + ds.len() * (CHANNELS * s * s * 4 + 4));
    out.extend_from_slice(MAGIC);
    let u32_of = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::config(format!("{what} {v} exceeds u32")));
    out.extend_from_slice(&u32_of(ds.len(), "record count")?.to_le_bytes());
    out.extend_from_slice(&u32_of(s, "image size")?.to_le_bytes());
    out.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
    for (i, r) in ds.records.iter().enumerate() {
        if r.image.shape() != [CHANNELS, s, s] {
            return Err(Error::shape(
                "write_dataset",
                format!("record {i} image shape {:?}, expected [3, {s}, {s}]", r.image.shape()),
            ));
        }
        for v in r.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&u32_of(r.annotations.len(), "annotation count")?.to_le_bytes());
        for a in &r.annotations {
            let class = u16::try_from(a.class_id).map_err(|_| Error::config(format!("class id {} exceeds u16", a.class_id)))?;
            out.extend_from_slice(&class.to_le_bytes());
            for v in a.bbox {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:?}, expected \"PNK1\""),
        });
    }
    let count = r.u32("header")? as usize;
    let s = r.u32("header")? as usize;
    let channels = r.u32("header")? as usize;
    if channels != CHANNELS {
        return Err(Error::Format {
            offset: 12,
            detail: format!("expected {CHANNELS} channels, header says {channels}"),
        });
    }
    let plane = channels
        .checked_mul(s)
        .and_then(|v| v.checked_mul(s))
        .ok_or_else(|| Error::Format {
            offset: 8,
            detail: format!("image size {s} is too large"),
        })?;
    let mut records = Vec::with_capacity(count.min(buf.len() / (plane * 4 + 4).max(1)));
    for i in 0..count {
        let start = r.pos;
        if start == buf.len() {
            return Err(Error::Format {
                offset: start as u64,
                detail: format!("header declares {count} records, file ends before record {i}"),
            });
        }
        let raw = r.take(plane * 4, &format!("image of record {i}"))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let n = r.u32(&format!("annotation count of record {i}"))? as usize;
        let mut annotations = Vec::with_capacity(n.min(1024));
        for j in 0..n {
            let a = r.take(ANNOTATION_BYTES, &format!("annotation {j} of record {i}"))?;
            let class_id = u16::from_le_bytes([a[0], a[1]]) as usize;
            let mut bbox = [0.0; 4];
            for (k, v) in bbox.iter_mut().enumerate() {
                *v = f32::from_le_bytes(a[2 + 4 * k..6 + 4 * k].try_into().expect("4 bytes")) as f64;
            }
            annotations.push(Annotation { class_id, bbox });
        }
        records.push(DatasetRecord {
            image: Tensor::from_vec(&[channels, s, s], data)?,
            annotations,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            detail: format!("{} trailing bytes after {count} records", buf.len() - r.pos),
        });
    }
    Ok(Dataset { image_size: s, records })
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(ds)?).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Stacks records `idx` into an `[N, 3, S, S]` batch, mirroring the images
/// (and boxes) whose `flip` flag is set.
pub fn batch(ds: &Dataset, idx: &[usize], flip: &[bool]) -> (Tensor<f32>, Vec<Vec<Annotation>>) {
    let s = ds.image_size;
    let plane = CHANNELS * s * s;
    let mut data = Vec::with_capacity(idx.len() * plane);
    let mut gts = Vec::with_capacity(idx.len());
    for (k, &i) in idx.iter().enumerate() {
        let rec = &ds.records[i];
        let f = flip.get(k).copied().unwrap_or(false);
        if f {
            for row in rec.image.data().chunks_exact(s) {
                data.extend(row.iter().rev());
            }
            gts.push(
                rec.annotations
                    .iter()
                    .map(|a| Annotation {
                        class_id: a.class_id,
                        bbox: boxes::hflip(&a.bbox, s as f64),
                    })
                    .collect(),
            );
        } else {
            data.extend_from_slice(rec.image.data());
            gts.push(rec.annotations.clone());
        }
    }
    let t = Tensor::from_vec(&[idx.len(), CHANNELS, s, s], data).expect("batch buffer matches shape");
    (t, gts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dataset_is_header_only() {
        let ds = Dataset {
            image_size: 64,
            records: vec![],
        };
        let b = to_bytes(&ds).unwrap();
        assert_eq!(b.len(), HEADER_BYTES);
        assert_eq!(from_bytes(&b).unwrap(), ds);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut b = to_bytes(&Dataset {
            image_size: 64,
            records: vec![],
        })
        .unwrap();
        b[0] = b'X';
        assert!(matches!(from_bytes(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn short_header() {
        assert!(matches!(from_bytes(b"PNK1\x01\x00"), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn record_is_deterministic_and_in_bounds() {
        let spec = DatasetSpec::new(7, 1, 64);
        let (a, _) = generate_record(&spec, 0);
        let (b, _) = generate_record(&spec, 0);
        assert_eq!(a, b);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for ann in &a.annotations {
            assert!(ann.bbox[0] >= 0.0 && ann.bbox[3] <= 64.0);
            assert!(boxes::width(&ann.bbox) >= spec.min_side() - 1e-4);
        }
    }

    #[test]
    fn records_differ_by_index() {
        let spec = DatasetSpec::new(7, 2, 64);
        assert_ne!(generate_record(&spec, 0).0, generate_record(&spec, 1).0);
    }

    #[test]
    fn triangle_apex_and_base() {
        let b = [0.0, 0.0, 10.0, 10.0];
        assert!(ShapeClass::Triangle.contains(&b, 5.0, 0.5));
        assert!(!ShapeClass::Triangle.contains(&b, 1.0, 1.0));
        assert!(ShapeClass::Triangle.contains(&b, 0.5, 9.9));
        assert!(!ShapeClass::Circle.contains(&b, 0.5, 0.5));
    }

    #[test]
    fn spec_validation() {
        let mut s = DatasetSpec::new(1, 1, 64);
        s.mix = [0.5, 0.5, 0.5];
        assert!(s.validate().is_err());
        let mut s = DatasetSpec::new(1, 1, 100);
        assert!(s.validate().is_err());
        s.image_size = 128;
        s.count = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn flip_mirrors_rows_and_boxes() {
        let spec = DatasetSpec::new(3, 1, 64);
        let (ds, _) = generate(&spec).unwrap();
        let (plain, g0) = batch(&ds, &[0], &[false]);
        let (flipped, g1) = batch(&ds, &[0], &[true]);
        assert_eq!(plain.at(&[0, 1, 5, 0]), flipped.at(&[0, 1, 5, 63]));
        assert_eq!(boxes::hflip(&g0[0][0].bbox, 64.0), g1[0][0].bbox);
    }
}
