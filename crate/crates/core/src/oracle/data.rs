//! Datasets, IDX/CSV loaders and the bundled synthetic generators.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use topoprune_numerics::rng;
use topoprune_numerics::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Images in `[0, 1]` with integer labels and disjoint index splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    train: Vec<usize>,
    validation: Vec<usize>,
    test: Vec<usize>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Dataset(msg.into())
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        train: Vec<usize>,
        validation: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.shape().len() != 4 {
            return Err(bad(format!(
                "images must be NCHW, got {:?}",
                images.shape()
            )));
        }
        if labels.len() != n {
            return Err(bad(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(bad(format!("label {l} outside {num_classes} classes")));
        }
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&validation).chain(&test) {
            if i >= n {
                return Err(bad(format!("split index {i} outside {n} samples")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(bad(format!("sample {i} appears in more than one split")));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            train,
            validation,
            test,
        })
    }

    /// Joins a train part and a test part, carving a validation split of
    /// `val_fraction` of the test part (seeded shuffle; indices kept sorted).
    pub fn from_parts(
        train: (Tensor, Vec<usize>),
        test: (Tensor, Vec<usize>),
        num_classes: usize,
        val_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&val_fraction) {
            return Err(bad(format!(
                "validation fraction {val_fraction} outside [0, 1]"
            )));
        }
        let (ti, tl) = train;
        let (si, sl) = test;
        if ti.shape()[1..] != si.shape()[1..] {
            return Err(bad(format!(
                "train {:?} and test {:?} images differ",
                ti.shape(),
                si.shape()
            )));
        }
        let (n_train, n_test) = (tl.len(), sl.len());
        let mut shape = ti.shape().to_vec();
        shape[0] = n_train + n_test;
        let mut data = ti.data().to_vec();
        data.extend_from_slice(si.data());
        let images = Tensor::new(shape, data)?;
        let mut labels = tl;
        labels.extend(sl);

        let mut order: Vec<usize> = (n_train..n_train + n_test).collect();
        order.shuffle(&mut rng::stream(seed, 20));
        let n_val = (val_fraction * n_test as f64).round() as usize;
        let mut validation = order[..n_val].to_vec();
        let mut test = order[n_val..].to_vec();
        validation.sort_unstable();
        test.sort_unstable();
        Self::new(
            images,
            labels,
            num_classes,
            (0..n_train).collect(),
            validation,
            test,
        )
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn split(&self, s: Split) -> &[usize] {
        match s {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// Gathers samples into a batch tensor and label list.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.select(0, idx)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Keeps the first `n` indices of a split (for quick runs).
    pub fn truncate_split(&mut self, s: Split, n: usize) {
        let v = match s {
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        };
        v.truncate(n);
    }
}

const IDX_U8: u8 = 0x08;

/// Parses an unsigned-byte IDX file into its dimensions and raw bytes.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("IDX magic must start with two zero bytes"));
    }
    if bytes[2] != IDX_U8 {
        return Err(bad(format!(
            "IDX element type 0x{:02x} unsupported (only unsigned byte)",
            bytes[2]
        )));
    }
    let nd = bytes[3] as usize;
    let header = 4 + 4 * nd;
    if nd == 0 || bytes.len() < header {
        return Err(bad("IDX header truncated"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + count {
        return Err(bad(format!(
            "IDX body holds {} bytes, dimensions {dims:?} need {count}",
            bytes.len() - header
        )));
    }
    Ok((dims, bytes[header..].to_vec()))
}

pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_U8, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Images from a 3-d (`N×H×W`) or 4-d (`N×C×H×W`) IDX file, scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let (dims, raw) = parse_idx(&fs::read(path)?)?;
    let shape = match dims.as_slice() {
        [n, h, w] => vec![*n, 1, *h, *w],
        [n, c, h, w] => vec![*n, *c, *h, *w],
        _ => {
            return Err(bad(format!(
                "{}: image IDX must be 3-d or 4-d, got {dims:?}",
                path.display()
            )))
        }
    };
    Ok(Tensor::new(
        shape,
        raw.iter().map(|&b| b as f64 / 255.0).collect(),
    )?)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let (dims, raw) = parse_idx(&fs::read(path)?)?;
    if dims.len() != 1 {
        return Err(bad(format!(
            "{}: label IDX must be 1-d, got {dims:?}",
            path.display()
        )));
    }
    Ok(raw.into_iter().map(usize::from).collect())
}

/// Quantizes `[0, 1]` images to bytes; single-channel sets are written 3-d.
pub fn write_idx_images(path: &Path, images: &Tensor) -> Result<()> {
    let s = images.shape();
    let dims = if s[1] == 1 {
        vec![s[0], s[2], s[3]]
    } else {
        s.to_vec()
    };
    let bytes: Vec<u8> = images
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    fs::write(path, encode_idx(&dims, &bytes))?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let bytes = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| bad(format!("label {l} does not fit a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    fs::write(path, encode_idx(&[labels.len()], &bytes))?;
    Ok(())
}

/// Rows of `label,pixel0,...` with byte-valued pixels; a non-numeric first
/// row is treated as a header.
pub fn read_csv(path: &Path, shape: (usize, usize, usize)) -> Result<(Tensor, Vec<usize>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let width = shape.0 * shape.1 * shape.2;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if row == 0
            && rec
                .get(0)
                .is_some_and(|f| f.trim().parse::<usize>().is_err())
        {
            continue;
        }
        if rec.len() != width + 1 {
            return Err(bad(format!(
                "{} row {row}: {} fields, expected {}",
                path.display(),
                rec.len(),
                width + 1
            )));
        }
        let parse = |f: &str| {
            f.trim()
                .parse::<u8>()
                .map_err(|_| bad(format!("{} row {row}: `{f}` is not a byte", path.display())))
        };
        labels.push(parse(&rec[0])? as usize);
        for f in rec.iter().skip(1) {
            data.push(parse(f)? as f64 / 255.0);
        }
    }
    let n = labels.len();
    Ok((
        Tensor::new(vec![n, shape.0, shape.1, shape.2], data)?,
        labels,
    ))
}

pub fn write_csv(path: &Path, images: &Tensor, labels: &[usize]) -> Result<()> {
    let per: usize = images.shape()[1..].iter().product();
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "label")?;
    for k in 0..per {
        write!(f, ",pixel{k}")?;
    }
    writeln!(f)?;
    for (row, &l) in images.data().chunks(per).zip(labels) {
        write!(f, "{l}")?;
        for v in row {
            write!(f, ",{}", (v.clamp(0.0, 1.0) * 255.0).round() as u8)?;
        }
        writeln!(f)?;
    }
    Ok(())
}

/// File layout of a dataset directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirFormat {
    /// `{train,test}-{images,labels}.idx`
    Idx,
    /// `train.csv` and `test.csv`
    Csv,
}

type Part = (Tensor, Vec<usize>);

/// Writes a train and a test part into `dir`, creating it if needed.
pub fn write_dir(dir: &Path, train: &Part, test: &Part, format: DirFormat) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, (x, y)) in [("train", train), ("test", test)] {
        match format {
            DirFormat::Idx => {
                write_idx_images(&dir.join(format!("{name}-images.idx")), x)?;
                write_idx_labels(&dir.join(format!("{name}-labels.idx")), y)?;
            }
            DirFormat::Csv => write_csv(&dir.join(format!("{name}.csv")), x, y)?,
        }
    }
    Ok(())
}

/// Reads the train and test parts of `dir`, preferring IDX files over CSV.
/// Every sample must have shape `shape`.
pub fn read_dir(dir: &Path, shape: (usize, usize, usize)) -> Result<(Part, Part)> {
    let read = |name: &str| -> Result<Part> {
        let images = dir.join(format!("{name}-images.idx"));
        let part = if images.exists() {
            (
                read_idx_images(&images)?,
                read_idx_labels(&dir.join(format!("{name}-labels.idx")))?,
            )
        } else {
            let csv = dir.join(format!("{name}.csv"));
            if !csv.exists() {
                return Err(bad(format!(
                    "{}: no {name} images (IDX or CSV)",
                    dir.display()
                )));
            }
            read_csv(&csv, shape)?
        };
        let s = part.0.shape();
        if s[1..] != [shape.0, shape.1, shape.2] {
            return Err(bad(format!(
                "{name} samples are {:?}, model expects {shape:?}",
                &s[1..]
            )));
        }
        if part.1.len() != s[0] {
            return Err(bad(format!(
                "{name}: {} images but {} labels",
                s[0],
                part.1.len()
            )));
        }
        Ok(part)
    };
    Ok((read("train")?, read("test")?))
}

/// Two-class `1×8×8` blobs: a bright spot in the upper-left or lower-right
/// quadrant over faint noise.
pub fn blobs(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = rng::stream(seed, 30);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut data = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = r.gen_range(0..2);
        let (cy, cx) = if label == 0 { (2.0, 2.0) } else { (5.0, 5.0) };
        let cy = cy + r.gen_range(-0.7..0.7);
        let cx = cx + r.gen_range(-0.7..0.7);
        for y in 0..8 {
            for x in 0..8 {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = (-d2 / 3.0).exp() + noise.sample(&mut r);
                data.push(quantize(v));
            }
        }
        labels.push(label);
    }
    (Tensor::new(vec![n, 1, 8, 8], data).unwrap(), labels)
}

/// Seven-segment strokes on a unit box, plus one diagonal that separates
/// otherwise similar glyphs.
fn glyph(d: usize) -> Vec<[(f64, f64); 2]> {
    // segment endpoints as (x, y), y downwards
    let a = [(0.0, 0.0), (1.0, 0.0)];
    let b = [(1.0, 0.0), (1.0, 0.5)];
    let c = [(1.0, 0.5), (1.0, 1.0)];
    let dd = [(0.0, 1.0), (1.0, 1.0)];
    let e = [(0.0, 0.5), (0.0, 1.0)];
    let f = [(0.0, 0.0), (0.0, 0.5)];
    let g = [(0.0, 0.5), (1.0, 0.5)];
    match d {
        0 => vec![a, b, c, dd, e, f, [(1.0, 0.0), (0.0, 1.0)]],
        1 => vec![b, c, [(0.5, 0.15), (1.0, 0.0)]],
        2 => vec![a, b, g, e, dd],
        3 => vec![a, b, g, c, dd],
        4 => vec![f, g, b, c],
        5 => vec![a, f, g, c, dd],
        6 => vec![a, f, g, e, c, dd],
        7 => vec![a, [(1.0, 0.0), (0.4, 1.0)]],
        8 => vec![a, b, c, dd, e, f, g],
        _ => vec![a, b, c, dd, f, g],
    }
}

fn seg_dist(p: (f64, f64), s: &[(f64, f64); 2]) -> f64 {
    let (ax, ay) = s[0];
    let (bx, by) = s[1];
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - ax) * dx + (p.1 - ay) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - ax - t * dx).powi(2) + (p.1 - ay - t * dy).powi(2)).sqrt()
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Ten-class `1×16×16` digit-like glyphs with random affine jitter, stroke
/// width and pixel noise, quantized to bytes. Classes are balanced in
/// expectation.
pub fn synth_digits(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = rng::stream(seed, 31);
    let noise = Normal::new(0.0, 0.12).unwrap();
    let mut data = Vec::with_capacity(n * 256);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = r.gen_range(0..10);
        let strokes = glyph(label);
        let angle = r.gen_range(-12.0..12.0) * PI / 180.0;
        let (sx, sy) = (r.gen_range(6.0..9.0), r.gen_range(8.5..11.5));
        let shear = r.gen_range(-0.25..0.25);
        let (tx, ty) = (r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5));
        let width = r.gen_range(0.07..0.14);
        let gain = r.gen_range(0.7..1.0);
        let (sin, cos) = angle.sin_cos();
        for py in 0..16 {
            for px in 0..16 {
                // pixel centre → glyph box coordinates
                let u = px as f64 + 0.5 - 8.0 - tx;
                let v = py as f64 + 0.5 - 8.0 - ty;
                let (u, v) = (cos * u + sin * v, -sin * u + cos * v);
                let gx = (u - shear * v) / sx + 0.5;
                let gy = v / sy + 0.5;
                let dist = strokes
                    .iter()
                    .map(|s| seg_dist((gx, gy), s))
                    .fold(f64::INFINITY, f64::min);
                let ink = (1.0 - (dist - width).max(0.0) / 0.08).clamp(0.0, 1.0);
                data.push(quantize(gain * ink + noise.sample(&mut r)));
            }
        }
        labels.push(label);
    }
    (Tensor::new(vec![n, 1, 16, 16], data).unwrap(), labels)
}
