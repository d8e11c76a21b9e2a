//! Hyperspectral cubes, label maps, few-shot splits, patches and a
//! synthetic scene generator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

const CUBE_MAGIC: &[u8; 8] = b"HSICUBE1";
const LABEL_MAGIC: &[u8; 8] = b"HSILBL01";

/// Spectral cube stored band-interleaved-by-pixel: value `(r, c, b)` sits at
/// `(r * W + c) * B + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Data(format!(
                "cube dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        if data.len() != height * width * bands {
            return Err(Error::Data(format!(
                "cube {height}x{width}x{bands} needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("cube value {i} is not finite")));
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.data[(row * self.width + col) * self.bands + band]
    }

    /// Spectrum of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.bands;
        &self.data[i..i + self.bands]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = Reader::new(&bytes, CUBE_MAGIC)?;
        let (h, w, b) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let n = h * w * b;
        r.expect_payload(n, 4)?;
        let data = (0..n).map(|_| f64::from(r.f32())).collect::<Vec<_>>();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: 20 + 4 * i,
                message: "non-finite cube value".into(),
            });
        }
        HsiCube::new(h, w, b, data)
    }

    /// Writes the cube; values are narrowed to 32-bit reals.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(CUBE_MAGIC);
        for d in [self.height, self.width, self.bands] {
            out.extend_from_slice(&dim_u32(d)?.to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }
}

fn dim_u32(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::Data(format!("dimension {d} does not fit in 32 bits")))
}

/// Little-endian reader that reports the byte offset of failures.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != magic {
            return Err(Error::Format {
                offset: 0,
                message: format!("missing magic {:?}", String::from_utf8_lossy(magic)),
            });
        }
        Ok(Reader { bytes, pos: 8 })
    }

    fn u32(&mut self) -> Result<u32> {
        let Some(b) = self.bytes.get(self.pos..self.pos + 4) else {
            return Err(Error::Format {
                offset: self.bytes.len(),
                message: format!("header truncated, expected at least {} bytes", self.pos + 4),
            });
        };
        self.pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    /// Checks that exactly `count` items of `size` bytes follow.
    fn expect_payload(&self, count: usize, size: usize) -> Result<()> {
        let want = self.pos + count * size;
        if self.bytes.len() != want {
            let what = if self.bytes.len() < want {
                "truncated"
            } else {
                "has trailing bytes"
            };
            return Err(Error::Format {
                offset: self.bytes.len().min(want),
                message: format!("file {what}: expected {want} bytes, found {}", self.bytes.len()),
            });
        }
        Ok(())
    }

    fn f32(&mut self) -> f32 {
        let b: [u8; 4] = self.bytes[self.pos..self.pos + 4].try_into().unwrap();
        self.pos += 4;
        f32::from_le_bytes(b)
    }

    fn u16(&mut self) -> u16 {
        let b: [u8; 2] = self.bytes[self.pos..self.pos + 2].try_into().unwrap();
        self.pos += 2;
        u16::from_le_bytes(b)
    }
}

/// Per-pixel class ids; 0 marks unlabeled pixels, classes are `1..=K`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::Data(format!(
                "label map {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(LabelMap { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Largest class id present.
    pub fn classes(&self) -> usize {
        usize::from(self.labels.iter().copied().max().unwrap_or(0))
    }

    pub fn check_matches(&self, cube: &HsiCube) -> Result<()> {
        if (self.height, self.width) != (cube.height, cube.width) {
            return Err(Error::Data(format!(
                "label map is {}x{} but the cube is {}x{}",
                self.height, self.width, cube.height, cube.width
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = Reader::new(&bytes, LABEL_MAGIC)?;
        let (h, w) = (r.u32()? as usize, r.u32()? as usize);
        r.expect_payload(h * w, 2)?;
        let labels = (0..h * w).map(|_| r.u16()).collect();
        LabelMap::new(h, w, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::with_capacity(16 + 2 * self.labels.len());
        out.extend_from_slice(LABEL_MAGIC);
        out.extend_from_slice(&dim_u32(self.height)?.to_le_bytes());
        out.extend_from_slice(&dim_u32(self.width)?.to_le_bytes());
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Per-band min-max scaling to `[0, 1]`; constant bands become 0.
pub fn normalize(cube: &HsiCube) -> HsiCube {
    let b = cube.bands;
    let mut lo = vec![f64::INFINITY; b];
    let mut hi = vec![f64::NEG_INFINITY; b];
    for px in cube.data.chunks(b) {
        for (k, &v) in px.iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    let mut data = cube.data.clone();
    for px in data.chunks_mut(b) {
        for (k, v) in px.iter_mut().enumerate() {
            let range = hi[k] - lo[k];
            *v = if range > 0.0 {
                ((*v - lo[k]) / range).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    HsiCube { data, ..cube.clone() }
}

/// One labeled pixel; `class` is the 1-based id from the label map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sample {
    pub class: u16,
    pub row: usize,
    pub col: usize,
}

impl Sample {
    /// 0-based target index for the classifier.
    pub fn target(&self) -> usize {
        usize::from(self.class) - 1
    }
}

/// How many labeled pixels per class are "knowable" (train + val).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub knowable: usize,
    /// Per-class overrides of `knowable`.
    pub overrides: BTreeMap<u16, usize>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(knowable: usize, seed: u64) -> Self {
        SplitSpec {
            knowable,
            overrides: BTreeMap::new(),
            seed,
        }
    }

    pub fn knowable_for(&self, class: u16) -> usize {
        self.overrides.get(&class).copied().unwrap_or(self.knowable)
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::new(20, 0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Per class: shuffle the labeled pixels, take the knowable ones, give the
/// first half (rounded up) to training and the rest to validation; all
/// remaining pixels form the test set.
pub fn stratified_split(labels: &LabelMap, spec: &SplitSpec) -> Result<Split> {
    let k = labels.classes();
    if k == 0 {
        return Err(Error::Data("label map has no labeled pixels".into()));
    }
    let mut by_class: Vec<Vec<Sample>> = vec![vec![]; k];
    for row in 0..labels.height {
        for col in 0..labels.width {
            let class = labels.get(row, col);
            if class > 0 {
                by_class[usize::from(class) - 1].push(Sample { class, row, col });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = Split::default();
    for (i, mut pixels) in by_class.into_iter().enumerate() {
        let class = (i + 1) as u16;
        let want = spec.knowable_for(class);
        if want < 2 || pixels.len() < want {
            return Err(Error::Data(format!(
                "class {class} has {} labeled pixels, needs {want} knowable (at least 2)",
                pixels.len()
            )));
        }
        pixels.shuffle(&mut rng);
        let n_train = want.div_ceil(2);
        split.train.extend_from_slice(&pixels[..n_train]);
        split.val.extend_from_slice(&pixels[n_train..want]);
        split.test.extend_from_slice(&pixels[want..]);
    }
    Ok(split)
}

impl Split {
    /// Text form: one `class<TAB>row<TAB>col<TAB>set` line per sample.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, set) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for p in set {
                writeln!(s, "{}\t{}\t{}\t{name}", p.class, p.row, p.col).unwrap();
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut split = Split::default();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: &str| Error::Data(format!("split line {}: {m}", ln + 1));
            let f: Vec<&str> = line.split('\t').collect();
            let [class, row, col, set] = f.as_slice() else {
                return Err(bad("expected 4 tab-separated fields"));
            };
            let sample = Sample {
                class: class.parse().map_err(|_| bad("bad class"))?,
                row: row.parse().map_err(|_| bad("bad row"))?,
                col: col.parse().map_err(|_| bad("bad column"))?,
            };
            if sample.class == 0 {
                return Err(bad("class 0 is the unlabeled marker"));
            }
            match *set {
                "train" => split.train.push(sample),
                "val" => split.val.push(sample),
                "test" => split.test.push(sample),
                _ => return Err(bad("set must be train, val or test")),
            }
        }
        Ok(split)
    }
}

/// Mirror an index into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`), folding repeatedly for small `n`.
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Centered `(B, size, size)` patch with reflected borders.
pub fn extract_patch(cube: &HsiCube, row: usize, col: usize, size: usize) -> Result<Tensor> {
    if row >= cube.height || col >= cube.width {
        return Err(Error::Data(format!(
            "patch center ({row}, {col}) outside {}x{} image",
            cube.height, cube.width
        )));
    }
    if size.is_multiple_of(2) {
        return Err(Error::invalid(format!("patch size must be odd, got {size}")));
    }
    let b = cube.bands;
    let half = (size / 2) as i64;
    let mut out = vec![0.0; b * size * size];
    for i in 0..size {
        let r = reflect_index(row as i64 + i as i64 - half, cube.height);
        for j in 0..size {
            let c = reflect_index(col as i64 + j as i64 - half, cube.width);
            for (k, &v) in cube.pixel(r, c).iter().enumerate() {
                out[(k * size + i) * size + j] = v;
            }
        }
    }
    Tensor::new(vec![b, size, size], out)
}

/// Spectra of `samples` stacked into `(N, B)`.
pub fn vector_batch(cube: &HsiCube, samples: &[Sample]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * cube.bands);
    for s in samples {
        if s.row >= cube.height || s.col >= cube.width {
            return Err(Error::Data(format!("sample ({}, {}) outside the image", s.row, s.col)));
        }
        data.extend_from_slice(cube.pixel(s.row, s.col));
    }
    Tensor::new(vec![samples.len(), cube.bands], data)
}

/// Patches of `samples` stacked into `(N, B, size, size)`.
pub fn patch_batch(cube: &HsiCube, samples: &[Sample], size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(samples.len() * cube.bands * size * size);
    for s in samples {
        data.extend(extract_patch(cube, s.row, s.col, size)?.into_data());
    }
    Tensor::new(vec![samples.len(), cube.bands, size, size], data)
}

/// The whole cube as `(1, B, H, W)`.
pub fn image_batch(cube: &HsiCube) -> Tensor {
    let (h, w, b) = (cube.height, cube.width, cube.bands);
    let mut data = vec![0.0; b * h * w];
    for p in 0..h * w {
        for k in 0..b {
            data[k * h * w + p] = cube.data[p * b + k];
        }
    }
    Tensor::from_parts(vec![1, b, h, w], data)
}

/// Parameters of a synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub cube: HsiCube,
    pub labels: LabelMap,
    /// Noiseless spectrum of each class, index `k` for class `k + 1`.
    pub signatures: Vec<Vec<f64>>,
    /// Region centers `(row, col)` per class.
    pub centers: Vec<(f64, f64)>,
}

/// Noiseless spectrum of class `k` (0-based): a Gaussian bump at its own
/// band center over a small baseline.
pub fn signature(k: usize, classes: usize, bands: usize) -> Vec<f64> {
    let center = (k as f64 + 0.5) * bands as f64 / classes as f64;
    let width = (bands as f64 / classes as f64).max(1.0);
    (0..bands)
        .map(|b| {
            let d = b as f64 + 0.5 - center;
            0.2 + 0.6 * (-(d * d) / (2.0 * width * width)).exp()
        })
        .collect()
}

/// Paints each class over a contiguous Voronoi cell around a jittered grid
/// center and adds i.i.d. Gaussian noise of standard deviation `noise`.
/// Every pixel is labeled.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthScene> {
    let SynthSpec {
        classes: k,
        height: h,
        width: w,
        bands: b,
        noise,
        seed,
    } = *spec;
    if k < 2 || h == 0 || w == 0 || b == 0 || k > h * w || k > usize::from(u16::MAX) {
        return Err(Error::Data(format!(
            "degenerate synthetic scene: {k} classes on {h}x{w}x{b}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Data(format!(
            "noise level must be finite and nonnegative, got {noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gc = (k as f64).sqrt().ceil() as usize;
    let gr = k.div_ceil(gc);
    let (ch, cw) = (h as f64 / gr as f64, w as f64 / gc as f64);
    let mut centers: Vec<(f64, f64)> = (0..k)
        .map(|i| {
            let (gi, gj) = (i / gc, i % gc);
            let jr = rng.random_range(-0.25..=0.25) * ch;
            let jc = rng.random_range(-0.25..=0.25) * cw;
            ((gi as f64 + 0.5) * ch + jr, (gj as f64 + 0.5) * cw + jc)
        })
        .collect();
    centers.shuffle(&mut rng);
    let signatures: Vec<Vec<f64>> = (0..k).map(|i| signature(i, k, b)).collect();
    let normal = if noise > 0.0 {
        Some(Normal::new(0.0, noise).map_err(|e| Error::Data(e.to_string()))?)
    } else {
        None
    };
    let mut labels = Vec::with_capacity(h * w);
    let mut data = Vec::with_capacity(h * w * b);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let cls = (0..k)
                .min_by(|&i, &j| {
                    let d = |(cy, cx): (f64, f64)| (cy - y).powi(2) + (cx - x).powi(2);
                    d(centers[i]).total_cmp(&d(centers[j]))
                })
                .unwrap();
            labels.push((cls + 1) as u16);
            for &v in &signatures[cls] {
                let eps = normal.map_or(0.0, |n| n.sample(&mut rng));
                data.push(v + eps);
            }
        }
    }
    let mut scene = SynthScene {
        cube: HsiCube::new(h, w, b, data)?,
        labels: LabelMap::new(h, w, labels)?,
        signatures,
        centers,
    };
    // A class whose cell holds no pixel center gets the pixel nearest its center.
    for i in 0..k {
        let id = (i + 1) as u16;
        if !scene.labels.labels.contains(&id) {
            let (cy, cx) = scene.centers[i];
            let (r, c) = ((cy as usize).min(h - 1), (cx as usize).min(w - 1));
            scene.labels.labels[r * w + c] = id;
            for (kk, v) in scene.signatures[i].iter().enumerate() {
                scene.cube.data[(r * w + c) * b + kk] = *v;
            }
        }
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let cube = HsiCube::new(3, 1, 2, vec![2.0, 5.0, 4.0, 5.0, 6.0, 5.0]).unwrap();
        let n = normalize(&cube);
        assert_eq!(n.data(), &[0.0, 0.0, 0.5, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn reflection() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-4, 5), 4);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(-13, 3), 1);
        assert_eq!(reflect_index(7, 1), 0);
    }

    #[test]
    fn split_counts() {
        let labels = LabelMap::new(2, 20, (0..40).map(|i| if i < 20 { 1 } else { 2 }).collect()).unwrap();
        let mut spec = SplitSpec::new(10, 4);
        spec.overrides.insert(2, 14);
        let s = stratified_split(&labels, &spec).unwrap();
        let count = |set: &[Sample], c| set.iter().filter(|p| p.class == c).count();
        assert_eq!((count(&s.train, 1), count(&s.val, 1), count(&s.test, 1)), (5, 5, 10));
        assert_eq!((count(&s.train, 2), count(&s.val, 2), count(&s.test, 2)), (7, 7, 6));
        spec.overrides.insert(2, 21);
        let err = stratified_split(&labels, &spec).unwrap_err().to_string();
        assert!(err.contains("class 2"), "{err}");
    }

    #[test]
    fn split_text_round_trip() {
        let labels = LabelMap::new(4, 4, vec![1, 1, 1, 1, 2, 2, 2, 2, 0, 0, 1, 2, 1, 2, 1, 2]).unwrap();
        let s = stratified_split(&labels, &SplitSpec::new(4, 9)).unwrap();
        assert_eq!(Split::parse(&s.to_text()).unwrap(), s);
        assert!(Split::parse("1\t2\t3\tholdout\n").is_err());
    }
}
