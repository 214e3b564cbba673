//! Image sets: CIFAR-10 binary batches, synthetic images, crops, splits and
//! PPM / raw dumps. Pixels are stored as `f32` in `[0,1]`, channel-major.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
pub const RAW_MAGIC: &[u8; 4] = b"IMGR";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    shape: [usize; 3],
    pixels: Vec<f32>,
    labels: Option<Vec<u8>>,
}

impl ImageSet {
    pub fn new(shape: [usize; 3], pixels: Vec<f32>, labels: Option<Vec<u8>>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || !pixels.len().is_multiple_of(per) {
            return Err(Error::shape("image set pixels", format!("multiple of {per}"), pixels.len()));
        }
        if let Some(bad) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("pixel {bad} = {} outside [0,1]", pixels[bad])));
        }
        if let Some(l) = &labels {
            if l.len() != pixels.len() / per {
                return Err(Error::shape("labels", pixels.len() / per, l.len()));
            }
        }
        Ok(Self { shape, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    /// Stacks the selected images into `[n,c,h,w]`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        let [c, h, w] = self.shape;
        let data = indices
            .iter()
            .flat_map(|&i| self.image(i).iter().map(|&p| T::of(p as f64)))
            .collect();
        Tensor::new(&[indices.len(), c, h, w], data).expect("length follows from shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            shape: self.shape,
            pixels: indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Keeps the first `n` images.
    pub fn truncate(&self, n: usize) -> Self {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }
}

/// Parses concatenated CIFAR-10 records (label byte + 3072 pixel bytes).
pub fn parse_cifar10(bytes: &[u8]) -> Result<ImageSet> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Format {
            offset: whole as u64,
            message: format!(
                "length {} is not a multiple of the {CIFAR_RECORD}-byte record size; partial record of {} bytes",
                bytes.len(),
                bytes.len() - whole
            ),
        });
    }
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    ImageSet::new(CIFAR_SHAPE, pixels, Some(labels))
}

/// Loads and concatenates CIFAR-10 binary batch files in the given order.
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P]) -> Result<ImageSet> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let bytes = fs::read(p.as_ref())?;
        let set = parse_cifar10(&bytes).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", p.as_ref().display()),
            },
            other => other,
        })?;
        pixels.extend_from_slice(&set.pixels);
        labels.extend(set.labels.unwrap_or_default());
    }
    ImageSet::new(CIFAR_SHAPE, pixels, Some(labels))
}

/// Serializes a 3×32×32 set in CIFAR-10 layout; pixels are rounded to bytes.
pub fn encode_cifar10(set: &ImageSet) -> Result<Vec<u8>> {
    if set.shape != CIFAR_SHAPE {
        return Err(Error::shape("cifar image shape", "[3, 32, 32]", format!("{:?}", set.shape)));
    }
    let mut out = Vec::with_capacity(set.len() * CIFAR_RECORD);
    for i in 0..set.len() {
        out.push(set.labels().map_or(0, |l| l[i]));
        out.extend(set.image(i).iter().map(|&p| to_byte(p)));
    }
    Ok(out)
}

fn to_byte(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Smooth random images: a few low-frequency cosines per channel, min-max
/// rescaled to `[0,1]` per image.
pub fn synthetic_set<R: Rng + ?Sized>(count: usize, shape: [usize; 3], rng: &mut R) -> ImageSet {
    const WAVES: usize = 4;
    let [c, h, w] = shape;
    let mut pixels = Vec::with_capacity(count * c * h * w);
    let mut img = vec![0.0f64; c * h * w];
    for _ in 0..count {
        img.fill(0.0);
        for ch in 0..c {
            for _ in 0..WAVES {
                let fy: f64 = rng.gen_range(0.0..1.5);
                let fx: f64 = rng.gen_range(0.0..1.5);
                let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp: f64 = rng.gen_range(0.2..1.0);
                for y in 0..h {
                    for x in 0..w {
                        let t = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64);
                        img[(ch * h + y) * w + x] += amp * (t + phase).cos();
                    }
                }
            }
        }
        let lo = img.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        pixels.extend(img.iter().map(|&v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.5 }));
    }
    ImageSet::new(shape, pixels, None).expect("rescaled pixels lie in [0,1]")
}

/// Square crops at uniformly random corners; the corners `(y, x)` are
/// returned alongside.
pub fn random_crop<R: Rng + ?Sized>(set: &ImageSet, size: usize, rng: &mut R) -> Result<(ImageSet, Vec<(usize, usize)>)> {
    let [c, h, w] = set.shape;
    if size == 0 || size > h || size > w {
        return Err(Error::Config(format!("crop size {size} does not fit {h}x{w} images")));
    }
    let mut corners = Vec::with_capacity(set.len());
    let mut pixels = Vec::with_capacity(set.len() * c * size * size);
    for i in 0..set.len() {
        let y0 = rng.gen_range(0..=h - size);
        let x0 = rng.gen_range(0..=w - size);
        corners.push((y0, x0));
        let img = set.image(i);
        for ch in 0..c {
            for y in y0..y0 + size {
                let row = (ch * h + y) * w;
                pixels.extend_from_slice(&img[row + x0..row + x0 + size]);
            }
        }
    }
    Ok((ImageSet::new([c, size, size], pixels, set.labels.clone())?, corners))
}

/// Shuffled disjoint split; the validation part has `round(n·val_fraction)`
/// images.
pub fn split<R: Rng + ?Sized>(set: &ImageSet, val_fraction: f64, rng: &mut R) -> Result<(ImageSet, ImageSet)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction must lie in (0,1), got {val_fraction}")));
    }
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.shuffle(rng);
    let n_val = (set.len() as f64 * val_fraction).round() as usize;
    let (val, train) = idx.split_at(n_val);
    Ok((set.subset(train), set.subset(val)))
}

/// Writes one image as binary PPM (P6, max 255). Single-channel images are
/// written as gray.
pub fn write_ppm<W: Write>(mut w: W, shape: [usize; 3], pixels: &[f32]) -> Result<()> {
    let [c, h, wd] = shape;
    if c != 1 && c != 3 {
        return Err(Error::Config(format!("PPM needs 1 or 3 channels, got {c}")));
    }
    if pixels.len() != c * h * wd {
        return Err(Error::shape("ppm pixels", c * h * wd, pixels.len()));
    }
    write!(w, "P6\n{wd} {h}\n255\n")?;
    let plane = h * wd;
    let mut buf = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            buf.push(to_byte(pixels[(ch % c) * plane + p]));
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn dump_ppm(set: &ImageSet, index: usize, path: &Path) -> Result<()> {
    write_ppm(std::io::BufWriter::new(fs::File::create(path)?), set.shape, set.image(index))
}

/// Reads a binary PPM (P6, max 255) into a 3-channel image.
pub fn read_ppm<R: Read>(r: R) -> Result<([usize; 3], Vec<f32>)> {
    let mut r = BufReader::new(r);
    let mut header = Vec::new();
    let mut consumed = 0u64;
    while header.len() < 4 {
        let mut line = String::new();
        let n = r.read_line(&mut line)?;
        if n == 0 {
            return Err(Error::Format {
                offset: consumed,
                message: "truncated PPM header".into(),
            });
        }
        consumed += n as u64;
        let content = line.split('#').next().unwrap_or("");
        header.extend(content.split_whitespace().map(str::to_owned));
    }
    let bad = |message: String| Error::Format { offset: 0, message };
    if header[0] != "P6" {
        return Err(bad(format!("expected P6 magic, got {:?}", header[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad PPM header field {s:?}")));
    let (w, h, max) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if max != 255 {
        return Err(bad(format!("unsupported max value {max}")));
    }
    let mut raw = vec![0u8; 3 * w * h];
    r.read_exact(&mut raw).map_err(|e| Error::Format {
        offset: consumed,
        message: format!("truncated PPM data: {e}"),
    })?;
    let plane = w * h;
    let mut pixels = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            pixels[ch * plane + p] = raw[3 * p + ch] as f32 / 255.0;
        }
    }
    Ok(([3, h, w], pixels))
}

/// `"IMGR" | count u32 | c u32 | h u32 | w u32 | f32 LE pixels`.
pub fn write_raw<W: Write>(mut w: W, set: &ImageSet) -> Result<()> {
    w.write_all(RAW_MAGIC)?;
    w.write_all(&(set.len() as u32).to_le_bytes())?;
    for d in set.shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for p in &set.pixels {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_raw(bytes: &[u8]) -> Result<ImageSet> {
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::Format {
                offset: at as u64,
                message: "truncated raw image header".into(),
            })
    };
    if bytes.get(0..4) != Some(RAW_MAGIC.as_slice()) {
        return Err(Error::Format {
            offset: 0,
            message: "missing IMGR magic".into(),
        });
    }
    let count = word(4)? as usize;
    let shape = [word(8)? as usize, word(12)? as usize, word(16)? as usize];
    let expected = 20 + 4 * count * shape.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            message: format!("raw image file has {} bytes, header implies {expected}", bytes.len()),
        });
    }
    let pixels = bytes[20..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    ImageSet::new(shape, pixels, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use proptest::prelude::*;

    fn cifar_bytes(records: usize) -> Vec<u8> {
        (0..records * CIFAR_RECORD).map(|i| (i * 31 % 256) as u8).collect()
    }

    #[test]
    fn cifar_records() {
        let bytes = cifar_bytes(2);
        let set = parse_cifar10(&bytes).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.shape(), [3, 32, 32]);
        assert_eq!(set.labels().unwrap(), &[bytes[0], bytes[CIFAR_RECORD]]);
        for (i, &b) in bytes[CIFAR_RECORD + 1..].iter().enumerate() {
            assert_eq!(set.image(1)[i], b as f32 / 255.0);
        }
        let mut edge = vec![0u8; CIFAR_RECORD];
        edge[1] = 255;
        let s = parse_cifar10(&edge).unwrap();
        assert_eq!((s.image(0)[0], s.image(0)[1]), (1.0, 0.0));
    }

    #[test]
    fn truncated_cifar_reports_offset() {
        let err = parse_cifar10(&vec![0u8; 3072]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
        let err = parse_cifar10(&vec![0u8; CIFAR_RECORD + 10]).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset == CIFAR_RECORD as u64));
    }

    #[test]
    fn cifar_roundtrip_is_exact() {
        let bytes = cifar_bytes(3);
        let set = parse_cifar10(&bytes).unwrap();
        assert_eq!(encode_cifar10(&set).unwrap(), bytes);
    }

    #[test]
    fn synthetic_determinism_and_range() {
        let s = SeedStream::new(1);
        let a = synthetic_set(20, [1, 8, 8], &mut s.rng("data", 0));
        let b = synthetic_set(20, [1, 8, 8], &mut s.rng("data", 0));
        let c = synthetic_set(20, [1, 8, 8], &mut SeedStream::new(2).rng("data", 0));
        assert_eq!(a, b);
        assert!(a.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        let diff = a.pixels.iter().zip(&c.pixels).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(diff > 0.01);
    }

    #[test]
    fn crops() {
        let set = synthetic_set(4, [3, 32, 32], &mut SeedStream::new(3).rng("data", 0));
        let mut rng = SeedStream::new(3).rng("crop", 0);
        let (same, _) = random_crop(&set, 32, &mut rng).unwrap();
        assert_eq!(same, set);
        let (small, corners) = random_crop(&set, 16, &mut rng).unwrap();
        assert_eq!(small.shape(), [3, 16, 16]);
        for (i, &(y0, x0)) in corners.iter().enumerate() {
            for ch in 0..3 {
                for y in 0..16 {
                    for x in 0..16 {
                        assert_eq!(
                            small.image(i)[(ch * 16 + y) * 16 + x],
                            set.image(i)[(ch * 32 + y0 + y) * 32 + x0 + x]
                        );
                    }
                }
            }
        }
        assert!(random_crop(&set, 33, &mut rng).is_err());
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let n = 100;
        let pixels: Vec<f32> = (0..n).map(|i| i as f32 / n as f32).collect();
        let set = ImageSet::new([1, 1, 1], pixels, None).unwrap();
        let (train, val) = split(&set, 0.1, &mut SeedStream::new(4).rng("split", 0)).unwrap();
        assert_eq!((train.len(), val.len()), (90, 10));
        let mut all: Vec<f32> = train.pixels.iter().chain(&val.pixels).copied().collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(all, set.pixels);
        assert!(split(&set, 0.0, &mut SeedStream::new(4).rng("split", 0)).is_err());
    }

    #[test]
    fn ppm_roundtrip_within_quantization() {
        let set = synthetic_set(1, [3, 5, 7], &mut SeedStream::new(5).rng("data", 0));
        let mut buf = Vec::new();
        write_ppm(&mut buf, set.shape(), set.image(0)).unwrap();
        assert!(buf.starts_with(b"P6\n7 5\n255\n"));
        let (shape, px) = read_ppm(&buf[..]).unwrap();
        assert_eq!(shape, [3, 5, 7]);
        for (a, b) in px.iter().zip(set.image(0)) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
    }

    #[test]
    fn gray_ppm_replicates_channel() {
        let px = vec![0.0, 1.0];
        let mut buf = Vec::new();
        write_ppm(&mut buf, [1, 1, 2], &px).unwrap();
        let (_, back) = read_ppm(&buf[..]).unwrap();
        assert_eq!(back, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn raw_roundtrip(seed in any::<u64>(), count in 1usize..5) {
            let set = synthetic_set(count, [2, 3, 4], &mut SeedStream::new(seed).rng("data", 0));
            let mut buf = Vec::new();
            write_raw(&mut buf, &set).unwrap();
            prop_assert_eq!(read_raw(&buf).unwrap(), set);
            prop_assert!(read_raw(&buf[..buf.len() - 1]).is_err());
        }
    }
}
