//! Netpbm images, PFM disparity maps and the on-disk dataset layout.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::StereoSample;
use crate::error::{Error, Result};
use crate::regression::DisparityMap;
use crate::tensor::Tensor;

/// A binary P5 (grey) or P6 (RGB) image, samples stored interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// 1..=65535; above 255 samples are two bytes, big-endian.
    pub maxval: u16,
    pub data: Vec<u16>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut out = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        match byte[0] {
            b'#' if out.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            c if c.is_ascii_whitespace() => {
                if !out.is_empty() {
                    break;
                }
            }
            c => out.push(c),
        }
    }
    if out.is_empty() {
        return Err(format_err("truncated header"));
    }
    String::from_utf8(out).map_err(|_| format_err("non-ascii header"))
}

fn number<R: BufRead>(r: &mut R, what: &str) -> Result<usize> {
    let t = token(r)?;
    t.parse().map_err(|_| format_err(format!("bad {what} `{t}`")))
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, maxval: u16, data: Vec<u16>) -> Result<Self> {
        if !(channels == 1 || channels == 3) || maxval == 0 || width == 0 || height == 0 {
            return Err(format_err("unsupported image geometry"));
        }
        if data.len() != width * height * channels {
            return Err(format_err("pixel count does not match extents"));
        }
        if let Some(v) = data.iter().find(|&&v| v > maxval) {
            return Err(Error::Range(format!("sample {v} exceeds maxval {maxval}")));
        }
        Ok(Self { width, height, channels, maxval, data })
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let channels = match token(&mut r)?.as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(format_err(format!("unsupported magic `{m}`"))),
        };
        let width = number(&mut r, "width")?;
        let height = number(&mut r, "height")?;
        let maxval = number(&mut r, "maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(format_err(format!("maxval {maxval} out of range")));
        }
        let wide = maxval > 255;
        let n = width * height * channels;
        let mut raw = vec![0u8; if wide { 2 * n } else { n }];
        r.read_exact(&mut raw).map_err(|_| format_err("truncated pixel data"))?;
        let data = if wide {
            raw.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
        } else {
            raw.into_iter().map(u16::from).collect()
        };
        Self::new(width, height, channels, maxval as u16, data)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        write!(w, "{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval)?;
        if self.maxval > 255 {
            for v in &self.data {
                w.write_all(&v.to_be_bytes())?;
            }
        } else {
            let bytes: Vec<u8> = self.data.iter().map(|&v| v as u8).collect();
            w.write_all(&bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    /// Quantizes `[c, H, W]` values in `[lo, hi]` to `0..=maxval`.
    pub fn from_tensor(t: &Tensor, lo: f64, hi: f64, maxval: u16) -> Result<Self> {
        let (c, h, w) = match *t.shape() {
            [h, w] => (1, h, w),
            [c, h, w] if c == 1 || c == 3 => (c, h, w),
            ref s => return Err(Error::Dimension(format!("cannot store {s:?} as an image"))),
        };
        let mut data = vec![0u16; c * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                let v = t.data()[ch * h * w + i];
                if !(lo..=hi).contains(&v) {
                    return Err(Error::Range(format!("value {v} outside [{lo}, {hi}]")));
                }
                data[i * c + ch] = ((v - lo) / (hi - lo) * maxval as f64).round() as u16;
            }
        }
        Self::new(w, h, c, maxval, data)
    }

    /// `[channels, H, W]` with samples mapped linearly onto `[lo, hi]`.
    pub fn to_tensor(&self, lo: f64, hi: f64) -> Tensor {
        let (c, hw) = (self.channels, self.width * self.height);
        let scale = (hi - lo) / self.maxval as f64;
        Tensor::from_fn(&[c, self.height, self.width], |j| {
            let (ch, i) = (j / hw, j % hw);
            lo + self.data[i * c + ch] as f64 * scale
        })
    }
}

/// Stereo views are stored as 16-bit RGB over `[-1, 1]`.
pub fn view_to_image(t: &Tensor) -> Result<Image> {
    Image::from_tensor(t, -1.0, 1.0, 65535)
}

/// Any P5 or P6 image as a `[3, H, W]` view in `[-1, 1]`; grey is replicated.
pub fn image_to_view(img: &Image) -> Tensor {
    let t = img.to_tensor(-1.0, 1.0);
    if img.channels == 3 {
        return t;
    }
    let hw = img.height * img.width;
    Tensor::from_fn(&[3, img.height, img.width], |j| t.data()[j % hw])
}

/// 8-bit grey rendering of a disparity map, `0..=max_disp` mapped to `0..=255`.
pub fn disparity_preview(d: &Tensor, max_disp: f64) -> Result<Image> {
    let clamped = d.map(|v| v.clamp(0.0, max_disp));
    if !d.all_finite() {
        return Err(Error::Range("non-finite disparity".into()));
    }
    Image::from_tensor(&clamped, 0.0, max_disp, 255)
}

/// Reads a grey `Pf` PFM file as `[H, W]`, top row first.
pub fn read_pfm_from<R: BufRead>(mut r: R) -> Result<Tensor> {
    match token(&mut r)?.as_str() {
        "Pf" => {}
        "PF" => return Err(format_err("colour PFM is not a disparity map")),
        m => return Err(format_err(format!("unsupported magic `{m}`"))),
    }
    let width = number(&mut r, "width")?;
    let height = number(&mut r, "height")?;
    let scale: f64 = {
        let t = token(&mut r)?;
        t.parse().map_err(|_| format_err(format!("bad scale `{t}`")))?
    };
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err("PFM scale must be non-zero"));
    }
    let little = scale < 0.0;
    let mut raw = vec![0u8; 4 * width * height];
    r.read_exact(&mut raw).map_err(|_| format_err("truncated PFM data"))?;
    let floats: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    // PFM rows run bottom to top.
    Ok(Tensor::from_fn(&[height, width], |j| {
        floats[(height - 1 - j / width) * width + j % width] as f64
    }))
}

pub fn write_pfm_to<W: Write>(t: &Tensor, mut w: W) -> Result<()> {
    let [h, wd] = *t.shape() else {
        return Err(Error::Dimension(format!("PFM needs [H, W], got {:?}", t.shape())));
    };
    write!(w, "Pf\n{wd} {h}\n-1.0\n")?;
    for y in (0..h).rev() {
        for x in 0..wd {
            w.write_all(&(t.get(&[y, x]) as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    read_pfm_from(BufReader::new(File::open(path)?))
}

pub fn write_pfm(t: &Tensor, path: &Path) -> Result<()> {
    write_pfm_to(t, BufWriter::new(File::create(path)?))
}

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("sample_{index:06}"))
}

/// Writes `left.pgm`, `right.pgm`, `disp.pfm` and `valid.pgm`.
pub fn write_sample(dir: &Path, s: &StereoSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    view_to_image(&s.left)?.write(&dir.join("left.pgm"))?;
    view_to_image(&s.right)?.write(&dir.join("right.pgm"))?;
    write_pfm(&s.gt.values, &dir.join("disp.pfm"))?;
    let (h, w) = (s.gt.height(), s.gt.width());
    let mask = s.gt.valid.iter().map(|&v| if v { 255 } else { 0 }).collect();
    Image::new(w, h, 1, 255, mask)?.write(&dir.join("valid.pgm"))
}

pub fn read_sample(dir: &Path, seed: u64) -> Result<StereoSample> {
    let left = image_to_view(&Image::read(&dir.join("left.pgm"))?);
    let right = image_to_view(&Image::read(&dir.join("right.pgm"))?);
    let disp = read_pfm(&dir.join("disp.pfm"))?;
    let mask = Image::read(&dir.join("valid.pgm"))?;
    if left.shape() != right.shape() || left.shape()[1..] != *disp.shape() {
        return Err(Error::Dimension(format!("inconsistent extents in {}", dir.display())));
    }
    if mask.channels != 1 || [mask.height, mask.width] != *disp.shape() {
        return Err(Error::Dimension(format!("validity mask mismatch in {}", dir.display())));
    }
    let valid = mask.data.iter().map(|&v| v > 0).collect();
    Ok(StereoSample {
        left,
        right,
        gt: DisparityMap::new(disp, 1, valid)?,
        seed,
    })
}

/// Writes samples as `sample_000000`, `sample_000001`, ...
pub fn write_dataset(root: &Path, samples: &[StereoSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        write_sample(&sample_dir(root, i), s)?;
    }
    Ok(())
}

/// Every `sample_NNNNNN` directory under `root`, in index order.
pub fn read_dataset(root: &Path) -> Result<Vec<StereoSample>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(idx) = name.to_str().and_then(|n| n.strip_prefix("sample_")) else {
            continue;
        };
        if let Ok(i) = idx.parse::<u64>() {
            found.push((i, entry.path()));
        }
    }
    if found.is_empty() {
        return Err(Error::Config(format!("no samples under {}", root.display())));
    }
    found.sort();
    found.into_iter().map(|(i, p)| read_sample(&p, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn roundtrip(img: &Image) -> Image {
        let mut buf = Vec::new();
        img.write_to(&mut buf).unwrap();
        Image::read_from(&buf[..]).unwrap()
    }

    #[test]
    fn pgm_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (c, maxval) in [(1, 65535u16), (1, 255), (3, 255), (3, 4095)] {
            let data = (0..7 * 5 * c).map(|_| rng.gen_range(0..=maxval)).collect();
            let img = Image::new(7, 5, c, maxval, data).unwrap();
            assert_eq!(roundtrip(&img), img);
        }
    }

    #[test]
    fn header_comments() {
        let bytes = b"P5\n# made by hand\n2 1\n# depth\n255\n\x07\x09";
        let img = Image::read_from(&bytes[..]).unwrap();
        assert_eq!(img.data, vec![7, 9]);
    }

    #[test]
    fn sixteen_bit_is_big_endian() {
        let img = Image::new(1, 1, 1, 65535, vec![0x0102]).unwrap();
        let mut buf = Vec::new();
        img.write_to(&mut buf).unwrap();
        assert_eq!(&buf[buf.len() - 2..], &[1, 2]);
    }

    #[test]
    fn out_of_range_is_an_error() {
        let t = Tensor::new(&[1, 2], vec![0.5, 1.5]).unwrap();
        assert!(matches!(Image::from_tensor(&t, 0.0, 1.0, 255), Err(Error::Range(_))));
        let t = Tensor::new(&[1, 1], vec![f64::NAN]).unwrap();
        assert!(matches!(Image::from_tensor(&t, 0.0, 1.0, 255), Err(Error::Range(_))));
        assert!(Image::new(1, 1, 1, 10, vec![11]).is_err());
    }

    #[test]
    fn pfm_little_endian() {
        let mut bytes = b"Pf\n2 1\n-1.0\n".to_vec();
        bytes.extend(1.5f32.to_le_bytes());
        bytes.extend((-2.0f32).to_le_bytes());
        let t = read_pfm_from(&bytes[..]).unwrap();
        assert_eq!(t.data(), &[1.5, -2.0]);

        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend(3.25f32.to_be_bytes());
        assert_eq!(read_pfm_from(&bytes[..]).unwrap().data(), &[3.25]);
    }

    #[test]
    fn pfm_rows_bottom_up() {
        let t = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_pfm_to(&t, &mut buf).unwrap();
        let n = buf.len();
        assert_eq!(&buf[n - 8..n - 4], &2.0f32.to_le_bytes());
        assert_eq!(read_pfm_from(&buf[..]).unwrap(), t);
    }

    #[test]
    fn view_quantization_is_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::uniform(&[3, 4, 6], -1.0, 1.0, &mut rng);
        let back = image_to_view(&view_to_image(&t).unwrap());
        assert!(t.max_abs_diff(&back) <= 1.0 / 65535.0);
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = std::env::temp_dir().join(format!("vsio-{}", std::process::id()));
        let s = crate::data::rds_generate(32, 64, 16, 3).unwrap();
        write_dataset(&dir, std::slice::from_ref(&s)).unwrap();
        let back = read_dataset(&dir).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].gt, s.gt);
        assert!(back[0].left.max_abs_diff(&s.left) <= 1.0 / 65535.0);
        fs::remove_dir_all(dir).ok();
    }
}
