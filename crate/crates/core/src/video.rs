//! Video containers and their on-disk forms: binary PPM frame directories for
//! colour, PTV1 tensors for depth and masks.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::tensor::ptv::PtvError;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed PPM ({msg})")]
    BadPpm { path: String, msg: String },
    #[error("{0}")]
    Ptv(#[from] PtvError),
    #[error("video shape mismatch: {0}")]
    Shape(String),
}

fn io_err(path: &Path, source: std::io::Error) -> VideoError {
    VideoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Colour video, `frames × 3 × height × width`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video(pub Tensor<f32>);

impl Video {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Video(Tensor::zeros([frames, 3, height, width]))
    }

    pub fn new(t: Tensor<f32>) -> Result<Self, VideoError> {
        if t.shape().len() != 4 || t.shape()[1] != 3 {
            return Err(VideoError::Shape(format!("expected F×3×H×W, got {:?}", t.shape())));
        }
        Ok(Video(t))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    fn frame_len(&self) -> usize {
        3 * self.height() * self.width()
    }

    pub fn frame(&self, f: usize) -> &[f32] {
        let n = self.frame_len();
        &self.0.data()[f * n..(f + 1) * n]
    }

    pub fn frame_mut(&mut self, f: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.0.data_mut()[f * n..(f + 1) * n]
    }

    /// RGB of pixel `(x, y)` in frame `f`.
    pub fn pixel(&self, f: usize, y: usize, x: usize) -> [f32; 3] {
        let (h, w) = (self.height(), self.width());
        let fr = self.frame(f);
        [fr[y * w + x], fr[h * w + y * w + x], fr[2 * h * w + y * w + x]]
    }

    pub fn set_pixel(&mut self, f: usize, y: usize, x: usize, rgb: [f32; 3]) {
        let (h, w) = (self.height(), self.width());
        let fr = self.frame_mut(f);
        for c in 0..3 {
            fr[c * h * w + y * w + x] = rgb[c];
        }
    }

    /// Rounds every value to the nearest 8-bit level, as storing to PPM does.
    pub fn quantized(&self) -> Video {
        Video(self.0.map(|v| quantize(v) as f32 / 255.0))
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), VideoError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for f in 0..self.frames() {
            let path = dir.join(format!("frame_{f:04}.ppm"));
            write_ppm(&path, self.frame(f), self.height(), self.width())?;
        }
        Ok(())
    }

    /// Reads `frame_0000.ppm`, `frame_0001.ppm`, ... until the first gap.
    pub fn read_dir(dir: &Path) -> Result<Video, VideoError> {
        let mut frames = Vec::new();
        let mut dims = None;
        loop {
            let path = dir.join(format!("frame_{:04}.ppm", frames.len()));
            if !path.exists() {
                break;
            }
            let (data, h, w) = read_ppm(&path)?;
            match dims {
                None => dims = Some((h, w)),
                Some(d) if d != (h, w) => {
                    return Err(VideoError::Shape(format!("{}: frame size changed", path.display())))
                }
                _ => {}
            }
            frames.push(data);
        }
        let Some((h, w)) = dims else {
            return Err(VideoError::Io {
                path: dir.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no frame_0000.ppm"),
            });
        };
        let n = frames.len();
        let data = frames.concat();
        Ok(Video(Tensor::new([n, 3, h, w], data).expect("sized frames")))
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes one planar `3 × h × w` frame as binary P6 with maximal value 255.
pub fn write_ppm(path: &Path, planar: &[f32], h: usize, w: usize) -> Result<(), VideoError> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push(quantize(planar[c * h * w + i]));
        }
    }
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&out).map_err(|e| io_err(path, e))
}

/// Reads a binary P6 file into planar `3 × h × w` values in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<(Vec<f32>, usize, usize), VideoError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let bad = |msg: &str| VideoError::BadPpm {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not P6"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxv) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxv != 255 {
        return Err(bad("maximal value must be 255"));
    }
    if bytes.len() < pos + 3 * w * h {
        return Err(bad("truncated pixel data"));
    }
    let px = &bytes[pos..pos + 3 * w * h];
    let mut planar = vec![0.0f32; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            planar[c * h * w + i] = px[3 * i + c] as f32 / 255.0;
        }
    }
    Ok((planar, h, w))
}
