//! Video clips, co-located patches and the two on-disk formats (Y4M and
//! directories of `%06d.png` frames).
//!
//! Samples are stored as 8-bit interleaved `[t][y][x][c]`. Everything that does
//! arithmetic on them goes through [`VideoClip::planar_f64`] or
//! [`Patch::planar_f64`], which produce a normalized `[c][t][y][x]` view.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest spatial extent a clip may have.
pub const MIN_CLIP_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Luma,
    Rgb,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Luma => 1,
            ColorSpace::Rgb => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRate {
    pub num: u32,
    pub den: u32,
}

impl FrameRate {
    pub const fn new(num: u32, den: u32) -> Self {
        FrameRate { num, den }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl Default for FrameRate {
    fn default() -> Self {
        FrameRate::new(30, 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    pub frame_rate: FrameRate,
    color: ColorSpace,
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl VideoClip {
    /// Builds a clip from interleaved `[t][y][x][c]` samples.
    pub fn new(
        clip_id: impl Into<String>,
        frames: usize,
        height: usize,
        width: usize,
        color: ColorSpace,
        frame_rate: FrameRate,
        data: Vec<u8>,
    ) -> Result<Self> {
        if frames < 1 {
            return Err(Error::InvalidClip("clip needs at least one frame".into()));
        }
        if height < MIN_CLIP_DIM || width < MIN_CLIP_DIM {
            return Err(Error::InvalidClip(format!(
                "{width}x{height} is below the {MIN_CLIP_DIM}x{MIN_CLIP_DIM} minimum"
            )));
        }
        if frame_rate.den == 0 || frame_rate.num == 0 {
            return Err(Error::InvalidClip("frame rate must be positive".into()));
        }
        let expected = frames * height * width * color.channels();
        if data.len() != expected {
            return Err(Error::InvalidClip(format!(
                "expected {expected} samples, got {}",
                data.len()
            )));
        }
        Ok(VideoClip {
            clip_id: clip_id.into(),
            frame_rate,
            color,
            frames,
            height,
            width,
            data,
        })
    }

    /// Builds a clip from normalized planar `[c][t][y][x]` values, clamping to
    /// [0,1] and rounding to 8 bits.
    pub fn from_planar_f64(
        clip_id: impl Into<String>,
        frames: usize,
        height: usize,
        width: usize,
        color: ColorSpace,
        frame_rate: FrameRate,
        planar: &[f64],
    ) -> Result<Self> {
        let c = color.channels();
        if planar.len() != c * frames * height * width {
            return Err(Error::ShapeMismatch("planar buffer size".into()));
        }
        let plane = frames * height * width;
        let mut data = vec![0u8; planar.len()];
        for ch in 0..c {
            for i in 0..plane {
                data[i * c + ch] = quantize_unit(planar[ch * plane + i]);
            }
        }
        VideoClip::new(clip_id, frames, height, width, color, frame_rate, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.color.channels()
    }

    pub fn color(&self) -> ColorSpace {
        self.color
    }

    /// `(T, H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels())
    }

    pub fn samples(&self) -> &[u8] {
        &self.data
    }

    pub fn samples_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_samples(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn sample(&self, t: usize, y: usize, x: usize, c: usize) -> u8 {
        let ch = self.channels();
        self.data[((t * self.height + y) * self.width + x) * ch + c]
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let len = self.height * self.width * self.channels();
        &self.data[t * len..(t + 1) * len]
    }

    /// Normalized `[c][t][y][x]` view.
    pub fn planar_f64(&self) -> Vec<f64> {
        interleaved_to_planar(&self.data, self.channels())
    }

    pub fn with_id(mut self, clip_id: impl Into<String>) -> Self {
        self.clip_id = clip_id.into();
        self
    }
}

pub(crate) fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn interleaved_to_planar(data: &[u8], channels: usize) -> Vec<f64> {
    let plane = data.len() / channels;
    let mut out = vec![0.0; data.len()];
    for i in 0..plane {
        for c in 0..channels {
            out[c * plane + i] = data[i * channels + c] as f64 / 255.0;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchShape {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchShape {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        PatchShape { t, h, w }
    }

    /// 256×256×12, the full-size training patch.
    pub const FULL: PatchShape = PatchShape::new(12, 256, 256);
    /// 64×64×4, used for fast experiments.
    pub const DESK: PatchShape = PatchShape::new(4, 64, 64);

    pub fn validate(&self) -> Result<()> {
        if self.t < 2 || self.h < 16 || self.w < 16 {
            return Err(Error::InvalidArgument(format!(
                "patch shape {}x{}x{} needs t >= 2 and h, w >= 16",
                self.w, self.h, self.t
            )));
        }
        Ok(())
    }

    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }
}

impl Default for PatchShape {
    fn default() -> Self {
        PatchShape::FULL
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub clip_id: String,
    pub x: usize,
    pub y: usize,
    pub t0: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub origin: PatchOrigin,
    pub shape: PatchShape,
    pub channels: usize,
    samples: Vec<u8>,
}

impl Patch {
    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [u8] {
        &mut self.samples
    }

    /// Normalized `[c][t][y][x]` view.
    pub fn planar_f64(&self) -> Vec<f64> {
        interleaved_to_planar(&self.samples, self.channels)
    }

    /// Crops one window out of `clip`.
    pub fn crop(clip: &VideoClip, x: usize, y: usize, t0: usize, shape: PatchShape) -> Result<Patch> {
        shape.validate()?;
        check_window(clip, x, y, t0, shape)?;
        let c = clip.channels();
        let mut samples = Vec::with_capacity(shape.volume() * c);
        for t in t0..t0 + shape.t {
            for yy in y..y + shape.h {
                let row = ((t * clip.height + yy) * clip.width + x) * c;
                samples.extend_from_slice(&clip.data[row..row + shape.w * c]);
            }
        }
        Ok(Patch {
            origin: PatchOrigin {
                clip_id: clip.clip_id.clone(),
                x,
                y,
                t0,
            },
            shape,
            channels: c,
            samples,
        })
    }
}

fn check_window(clip: &VideoClip, x: usize, y: usize, t0: usize, shape: PatchShape) -> Result<()> {
    if x + shape.w > clip.width || y + shape.h > clip.height || t0 + shape.t > clip.frames {
        return Err(Error::OutOfBounds(format!(
            "window x={x} y={y} t0={t0} size {}x{}x{} exceeds clip {}x{}x{}",
            shape.w, shape.h, shape.t, clip.width, clip.height, clip.frames
        )));
    }
    Ok(())
}

/// Cuts the same window out of a reference and a distorted clip.
pub fn crop_copatch(
    reference: &VideoClip,
    distorted: &VideoClip,
    x: usize,
    y: usize,
    t0: usize,
    shape: PatchShape,
) -> Result<(Patch, Patch)> {
    if reference.dims() != distorted.dims() {
        return Err(Error::ShapeMismatch(format!(
            "reference {:?} vs distorted {:?}",
            reference.dims(),
            distorted.dims()
        )));
    }
    Ok((
        Patch::crop(reference, x, y, t0, shape)?,
        Patch::crop(distorted, x, y, t0, shape)?,
    ))
}

/// BT.601 luma with integer rounding. A luma clip is returned unchanged.
pub fn to_luma(clip: &VideoClip) -> VideoClip {
    if clip.color == ColorSpace::Luma {
        log::warn!("to_luma: clip `{}` is already luma-only", clip.clip_id);
        return clip.clone();
    }
    let data = clip
        .data
        .chunks_exact(3)
        .map(|px| rgb_to_luma(px[0], px[1], px[2]))
        .collect();
    VideoClip {
        clip_id: clip.clip_id.clone(),
        frame_rate: clip.frame_rate,
        color: ColorSpace::Luma,
        frames: clip.frames,
        height: clip.height,
        width: clip.width,
        data,
    }
}

/// Like [`to_luma`] but silent on luma input.
pub fn to_luma_quiet(clip: &VideoClip) -> VideoClip {
    if clip.color == ColorSpace::Luma {
        clip.clone()
    } else {
        to_luma(clip)
    }
}

#[inline]
pub fn rgb_to_luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipFormat {
    Y4m,
    FrameDirectory,
}

impl ClipFormat {
    /// `.y4m` files are Y4M, anything else is treated as a frame directory.
    pub fn infer(path: &Path) -> ClipFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("y4m") => ClipFormat::Y4m,
            _ => ClipFormat::FrameDirectory,
        }
    }
}

/// Color conversion requested at load time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColorRequest {
    /// Whatever the file stores: mono → luma, RGB-tagged → RGB, YCbCr → RGB.
    #[default]
    Native,
    Luma,
    Rgb,
}

pub fn load_clip(path: &Path, format: ClipFormat) -> Result<VideoClip> {
    load_clip_as(path, format, ColorRequest::Native)
}

pub fn load_clip_as(path: &Path, format: ClipFormat, color: ColorRequest) -> Result<VideoClip> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "path does not exist"),
        ));
    }
    let clip = match format {
        ClipFormat::Y4m => y4m::read(path, color)?,
        ClipFormat::FrameDirectory => framedir::read(path)?,
    };
    Ok(match (color, clip.color) {
        (ColorRequest::Luma, ColorSpace::Rgb) => to_luma(&clip),
        (ColorRequest::Rgb, ColorSpace::Luma) => {
            let data = clip.data.iter().flat_map(|&v| [v, v, v]).collect();
            VideoClip { color: ColorSpace::Rgb, data, ..clip }
        }
        _ => clip,
    })
}

pub fn save_clip(clip: &VideoClip, path: &Path, format: ClipFormat) -> Result<PathBuf> {
    match format {
        ClipFormat::Y4m => y4m::write(clip, path)?,
        ClipFormat::FrameDirectory => framedir::write(clip, path)?,
    }
    Ok(path.to_path_buf())
}

/// Reads only the header of a stored clip: `(T, H, W, C)`.
pub fn probe_dims(path: &Path, format: ClipFormat) -> Result<(usize, usize, usize, usize)> {
    match format {
        ClipFormat::Y4m => y4m::probe(path),
        ClipFormat::FrameDirectory => framedir::read(path).map(|c| c.dims()),
    }
}

mod y4m {
    use super::*;

    const MAGIC: &str = "YUV4MPEG2";
    /// Tag marking a C444 stream whose planes are R, G, B rather than Y, Cb, Cr.
    const RGB_TAG: &str = "XCOLORSPACE=RGB";

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub(super) enum Chroma {
        Mono,
        C420,
        C444,
        C444Rgb,
    }

    #[derive(Debug)]
    pub(super) struct Header {
        pub width: usize,
        pub height: usize,
        pub rate: FrameRate,
        pub chroma: Chroma,
    }

    impl Header {
        fn frame_bytes(&self) -> usize {
            let luma = self.width * self.height;
            match self.chroma {
                Chroma::Mono => luma,
                Chroma::C420 => luma + 2 * self.width.div_ceil(2) * self.height.div_ceil(2),
                Chroma::C444 | Chroma::C444Rgb => 3 * luma,
            }
        }
    }

    pub(super) fn parse_header(line: &str) -> Result<Header> {
        let mut tokens = line.split_ascii_whitespace();
        if tokens.next() != Some(MAGIC) {
            return Err(Error::Y4m("missing YUV4MPEG2 signature".into()));
        }
        let (mut width, mut height) = (None, None);
        let mut rate = FrameRate::default();
        let mut chroma = Chroma::C420;
        let mut rgb_tag = false;
        for tok in tokens {
            let (key, val) = tok.split_at(1);
            match key {
                "W" => width = Some(parse_num(val, "W")?),
                "H" => height = Some(parse_num(val, "H")?),
                "F" => {
                    let (n, d) = val
                        .split_once(':')
                        .ok_or_else(|| Error::Y4m(format!("bad frame rate `{val}`")))?;
                    rate = FrameRate::new(parse_num(n, "F")? as u32, parse_num(d, "F")? as u32);
                }
                "C" => {
                    chroma = if val.starts_with("420") {
                        Chroma::C420
                    } else if val == "444" {
                        Chroma::C444
                    } else if val == "mono" {
                        Chroma::Mono
                    } else {
                        return Err(Error::Y4m(format!("unsupported colorspace C{val}")));
                    }
                }
                "X" if tok == RGB_TAG => rgb_tag = true,
                "I" | "A" | "X" => {}
                _ => return Err(Error::Y4m(format!("unknown header token `{tok}`"))),
            }
        }
        if rgb_tag && chroma == Chroma::C444 {
            chroma = Chroma::C444Rgb;
        }
        Ok(Header {
            width: width.ok_or_else(|| Error::Y4m("missing W".into()))?,
            height: height.ok_or_else(|| Error::Y4m("missing H".into()))?,
            rate,
            chroma,
        })
    }

    fn parse_num(s: &str, what: &str) -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Y4m(format!("bad {what} value `{s}`")))
    }

    fn read_line(r: &mut impl BufRead, path: &Path) -> Result<Option<String>> {
        let mut buf = Vec::new();
        let n = r.read_until(b'\n', &mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Ok(None);
        }
        if buf.last() != Some(&b'\n') {
            return Err(Error::Y4m("truncated header line".into()));
        }
        buf.pop();
        String::from_utf8(buf)
            .map(Some)
            .map_err(|_| Error::Y4m("header is not ASCII".into()))
    }

    pub(super) fn probe(path: &Path) -> Result<(usize, usize, usize, usize)> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
        let mut r = BufReader::new(file);
        let line = read_line(&mut r, path)?.ok_or_else(|| Error::Y4m("empty file".into()))?;
        let header = parse_header(&line)?;
        // Only a plain `FRAME\n` marker is assumed here.
        let per_frame = header.frame_bytes() + 6;
        let frames = (len - line.len() - 1) / per_frame;
        let c = if header.chroma == Chroma::Mono { 1 } else { 3 };
        Ok((frames, header.height, header.width, c))
    }

    pub(super) fn read(path: &Path, color: ColorRequest) -> Result<VideoClip> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let line = read_line(&mut r, path)?.ok_or_else(|| Error::Y4m("empty file".into()))?;
        let header = parse_header(&line)?;
        let (w, h) = (header.width, header.height);
        let luma_only = header.chroma == Chroma::Mono
            || (color == ColorRequest::Luma && header.chroma != Chroma::C444Rgb);
        let out_color = if luma_only { ColorSpace::Luma } else { ColorSpace::Rgb };
        let mut data = Vec::new();
        let mut frame = vec![0u8; header.frame_bytes()];
        let mut frames = 0;
        while let Some(marker) = read_line(&mut r, path)? {
            if !marker.starts_with("FRAME") {
                return Err(Error::Y4m(format!("expected FRAME marker, got `{marker}`")));
            }
            r.read_exact(&mut frame)
                .map_err(|_| Error::Y4m(format!("frame {frames} is truncated")))?;
            decode_frame(&header, &frame, out_color, &mut data);
            frames += 1;
        }
        if frames == 0 {
            return Err(Error::NoFrames(path.to_path_buf()));
        }
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        VideoClip::new(id, frames, h, w, out_color, header.rate, data)
    }

    fn decode_frame(header: &Header, frame: &[u8], out: ColorSpace, dst: &mut Vec<u8>) {
        let (w, h) = (header.width, header.height);
        let luma = &frame[..w * h];
        if out == ColorSpace::Luma {
            dst.extend_from_slice(luma);
            return;
        }
        match header.chroma {
            Chroma::Mono => unreachable!("mono streams always decode to luma"),
            Chroma::C444Rgb => {
                let (g, b) = (&frame[w * h..2 * w * h], &frame[2 * w * h..]);
                for i in 0..w * h {
                    dst.extend_from_slice(&[luma[i], g[i], b[i]]);
                }
            }
            Chroma::C444 => {
                let (cb, cr) = (&frame[w * h..2 * w * h], &frame[2 * w * h..]);
                for i in 0..w * h {
                    dst.extend_from_slice(&ycbcr_to_rgb(luma[i], cb[i], cr[i]));
                }
            }
            Chroma::C420 => {
                let cw = w.div_ceil(2);
                let csz = cw * h.div_ceil(2);
                let (cb, cr) = (&frame[w * h..w * h + csz], &frame[w * h + csz..]);
                for y in 0..h {
                    for x in 0..w {
                        let ci = (y / 2) * cw + x / 2;
                        dst.extend_from_slice(&ycbcr_to_rgb(luma[y * w + x], cb[ci], cr[ci]));
                    }
                }
            }
        }
    }

    /// Full-range BT.601.
    fn ycbcr_to_rgb(y: u8, cb: u8, cr: u8) -> [u8; 3] {
        let (y, cb, cr) = (y as f64, cb as f64 - 128.0, cr as f64 - 128.0);
        let clamp = |v: f64| v.round().clamp(0.0, 255.0) as u8;
        [
            clamp(y + 1.402 * cr),
            clamp(y - 0.344_136 * cb - 0.714_136 * cr),
            clamp(y + 1.772 * cb),
        ]
    }

    pub(super) fn write(clip: &VideoClip, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let cs = match clip.color {
            ColorSpace::Luma => "Cmono".to_string(),
            ColorSpace::Rgb => format!("C444 {RGB_TAG}"),
        };
        let header = format!(
            "{MAGIC} W{} H{} F{}:{} Ip A1:1 {cs}\n",
            clip.width, clip.height, clip.frame_rate.num, clip.frame_rate.den
        );
        let io = |e| Error::io(path, e);
        w.write_all(header.as_bytes()).map_err(io)?;
        let plane = clip.width * clip.height;
        for t in 0..clip.frames {
            w.write_all(b"FRAME\n").map_err(io)?;
            let frame = clip.frame(t);
            match clip.color {
                ColorSpace::Luma => w.write_all(frame).map_err(io)?,
                ColorSpace::Rgb => {
                    for c in 0..3 {
                        let planar: Vec<u8> = (0..plane).map(|i| frame[i * 3 + c]).collect();
                        w.write_all(&planar).map_err(io)?;
                    }
                }
            }
        }
        w.flush().map_err(io)
    }
}

mod framedir {
    use super::*;

    const SIDECAR: &str = "clip.json";

    #[derive(Serialize, Deserialize)]
    struct Sidecar {
        clip_id: String,
        frame_rate: FrameRate,
    }

    pub(super) fn read(dir: &Path) -> Result<VideoClip> {
        let mut frames: Vec<(u64, PathBuf)> = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let is_png = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            let index = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<u64>().ok());
            if let (true, Some(index)) = (is_png, index) {
                frames.push((index, path));
            }
        }
        if frames.is_empty() {
            return Err(Error::NoFrames(dir.to_path_buf()));
        }
        frames.sort();

        let mut data = Vec::new();
        let mut geometry: Option<(u32, u32, ColorSpace)> = None;
        for (_, path) in &frames {
            let img = image::open(path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let color = match img.color() {
                image::ColorType::L8 | image::ColorType::L16 => ColorSpace::Luma,
                _ => ColorSpace::Rgb,
            };
            let g = (img.width(), img.height(), color);
            match geometry {
                None => geometry = Some(g),
                Some(prev) if prev != g => {
                    return Err(Error::InvalidClip(format!(
                        "inconsistent frame sizes: {} is {}x{} {:?}, expected {}x{} {:?}",
                        path.display(),
                        g.0,
                        g.1,
                        g.2,
                        prev.0,
                        prev.1,
                        prev.2
                    )))
                }
                _ => {}
            }
            match color {
                ColorSpace::Luma => data.extend_from_slice(img.to_luma8().as_raw()),
                ColorSpace::Rgb => data.extend_from_slice(img.to_rgb8().as_raw()),
            }
        }
        let (w, h, color) = geometry.expect("at least one frame");
        let sidecar: Option<Sidecar> = fs::read(dir.join(SIDECAR))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        let (clip_id, rate) = match sidecar {
            Some(s) => (s.clip_id, s.frame_rate),
            None => (
                dir.file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                FrameRate::default(),
            ),
        };
        VideoClip::new(clip_id, frames.len(), h as usize, w as usize, color, rate, data)
    }

    pub(super) fn write(clip: &VideoClip, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (w, h) = (clip.width as u32, clip.height as u32);
        for t in 0..clip.frames {
            let path = dir.join(format!("{t:06}.png"));
            let frame = clip.frame(t).to_vec();
            let res = match clip.color {
                ColorSpace::Luma => image::GrayImage::from_raw(w, h, frame)
                    .expect("frame size matches geometry")
                    .save(&path),
                ColorSpace::Rgb => image::RgbImage::from_raw(w, h, frame)
                    .expect("frame size matches geometry")
                    .save(&path),
            };
            res.map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
        }
        let sidecar = Sidecar {
            clip_id: clip.clip_id.clone(),
            frame_rate: clip.frame_rate,
        };
        let path = dir.join(SIDECAR);
        fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_clip(t: usize, h: usize, w: usize, color: ColorSpace) -> VideoClip {
        let c = color.channels();
        let data = (0..t * h * w * c).map(|i| (i * 7 % 256) as u8).collect();
        VideoClip::new("ramp", t, h, w, color, FrameRate::default(), data).unwrap()
    }

    /// Minimal reader used as an oracle: header line, then `FRAME\n` + raw planes.
    fn oracle_y4m_luma(bytes: &[u8], w: usize, h: usize) -> Vec<Vec<u8>> {
        let mut pos = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        let mut frames = Vec::new();
        while pos < bytes.len() {
            assert_eq!(&bytes[pos..pos + 6], b"FRAME\n");
            pos += 6;
            frames.push(bytes[pos..pos + w * h].to_vec());
            pos += w * h + 2 * (w / 2) * (h / 2);
        }
        frames
    }

    #[test]
    fn handcrafted_y4m_bytes_are_recovered() {
        let (w, h) = (8, 8);
        let mut bytes = b"YUV4MPEG2 W8 H8 F25:1 Ip A1:1 C420jpeg\n".to_vec();
        for f in 0..2u8 {
            bytes.extend_from_slice(b"FRAME\n");
            bytes.extend((0..64u8).map(|i| i.wrapping_mul(3).wrapping_add(f * 101)));
            bytes.extend(std::iter::repeat_n(128u8, 32));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hand.y4m");
        fs::write(&path, &bytes).unwrap();

        let expected = oracle_y4m_luma(&bytes, w, h);
        let clip = load_clip_as(&path, ClipFormat::Y4m, ColorRequest::Luma).unwrap();
        assert_eq!(clip.dims(), (2, 8, 8, 1));
        assert_eq!(clip.frame_rate, FrameRate::new(25, 1));
        for (t, frame) in expected.iter().enumerate() {
            assert_eq!(clip.frame(t), &frame[..]);
        }
        // Neutral chroma decodes to gray RGB.
        let rgb = load_clip(&path, ClipFormat::Y4m).unwrap();
        assert_eq!(rgb.channels(), 3);
        assert_eq!(rgb.sample(1, 2, 3, 0), expected[1][2 * 8 + 3]);
        assert_eq!(rgb.sample(1, 2, 3, 2), expected[1][2 * 8 + 3]);
    }

    #[test]
    fn chroma_420_is_replicated() {
        let mut bytes = b"YUV4MPEG2 W8 H8 F30:1 C420\nFRAME\n".to_vec();
        bytes.extend(std::iter::repeat_n(100u8, 64));
        // Cb plane: one distinct value per 2x2 block; Cr neutral.
        bytes.extend((0..16u8).map(|i| 120 + i));
        bytes.extend(std::iter::repeat_n(128u8, 16));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.y4m");
        fs::write(&path, &bytes).unwrap();
        let clip = load_clip_as(&path, ClipFormat::Y4m, ColorRequest::Rgb).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let cb = 120.0 + ((y / 2) * 4 + x / 2) as f64 - 128.0;
                let blue = (100.0 + 1.772 * cb).round() as u8;
                assert_eq!(clip.sample(0, y, x, 2), blue, "({x},{y})");
            }
        }
    }

    #[test]
    fn tiny_y4m_violates_minimum_size() {
        let mut bytes = b"YUV4MPEG2 W4 H4 F25:1 Cmono\n".to_vec();
        bytes.extend_from_slice(b"FRAME\n");
        bytes.extend([0u8; 16]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.y4m");
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_clip(&path, ClipFormat::Y4m), Err(Error::InvalidClip(_))));
    }

    #[test]
    fn malformed_header_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.y4m");
        fs::write(&path, b"YUV4MPEG W8 H8\n").unwrap();
        assert!(matches!(load_clip(&path, ClipFormat::Y4m), Err(Error::Y4m(_))));
        fs::write(&path, b"YUV4MPEG2 W8 H8 Cmono\nFRAME\n\x01\x02").unwrap();
        assert!(matches!(load_clip(&path, ClipFormat::Y4m), Err(Error::Y4m(_))));
        fs::write(&path, b"YUV4MPEG2 W8 Cmono\n").unwrap();
        assert!(matches!(load_clip(&path, ClipFormat::Y4m), Err(Error::Y4m(_))));
    }

    #[test]
    fn missing_path_is_an_error() {
        let err = load_clip(Path::new("/nonexistent/clip.y4m"), ClipFormat::Y4m).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn empty_directory_has_no_frames() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_clip(dir.path(), ClipFormat::FrameDirectory).unwrap_err();
        assert!(err.to_string().contains("no frames found"));
    }

    #[test]
    fn frame_directory_shape_echo() {
        let dir = tempfile::tempdir().unwrap();
        let clip = ramp_clip(12, 256, 256, ColorSpace::Rgb);
        save_clip(&clip, dir.path(), ClipFormat::FrameDirectory).unwrap();
        assert!(dir.path().join("000011.png").exists());
        let back = load_clip(dir.path(), ClipFormat::FrameDirectory).unwrap();
        assert_eq!(back.dims(), (12, 256, 256, 3));
        assert_eq!(back, clip);
    }

    #[test]
    fn luma_frame_directory_is_grayscale() {
        let dir = tempfile::tempdir().unwrap();
        let clip = ramp_clip(2, 16, 24, ColorSpace::Luma);
        save_clip(&clip, dir.path(), ClipFormat::FrameDirectory).unwrap();
        let img = image::open(dir.path().join("000000.png")).unwrap();
        assert_eq!(img.color(), image::ColorType::L8);
        assert_eq!(load_clip(dir.path(), ClipFormat::FrameDirectory).unwrap(), clip);
    }

    #[test]
    fn inconsistent_frame_sizes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        image::GrayImage::new(16, 16).save(dir.path().join("000000.png")).unwrap();
        image::GrayImage::new(16, 8).save(dir.path().join("000001.png")).unwrap();
        let err = load_clip(dir.path(), ClipFormat::FrameDirectory).unwrap_err();
        assert!(err.to_string().contains("inconsistent frame sizes"));
    }

    #[test]
    fn y4m_round_trip_both_color_spaces() {
        let dir = tempfile::tempdir().unwrap();
        for color in [ColorSpace::Luma, ColorSpace::Rgb] {
            let clip = ramp_clip(3, 10, 14, color);
            let path = dir.path().join(format!("{color:?}.y4m"));
            save_clip(&clip, &path, ClipFormat::Y4m).unwrap();
            let back = load_clip(&path, ClipFormat::Y4m).unwrap();
            assert_eq!(back.samples(), clip.samples());
            assert_eq!(back.dims(), clip.dims());
            assert_eq!(probe_dims(&path, ClipFormat::Y4m).unwrap(), clip.dims());
        }
    }

    #[test]
    fn luma_weights() {
        let white = VideoClip::new("w", 1, 8, 8, ColorSpace::Rgb, FrameRate::default(), vec![255; 192]).unwrap();
        assert!(to_luma(&white).samples().iter().all(|&v| v == 255));
        let red: Vec<u8> = (0..64).flat_map(|_| [255u8, 0, 0]).collect();
        let red = VideoClip::new("r", 1, 8, 8, ColorSpace::Rgb, FrameRate::default(), red).unwrap();
        let expected = (0.299f64 * 255.0).round() as u8;
        assert_eq!(expected, 76);
        assert!(to_luma(&red).samples().iter().all(|&v| v == expected));
        for v in 0..=255u8 {
            assert_eq!(rgb_to_luma(v, v, v), v);
        }
    }

    #[test]
    fn to_luma_on_luma_is_identity() {
        let clip = ramp_clip(1, 8, 8, ColorSpace::Luma);
        assert_eq!(to_luma(&clip), clip);
    }

    #[test]
    fn copatch_full_extent_and_bounds() {
        let a = ramp_clip(4, 16, 16, ColorSpace::Luma);
        let b = VideoClip::new(
            "b",
            4,
            16,
            16,
            ColorSpace::Luma,
            FrameRate::default(),
            a.samples().iter().map(|v| v.wrapping_add(1)).collect(),
        )
        .unwrap();
        let shape = PatchShape::new(4, 16, 16);
        let (pa, pb) = crop_copatch(&a, &b, 0, 0, 0, shape).unwrap();
        assert_eq!(pa.samples(), a.samples());
        assert_eq!(pb.samples(), b.samples());
        assert_eq!(pa.origin.x, pb.origin.x);
        assert!(matches!(
            crop_copatch(&a, &b, 1, 0, 0, shape),
            Err(Error::OutOfBounds(_))
        ));
        let c = ramp_clip(4, 16, 24, ColorSpace::Luma);
        assert!(matches!(
            crop_copatch(&a, &c, 0, 0, 0, shape),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn patch_shape_limits() {
        assert!(PatchShape::new(1, 64, 64).validate().is_err());
        assert!(PatchShape::new(2, 8, 64).validate().is_err());
        assert!(PatchShape::new(2, 16, 16).validate().is_ok());
        assert_eq!(PatchShape::default(), PatchShape::new(12, 256, 256));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn copatch_on_identical_clips_is_identical(x in 0usize..=16, y in 0usize..=8, t0 in 0usize..=3) {
                let clip = ramp_clip(5, 24, 32, ColorSpace::Rgb);
                let (a, b) = crop_copatch(&clip, &clip, x, y, t0, PatchShape::new(2, 16, 16)).unwrap();
                prop_assert_eq!(a.samples(), b.samples());
                prop_assert_eq!(a.origin, b.origin);
            }

            #[test]
            fn y4m_round_trip_is_exact(seed in any::<u64>(), t in 1usize..4, rgb in any::<bool>()) {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let color = if rgb { ColorSpace::Rgb } else { ColorSpace::Luma };
                let data = (0..t * 8 * 12 * color.channels()).map(|_| rng.gen()).collect();
                let clip = VideoClip::new("p", t, 8, 12, color, FrameRate::new(24, 1), data).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("p.y4m");
                save_clip(&clip, &path, ClipFormat::Y4m).unwrap();
                prop_assert_eq!(load_clip(&path, ClipFormat::Y4m).unwrap(), clip);
            }
        }
    }
}
