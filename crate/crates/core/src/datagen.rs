//! Synthetic text-video corpus: hard-edged coloured shapes moving on a black
//! background, attribute-token prompts, a binary clip container, PPM export
//! and an attribute probe used to judge edits.
//!
//! Prompt vocabulary (id 0 is the null / unconditional token):
//!
//! | ids   | slot   | values                          |
//! |-------|--------|---------------------------------|
//! | 1–4   | colour | red, green, blue, yellow        |
//! | 5–7   | shape  | square, circle, triangle        |
//! | 8–12  | motion | static, right, left, up, down   |
//!
//! Single-frame pretraining prompts put the null id in the motion slot.

use std::f64::consts::FRAC_PI_4;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

pub const NULL_TOKEN: usize = 0;
pub const PROMPT_LEN: usize = 3;
pub const VOCAB_SIZE: usize = 1 + 4 + 3 + 5;

/// Foreground luminance threshold of the probe.
pub const FOREGROUND_LUMA: f64 = 0.1;
/// Centroid displacement (px/frame) below which a clip counts as static.
pub const MOTION_DEAD_BAND: f64 = 0.25;
pub const DEFAULT_OBJECT_SIZE: usize = 8;

pub const VIDEO_MAGIC: &[u8; 8] = b"SAVEVID1";
/// Upper bound on the element count accepted when reading a clip.
pub const MAX_CLIP_ELEMENTS: usize = 1 << 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Motion {
    Static,
    Right,
    Left,
    Up,
    Down,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }

    pub fn token(self) -> usize {
        1 + Color::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn token(self) -> usize {
        5 + Shape::ALL.iter().position(|&s| s == self).unwrap()
    }

    /// Nominal fill ratio of the bounding box.
    pub fn fill_ratio(self) -> f64 {
        match self {
            Shape::Square => 1.0,
            Shape::Circle => FRAC_PI_4,
            Shape::Triangle => 0.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

impl Motion {
    pub const ALL: [Motion; 5] = [Motion::Static, Motion::Right, Motion::Left, Motion::Up, Motion::Down];

    pub fn token(self) -> usize {
        8 + Motion::ALL.iter().position(|&m| m == self).unwrap()
    }

    /// Per-frame step in `(dx, dy)`; `dy` grows downward.
    pub fn direction(self) -> (i64, i64) {
        match self {
            Motion::Static => (0, 0),
            Motion::Right => (1, 0),
            Motion::Left => (-1, 0),
            Motion::Up => (0, -1),
            Motion::Down => (0, 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Motion::Static => "static",
            Motion::Right => "right",
            Motion::Left => "left",
            Motion::Up => "up",
            Motion::Down => "down",
        }
    }
}

macro_rules! name_parse {
    ($t:ty, $what:literal) => {
        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                <$t>::ALL
                    .into_iter()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| invalid(format!(concat!("unknown ", $what, " {:?}"), s)))
            }
        }

        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

name_parse!(Color, "colour");
name_parse!(Shape, "shape");
name_parse!(Motion, "motion");

/// Token ids for one prompt; id 0 is the null token.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PromptTokens(pub Vec<usize>);

impl PromptTokens {
    pub fn null(len: usize) -> Self {
        Self(vec![NULL_TOKEN; len])
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn image(color: Color, shape: Shape) -> Self {
        Self(vec![color.token(), shape.token(), NULL_TOKEN])
    }

    /// Parses `"red square right"` (motion optional).
    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        match words.as_slice() {
            [c, s] => Ok(Self::image(c.parse()?, s.parse()?)),
            [c, s, m] => Ok(Self(vec![
                c.parse::<Color>()?.token(),
                s.parse::<Shape>()?.token(),
                m.parse::<Motion>()?.token(),
            ])),
            _ => Err(invalid(format!("prompt {text:?} needs 'colour shape [motion]'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub color: Color,
    pub shape: Shape,
    pub motion: Motion,
    /// Top-left corner of the bounding box in frame 0 (column, row).
    pub x: i64,
    pub y: i64,
    pub size: usize,
    pub speed: i64,
}

impl SceneSpec {
    /// "red square moving right" on a 16×16 canvas.
    pub fn demo() -> Self {
        Self {
            color: Color::Red,
            shape: Shape::Square,
            motion: Motion::Right,
            x: 1,
            y: 4,
            size: DEFAULT_OBJECT_SIZE,
            speed: 1,
        }
    }

    fn origin(&self, frame: usize) -> (i64, i64) {
        let (dx, dy) = self.motion.direction();
        let step = self.speed * frame as i64;
        (self.x + dx * step, self.y + dy * step)
    }

    /// Checks the object stays fully inside `w × h` for all `f` frames.
    pub fn validate(&self, f: usize, h: usize, w: usize) -> Result<()> {
        if self.size == 0 || f == 0 {
            return Err(invalid("scene needs a positive size and frame count"));
        }
        let s = self.size as i64;
        for frame in [0, f - 1] {
            let (x, y) = self.origin(frame);
            if x < 0 || y < 0 || x + s > w as i64 || y + s > h as i64 {
                return Err(invalid(format!(
                    "object leaves the {w}x{h} frame at frame {frame} (origin {x},{y}, size {s})"
                )));
            }
        }
        Ok(())
    }
}

/// Whether the pixel `(row, col)` of an `s × s` box belongs to the shape.
fn shape_mask(shape: Shape, s: usize, row: usize, col: usize) -> bool {
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let r = s as f64 / 2.0;
            let dy = row as f64 + 0.5 - r;
            let dx = col as f64 + 0.5 - r;
            dx * dx + dy * dy <= r * r
        }
        // lower-left right triangle
        Shape::Triangle => col <= row,
    }
}

/// Frame-major `F × C × H × W` clip with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub f: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl VideoClip {
    pub fn zeros(f: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            f,
            c,
            h,
            w,
            data: vec![0.0; f * c * h * w],
        }
    }

    pub fn from_data(f: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != f * c * h * w {
            return Err(invalid(format!(
                "clip {f}x{c}x{h}x{w} needs {} values, got {}",
                f * c * h * w,
                data.len()
            )));
        }
        Ok(Self { f, c, h, w, data })
    }

    /// Clamps arbitrary values into `[0, 1]`.
    pub fn from_latent(f: usize, c: usize, h: usize, w: usize, latent: &[f64]) -> Result<Self> {
        Self::from_data(f, c, h, w, latent.iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    #[inline]
    pub fn index(&self, f: usize, c: usize, y: usize, x: usize) -> usize {
        ((f * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, f: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(f, c, y, x)]
    }

    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn frame(&self, f: usize) -> VideoClip {
        let n = self.frame_len();
        VideoClip {
            f: 1,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data[f * n..(f + 1) * n].to_vec(),
        }
    }

    /// Repeats a single frame `frames` times.
    pub fn repeat(&self, frames: usize) -> VideoClip {
        let mut data = Vec::with_capacity(self.data.len() * frames);
        for _ in 0..frames {
            data.extend_from_slice(&self.data);
        }
        VideoClip {
            f: self.f * frames,
            c: self.c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn mse(&self, other: &VideoClip) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / self.data.len() as f64
    }

    fn rgb(&self, f: usize, y: usize, x: usize) -> [f64; 3] {
        let ch = |c: usize| if c < self.c { self.get(f, c, y, x) } else { self.get(f, 0, y, x) };
        [ch(0), ch(1), ch(2)]
    }
}

pub fn render_video(spec: &SceneSpec, f: usize, h: usize, w: usize) -> Result<VideoClip> {
    spec.validate(f, h, w)?;
    let mut clip = VideoClip::zeros(f, 3, h, w);
    let rgb = spec.color.rgb();
    for frame in 0..f {
        let (ox, oy) = spec.origin(frame);
        for row in 0..spec.size {
            for col in 0..spec.size {
                if !shape_mask(spec.shape, spec.size, row, col) {
                    continue;
                }
                let (y, x) = ((oy + row as i64) as usize, (ox + col as i64) as usize);
                for (c, &v) in rgb.iter().enumerate() {
                    let i = clip.index(frame, c, y, x);
                    clip.data[i] = v;
                }
            }
        }
    }
    Ok(clip)
}

pub fn prompt_tokens(spec: &SceneSpec) -> PromptTokens {
    PromptTokens(vec![spec.color.token(), spec.shape.token(), spec.motion.token()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub color: Color,
    /// Share of foreground pixels whose nearest palette colour agrees.
    pub color_confidence: f64,
    pub shape: Shape,
    /// Mean bounding-box fill ratio over frames with foreground.
    pub fill_ratio: f64,
    pub motion: Motion,
    /// Mean frame-to-frame centroid displacement `(dx, dy)` in pixels.
    pub displacement: (f64, f64),
    /// Colour of each frame's foreground, `None` where a frame is empty.
    pub frame_colors: Vec<Option<Color>>,
}

impl Probe {
    /// Fraction of frames whose colour matches `target`.
    pub fn color_fraction(&self, target: Color) -> f64 {
        let hits = self.frame_colors.iter().filter(|c| **c == Some(target)).count();
        hits as f64 / self.frame_colors.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProbeOutcome {
    Empty,
    Detected(Probe),
}

impl ProbeOutcome {
    pub fn detected(&self) -> Option<&Probe> {
        match self {
            ProbeOutcome::Detected(p) => Some(p),
            ProbeOutcome::Empty => None,
        }
    }
}

fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn nearest_color(rgb: [f64; 3]) -> Color {
    let dist = |c: Color| {
        let p = c.rgb();
        (0..3).map(|i| (rgb[i] - p[i]).powi(2)).sum::<f64>()
    };
    Color::ALL
        .into_iter()
        .min_by(|a, b| dist(*a).total_cmp(&dist(*b)))
        .unwrap()
}

fn nearest_shape(ratio: f64) -> Shape {
    Shape::ALL
        .into_iter()
        .min_by(|a, b| (a.fill_ratio() - ratio).abs().total_cmp(&(b.fill_ratio() - ratio).abs()))
        .unwrap()
}

struct FrameStats {
    sum_rgb: [f64; 3],
    count: usize,
    centroid: (f64, f64),
    fill: f64,
}

fn frame_stats(clip: &VideoClip, f: usize) -> Option<FrameStats> {
    let mut sum_rgb = [0.0; 3];
    let (mut count, mut sx, mut sy) = (0usize, 0.0, 0.0);
    let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..clip.h {
        for x in 0..clip.w {
            let rgb = clip.rgb(f, y, x);
            if luminance(rgb) <= FOREGROUND_LUMA {
                continue;
            }
            for i in 0..3 {
                sum_rgb[i] += rgb[i];
            }
            count += 1;
            sx += x as f64;
            sy += y as f64;
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if count == 0 {
        return None;
    }
    let area = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    Some(FrameStats {
        sum_rgb,
        count,
        centroid: (sx / count as f64, sy / count as f64),
        fill: count as f64 / area,
    })
}

/// Estimates colour, shape and motion of a clip.
pub fn attribute_probe(clip: &VideoClip) -> ProbeOutcome {
    let stats: Vec<Option<FrameStats>> = (0..clip.f).map(|f| frame_stats(clip, f)).collect();
    let present: Vec<&FrameStats> = stats.iter().flatten().collect();
    if present.is_empty() {
        return ProbeOutcome::Empty;
    }

    let total: usize = present.iter().map(|s| s.count).sum();
    let mut mean = [0.0; 3];
    for s in &present {
        for i in 0..3 {
            mean[i] += s.sum_rgb[i];
        }
    }
    for m in &mut mean {
        *m /= total as f64;
    }
    let color = nearest_color(mean);

    let mut agree = 0usize;
    for f in 0..clip.f {
        for y in 0..clip.h {
            for x in 0..clip.w {
                let rgb = clip.rgb(f, y, x);
                if luminance(rgb) > FOREGROUND_LUMA && nearest_color(rgb) == color {
                    agree += 1;
                }
            }
        }
    }

    let fill_ratio = present.iter().map(|s| s.fill).sum::<f64>() / present.len() as f64;

    let frame_colors = stats
        .iter()
        .map(|s| {
            s.as_ref().map(|s| {
                let n = s.count as f64;
                nearest_color([s.sum_rgb[0] / n, s.sum_rgb[1] / n, s.sum_rgb[2] / n])
            })
        })
        .collect();

    let (mut dx, mut dy, mut pairs) = (0.0, 0.0, 0usize);
    for w in stats.windows(2) {
        if let (Some(a), Some(b)) = (&w[0], &w[1]) {
            dx += b.centroid.0 - a.centroid.0;
            dy += b.centroid.1 - a.centroid.1;
            pairs += 1;
        }
    }
    if pairs > 0 {
        dx /= pairs as f64;
        dy /= pairs as f64;
    }
    let motion = if dx.abs().max(dy.abs()) < MOTION_DEAD_BAND {
        Motion::Static
    } else if dx.abs() >= dy.abs() {
        if dx > 0.0 {
            Motion::Right
        } else {
            Motion::Left
        }
    } else if dy > 0.0 {
        Motion::Down
    } else {
        Motion::Up
    };

    ProbeOutcome::Detected(Probe {
        color,
        color_confidence: agree as f64 / total as f64,
        shape: nearest_shape(fill_ratio),
        fill_ratio,
        motion,
        displacement: (dx, dy),
        frame_colors,
    })
}

pub fn encode_clip(clip: &VideoClip) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + clip.data.len() * 4);
    out.extend_from_slice(VIDEO_MAGIC);
    for d in [clip.f, clip.c, clip.h, clip.w] {
        let d = u32::try_from(d).map_err(|_| Error::DimOverflow(format!("clip dim {d}")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in &clip.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_clip(bytes: &[u8]) -> Result<VideoClip> {
    if bytes.len() < 8 {
        return Err(Error::Truncated("clip header".into()));
    }
    if &bytes[..8] != VIDEO_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(VIDEO_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    if bytes.len() < 24 {
        return Err(Error::Truncated("clip dimensions".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (f, c, h, w) = (dim(0), dim(1), dim(2), dim(3));
    let count = [f, c, h, w]
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_CLIP_ELEMENTS)
        .ok_or_else(|| Error::DimOverflow(format!("clip {f}x{c}x{h}x{w} is too large")))?;
    let payload = &bytes[24..];
    if payload.len() < count * 4 {
        return Err(Error::Truncated(format!(
            "clip payload has {} of {} bytes",
            payload.len(),
            count * 4
        )));
    }
    if payload.len() > count * 4 {
        return Err(Error::Malformed("trailing bytes after clip payload".into()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    VideoClip::from_data(f, c, h, w, data)
}

pub fn write_clip(clip: &VideoClip, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_clip(clip)?)?;
    Ok(())
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<VideoClip> {
    decode_clip(&fs::read(path)?)
}

/// Writes each frame as binary PPM (`P6`, 8-bit) named `{stem}_{frame:03}.ppm`.
pub fn export_ppm(clip: &VideoClip, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(clip.f);
    for f in 0..clip.f {
        let path = dir.join(format!("{stem}_{f:03}.ppm"));
        let mut buf = format!("P6\n{} {}\n255\n", clip.w, clip.h).into_bytes();
        for y in 0..clip.h {
            for x in 0..clip.w {
                for v in clip.rgb(f, y, x) {
                    buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        fs::File::create(&path)?.write_all(&buf)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Every (colour, shape) pair at `per_pair` random valid positions, as
/// single-frame clips with image prompts.
pub fn image_corpus(per_pair: usize, h: usize, w: usize, size: usize, seed: u64) -> Result<Vec<(VideoClip, PromptTokens)>> {
    if size > h || size > w {
        return Err(invalid(format!("object size {size} exceeds {w}x{h}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_pair * 12);
    for color in Color::ALL {
        for shape in Shape::ALL {
            for _ in 0..per_pair {
                let spec = SceneSpec {
                    color,
                    shape,
                    motion: Motion::Static,
                    x: rng.random_range(0..=(w - size) as i64),
                    y: rng.random_range(0..=(h - size) as i64),
                    size,
                    speed: 0,
                };
                out.push((render_video(&spec, 1, h, w)?, PromptTokens::image(color, shape)));
            }
        }
    }
    Ok(out)
}

/// One manifest line: relative path followed by the prompt ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub prompt: PromptTokens,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| {
            let ids: Vec<String> = e.prompt.ids().iter().map(usize::to_string).collect();
            format!("{} {}\n", e.path, ids.join(" "))
        })
        .collect()
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let path = parts.next().unwrap().to_owned();
        let ids = parts
            .map(|t| {
                t.parse::<usize>()
                    .ok()
                    .filter(|&id| id < VOCAB_SIZE)
                    .ok_or_else(|| invalid(format!("manifest line {}: bad token {t:?}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.len() != PROMPT_LEN {
            return Err(invalid(format!(
                "manifest line {}: expected {PROMPT_LEN} tokens, got {}",
                lineno + 1,
                ids.len()
            )));
        }
        out.push(ManifestEntry {
            path,
            prompt: PromptTokens(ids),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_specs() -> Vec<SceneSpec> {
        let mut v = Vec::new();
        for color in Color::ALL {
            for shape in Shape::ALL {
                for motion in Motion::ALL {
                    let (x, y) = match motion {
                        Motion::Left => (8, 4),
                        Motion::Up => (4, 8),
                        _ => (0, 0),
                    };
                    v.push(SceneSpec {
                        color,
                        shape,
                        motion,
                        x,
                        y,
                        size: DEFAULT_OBJECT_SIZE,
                        speed: 1,
                    });
                }
            }
        }
        v
    }

    #[test]
    fn static_frames_identical() {
        let spec = SceneSpec {
            motion: Motion::Static,
            ..SceneSpec::demo()
        };
        let clip = render_video(&spec, 5, 16, 16).unwrap();
        for f in 1..5 {
            assert_eq!(clip.frame(f), clip.frame(0));
        }
    }

    #[test]
    fn rightward_centroid_advances_one_pixel() {
        let clip = render_video(&SceneSpec::demo(), 8, 16, 16).unwrap();
        let cx: Vec<f64> = (0..8).map(|f| frame_stats(&clip, f).unwrap().centroid.0).collect();
        for w in cx.windows(2) {
            assert_eq!(w[1] - w[0], 1.0);
        }
    }

    #[test]
    fn red_square_pixels_are_pure_red() {
        let clip = render_video(&SceneSpec::demo(), 2, 16, 16).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let rgb = clip.rgb(0, y, x);
                assert!(rgb == [0.0; 3] || rgb == [1.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn out_of_bounds_trajectory_rejected() {
        let spec = SceneSpec { x: 6, ..SceneSpec::demo() };
        assert!(render_video(&spec, 8, 16, 16).is_err());
    }

    #[test]
    fn prompt_table() {
        let p = prompt_tokens(&SceneSpec::demo());
        assert_eq!(p.ids(), &[1, 5, 9]);
        let blue = SceneSpec {
            color: Color::Blue,
            ..SceneSpec::demo()
        };
        let q = prompt_tokens(&blue);
        assert_eq!(&q.ids()[1..], &p.ids()[1..]);
        assert_ne!(q.ids()[0], p.ids()[0]);
        assert_eq!(VOCAB_SIZE, 13);
        assert_eq!(PromptTokens::parse("red square right").unwrap(), p);
        assert_eq!(PromptTokens::parse("blue circle").unwrap().ids(), &[3, 6, 0]);
        assert!(PromptTokens::parse("purple square").is_err());
    }

    #[test]
    fn probe_self_consistent_on_every_spec() {
        for spec in all_specs() {
            let clip = render_video(&spec, 8, 16, 16).unwrap();
            let p = attribute_probe(&clip);
            let p = p.detected().expect("rendered clip has foreground");
            assert_eq!((p.color, p.shape, p.motion), (spec.color, spec.shape, spec.motion), "{spec:?} fill {}", p.fill_ratio);
            assert_eq!(p.color_fraction(spec.color), 1.0);
        }
    }

    #[test]
    fn probe_empty_and_static() {
        assert_eq!(attribute_probe(&VideoClip::zeros(3, 3, 8, 8)), ProbeOutcome::Empty);
        let spec = SceneSpec {
            motion: Motion::Static,
            ..SceneSpec::demo()
        };
        let p = attribute_probe(&render_video(&spec, 4, 16, 16).unwrap());
        assert_eq!(p.detected().unwrap().motion, Motion::Static);
    }

    #[test]
    fn clip_io_round_trip() {
        let one = VideoClip::from_data(1, 1, 1, 1, vec![0.375]).unwrap();
        assert_eq!(decode_clip(&encode_clip(&one).unwrap()).unwrap(), one);

        let bytes = encode_clip(&VideoClip::zeros(2, 3, 4, 5)).unwrap();
        let dims: Vec<u32> = (0..4)
            .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()))
            .collect();
        assert_eq!(dims, vec![2, 3, 4, 5]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|_| rng.random::<f64>()).collect();
        let clip = VideoClip::from_data(2, 3, 4, 5, data).unwrap();
        let back = decode_clip(&encode_clip(&clip).unwrap()).unwrap();
        for (a, b) in clip.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= a.abs() * 2f64.powi(-24));
        }
    }

    #[test]
    fn clip_io_failures() {
        let bytes = encode_clip(&VideoClip::zeros(1, 3, 2, 2)).unwrap();
        assert!(matches!(decode_clip(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(decode_clip(&bad), Err(Error::BadMagic { .. })));
        let mut huge = bytes;
        for b in &mut huge[8..24] {
            *b = 0xff;
        }
        assert!(matches!(decode_clip(&huge), Err(Error::DimOverflow(_))));
    }

    #[test]
    fn ppm_export_writes_one_file_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let clip = render_video(&SceneSpec::demo(), 3, 16, 16).unwrap();
        let paths = export_ppm(&clip, dir.path(), "demo").unwrap();
        assert_eq!(paths.len(), 3);
        let bytes = fs::read(&paths[0]).unwrap();
        assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
        assert_eq!(bytes.len(), 13 + 16 * 16 * 3);
    }

    #[test]
    fn manifest_round_trip() {
        let entries = vec![ManifestEntry {
            path: "images/000.vid".into(),
            prompt: PromptTokens(vec![1, 5, 0]),
        }];
        let text = format_manifest(&entries);
        assert_eq!(text, "images/000.vid 1 5 0\n");
        assert_eq!(parse_manifest(&text).unwrap(), entries);
        assert!(parse_manifest("a 1 2").is_err());
        assert!(parse_manifest("a 1 2 99").is_err());
    }

    #[test]
    fn corpus_covers_all_pairs() {
        let corpus = image_corpus(2, 16, 16, 8, 1).unwrap();
        assert_eq!(corpus.len(), 24);
        assert_eq!(corpus, image_corpus(2, 16, 16, 8, 1).unwrap());
    }
}
