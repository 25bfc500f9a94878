//! Procedural two-domain face-like video corpus and its on-disk layout.
//!
//! Real clips: smooth background, an elliptical face, two eye blobs whose
//! height follows the expression value, and a mouth arc whose curvature is
//! the expression value. Fakes are a real base plus one artifact:
//!
//! * family A: a rectangular colour-shifted patch blended with a soft seam;
//!   the fake equals its base exactly outside the rectangle.
//! * family B: a checkerboard tint over a facial sub-region, and a mouth
//!   whose expression jumps from frame to frame while the eyes keep the base
//!   expression.
//!
//! Pixels are quantised to multiples of 1/255 so that the PPM round trip is
//! lossless.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branches::Frame;
use crate::config::Domain;
use crate::detector::Label;
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const MIN_SIZE: usize = 16;

/// Which artifact families the corpus contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainMix {
    A,
    B,
    Both,
}

impl std::str::FromStr for DomainMix {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(DomainMix::A),
            "B" | "b" => Ok(DomainMix::B),
            "both" | "Both" => Ok(DomainMix::Both),
            _ => Err(Error::Config(format!("unknown domain {s:?}, expected A, B or both"))),
        }
    }
}

/// Axis-aligned region `(y0, x0, height, width)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.height && x >= self.x0 && x < self.x0 + self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactDescriptor {
    pub family: Domain,
    pub region: Region,
    pub strength: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub clip_id: String,
    pub frames: Vec<Frame>,
    pub label: Label,
    pub domain: Domain,
    /// Ground-truth expression per frame, in `[0, 1]`.
    pub expression: Vec<f64>,
    pub artifact: Option<ArtifactDescriptor>,
}

impl SyntheticClip {
    pub fn expression_mean(&self) -> f64 {
        self.expression.iter().sum::<f64>() / self.expression.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub clips: usize,
    pub frames: usize,
    pub size: usize,
    pub mix: DomainMix,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_SIZE {
            return Err(Error::Config(format!("frame size {} is below the minimum of {MIN_SIZE}", self.size)));
        }
        if self.clips < 2 {
            return Err(Error::Config(format!("need at least 2 clips for both labels, got {}", self.clips)));
        }
        if self.mix == DomainMix::Both && self.clips < 4 {
            return Err(Error::Config("a two-domain corpus needs at least 4 clips".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("clips need at least one frame".into()));
        }
        Ok(())
    }

    /// Label and domain of clip `i`: labels alternate, domains alternate in pairs.
    pub fn slot(&self, i: usize) -> (Label, Domain) {
        let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
        let domain = match self.mix {
            DomainMix::A => Domain::A,
            DomainMix::B => Domain::B,
            DomainMix::Both if (i / 2) % 2 == 0 => Domain::A,
            DomainMix::Both => Domain::B,
        };
        (label, domain)
    }
}

/// Generates the full corpus. Pure function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<SyntheticClip>> {
    spec.validate()?;
    (0..spec.clips).map(|i| generate_clip(spec, i).map(|(clip, _)| clip)).collect()
}

/// Generates clip `i` together with the frames of its real base.
pub fn generate_clip(spec: &CorpusSpec, i: usize) -> Result<(SyntheticClip, Vec<Frame>)> {
    spec.validate()?;
    let (label, domain) = spec.slot(i);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(i as u64);
    let face = FaceParams::sample(&mut rng, spec.size);
    let s = spec.size as f64;

    let e0 = rng.gen_range(0.15..0.85);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let expression: Vec<f64> = (0..spec.frames)
        .map(|t| (e0 + 0.06 * (phase + 0.7 * t as f64).sin()).clamp(0.0, 1.0))
        .collect();
    let jitter: Vec<(f64, f64)> = (0..spec.frames).map(|_| (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5))).collect();

    let clip_id = format!("{}_{i:05}", domain.to_string().to_ascii_lowercase());
    let base: Vec<Frame> = (0..spec.frames)
        .map(|t| face.render(spec.size, expression[t], expression[t], jitter[t], &clip_id, t))
        .collect::<Result<_>>()?;

    let (frames, artifact) = match label {
        Label::Real => (base.clone(), None),
        Label::Fake => {
            let strength = rng.gen_range(0.6..1.0);
            match domain {
                Domain::A => {
                    let h = rng.gen_range((0.22 * s) as usize..=(0.32 * s) as usize).max(4);
                    let w = rng.gen_range((0.25 * s) as usize..=(0.38 * s) as usize).max(4);
                    let region = Region {
                        y0: rng.gen_range((0.25 * s) as usize..=(0.7 * s) as usize - h.min((0.45 * s) as usize)),
                        x0: rng.gen_range((0.18 * s) as usize..=(0.82 * s) as usize - w.min((0.64 * s) as usize)),
                        height: h,
                        width: w,
                    };
                    let shift = [
                        rng.gen_range(0.12..0.22) * strength,
                        -rng.gen_range(0.05..0.15) * strength,
                        rng.gen_range(-0.1..0.1) * strength,
                    ];
                    let frames = base.iter().map(|f| blend_patch(f, region, shift)).collect::<Result<_>>()?;
                    (frames, Some(ArtifactDescriptor { family: Domain::A, region, strength }))
                }
                Domain::B => {
                    let h = ((0.3 * s) as usize).max(4);
                    let w = ((0.4 * s) as usize).max(4);
                    let region = Region {
                        y0: (face.cy + 0.05 * s).round().clamp(0.0, s - h as f64) as usize,
                        x0: (face.cx - 0.5 * w as f64).round().clamp(0.0, s - w as f64) as usize,
                        height: h,
                        width: w,
                    };
                    let amp = 0.16 * strength;
                    let frames = (0..spec.frames)
                        .map(|t| {
                            let shown = (expression[t] + rng.gen_range(0.25..0.5) * if rng.gen::<bool>() { 1.0 } else { -1.0 }).clamp(0.0, 1.0);
                            let f = face.render(spec.size, expression[t], shown, jitter[t], &clip_id, t)?;
                            checkerboard(&f, region, amp)
                        })
                        .collect::<Result<_>>()?;
                    (frames, Some(ArtifactDescriptor { family: Domain::B, region, strength }))
                }
            }
        }
    };
    Ok((
        SyntheticClip {
            clip_id,
            frames,
            label,
            domain,
            expression,
            artifact,
        },
        base,
    ))
}

fn quantise(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

#[derive(Clone, Debug)]
struct FaceParams {
    background: [f64; 3],
    gradient: [f64; 3],
    skin: [f64; 3],
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl FaceParams {
    fn sample<R: Rng>(rng: &mut R, size: usize) -> Self {
        let s = size as f64;
        let mut c = || [rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5)];
        let background = c();
        let gradient = c().map(|g| g * 0.4);
        let skin = [rng.gen_range(0.6..0.85), rng.gen_range(0.45..0.65), rng.gen_range(0.35..0.55)];
        Self {
            background,
            gradient,
            skin,
            cx: s * rng.gen_range(0.47..0.53),
            cy: s * rng.gen_range(0.47..0.53),
            rx: s * rng.gen_range(0.33..0.38),
            ry: s * rng.gen_range(0.4..0.45),
        }
    }

    /// `eyes` drives eye height, `mouth` the mouth curvature.
    fn render(&self, size: usize, eyes: f64, mouth: f64, jitter: (f64, f64), clip_id: &str, index: usize) -> Result<Frame> {
        let s = size as f64;
        let (cx, cy) = (self.cx + jitter.0, self.cy + jitter.1);
        let eye_rx = 0.06 * s;
        let eye_ry = 0.05 * s * (1.3 - 0.8 * eyes);
        let eye_y = cy - 0.12 * s;
        let mouth_y = cy + 0.2 * s;
        let curvature = (mouth - 0.5) * 2.4 / s;
        let half_w = 0.18 * s;
        let mut pixels = vec![0.0; CHANNELS * size * size];
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let ramp = (fx + fy) / (2.0 * s);
                let d = ((fx - cx) / self.rx).powi(2) + ((fy - cy) / self.ry).powi(2);
                let face = 1.0 - smoothstep(0.85, 1.05, d);
                let mut dark = 0.0_f64;
                for ex in [cx - 0.15 * s, cx + 0.15 * s] {
                    let e = ((fx - ex) / eye_rx).powi(2) + ((fy - eye_y) / eye_ry).powi(2);
                    dark = dark.max(1.0 - smoothstep(0.6, 1.0, e));
                }
                let dx = fx - cx;
                if dx.abs() <= half_w {
                    let arc = mouth_y - curvature * (half_w * half_w - dx * dx) / half_w;
                    dark = dark.max(1.0 - smoothstep(0.6, 1.4, (fy - arc).abs()));
                }
                for c in 0..CHANNELS {
                    let bg = self.background[c] + self.gradient[c] * ramp;
                    let skin = self.skin[c] * (1.0 - 0.75 * dark);
                    pixels[(c * size + y) * size + x] = quantise(bg * (1.0 - face) + skin * face);
                }
            }
        }
        Frame::new(clip_id, index, CHANNELS, size, size, pixels)
    }
}

/// Colour-shifted patch whose weight is 1 inside and falls to 0 over a
/// 2-pixel seam at the rectangle border; untouched outside.
fn blend_patch(f: &Frame, r: Region, shift: [f64; 3]) -> Result<Frame> {
    let mut out = f.clone();
    for y in r.y0..(r.y0 + r.height).min(f.height) {
        for x in r.x0..(r.x0 + r.width).min(f.width) {
            let edge = (y - r.y0).min(r.y0 + r.height - 1 - y).min(x - r.x0).min(r.x0 + r.width - 1 - x);
            let alpha = ((edge + 1) as f64 / 3.0).min(1.0);
            for (c, s) in shift.iter().enumerate() {
                let i = (c * f.height + y) * f.width + x;
                out.pixels[i] = quantise(f.pixels[i] + alpha * s);
            }
        }
    }
    Ok(out)
}

/// Brightens alternate pixels of `r` by `amp`.
fn checkerboard(f: &Frame, r: Region, amp: f64) -> Result<Frame> {
    let mut out = f.clone();
    for y in r.y0..(r.y0 + r.height).min(f.height) {
        for x in r.x0..(r.x0 + r.width).min(f.width) {
            if (x + y) % 2 == 0 {
                for c in 0..f.channels {
                    let i = (c * f.height + y) * f.width + x;
                    out.pixels[i] = quantise(f.pixels[i] + amp);
                }
            }
        }
    }
    Ok(out)
}

// ---- on-disk layout ----

pub const MANIFEST: &str = "manifest.csv";
const META: &str = "meta.json";

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    clip_id: String,
    label: Label,
    domain: Domain,
    expression: Vec<f64>,
    artifact: Option<ArtifactDescriptor>,
}

fn frame_file(t: usize) -> String {
    format!("frame_{t:04}.ppm")
}

/// Binary PPM (P6, maxval 255) of a 3-channel frame.
pub fn encode_ppm(f: &Frame) -> Result<Vec<u8>> {
    if f.channels != 3 {
        return Err(Error::Format(format!("PPM needs 3 channels, frame has {}", f.channels)));
    }
    let mut out = format!("P6\n{} {}\n255\n", f.width, f.height).into_bytes();
    let plane = f.height * f.width;
    for p in 0..plane {
        for c in 0..3 {
            out.push((f.pixels[c * plane + p] * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8], clip_id: &str, index: usize) -> Result<Frame> {
    let bad = |m: &str| Error::Data(format!("{clip_id} frame {index}: {m}"));
    let mut fields = Vec::with_capacity(4);
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
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let plane = w * h;
    let body = bytes.get(pos..pos + 3 * plane).ok_or_else(|| bad("truncated pixel data"))?;
    let mut pixels = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            pixels[c * plane + p] = f64::from(body[3 * p + c]) / 255.0;
        }
    }
    Frame::new(clip_id, index, 3, h, w, pixels).map_err(|e| bad(&e.to_string()))
}

/// Writes one directory per clip plus the manifest.
pub fn write_corpus(dir: &Path, clips: &[SyntheticClip]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("clip_id,label,domain,T,expression_mean\n");
    for clip in clips {
        let cdir = dir.join(&clip.clip_id);
        fs::create_dir_all(&cdir)?;
        for (t, f) in clip.frames.iter().enumerate() {
            fs::write(cdir.join(frame_file(t)), encode_ppm(f)?)?;
        }
        let meta = ClipMeta {
            clip_id: clip.clip_id.clone(),
            label: clip.label,
            domain: clip.domain,
            expression: clip.expression.clone(),
            artifact: clip.artifact.clone(),
        };
        let mut file = fs::File::create(cdir.join(META))?;
        serde_json::to_writer_pretty(&mut file, &meta).map_err(|e| Error::Format(e.to_string()))?;
        file.write_all(b"\n")?;
        manifest.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            clip.clip_id,
            clip.label,
            clip.domain,
            clip.frames.len(),
            clip.expression_mean()
        ));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads a corpus written by [`write_corpus`]. Any inconsistency is a data error.
pub fn read_corpus(dir: &Path) -> Result<Vec<SyntheticClip>> {
    let text = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| Error::Data(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let mut lines = text.lines();
    if lines.next() != Some("clip_id,label,domain,T,expression_mean") {
        return Err(Error::Data("manifest header mismatch".into()));
    }
    let mut clips = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let row_err = |m: &str| Error::Data(format!("manifest row {}: {m}", n + 1));
        if cols.len() != 5 {
            return Err(row_err("expected 5 columns"));
        }
        let clip_id = cols[0].to_string();
        let label: Label = cols[1].parse().map_err(|_| row_err("bad label"))?;
        let domain: Domain = cols[2].parse().map_err(|_| row_err("bad domain"))?;
        let t: usize = cols[3].parse().map_err(|_| row_err("bad frame count"))?;
        let cdir = dir.join(&clip_id);
        let meta_text = fs::read_to_string(cdir.join(META)).map_err(|e| Error::Data(format!("{clip_id}: {e}")))?;
        let meta: ClipMeta = serde_json::from_str(&meta_text).map_err(|e| Error::Data(format!("{clip_id}: {e}")))?;
        if meta.clip_id != clip_id || meta.label != label || meta.domain != domain || meta.expression.len() != t {
            return Err(Error::Data(format!("{clip_id}: metadata disagrees with manifest")));
        }
        let frames = (0..t)
            .map(|i| {
                let bytes = fs::read(cdir.join(frame_file(i))).map_err(|e| Error::Data(format!("{clip_id} frame {i}: {e}")))?;
                decode_ppm(&bytes, &clip_id, i)
            })
            .collect::<Result<Vec<_>>>()?;
        clips.push(SyntheticClip {
            clip_id,
            frames,
            label,
            domain,
            expression: meta.expression,
            artifact: meta.artifact,
        });
    }
    if clips.is_empty() {
        return Err(Error::Data("manifest lists no clips".into()));
    }
    Ok(clips)
}
