//! On-disk formats besides tensors: PGM/PPM rasters, the JSON document
//! schemas (poses, assignments, positions, matchings), and `key=value` run
//! configuration files.
//!
//! All readers are strict and annotate errors with the offending path and,
//! where meaningful, a line number. Writers are deterministic so identical
//! inputs produce byte-identical files.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::mask::CharacterMask;

// ── binary rasters ──

fn write_raster(path: &Path, magic: &str, w: usize, h: usize, data: &[u8], per_px: usize) -> Result<()> {
    if data.len() != w * h * per_px {
        return Err(Error::shape(
            "raster write",
            format!("{w}x{h} needs {} bytes, got {}", w * h * per_px, data.len()),
        ));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = format!("{magic}\n{w} {h}\n255\n");
    out.write_all(header.as_bytes())
        .and_then(|_| out.write_all(data))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Header tokens of a PNM stream: magic, then integers, skipping whitespace
/// and `#` comments. Returns the payload offset.
fn parse_pnm_header(path: &Path, bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut pos = 0usize;
    let mut line = 1usize;
    let fail = |line: usize, msg: String| Error::parse(Some(path), line, msg);

    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(fail(1, format!("expected magic {magic}")));
    }
    pos += 2;

    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b'\n') => {
                    line += 1;
                    pos += 1;
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&c) = bytes.get(pos) {
                        pos += 1;
                        if c == b'\n' {
                            line += 1;
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(fail(line, "truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(fail(line, "expected integer in header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text
            .parse()
            .map_err(|_| fail(line, format!("integer {text} out of range")))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(fail(line, format!("degenerate size {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fail(line, format!("unsupported maxval {maxval}")));
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail(line, "expected single whitespace before payload".into())),
    }
    Ok((w, h, pos))
}

fn read_raster(path: &Path, magic: &str, per_px: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, offset) = parse_pnm_header(path, &bytes, magic)?;
    let need = w * h * per_px;
    let payload = &bytes[offset..];
    if payload.len() < need {
        return Err(Error::parse(
            Some(path),
            0,
            format!("payload holds {} bytes, need {need}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(Error::parse(
            Some(path),
            0,
            format!("{} trailing bytes after payload", payload.len() - need),
        ));
    }
    Ok((w, h, payload.to_vec()))
}

/// Binary grayscale PGM (`P5`, maxval 255).
pub fn write_pgm(path: impl AsRef<Path>, w: usize, h: usize, data: &[u8]) -> Result<()> {
    write_raster(path.as_ref(), "P5", w, h, data, 1)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    read_raster(path.as_ref(), "P5", 1)
}

/// Binary RGB PPM (`P6`, maxval 255), interleaved r,g,b per pixel.
pub fn write_ppm(path: impl AsRef<Path>, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    write_raster(path.as_ref(), "P6", w, h, rgb, 3)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    read_raster(path.as_ref(), "P6", 3)
}

/// Mask cells become 255 (inside) / 0 (outside).
pub fn write_mask_pgm(path: impl AsRef<Path>, mask: &CharacterMask) -> Result<()> {
    let (h, w) = mask.resolution();
    let data: Vec<u8> = mask.grid().iter().map(|&v| v * 255).collect();
    write_pgm(path, w, h, &data)
}

/// Any nonzero pixel counts as inside.
pub fn read_mask_pgm(path: impl AsRef<Path>, identity: u32) -> Result<CharacterMask> {
    let (w, h, data) = read_pgm(path)?;
    CharacterMask::new(identity, h, w, data.iter().map(|&v| u8::from(v != 0)).collect())
}

// ── JSON documents ──

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoseDoc {
    pub frames: Vec<PoseFrameDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoseFrameDoc {
    pub index: u32,
    pub persons: Vec<PersonDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<BoxDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PersonDoc {
    /// 17 COCO keypoints, each [x, y, confidence].
    pub keypoints: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BoxDoc {
    pub id: u32,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Schema checks beyond what serde enforces: keypoint arity, finiteness,
/// box geometry, and identity uniqueness per frame.
pub fn validate_poses(doc: &PoseDoc) -> Result<()> {
    for frame in &doc.frames {
        for (pi, person) in frame.persons.iter().enumerate() {
            if person.keypoints.len() != 17 {
                return Err(Error::domain(format!(
                    "frame {} person {pi}: expected 17 keypoints, got {}",
                    frame.index,
                    person.keypoints.len()
                )));
            }
            for kp in &person.keypoints {
                if kp.iter().any(|v| !v.is_finite()) {
                    return Err(Error::domain(format!(
                        "frame {} person {pi}: non-finite keypoint",
                        frame.index
                    )));
                }
                if !(0.0..=1.0).contains(&kp[2]) {
                    return Err(Error::domain(format!(
                        "frame {} person {pi}: confidence {} outside [0,1]",
                        frame.index, kp[2]
                    )));
                }
            }
        }
        let mut ids: Vec<u32> = frame.boxes.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::domain(format!(
                "frame {}: duplicate box identities",
                frame.index
            )));
        }
        for b in &frame.boxes {
            if !(b.x0 < b.x1 && b.y0 < b.y1) || [b.x0, b.y0, b.x1, b.y1].iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!(
                    "frame {}: box {} is not a proper rectangle",
                    frame.index, b.id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AssignDoc {
    pub frames: Vec<AssignFrameDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AssignFrameDoc {
    pub index: u32,
    pub matches: Vec<MatchEntryDoc>,
    pub unmatched_persons: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatchEntryDoc {
    pub person: usize,
    pub id: u32,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PositionsDoc {
    pub frames: Vec<PositionsFrameDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PositionsFrameDoc {
    pub index: u32,
    pub chars: Vec<CharPosDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CharPosDoc {
    pub id: u32,
    pub cx: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatchingDoc {
    pub pairs: Vec<MatchPairDoc>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct MatchPairDoc {
    #[serde(rename = "gen")]
    pub generated: u32,
    #[serde(rename = "ref")]
    pub reference: u32,
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let mut text = String::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::parse(Some(path), e.line(), e.to_string()))
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::parse(Some(path), 0, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ── run configuration ──

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub lambda: f64,
    pub rho: f64,
    pub layers: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub manifest: PathBuf,
    pub background_mask: bool,
    pub mode: Mode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            lambda: 0.20,
            rho: 0.3,
            layers: 3,
            steps: 2000,
            lr: 1e-2,
            seed: 0,
            manifest: PathBuf::new(),
            background_mask: false,
            mode: Mode::Fast,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::domain(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::domain(format!("rho must be in [0,1], got {}", self.rho)));
        }
        if self.layers == 0 {
            return Err(Error::domain("layers must be ≥ 1"));
        }
        if self.steps == 0 {
            return Err(Error::domain("steps must be ≥ 1"));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::domain(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.manifest.as_os_str().is_empty() {
            return Err(Error::domain("manifest path is required"));
        }
        Ok(())
    }
}

/// `key=value` lines; `#` starts a comment; blank lines are skipped. Unknown
/// or duplicate keys are rejected with their line number. A relative
/// `manifest` path resolves against the config file's directory.
pub fn parse_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = RunConfig::default();
    let mut seen: Vec<&str> = Vec::new();
    let fail = |line: usize, msg: String| Error::parse(Some(path), line, msg);

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fail(line_no, format!("expected key=value, got \"{line}\"")))?;
        let (key, value) = (key.trim(), value.trim());
        if seen.contains(&key) {
            return Err(fail(line_no, format!("duplicate key \"{key}\"")));
        }
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| fail(line_no, format!("{key}: not a number: \"{v}\"")))
        };
        let int = |v: &str| {
            v.parse::<u64>()
                .map_err(|_| fail(line_no, format!("{key}: not a non-negative integer: \"{v}\"")))
        };
        match key {
            "lambda" => cfg.lambda = num(value)?,
            "rho" => cfg.rho = num(value)?,
            "layers" => cfg.layers = int(value)? as usize,
            "steps" => cfg.steps = int(value)? as usize,
            "lr" => cfg.lr = num(value)?,
            "seed" => cfg.seed = int(value)?,
            "manifest" => cfg.manifest = PathBuf::from(value),
            "background_mask" => {
                cfg.background_mask = value
                    .parse::<bool>()
                    .map_err(|_| fail(line_no, format!("background_mask: expected true|false, got \"{value}\"")))?
            }
            "mode" => cfg.mode = value.parse().map_err(|e: Error| fail(line_no, e.to_string()))?,
            other => return Err(fail(line_no, format!("unknown key \"{other}\""))),
        }
        seen.push(key);
    }
    if cfg.manifest.is_relative() && !cfg.manifest.as_os_str().is_empty() {
        if let Some(dir) = path.parent() {
            cfg.manifest = dir.join(&cfg.manifest);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn pgm_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let data: Vec<u8> = (0..12).map(|v| v * 20).collect();
        write_pgm(&p, 4, 3, &data).unwrap();
        let (w, h, back) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, data);
        let bytes = fs::read(&p).unwrap();
        write_pgm(&p, 4, 3, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes, "round trip is byte-identical");
    }

    #[test]
    fn pgm_comment_and_errors() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        fs::write(&p, b"P5\n# a comment\n2 2\n255\n\x01\x02\x03\x04").unwrap();
        let (w, h, data) = read_pgm(&p).unwrap();
        assert_eq!((w, h, data), (2, 2, vec![1, 2, 3, 4]));

        fs::write(&p, b"P6\n2 2\n255\nxxxx").unwrap();
        assert!(read_pgm(&p).is_err(), "wrong magic");
        fs::write(&p, b"P5\n2 2\n255\n\x01\x02\x03").unwrap();
        assert!(read_pgm(&p).unwrap_err().to_string().contains("payload"));
        fs::write(&p, b"P5\n2 2\n255\n\x01\x02\x03\x04\x05").unwrap();
        assert!(read_pgm(&p).unwrap_err().to_string().contains("trailing"));
        fs::write(&p, b"P5\n2 2\n70000\n..").unwrap();
        assert!(read_pgm(&p).is_err(), "maxval out of range");
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("img.ppm");
        let rgb: Vec<u8> = (0..2 * 2 * 3).map(|v| v as u8 * 10).collect();
        write_ppm(&p, 2, 2, &rgb).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), (2, 2, rgb));
    }

    #[test]
    fn mask_pgm_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("mask.pgm");
        let mut m = CharacterMask::empty(3, 4, 5);
        m.set(1, 2, true);
        m.set(3, 4, true);
        write_mask_pgm(&p, &m).unwrap();
        let back = read_mask_pgm(&p, 3).unwrap();
        assert_eq!(back.grid(), m.grid());
        assert_eq!(back.identity, 3);
    }

    #[test]
    fn pose_json_fixed_point() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("poses.json");
        let doc = PoseDoc {
            frames: vec![PoseFrameDoc {
                index: 0,
                persons: vec![PersonDoc { keypoints: vec![[10.0, 20.5, 0.9]; 17] }],
                boxes: vec![BoxDoc { id: 3, x0: 1.0, y0: 2.0, x1: 30.0, y1: 40.0 }],
            }],
        };
        validate_poses(&doc).unwrap();
        save_json(&p, &doc).unwrap();
        let once: PoseDoc = load_json(&p).unwrap();
        assert_eq!(once, doc);
        save_json(&p, &once).unwrap();
        let twice: PoseDoc = load_json(&p).unwrap();
        assert_eq!(twice, once, "parse → serialize → parse is a fixed point");
    }

    #[test]
    fn pose_validation_names_offender() {
        let bad_arity = PoseDoc {
            frames: vec![PoseFrameDoc {
                index: 4,
                persons: vec![
                    PersonDoc { keypoints: vec![[0.0, 0.0, 0.5]; 17] },
                    PersonDoc { keypoints: vec![[0.0, 0.0, 0.5]; 16] },
                ],
                boxes: vec![],
            }],
        };
        let msg = validate_poses(&bad_arity).unwrap_err().to_string();
        assert!(msg.contains("frame 4") && msg.contains("person 1"), "{msg}");

        let dup = PoseDoc {
            frames: vec![PoseFrameDoc {
                index: 0,
                persons: vec![],
                boxes: vec![
                    BoxDoc { id: 7, x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 },
                    BoxDoc { id: 7, x0: 2.0, y0: 0.0, x1: 3.0, y1: 1.0 },
                ],
            }],
        };
        assert!(validate_poses(&dup).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn matching_doc_field_names() {
        let doc = MatchingDoc {
            pairs: vec![MatchPairDoc { generated: 0, reference: 1 }],
        };
        let text = serde_json::to_string(&doc).unwrap();
        assert!(text.contains("\"gen\":0") && text.contains("\"ref\":1"), "{text}");
    }

    #[test]
    fn config_parse_defaults_and_overrides() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        fs::write(
            &p,
            "# demo run\nlambda = 0.20\nrho=0.3\nlayers=3\nsteps=2000\nlr=0.01\nseed=7\nmanifest=data/manifest.ndjson\nbackground_mask=false\nmode=fast\n",
        )
        .unwrap();
        let cfg = parse_run_config(&p).unwrap();
        assert_eq!(cfg.lambda, 0.20);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.mode, Mode::Fast);
        assert_eq!(cfg.manifest, dir.path().join("data/manifest.ndjson"));

        fs::write(&p, "manifest=m.ndjson\n").unwrap();
        let cfg = parse_run_config(&p).unwrap();
        assert_eq!(cfg.lambda, 0.20, "defaults fill unset keys");
        assert_eq!(cfg.steps, 2000);
    }

    #[test]
    fn config_rejects_bad_lines() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        for (body, needle) in [
            ("manifest=m\nwat=1\n", "unknown key"),
            ("manifest=m\nlambda=0.1\nlambda=0.2\n", "duplicate"),
            ("manifest=m\nsteps=zero\n", "integer"),
            ("manifest=m\nmode=slow\n", "mode"),
            ("just words\n", "key=value"),
            ("steps=5\n", "manifest"),
        ] {
            fs::write(&p, body).unwrap();
            let err = parse_run_config(&p).unwrap_err().to_string();
            assert!(err.contains(needle), "body {body:?} gave {err}");
        }
    }
}
