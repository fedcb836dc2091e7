//! Identity-embedded guidance: attach persistent identities to multi-person
//! pose detections using labeled instance boxes, then render color-coded
//! skeleton rasters that carry those identities into a generator.
//!
//! Assignment is greedy on the enclosed-keypoint ratio. Ratios are kept as
//! exact (inside, total) counts so ordering ties break deterministically
//! without float fuzz.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::formats::{AssignFrameDoc, BoxDoc, MatchEntryDoc, PersonDoc, PoseFrameDoc};

/// Fixed 8-color palette; identity k renders as palette[k mod 8].
pub const PALETTE: [[u8; 3]; 8] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 128, 0],
    [128, 0, 255],
];

/// Skeleton edges over the 17 COCO keypoints.
pub const LIMBS: [(usize, usize); 18] = [
    (5, 6),
    (5, 7),
    (7, 9),
    (6, 8),
    (8, 10),
    (5, 11),
    (6, 12),
    (11, 12),
    (11, 13),
    (13, 15),
    (12, 14),
    (14, 16),
    (0, 1),
    (0, 2),
    (1, 3),
    (2, 4),
    (3, 5),
    (4, 6),
];

#[derive(Debug, Clone, Copy)]
pub struct GuidanceConfig {
    /// Minimum enclosed-keypoint ratio for an accepted pairing.
    pub tau: f64,
    /// Keypoints below this confidence are ignored everywhere.
    pub min_confidence: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { tau: 0.6, min_confidence: 0.3 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::domain(format!("tau must be in (0,1], got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::domain(format!(
                "min_confidence must be in [0,1], got {}",
                self.min_confidence
            )));
        }
        Ok(())
    }
}

/// Qualifying and enclosed keypoint counts for one person against one box.
/// Boundary points count as inside.
pub fn enclosure_counts(person: &PersonDoc, bx: &BoxDoc, min_confidence: f64) -> Result<(u32, u32)> {
    let mut inside = 0u32;
    let mut total = 0u32;
    for &[x, y, conf] in &person.keypoints {
        if conf < min_confidence {
            continue;
        }
        total += 1;
        if x >= bx.x0 && x <= bx.x1 && y >= bx.y0 && y <= bx.y1 {
            inside += 1;
        }
    }
    if total == 0 {
        return Err(Error::domain("no confident keypoints"));
    }
    Ok((inside, total))
}

pub fn enclosure_ratio(person: &PersonDoc, bx: &BoxDoc, min_confidence: f64) -> Result<f64> {
    let (inside, total) = enclosure_counts(person, bx, min_confidence)?;
    Ok(inside as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchRecord {
    pub person: usize,
    pub id: u32,
    pub inside: u32,
    pub total: u32,
}

impl MatchRecord {
    pub fn ratio(&self) -> f64 {
        self.inside as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// Accepted one-to-one pairings, in acceptance order.
    pub matches: Vec<MatchRecord>,
    pub unmatched_persons: Vec<usize>,
    pub unmatched_boxes: Vec<u32>,
}

impl Assignment {
    pub fn identity_of(&self, person: usize) -> Option<u32> {
        self.matches.iter().find(|m| m.person == person).map(|m| m.id)
    }

    pub fn to_doc(&self, frame_index: u32) -> AssignFrameDoc {
        AssignFrameDoc {
            index: frame_index,
            matches: self
                .matches
                .iter()
                .map(|m| MatchEntryDoc { person: m.person, id: m.id, ratio: m.ratio() })
                .collect(),
            unmatched_persons: self.unmatched_persons.clone(),
        }
    }

    /// Rebuilds the pairings from a serialized frame. Enclosure counts are
    /// not stored on disk, so `inside`/`total` come back as 0/1; rendering
    /// and identity lookups never read them.
    pub fn from_doc(doc: &AssignFrameDoc) -> Assignment {
        Assignment {
            matches: doc
                .matches
                .iter()
                .map(|m| MatchRecord { person: m.person, id: m.id, inside: 0, total: 1 })
                .collect(),
            unmatched_persons: doc.unmatched_persons.clone(),
            unmatched_boxes: Vec::new(),
        }
    }
}

/// Greedy one-to-one assignment in descending ratio order; ties prefer the
/// smaller identity, then the smaller person index. Pairs below tau are never
/// accepted. Persons without confident keypoints stay unmatched.
pub fn assign_identities(
    persons: &[PersonDoc],
    boxes: &[BoxDoc],
    config: &GuidanceConfig,
) -> Result<Assignment> {
    config.validate()?;
    // exact ratio comparison: a/b vs c/d as a·d vs c·b
    struct Cand {
        inside: u32,
        total: u32,
        id: u32,
        person: usize,
        box_pos: usize,
    }
    let mut cands: Vec<Cand> = Vec::new();
    for (pi, person) in persons.iter().enumerate() {
        for (bi, bx) in boxes.iter().enumerate() {
            let Ok((inside, total)) = enclosure_counts(person, bx, config.min_confidence) else {
                continue;
            };
            // ratio ≥ tau, compared exactly: inside ≥ tau·total
            if (inside as f64) < config.tau * total as f64 {
                continue;
            }
            cands.push(Cand { inside, total, id: bx.id, person: pi, box_pos: bi });
        }
    }
    cands.sort_by(|a, b| {
        let lhs = a.inside as u64 * b.total as u64;
        let rhs = b.inside as u64 * a.total as u64;
        rhs.cmp(&lhs).then(a.id.cmp(&b.id)).then(a.person.cmp(&b.person))
    });

    let mut person_taken = vec![false; persons.len()];
    let mut box_taken = vec![false; boxes.len()];
    let mut matches = Vec::new();
    for c in cands {
        if person_taken[c.person] || box_taken[c.box_pos] {
            continue;
        }
        person_taken[c.person] = true;
        box_taken[c.box_pos] = true;
        matches.push(MatchRecord { person: c.person, id: c.id, inside: c.inside, total: c.total });
    }
    Ok(Assignment {
        matches,
        unmatched_persons: (0..persons.len()).filter(|&p| !person_taken[p]).collect(),
        unmatched_boxes: boxes
            .iter()
            .enumerate()
            .filter(|&(bi, _)| !box_taken[bi])
            .map(|(_, b)| b.id)
            .collect(),
    })
}

/// Replaces each matched identity by its image under the permutation, which
/// must be a bijection on the assigned identity set.
pub fn reorder_identities(assignment: &Assignment, perm: &BTreeMap<u32, u32>) -> Result<Assignment> {
    let assigned: Vec<u32> = assignment.matches.iter().map(|m| m.id).collect();
    let mut image: Vec<u32> = Vec::with_capacity(assigned.len());
    for &id in &assigned {
        let &to = perm
            .get(&id)
            .ok_or_else(|| Error::domain(format!("permutation misses assigned identity {id}")))?;
        image.push(to);
    }
    let mut sorted_src = assigned.clone();
    let mut sorted_img = image.clone();
    sorted_src.sort_unstable();
    sorted_img.sort_unstable();
    if sorted_src != sorted_img {
        return Err(Error::domain(
            "permutation is not a bijection on the assigned identity set",
        ));
    }
    let mut out = assignment.clone();
    for (m, &to) in out.matches.iter_mut().zip(&image) {
        m.id = to;
    }
    Ok(out)
}

// ── rasterization ──

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IegRaster {
    pub h: usize,
    pub w: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
}

impl IegRaster {
    fn black(h: usize, w: usize) -> Self {
        IegRaster { h, w, rgb: vec![0; h * w * 3] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let o = (y * self.w + x) * 3;
        [self.rgb[o], self.rgb[o + 1], self.rgb[o + 2]]
    }

    fn put(&mut self, y: i64, x: i64, color: [u8; 3]) {
        if y < 0 || x < 0 || y >= self.h as i64 || x >= self.w as i64 {
            return;
        }
        let o = (y as usize * self.w + x as usize) * 3;
        self.rgb[o..o + 3].copy_from_slice(&color);
    }

    fn disc(&mut self, y: i64, x: i64, color: [u8; 3]) {
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                if dx * dx + dy * dy <= 4 {
                    self.put(y + dy, x + dx, color);
                }
            }
        }
    }

    fn line(&mut self, mut y0: i64, mut x0: i64, y1: i64, x1: i64, color: [u8; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(y0, x0, color);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }
}

/// Renders matched persons as 1-pixel limb lines plus radius-2 keypoint
/// discs, ascending identity so higher identities overwrite. Low-confidence
/// keypoints are skipped along with their incident limbs.
pub fn render_ieg(
    frame: &PoseFrameDoc,
    assignment: &Assignment,
    config: &GuidanceConfig,
    h: usize,
    w: usize,
) -> Result<IegRaster> {
    config.validate()?;
    if h < 8 || w < 8 {
        return Err(Error::domain(format!("raster size {w}x{h} is below the 8x8 minimum")));
    }
    let mut raster = IegRaster::black(h, w);
    let mut order: Vec<&MatchRecord> = assignment.matches.iter().collect();
    order.sort_by_key(|m| (m.id, m.person));
    for m in order {
        let person = frame
            .persons
            .get(m.person)
            .ok_or_else(|| Error::domain(format!("assignment references person {} of {}", m.person, frame.persons.len())))?;
        if person.keypoints.len() != 17 {
            return Err(Error::domain(format!(
                "frame {} person {}: expected 17 keypoints, got {}",
                frame.index,
                m.person,
                person.keypoints.len()
            )));
        }
        let color = PALETTE[m.id as usize % PALETTE.len()];
        let confident = |k: usize| person.keypoints[k][2] >= config.min_confidence;
        let px = |k: usize| {
            let [x, y, _] = person.keypoints[k];
            (y.round() as i64, x.round() as i64)
        };
        for &(a, b) in &LIMBS {
            if confident(a) && confident(b) {
                let (ya, xa) = px(a);
                let (yb, xb) = px(b);
                raster.line(ya, xa, yb, xb, color);
            }
        }
        for k in 0..17 {
            if confident(k) {
                let (y, x) = px(k);
                raster.disc(y, x, color);
            }
        }
    }
    Ok(raster)
}

// ── temporal diagnostics ──

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TemporalReport {
    /// Identity → number of transitions where its holder jumped.
    pub switches_by_identity: BTreeMap<u32, u32>,
    pub switches: u32,
    /// (identity, transition) combinations where the identity was matched on
    /// both sides.
    pub opportunities: u32,
    pub switch_rate: f64,
}

/// Flags transitions where an identity's mean confident-keypoint position
/// jumps more than `jump_frac`·image width between consecutive frames, the
/// signature of an identity handed to a different person.
pub fn temporal_consistency_report(
    frames: &[(PoseFrameDoc, Assignment)],
    image_width: f64,
    jump_frac: f64,
    min_confidence: f64,
) -> Result<TemporalReport> {
    if frames.len() < 2 {
        return Err(Error::domain("temporal report needs at least 2 frames"));
    }
    if !(image_width > 0.0 && jump_frac > 0.0) {
        return Err(Error::domain("image width and jump fraction must be positive"));
    }
    let mean_pos = |frame: &PoseFrameDoc, person: usize| -> Option<(f64, f64)> {
        let kps = &frame.persons.get(person)?.keypoints;
        let mut n = 0.0;
        let (mut sx, mut sy) = (0.0, 0.0);
        for &[x, y, conf] in kps {
            if conf >= min_confidence {
                sx += x;
                sy += y;
                n += 1.0;
            }
        }
        (n > 0.0).then(|| (sx / n, sy / n))
    };

    let threshold = jump_frac * image_width;
    let mut report = TemporalReport::default();
    for pair in frames.windows(2) {
        let (ref fa, ref aa) = pair[0];
        let (ref fb, ref ab) = pair[1];
        for m in &aa.matches {
            let Some(next) = ab.matches.iter().find(|n| n.id == m.id) else {
                continue;
            };
            let (Some(pa), Some(pb)) = (mean_pos(fa, m.person), mean_pos(fb, next.person)) else {
                continue;
            };
            report.opportunities += 1;
            let dist = ((pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)).sqrt();
            if dist > threshold {
                report.switches += 1;
                *report.switches_by_identity.entry(m.id).or_insert(0) += 1;
            }
        }
    }
    report.switch_rate = if report.opportunities == 0 {
        0.0
    } else {
        report.switches as f64 / report.opportunities as f64
    };
    Ok(report)
}
