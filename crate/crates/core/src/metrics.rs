//! Segmentation metrics over 2-D masks: Dice, sensitivity, specificity,
//! HD95 and the Aggregated Jaccard Index, plus connected-component labeling
//! and PGM (P5) loading.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(contract("mask dimensions must be at least 1"));
        }
        if bits.len() != height * width {
            return Err(contract(format!(
                "{}x{} mask needs {} pixels, got {}",
                height,
                width,
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    /// Builds a mask from rows of `'#'` (foreground) and `'.'` characters.
    pub fn from_ascii(rows: &[&str]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(contract("ragged ascii mask"));
        }
        let bits = rows.iter().flat_map(|r| r.bytes().map(|b| b == b'#')).collect();
        Self::new(rows.len(), width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Foreground pixels with at least one background 4-neighbour; pixels on
    /// the image border always qualify.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !self.get(r, c) {
                    continue;
                }
                let edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w;
                if edge || !self.get(r - 1, c) || !self.get(r + 1, c) || !self.get(r, c - 1) || !self.get(r, c + 1) {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl InstanceMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(contract("mask dimensions must be at least 1"));
        }
        if labels.len() != height * width {
            return Err(contract(format!(
                "{}x{} mask needs {} labels, got {}",
                height,
                width,
                height * width,
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Positive ids present, ascending.
    pub fn ids(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        set.into_iter().collect()
    }

    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }
}

fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op: "metric",
            left: vec![a.0, a.1],
            right: vec![b.0, b.1],
        });
    }
    Ok(())
}

struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
    tn: usize,
}

fn counts(g: &BinaryMask, s: &BinaryMask) -> Result<Counts> {
    same_dims((g.height, g.width), (s.height, s.width))?;
    let mut c = Counts {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (&a, &b) in g.bits.iter().zip(&s.bits) {
        match (a, b) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

// An empty denominator scores 1 if the prediction agrees with the degenerate
// ground truth, 0 otherwise.
fn ratio(num: usize, den: usize, agrees: bool) -> f64 {
    if den == 0 {
        if agrees {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn dice(g: &BinaryMask, s: &BinaryMask) -> Result<f64> {
    let c = counts(g, s)?;
    Ok(ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, c.fp == 0))
}

pub fn sensitivity(g: &BinaryMask, s: &BinaryMask) -> Result<f64> {
    let c = counts(g, s)?;
    Ok(ratio(c.tp, c.tp + c.fn_, c.fp == 0))
}

pub fn specificity(g: &BinaryMask, s: &BinaryMask) -> Result<f64> {
    let c = counts(g, s)?;
    Ok(ratio(c.tn, c.tn + c.fp, c.fn_ == 0))
}

/// Binary Jaccard index `|G∩S| / |G∪S|`, 1 when both are empty.
pub fn jaccard(g: &BinaryMask, s: &BinaryMask) -> Result<f64> {
    let c = counts(g, s)?;
    Ok(ratio(c.tp, c.tp + c.fp + c.fn_, true))
}

/// Nearest-rank percentile of an unsorted list.
fn nearest_rank(mut v: Vec<f64>, pct: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

fn directed(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
    from.iter()
        .map(|&(r, c)| {
            to.iter()
                .map(|&(r2, c2)| {
                    let dr = r as f64 - r2 as f64;
                    let dc = c as f64 - c2 as f64;
                    dr * dr + dc * dc
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// 95th-percentile boundary distance: the larger of the two directed
/// nearest-rank percentiles.
pub fn hd95(g: &BinaryMask, s: &BinaryMask) -> Result<f64> {
    same_dims((g.height, g.width), (s.height, s.width))?;
    let (bg, bs) = (g.boundary(), s.boundary());
    if bg.is_empty() || bs.is_empty() {
        return Err(Error::Domain("hd95 of an empty mask is undefined".into()));
    }
    let a = nearest_rank(directed(&bg, &bs), 95.0);
    let b = nearest_rank(directed(&bs, &bg), 95.0);
    Ok(a.max(b))
}

/// Aggregated Jaccard Index. Ground-truth objects are matched in ascending
/// id order to the unused segmented object of highest Jaccard (ties to the
/// lowest id); a ground-truth object with no overlapping candidate adds its
/// area to the union. Unassigned segmented objects are added to the union.
pub fn aji(g: &InstanceMask, s: &InstanceMask) -> Result<f64> {
    same_dims((g.height, g.width), (s.height, s.width))?;
    let mut g_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut s_area: BTreeMap<u32, usize> = BTreeMap::new();
    let mut overlap: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&a, &b) in g.labels.iter().zip(&s.labels) {
        if a != 0 {
            *g_area.entry(a).or_default() += 1;
        }
        if b != 0 {
            *s_area.entry(b).or_default() += 1;
        }
        if a != 0 && b != 0 {
            *overlap.entry((a, b)).or_default() += 1;
        }
    }
    if g_area.is_empty() && s_area.is_empty() {
        return Ok(1.0);
    }

    let mut used = BTreeSet::new();
    let (mut inter, mut union) = (0usize, 0usize);
    for (&gi, &ga) in &g_area {
        let mut best: Option<(u32, usize, f64)> = None;
        for (&(_, sk), &ov) in overlap.range((gi, 0)..=(gi, u32::MAX)) {
            if used.contains(&sk) {
                continue;
            }
            let u = ga + s_area[&sk] - ov;
            let j = ov as f64 / u as f64;
            if best.is_none_or(|(_, _, bj)| j > bj) {
                best = Some((sk, ov, j));
            }
        }
        match best {
            Some((sk, ov, _)) => {
                used.insert(sk);
                inter += ov;
                union += ga + s_area[&sk] - ov;
            }
            None => union += ga,
        }
    }
    for (sk, &sa) in &s_area {
        if !used.contains(sk) {
            union += sa;
        }
    }
    Ok(inter as f64 / union as f64)
}

/// 4-connected labeling; ids follow raster-scan discovery order from 1.
pub fn connected_components(mask: &BinaryMask) -> InstanceMask {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0u32; h * w];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.bits[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
    }
    InstanceMask {
        height: h,
        width: w,
        labels,
    }
}

/// Raw P5 image: dimensions, maxval and row-major samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub height: usize,
    pub width: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

impl Pgm {
    pub fn to_binary(&self) -> Result<BinaryMask> {
        BinaryMask::new(self.height, self.width, self.pixels.iter().map(|&p| p != 0).collect())
    }

    pub fn to_instances(&self) -> Result<InstanceMask> {
        InstanceMask::new(self.height, self.width, self.pixels.iter().map(|&p| p as u32).collect())
    }
}

fn bad_pgm(msg: &str) -> Error {
    Error::Config(format!("invalid PGM: {msg}"))
}

/// Parses a binary PGM; maxval above 255 means big-endian 16-bit samples.
pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad_pgm("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(bad_pgm("not a P5 file"));
    }
    let mut num = |what: &str| -> Result<usize> { token()?.parse().map_err(|_| bad_pgm(what)) };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(bad_pgm("maxval out of range"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data = &bytes[(pos + 1).min(bytes.len())..];
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    if data.len() < need {
        return Err(bad_pgm("truncated raster"));
    }
    let pixels = if wide {
        data[..need]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        data[..need].iter().map(|&b| b as u16).collect()
    };
    Ok(Pgm {
        height,
        width,
        maxval: maxval as u16,
        pixels,
    })
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    parse_pgm(&fs::read(path)?)
}

/// Encodes a P5 image; samples are written as 16-bit when `maxval > 255`.
pub fn encode_pgm(pgm: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", pgm.width, pgm.height, pgm.maxval).into_bytes();
    for &p in &pgm.pixels {
        if pgm.maxval > 255 {
            out.extend_from_slice(&p.to_be_bytes());
        } else {
            out.push(p as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> BinaryMask {
        BinaryMask::from_ascii(rows).unwrap()
    }

    #[test]
    fn overlap_counts_example() {
        // |G| = 4, |S| = 6, |G∩S| = 3 on 5x5.
        let g = mask(&["##...", "##...", ".....", ".....", "....."]);
        let s = mask(&["###..", ".#...", "..##.", ".....", "....."]);
        assert_eq!((g.count(), s.count()), (4, 6));
        let c = counts(&g, &s).unwrap();
        assert_eq!(c.tp, 3);
        assert_eq!(dice(&g, &s).unwrap(), 0.6);
        assert_eq!(sensitivity(&g, &s).unwrap(), 0.75);
        assert_eq!(specificity(&g, &s).unwrap(), 18.0 / 21.0);
    }

    #[test]
    fn degenerate_denominators() {
        let z = BinaryMask::empty(3, 3).unwrap();
        let one = mask(&["#..", "...", "..."]);
        assert_eq!(dice(&z, &z).unwrap(), 1.0);
        assert_eq!(sensitivity(&z, &z).unwrap(), 1.0);
        assert_eq!(sensitivity(&z, &one).unwrap(), 0.0);
        let full = mask(&["###", "###", "###"]);
        assert_eq!(specificity(&full, &full).unwrap(), 1.0);
        assert_eq!(specificity(&full, &one).unwrap(), 0.0);
        let other = BinaryMask::empty(2, 3).unwrap();
        assert!(dice(&z, &other).is_err());
    }

    #[test]
    fn hd95_examples() {
        let sq = mask(&[".......", ".###...", ".###...", ".###...", "......."]);
        let shifted = mask(&[".......", "..###..", "..###..", "..###..", "......."]);
        assert_eq!(hd95(&sq, &sq).unwrap(), 0.0);
        assert_eq!(hd95(&sq, &shifted).unwrap(), 1.0);
        let a = mask(&["#.....", "......"]);
        let b = mask(&[".....#", "......"]);
        assert_eq!(hd95(&a, &b).unwrap(), 5.0);
        assert!(matches!(
            hd95(&a, &BinaryMask::empty(2, 6).unwrap()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn aji_examples() {
        let g = InstanceMask::new(2, 4, vec![1, 1, 0, 0, 1, 1, 0, 0]).unwrap();
        assert_eq!(aji(&g, &g).unwrap(), 1.0);
        let s = InstanceMask::new(2, 4, vec![1, 1, 0, 2, 1, 1, 0, 2]).unwrap();
        assert_eq!(aji(&g, &s).unwrap(), 4.0 / 6.0);
        let empty = InstanceMask::new(2, 4, vec![0; 8]).unwrap();
        assert_eq!(aji(&g, &empty).unwrap(), 0.0);
        assert_eq!(aji(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn aji_consumes_each_segment_once() {
        // Two GT objects both best match S=1; the second falls back to S=2.
        let g = InstanceMask::new(1, 6, vec![1, 1, 2, 2, 0, 0]).unwrap();
        let s = InstanceMask::new(1, 6, vec![1, 1, 1, 1, 2, 0]).unwrap();
        // G1 takes S1 (2/4); G2 has no other overlapping candidate: union += 2; S2 unused: +1.
        assert_eq!(aji(&g, &s).unwrap(), 2.0 / (4.0 + 2.0 + 1.0));
    }

    #[test]
    fn components() {
        let z = BinaryMask::empty(3, 3).unwrap();
        assert!(connected_components(&z).labels().iter().all(|&l| l == 0));
        let diag = mask(&["#.", ".#"]);
        assert_eq!(connected_components(&diag).labels(), &[1, 0, 0, 2]);
        let l = mask(&["#..", "#..", "###"]);
        assert_eq!(connected_components(&l).ids(), vec![1]);
        let u = mask(&["#.#", "###"]);
        assert_eq!(connected_components(&u).labels(), &[1, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn pgm_round_trip() {
        let p8 = Pgm {
            height: 2,
            width: 3,
            maxval: 255,
            pixels: vec![0, 255, 3, 0, 0, 1],
        };
        assert_eq!(parse_pgm(&encode_pgm(&p8)).unwrap(), p8);
        let p16 = Pgm {
            height: 1,
            width: 2,
            maxval: 65535,
            pixels: vec![300, 7],
        };
        assert_eq!(parse_pgm(&encode_pgm(&p16)).unwrap(), p16);
        let commented = b"P5\n# hi\n2 1\n255\n\x01\x00";
        assert_eq!(parse_pgm(commented).unwrap().pixels, vec![1, 0]);
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }
}
