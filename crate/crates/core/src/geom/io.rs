//! Extended-XYZ reading/writing and ASCII PLY point clouds.
//!
//! One XYZ block is an atom count line, a comment line (optionally carrying
//! `t=<float>`), then `Symbol x y z` lines. Concatenated blocks form a
//! trajectory.

use std::fmt::Write as _;

use super::{elements, MolecularConfiguration, Trajectory, Vec3};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Parsed {
    Configuration { config: MolecularConfiguration, time: Option<f64> },
    Trajectory(Trajectory),
}

impl Parsed {
    /// Every frame as a configuration, in file order.
    pub fn configurations(&self) -> Vec<MolecularConfiguration> {
        match self {
            Parsed::Configuration { config, .. } => vec![config.clone()],
            Parsed::Trajectory(t) => t.frames().to_vec(),
        }
    }

    pub fn into_trajectory(self) -> Result<Trajectory> {
        match self {
            Parsed::Trajectory(t) => Ok(t),
            Parsed::Configuration { config, time } => Trajectory::new(vec![config], vec![time.unwrap_or(0.0)]),
        }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn comment_time(comment: &str, line: usize) -> Result<Option<f64>> {
    for tok in comment.split_whitespace() {
        if let Some(v) = tok.strip_prefix("t=") {
            let t: f64 = v.parse().map_err(|_| parse_err(line, format!("bad time `{v}`")))?;
            if !t.is_finite() {
                return Err(parse_err(line, "non-finite time"));
            }
            return Ok(Some(t));
        }
    }
    Ok(None)
}

/// One XYZ block with its raw comment line.
#[derive(Clone, Debug, PartialEq)]
pub struct XyzBlock {
    pub config: MolecularConfiguration,
    pub comment: String,
    pub time: Option<f64>,
}

/// Every block in file order; blocks may have different atom lists.
pub fn parse_xyz_blocks(text: &str) -> Result<Vec<XyzBlock>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let count_line = i + 1;
        let n: usize = lines[i]
            .trim()
            .parse()
            .map_err(|_| parse_err(count_line, format!("expected atom count, got `{}`", lines[i].trim())))?;
        if n == 0 {
            return Err(parse_err(count_line, "atom count must be positive"));
        }
        if i + 1 >= lines.len() {
            return Err(parse_err(count_line, "missing comment line"));
        }
        let time = comment_time(lines[i + 1], i + 2)?;
        let mut coords = Vec::with_capacity(n);
        let mut numbers = Vec::with_capacity(n);
        for k in 0..n {
            let ln = i + 2 + k;
            let Some(line) = lines.get(ln) else {
                return Err(parse_err(ln + 1, format!("atom count mismatch: expected {n} atoms, found {k}")));
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() < 4 {
                return Err(parse_err(ln + 1, format!("malformed atom line `{line}`")));
            }
            let z = elements::atomic_number(parts[0])
                .ok_or_else(|| parse_err(ln + 1, format!("unknown element `{}`", parts[0])))?;
            let mut p = [0.0; 3];
            for (d, s) in p.iter_mut().zip(&parts[1..4]) {
                *d = s
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| parse_err(ln + 1, format!("bad coordinate `{s}`")))?;
            }
            coords.push(p);
            numbers.push(z);
        }
        let config = MolecularConfiguration::new(coords, numbers).map_err(|e| parse_err(count_line, e.to_string()))?;
        blocks.push(XyzBlock { config, comment: lines[i + 1].to_string(), time });
        i += 2 + n;
    }
    if blocks.is_empty() {
        return Err(parse_err(1, "no XYZ blocks"));
    }
    Ok(blocks)
}

pub fn parse_xyz(text: &str) -> Result<Parsed> {
    let mut blocks: Vec<(MolecularConfiguration, Option<f64>)> =
        parse_xyz_blocks(text)?.into_iter().map(|b| (b.config, b.time)).collect();
    match blocks.len() {
        0 => Err(parse_err(1, "no XYZ blocks")),
        1 => {
            let (config, time) = blocks.pop().unwrap();
            Ok(Parsed::Configuration { config, time })
        }
        n => {
            let times: Vec<f64> = if blocks.iter().all(|b| b.1.is_some()) {
                let raw: Vec<f64> = blocks.iter().map(|b| b.1.unwrap()).collect();
                if raw.iter().all(|t| (0.0..=1.0).contains(t)) {
                    raw
                } else {
                    let (lo, hi) = (raw[0], raw[n - 1]);
                    raw.iter().map(|t| (t - lo) / (hi - lo)).collect()
                }
            } else {
                (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
            };
            let frames = blocks.into_iter().map(|b| b.0).collect();
            Ok(Parsed::Trajectory(Trajectory::new(frames, times)?))
        }
    }
}

pub fn write_xyz(config: &MolecularConfiguration, time: Option<f64>) -> String {
    write_xyz_with_comment(config, &time.map(|t| format!("t={t}")).unwrap_or_default())
}

pub fn write_xyz_with_comment(config: &MolecularConfiguration, comment: &str) -> String {
    let mut out = String::new();
    writeln!(out, "{}", config.len()).unwrap();
    writeln!(out, "{comment}").unwrap();
    for (p, &z) in config.coords().iter().zip(config.numbers()) {
        let sym = elements::symbol(z).unwrap_or("X");
        writeln!(out, "{sym} {} {} {}", p[0], p[1], p[2]).unwrap();
    }
    out
}

pub fn write_trajectory_xyz(traj: &Trajectory) -> String {
    traj.frames()
        .iter()
        .zip(traj.times())
        .map(|(f, &t)| write_xyz(f, Some(t)))
        .collect()
}

pub fn write_ply(points: &[Vec3], normals: &[Vec3]) -> String {
    let mut out = String::new();
    writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", points.len()).unwrap();
    for p in ["x", "y", "z", "nx", "ny", "nz"] {
        writeln!(out, "property double {p}").unwrap();
    }
    writeln!(out, "end_header").unwrap();
    for (p, n) in points.iter().zip(normals) {
        writeln!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], n[0], n[1], n[2]).unwrap();
    }
    out
}
