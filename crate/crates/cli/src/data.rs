use std::path::Path;

use anyhow::{anyhow, Context as _, Result};
use molfield::geom::{self, MolecularConfiguration, Trajectory};
use molfield::train::mix_seed;

/// Synthetic property targets: the radius of gyration of the atom centers.
pub fn geometry_targets(config: &MolecularConfiguration) -> Vec<f64> {
    let c = geom::centroid(config.coords());
    let ms = config.coords().iter().map(|&p| geom::dot(geom::sub(p, c), geom::sub(p, c))).sum::<f64>()
        / config.len() as f64;
    vec![ms.sqrt()]
}

/// `n` independent random molecules of `atoms` atoms.
pub fn synth_molecules(seed: u64, n: usize, atoms: usize) -> Result<Vec<MolecularConfiguration>> {
    (0..n)
        .map(|i| Ok(geom::synth_trajectory(mix_seed(seed, i as u64, 0), atoms, 2)?.frames()[0].clone()))
        .collect()
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    Ok(geom::parse_xyz(&read_text(path)?)?.into_trajectory()?)
}

pub fn load_configs(path: &Path) -> Result<Vec<MolecularConfiguration>> {
    Ok(geom::parse_xyz_blocks(&read_text(path)?)?.into_iter().map(|b| b.config).collect())
}

/// Molecules whose comment lines carry `props=v1,v2,...`.
pub fn load_property_dataset(path: &Path) -> Result<Vec<(MolecularConfiguration, Vec<f64>)>> {
    let blocks = geom::parse_xyz_blocks(&read_text(path)?)?;
    let data: Vec<(MolecularConfiguration, Vec<f64>)> = blocks
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let field = b
                .comment
                .split_whitespace()
                .find_map(|t| t.strip_prefix("props="))
                .ok_or_else(|| anyhow!("{}: molecule {i} has no props= entry", path.display()))?;
            let values = field
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| anyhow!("{}: molecule {i}: bad property `{v}`", path.display())))
                .collect::<Result<Vec<_>>>()?;
            Ok((b.config, values))
        })
        .collect::<Result<_>>()?;
    let p = data[0].1.len();
    if p == 0 || data.iter().any(|(_, y)| y.len() != p) {
        anyhow::bail!("{}: every molecule needs the same number of properties", path.display());
    }
    Ok(data)
}

pub fn property_dataset_xyz(data: &[(MolecularConfiguration, Vec<f64>)]) -> String {
    data.iter()
        .map(|(c, y)| {
            let values: Vec<String> = y.iter().map(|v| v.to_string()).collect();
            geom::write_xyz_with_comment(c, &format!("props={}", values.join(",")))
        })
        .collect()
}
