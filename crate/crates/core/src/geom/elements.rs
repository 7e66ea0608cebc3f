const SYMBOLS: [&str; 36] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr",
];

/// Largest atomic number in the built-in table.
pub const MAX_Z: u32 = SYMBOLS.len() as u32;

/// Radius for elements without a tabulated van der Waals value.
pub const DEFAULT_RADIUS: f64 = 1.5;

pub fn atomic_number(symbol: &str) -> Option<u32> {
    let mut chars = symbol.chars();
    let first = chars.next()?.to_ascii_uppercase();
    let rest: String = chars.map(|c| c.to_ascii_lowercase()).collect();
    let norm = format!("{first}{rest}");
    SYMBOLS.iter().position(|s| *s == norm).map(|i| i as u32 + 1)
}

pub fn symbol(z: u32) -> Option<&'static str> {
    SYMBOLS.get((z as usize).checked_sub(1)?).copied()
}

/// Van der Waals radius in Å.
pub fn vdw_radius(z: u32) -> f64 {
    match z {
        1 => 1.10,
        6 => 1.70,
        7 => 1.55,
        8 => 1.52,
        9 => 1.47,
        15 => 1.80,
        16 => 1.80,
        17 => 1.75,
        _ => DEFAULT_RADIUS,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup() {
        assert_eq!(atomic_number("H"), Some(1));
        assert_eq!(atomic_number("Cl"), Some(17));
        assert_eq!(atomic_number("CL"), Some(17));
        assert_eq!(atomic_number("Xx"), None);
        assert_eq!(symbol(8), Some("O"));
        assert_eq!(symbol(0), None);
        assert_eq!(vdw_radius(6), 1.70);
        assert_eq!(vdw_radius(26), DEFAULT_RADIUS);
    }
}
