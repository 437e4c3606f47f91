//! Element symbols indexed by atomic number.

pub(crate) const SYMBOLS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn",
    "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
];

pub(crate) fn atomic_number(symbol: &str) -> Option<u8> {
    SYMBOLS
        .iter()
        .position(|&s| s == symbol)
        .map(|i| (i + 1) as u8)
}

pub(crate) fn symbol_of(z: u8) -> Option<&'static str> {
    if (1..=118).contains(&z) {
        Some(SYMBOLS[z as usize - 1])
    } else {
        None
    }
}

/// Resolves a CIF type symbol or site label to an atomic number. The leading
/// alphabetic prefix is kept ("Fe2+" and "Fe1" both give Fe), matched first
/// as a two-letter symbol, then as a one-letter symbol. Deuterium and
/// tritium map to hydrogen; anything else is unknown.
pub(crate) fn species_from_symbol(symbol: &str) -> Option<u8> {
    let prefix: String = symbol
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect();
    if prefix.is_empty() {
        return None;
    }
    if prefix.len() >= 2 {
        let mut two: String = prefix[..1].to_ascii_uppercase();
        two.push_str(&prefix[1..2].to_ascii_lowercase());
        if let Some(z) = atomic_number(&two) {
            return Some(z);
        }
    }
    let one = prefix[..1].to_ascii_uppercase();
    if let Some(z) = atomic_number(&one) {
        return Some(z);
    }
    match one.as_str() {
        "D" | "T" => Some(1),
        _ => None,
    }
}
