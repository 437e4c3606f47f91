//! A practical subset of the CIF 1.1 format.
//!
//! Handles what crystal-structure files in the wild actually use: `data_`
//! blocks, `_tag value` pairs, `loop_` tables, quoted strings, semicolon
//! text fields, `#` comments, numbers with standard uncertainties like
//! `4.123(5)`, and symmetry operator lists. Dictionaries, save frames, and
//! mmCIF are out of scope. Parsing never panics; malformed input comes back
//! as an error with a line and column.

pub(crate) mod elements;
mod symop;

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::geometry::{cell_params_to_basis, wrap_frac, GeometryError, PeriodicSet};

#[derive(Debug, thiserror::Error)]
pub enum CifError {
    #[error("line {line}, column {col}: {message}")]
    Syntax {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("missing required tag {0}")]
    MissingTag(String),
    #[error("unknown element symbol {0:?}")]
    UnknownElement(String),
    #[error("no atom sites in the data block")]
    EmptyMotif,
    #[error("tag {tag} has invalid value {value:?}")]
    InvalidValue { tag: String, value: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone)]
pub struct CifDocument {
    pub blocks: Vec<DataBlock>,
}

#[derive(Debug, Clone)]
pub struct DataBlock {
    pub name: String,
    /// Tag (lowercased) to raw value. Later duplicates overwrite.
    pub items: BTreeMap<String, String>,
    pub loops: Vec<LoopTable>,
}

/// invariant: every row has exactly `tags.len()` entries.
#[derive(Debug, Clone)]
pub struct LoopTable {
    pub tags: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl LoopTable {
    pub fn column(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }
}

/// Parses a CIF numeric value: strips a parenthesized standard uncertainty
/// ("4.123(5)" reads as 4.123) and treats the "." and "?" placeholders as
/// absent.
pub fn parse_numeric(value: &str) -> Option<f64> {
    if value == "." || value == "?" {
        return None;
    }
    let bare = match (value.find('('), value.ends_with(')')) {
        (Some(open), true) if value[open + 1..value.len() - 1]
            .chars()
            .all(|c| c.is_ascii_digit())
            && open + 1 < value.len() - 1 =>
        {
            &value[..open]
        }
        _ => value,
    };
    bare.parse::<f64>().ok()
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Value,
    Tag,
    Loop,
    Data,
}

#[derive(Debug, Clone)]
struct Token {
    kind: Kind,
    text: String,
    line: usize,
    col: usize,
}

fn syntax(line: usize, col: usize, message: impl Into<String>) -> CifError {
    CifError::Syntax {
        line,
        col,
        message: message.into(),
    }
}

fn scan_line(tokens: &mut Vec<Token>, line: &str, lineno: usize, col0: usize) -> Result<(), CifError> {
    let chars: Vec<char> = line.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let col = col0 + i;
        let c = chars[i];
        if c == '#' {
            break;
        }
        if c == '\'' || c == '"' {
            i += 1;
            let start = i;
            loop {
                if i >= chars.len() {
                    return Err(syntax(lineno, col, "unterminated quoted string"));
                }
                // A quote closes only when followed by whitespace or the end
                // of the line, so apostrophes inside values survive.
                if chars[i] == c && chars.get(i + 1).is_none_or(|n| n.is_whitespace()) {
                    break;
                }
                i += 1;
            }
            tokens.push(Token {
                kind: Kind::Value,
                text: chars[start..i].iter().collect(),
                line: lineno,
                col,
            });
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        let text: String = chars[start..i].iter().collect();
        let lower = text.to_ascii_lowercase();
        let token = if lower == "loop_" {
            Token { kind: Kind::Loop, text: String::new(), line: lineno, col }
        } else if lower.starts_with("data_") {
            Token { kind: Kind::Data, text: text[5..].to_string(), line: lineno, col }
        } else if text.starts_with('_') {
            Token { kind: Kind::Tag, text: lower, line: lineno, col }
        } else if lower == "global_" || lower == "stop_" || lower.starts_with("save_") {
            return Err(syntax(lineno, col, format!("unsupported reserved token {text:?}")));
        } else {
            Token { kind: Kind::Value, text, line: lineno, col }
        };
        tokens.push(token);
    }
    Ok(())
}

fn strip_cr(s: &str) -> &str {
    s.strip_suffix('\r').unwrap_or(s)
}

fn scan(text: &str) -> Result<Vec<Token>, CifError> {
    let lines: Vec<&str> = text.split('\n').collect();
    let mut tokens = Vec::new();
    let mut li = 0;
    while li < lines.len() {
        let line = strip_cr(lines[li]);
        let lineno = li + 1;
        if let Some(first) = line.strip_prefix(';') {
            // Semicolon text field: runs until the next line starting with ';'.
            let mut fragments = vec![first.to_string()];
            let mut lj = li + 1;
            let mut terminator = None;
            while lj < lines.len() {
                let l2 = strip_cr(lines[lj]);
                if l2.starts_with(';') {
                    terminator = Some(lj);
                    break;
                }
                fragments.push(l2.to_string());
                lj += 1;
            }
            let Some(tj) = terminator else {
                return Err(syntax(lineno, 1, "unterminated text field"));
            };
            if fragments.first().is_some_and(String::is_empty) {
                fragments.remove(0);
            }
            tokens.push(Token {
                kind: Kind::Value,
                text: fragments.join("\n"),
                line: lineno,
                col: 1,
            });
            scan_line(&mut tokens, &strip_cr(lines[tj])[1..], tj + 1, 2)?;
            li = tj + 1;
            continue;
        }
        scan_line(&mut tokens, line, lineno, 1)?;
        li += 1;
    }
    Ok(tokens)
}

pub fn parse_cif(text: &str) -> Result<CifDocument, CifError> {
    let tokens = scan(text)?;
    let mut blocks: Vec<DataBlock> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let tok = &tokens[i];
        match tok.kind {
            Kind::Data => {
                blocks.push(DataBlock {
                    name: tok.text.clone(),
                    items: BTreeMap::new(),
                    loops: Vec::new(),
                });
                i += 1;
            }
            Kind::Tag => {
                let Some(block) = blocks.last_mut() else {
                    return Err(syntax(tok.line, tok.col, "tag before any data_ block"));
                };
                match tokens.get(i + 1) {
                    Some(v) if v.kind == Kind::Value => {
                        block.items.insert(tok.text.clone(), v.text.clone());
                        i += 2;
                    }
                    _ => {
                        return Err(syntax(
                            tok.line,
                            tok.col,
                            format!("tag {} has no value", tok.text),
                        ))
                    }
                }
            }
            Kind::Loop => {
                if blocks.is_empty() {
                    return Err(syntax(tok.line, tok.col, "loop_ before any data_ block"));
                }
                let (header_line, header_col) = (tok.line, tok.col);
                i += 1;
                let mut tags = Vec::new();
                while let Some(t) = tokens.get(i) {
                    if t.kind != Kind::Tag {
                        break;
                    }
                    tags.push(t.text.clone());
                    i += 1;
                }
                if tags.is_empty() {
                    return Err(syntax(header_line, header_col, "loop_ without column tags"));
                }
                let mut values = Vec::new();
                while let Some(t) = tokens.get(i) {
                    if t.kind != Kind::Value {
                        break;
                    }
                    values.push(t.text.clone());
                    i += 1;
                }
                if values.len() % tags.len() != 0 {
                    return Err(syntax(
                        header_line,
                        header_col,
                        format!(
                            "loop declares {} tags but holds {} values",
                            tags.len(),
                            values.len()
                        ),
                    ));
                }
                let rows = values.chunks(tags.len()).map(<[String]>::to_vec).collect();
                blocks.last_mut().unwrap().loops.push(LoopTable { tags, rows });
            }
            Kind::Value => {
                return Err(syntax(tok.line, tok.col, "value outside a tag or loop"));
            }
        }
    }
    if blocks.is_empty() {
        return Err(syntax(1, 1, "no data_ block found"));
    }
    Ok(CifDocument { blocks })
}

fn numeric_item(block: &DataBlock, tag: &str) -> Result<f64, CifError> {
    let raw = block
        .items
        .get(tag)
        .ok_or_else(|| CifError::MissingTag(tag.to_string()))?;
    numeric_cell(raw, tag)
}

fn numeric_cell(raw: &str, tag: &str) -> Result<f64, CifError> {
    parse_numeric(raw)
        .filter(|v| v.is_finite())
        .ok_or_else(|| CifError::InvalidValue {
            tag: tag.to_string(),
            value: raw.to_string(),
        })
}

fn periodic_close(a: &[f64; 3], b: &[f64; 3], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| {
        let d = (x - y).abs();
        d.min(1.0 - d) <= tol
    })
}

/// Fractional separation under which two symmetry-generated sites of the
/// same species count as one.
pub const DUPLICATE_SITE_TOL: f64 = 1e-4;

/// Builds a periodic set from the first data block carrying cell tags.
///
/// The basis comes from the six cell parameters in the conventional frame
/// (a along +x, b in the xy-plane). Species come from
/// `_atom_site_type_symbol`, falling back to `_atom_site_label`. If a
/// symmetry operator loop is present the motif is the orbit of the listed
/// sites with duplicates merged; otherwise the sites stand as given.
pub fn to_periodic_set(doc: &CifDocument) -> Result<PeriodicSet, CifError> {
    let block = doc
        .blocks
        .iter()
        .find(|b| b.items.contains_key("_cell_length_a"))
        .or_else(|| doc.blocks.first())
        .ok_or_else(|| CifError::MissingTag("_cell_length_a".into()))?;

    let a = numeric_item(block, "_cell_length_a")?;
    let b = numeric_item(block, "_cell_length_b")?;
    let c = numeric_item(block, "_cell_length_c")?;
    let alpha = numeric_item(block, "_cell_angle_alpha")?;
    let beta = numeric_item(block, "_cell_angle_beta")?;
    let gamma = numeric_item(block, "_cell_angle_gamma")?;
    let basis = cell_params_to_basis(a, b, c, alpha, beta, gamma)?;

    let site_loop = block
        .loops
        .iter()
        .find(|l| l.column("_atom_site_fract_x").is_some())
        .ok_or_else(|| CifError::MissingTag("_atom_site_fract_x".into()))?;
    let ix = site_loop.column("_atom_site_fract_x").unwrap();
    let iy = site_loop
        .column("_atom_site_fract_y")
        .ok_or_else(|| CifError::MissingTag("_atom_site_fract_y".into()))?;
    let iz = site_loop
        .column("_atom_site_fract_z")
        .ok_or_else(|| CifError::MissingTag("_atom_site_fract_z".into()))?;
    let isp = site_loop
        .column("_atom_site_type_symbol")
        .or_else(|| site_loop.column("_atom_site_label"))
        .ok_or_else(|| CifError::MissingTag("_atom_site_type_symbol".into()))?;

    let mut base: Vec<([f64; 3], u8)> = Vec::new();
    for row in &site_loop.rows {
        let x = numeric_cell(&row[ix], "_atom_site_fract_x")?;
        let y = numeric_cell(&row[iy], "_atom_site_fract_y")?;
        let z = numeric_cell(&row[iz], "_atom_site_fract_z")?;
        let sp = elements::species_from_symbol(&row[isp])
            .ok_or_else(|| CifError::UnknownElement(row[isp].clone()))?;
        base.push(([x, y, z], sp));
    }

    let mut ops = Vec::new();
    for tag in ["_symmetry_equiv_pos_as_xyz", "_space_group_symop_operation_xyz"] {
        if let Some(l) = block.loops.iter().find(|l| l.column(tag).is_some()) {
            let col = l.column(tag).unwrap();
            for row in &l.rows {
                let op = symop::parse(&row[col]).map_err(|e| CifError::InvalidValue {
                    tag: tag.to_string(),
                    value: format!("{}: {e}", row[col]),
                })?;
                ops.push(op);
            }
            break;
        }
    }

    let sites = if ops.is_empty() {
        base
    } else {
        let mut expanded: Vec<([f64; 3], u8)> = Vec::new();
        for (pos, sp) in &base {
            for op in &ops {
                let mut q = op.apply(pos);
                for v in q.iter_mut() {
                    *v = wrap_frac(*v);
                }
                if !expanded
                    .iter()
                    .any(|(p, s)| s == sp && periodic_close(p, &q, DUPLICATE_SITE_TOL))
                {
                    expanded.push((q, *sp));
                }
            }
        }
        expanded
    };
    if sites.is_empty() {
        return Err(CifError::EmptyMotif);
    }

    let positions: Vec<Vector3<f64>> = sites.iter().map(|(p, _)| Vector3::from(*p)).collect();
    let species: Vec<u8> = sites.iter().map(|(_, s)| *s).collect();
    Ok(PeriodicSet::new(block.name.clone(), basis, positions, species)?)
}

fn full_precision(v: f64) -> String {
    // 17 significant digits; parsing recovers the identical float.
    format!("{v:.16e}")
}

/// Renders a set as a P1 CIF (no symmetry loop, sites listed explicitly).
/// Cell parameters and coordinates carry 17 significant digits so a parse of
/// the output reproduces the fractional coordinates bit for bit.
pub fn write_cif(set: &PeriodicSet) -> String {
    let [a, b, c, alpha, beta, gamma] = set.basis.cell_parameters();
    let name = if set.id.is_empty() {
        "structure".to_string()
    } else {
        set.id.replace(char::is_whitespace, "_")
    };
    let mut out = format!("data_{name}\n");
    out.push_str(&format!("_cell_length_a {}\n", full_precision(a)));
    out.push_str(&format!("_cell_length_b {}\n", full_precision(b)));
    out.push_str(&format!("_cell_length_c {}\n", full_precision(c)));
    out.push_str(&format!("_cell_angle_alpha {}\n", full_precision(alpha)));
    out.push_str(&format!("_cell_angle_beta {}\n", full_precision(beta)));
    out.push_str(&format!("_cell_angle_gamma {}\n", full_precision(gamma)));
    out.push_str("loop_\n");
    out.push_str("_atom_site_label\n");
    out.push_str("_atom_site_type_symbol\n");
    out.push_str("_atom_site_fract_x\n");
    out.push_str("_atom_site_fract_y\n");
    out.push_str("_atom_site_fract_z\n");
    for (i, (p, &sp)) in set
        .motif
        .positions
        .iter()
        .zip(&set.motif.species)
        .enumerate()
    {
        let sym = elements::symbol_of(sp).unwrap_or("X");
        out.push_str(&format!(
            "{sym}{} {sym} {} {} {}\n",
            i + 1,
            full_precision(p.x),
            full_precision(p.y),
            full_precision(p.z),
        ));
    }
    out
}
