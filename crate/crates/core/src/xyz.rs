//! Extended XYZ reading and writing.
//!
//! ```text
//! 2
//! Lattice="4 0 0 0 4 0 0 0 4" Properties=species:S:1:pos:R:3 pbc="T T T"
//! Ar 0 0 0
//! Ar 2 2 2
//! ```
//!
//! Only single-frame files are handled. Coordinates are Cartesian Å and may
//! lie outside the cell. Floats are written with the shortest representation
//! that round-trips exactly.

use std::fmt::Write as _;

use thiserror::Error;

use crate::crystal::{CrystalError, Lattice, SpeciesTable, Structure, Vec3};

#[derive(Debug, Error)]
pub enum XyzError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Crystal(#[from] CrystalError),
}

fn perr(line: usize, msg: impl Into<String>) -> XyzError {
    XyzError::Parse { line, msg: msg.into() }
}

/// Splits the comment line into `key=value` pairs. Values may be double-quoted.
pub fn parse_comment(line: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            break;
        }
        let mut key = String::new();
        while let Some(&c) = chars.peek() {
            if c == '=' || c.is_whitespace() {
                break;
            }
            key.push(c);
            chars.next();
        }
        if chars.peek() != Some(&'=') {
            // bare flag without a value
            out.push((key, String::new()));
            continue;
        }
        chars.next();
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            loop {
                match chars.next() {
                    Some('"') => break,
                    Some(c) => value.push(c),
                    None => return Err(format!("unterminated quote for key '{key}'")),
                }
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                value.push(c);
                chars.next();
            }
        }
        out.push((key, value));
    }
    Ok(out)
}

/// Parses an extended XYZ frame. Extra comment keys are returned alongside.
pub fn read_xyz(text: &str, table: &SpeciesTable) -> Result<(Structure, Vec<(String, String)>), XyzError> {
    let mut lines = text.lines();
    let count_line = lines.next().ok_or_else(|| perr(1, "empty file"))?;
    let n: usize = count_line.trim().parse().map_err(|_| perr(1, format!("bad atom count '{}'", count_line.trim())))?;
    let comment = lines.next().ok_or_else(|| perr(2, "missing comment line"))?;
    let pairs = parse_comment(comment).map_err(|m| perr(2, m))?;
    let lattice_str = pairs
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("lattice"))
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| perr(2, "no Lattice=\"...\" key"))?;
    let lat: Vec<f64> = lattice_str
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| perr(2, format!("bad lattice number: {e}")))?;
    let lattice = Lattice::from_flat(&lat)?;

    let mut symbols = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    for idx in 0..n {
        let lineno = idx + 3;
        let line = lines.next().ok_or_else(|| perr(lineno, format!("expected {n} atoms, file ended")))?;
        let mut fields = line.split_whitespace();
        let sym = fields.next().ok_or_else(|| perr(lineno, "empty atom line"))?;
        let mut xyz = [0.0; 3];
        for x in xyz.iter_mut() {
            let f = fields.next().ok_or_else(|| perr(lineno, "missing coordinate"))?;
            *x = f.parse().map_err(|_| perr(lineno, format!("bad coordinate '{f}'")))?;
        }
        symbols.push(sym.to_string());
        positions.push(Vec3::from(xyz));
    }
    let extra = pairs.into_iter().filter(|(k, _)| !k.eq_ignore_ascii_case("lattice")).collect();
    Ok((Structure::from_symbols(lattice, &symbols, positions, table)?, extra))
}

pub fn write_xyz(s: &Structure, extra: &[(&str, String)]) -> String {
    let mut out = String::new();
    let lat = s.lattice().to_flat().map(|x| x.to_string()).join(" ");
    let _ = writeln!(out, "{}", s.n_atoms());
    let _ = write!(out, "Lattice=\"{lat}\" Properties=species:S:1:pos:R:3 pbc=\"T T T\"");
    for (k, v) in extra {
        if v.contains(char::is_whitespace) {
            let _ = write!(out, " {k}=\"{v}\"");
        } else {
            let _ = write!(out, " {k}={v}");
        }
    }
    out.push('\n');
    for (sym, p) in s.symbols().iter().zip(s.positions()) {
        let _ = writeln!(out, "{} {} {} {}", sym, p.x, p.y, p.z);
    }
    out
}
