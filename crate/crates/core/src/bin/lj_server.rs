//! Reference calculator server: the built-in Lennard-Jones potential served
//! over the periopt-calc line protocol on stdin/stdout.
//!
//! `--mode` selects a deliberately misbehaving variant for client tests:
//! `normal`, `bad-id`, `version2`, `hang-up` (exits after reading a
//! request), `error` (answers every request with an error), `garbage`,
//! `silent` (never sends a handshake). `--species FILE` loads a species
//! table in TOML form.

use std::io::{self, BufRead, Write};

use periopt::crystal::SpeciesTable;
use periopt::extcalc::{serve, CalcRequest, CalcResponse, PROTOCOL};
use periopt::potential::LennardJones;

fn usage() -> ! {
    eprintln!("usage: periopt-lj-server [--mode normal|bad-id|version2|hang-up|error|garbage|silent] [--species FILE]");
    std::process::exit(2)
}

fn main() {
    let mut mode = "normal".to_string();
    let mut table = SpeciesTable::default();
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        match a.as_str() {
            "--mode" => mode = args.next().unwrap_or_else(|| usage()),
            "--species" => {
                let path = args.next().unwrap_or_else(|| usage());
                let text = std::fs::read_to_string(&path).unwrap_or_else(|e| {
                    eprintln!("cannot read {path}: {e}");
                    std::process::exit(1)
                });
                table = SpeciesTable::parse_toml(&text).unwrap_or_else(|e| {
                    eprintln!("bad species table {path}: {e}");
                    std::process::exit(1)
                });
            }
            _ => usage(),
        }
    }

    let stdin = io::stdin().lock();
    let mut stdout = io::stdout().lock();
    let calc = LennardJones::new();
    let result = match mode.as_str() {
        "normal" => serve(stdin, stdout, &calc, &table),
        "silent" => {
            for _ in stdin.lines() {}
            Ok(())
        }
        "version2" => writeln!(stdout, r#"{{"protocol":"{PROTOCOL}","version":2}}"#),
        _ => misbehave(&mode, stdin, &mut stdout),
    };
    if let Err(e) = result {
        if e.kind() != io::ErrorKind::BrokenPipe {
            eprintln!("periopt-lj-server: {e}");
            std::process::exit(1);
        }
    }
}

fn misbehave(mode: &str, stdin: impl BufRead, out: &mut impl Write) -> io::Result<()> {
    writeln!(out, r#"{{"protocol":"{PROTOCOL}","version":1}}"#)?;
    out.flush()?;
    for line in stdin.lines() {
        let line = line?;
        let id = serde_json::from_str::<CalcRequest>(&line).map(|r| r.id as i64).unwrap_or(-1);
        match mode {
            "hang-up" => return Ok(()),
            "bad-id" => {
                let n = 3 * serde_json::from_str::<CalcRequest>(&line).map(|r| r.symbols.len()).unwrap_or(0);
                writeln!(out, "{}", serde_json::to_string(&CalcResponse::ok(id + 1, 0.0, vec![0.0; n])).unwrap())?
            }
            "error" => writeln!(out, "{}", serde_json::to_string(&CalcResponse::err(id, "evaluation failed")).unwrap())?,
            "garbage" => writeln!(out, "this is not json")?,
            _ => usage(),
        }
        out.flush()?;
    }
    Ok(())
}
