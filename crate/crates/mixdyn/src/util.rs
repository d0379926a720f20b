//! Artifact plumbing shared by the subcommands: the FNV-1a config hash,
//! deterministic output headers, grid parsing, quote-file reading, and
//! file-or-stdout sinks. Identical inputs hash identically and every float
//! is printed with a fixed format, so reruns produce byte-identical files.

use anyhow::{bail, Context, Result};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// FNV-1a over the chunks, with a 0xFF separator byte between chunks so the
/// chunk boundaries are part of the hash.
pub fn fnv1a(chunks: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for chunk in chunks {
        for &b in *chunk {
            eat(b);
        }
        eat(0xff);
    }
    h
}

/// Config hash of a subcommand invocation: the command name, the normalized
/// argument strings, and the raw bytes of every input file.
pub fn config_hash(command: &str, args: &[String], inputs: &[&str]) -> u64 {
    let mut chunks: Vec<&[u8]> = vec![command.as_bytes()];
    chunks.extend(args.iter().map(|a| a.as_bytes()));
    chunks.extend(inputs.iter().map(|i| i.as_bytes()));
    fnv1a(&chunks)
}

/// Comment header stamped at the top of every CSV artifact.
pub fn csv_header(hash: u64, seed: u64) -> String {
    format!("# mixdyn artifact_version=1 config_hash={hash:016x} seed={seed}\n")
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Writer for `--out FILE`, or stdout when the flag is absent.
pub fn out_writer(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Box::new(BufWriter::new(f))
        }
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

/// Parses "a:b:step" as an inclusive range or "x1,x2,..." as an explicit
/// list (a single number is a one-element list).
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parse_one = |tok: &str| -> Result<f64> {
        tok.trim().parse::<f64>().with_context(|| format!("parsing number '{tok}'"))
    };
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            bail!("range must be lo:hi:step, got '{s}'");
        }
        let (lo, hi, step) = (parse_one(parts[0])?, parse_one(parts[1])?, parse_one(parts[2])?);
        if !(step > 0.0) || hi < lo {
            bail!("range '{s}' needs lo <= hi and step > 0");
        }
        let n = ((hi - lo) / step).round() as usize;
        let mut out: Vec<f64> = (0..=n).map(|i| lo + i as f64 * step).collect();
        if let Some(last) = out.last_mut() {
            // Snap the endpoint when the step divides the span.
            if (*last - hi).abs() <= 1e-9 * step {
                *last = hi;
            }
        }
        out.retain(|&v| v <= hi + 1e-9 * step);
        Ok(out)
    } else {
        s.split(',').map(parse_one).collect()
    }
}

/// Quote CSV rows (maturity, strike, implied_vol); `#` lines are comments.
pub fn read_quotes(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers().context("reading quote header")?.clone();
    let expect = ["maturity", "strike", "implied_vol"];
    let got: Vec<&str> = headers.iter().collect();
    if got != expect {
        bail!("quote columns must be maturity,strike,implied_vol; got {}", got.join(","));
    }
    let mut quotes = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("reading quote row {}", i + 1))?;
        let field = |j: usize| -> Result<f64> {
            record
                .get(j)
                .with_context(|| format!("quote row {} missing column {}", i + 1, expect[j]))?
                .parse::<f64>()
                .with_context(|| format!("quote row {} column {}", i + 1, expect[j]))
        };
        quotes.push((field(0)?, field(1)?, field(2)?));
    }
    if quotes.is_empty() {
        bail!("quote file {} has no data rows", path.display());
    }
    Ok(quotes)
}

/// Formats a fraction as percent with fixed width, or NA when absent.
pub fn pct_or_na(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.4}", 100.0 * x),
        None => "NA".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv1a_separates_chunk_boundaries() {
        assert_ne!(fnv1a(&[b"ab", b"c"]), fnv1a(&[b"a", b"bc"]));
        assert_eq!(fnv1a(&[b"ab", b"c"]), fnv1a(&[b"ab", b"c"]));
    }

    #[test]
    fn grid_parsing_handles_ranges_and_lists() {
        let g = parse_grid("0.8:1.2:0.05").unwrap();
        assert_eq!(g.len(), 9);
        assert!((g[0] - 0.8).abs() < 1e-12 && (g[8] - 1.2).abs() < 1e-12);
        assert_eq!(parse_grid("1,2,3").unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(parse_grid("1.5").unwrap(), vec![1.5]);
        assert!(parse_grid("1:2").is_err());
        assert!(parse_grid("2:1:0.5").is_err());
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(pct_or_na(Some(0.10725)), "10.7250");
        assert_eq!(pct_or_na(None), "NA");
    }
}
