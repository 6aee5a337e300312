//! CSV and JSON writers.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use gbmei_core::harness::{ErrorTable, MomentTrajectory};
use sha2::{Digest, Sha256};

pub const CSV_HEADER: &str = "problem,scheme,dt,rms_error,stderr,wall_seconds";

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Convergence / efficiency table with one `#fit` footer per scheme.
pub fn format_csv(problem: &str, tables: &[ErrorTable]) -> String {
    let mut s = String::new();
    s.push_str(CSV_HEADER);
    s.push('\n');
    for t in tables {
        for r in &t.rows {
            let _ = writeln!(
                s,
                "{problem},{},{},{},{},{}",
                t.scheme,
                num(r.dt),
                num(r.rms_error),
                num(r.stderr),
                num(r.wall_seconds)
            );
        }
    }
    for t in tables {
        let (slope, intercept, r2) = match t.fit {
            Some(f) => (f.slope, f.intercept, f.r2),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        let _ = writeln!(s, "#fit,{},{},{},{}", t.scheme, num(slope), num(intercept), num(r2));
    }
    s
}

/// One row per scheme and grid time, then `#blowup` and `#max_norm` footers.
pub fn format_moments_csv(problem: &str, runs: &[(String, MomentTrajectory)]) -> String {
    let d = runs
        .first()
        .and_then(|(_, m)| m.mean.first())
        .map_or(0, Vec::len);
    let mut s = String::from("problem,scheme,t,norm_mean");
    for j in 1..=d {
        let _ = write!(s, ",mean_{j}");
    }
    s.push('\n');
    for (scheme, m) in runs {
        for (n, t) in m.times.iter().enumerate() {
            let _ = write!(s, "{problem},{scheme},{},{}", num(*t), num(m.mean_norm[n]));
            for v in &m.mean[n] {
                let _ = write!(s, ",{}", num(*v));
            }
            s.push('\n');
        }
    }
    for (scheme, m) in runs {
        let _ = writeln!(s, "#blowup,{scheme},{}", num(m.blowup_fraction()));
        let _ = writeln!(s, "#max_norm,{scheme},{}", num(m.max_mean_norm()));
    }
    s
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Hash of `contents` framed as a git blob, using git's SHA-256 object format.
pub fn config_hash(contents: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", contents.len()).as_bytes());
    h.update(contents);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_is_header_only() {
        assert_eq!(format_csv("p", &[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 2f64.powi(-10), 1e-300, 123456.789, -0.0] {
            assert_eq!(num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(num(f64::NAN), "nan");
    }

    #[test]
    fn hash_matches_git_sha256_blob() {
        // printf 'hello\n' | git hash-object --object-format=sha256 --stdin
        assert_eq!(
            config_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
