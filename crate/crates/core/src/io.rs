//! CSV tables, JSON sidecars and atomic file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bath::Isotope;
use crate::coherence::{CurveMeta, SpeciesBreakdown, VisibilityCurve};
use crate::error::{Error, Result};
use crate::spectra::BathSpectra;

pub const SPECTRUM_HEADER: [&str; 3] = ["freq_MHz", "S_zz_mT2_per_MHz", "S_perp_mT2_per_MHz"];
pub const CURVE_HEADER: [&str; 5] = ["T_ns", "visibility", "stderr", "chi_linear", "chi_quad"];
pub const BREAKDOWN_SPECIES: [Isotope; 4] = [Isotope::In115, Isotope::As75, Isotope::Ga69, Isotope::Ga71];

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("output path {} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// `<dir>/<stem>.json` next to `path`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// `<dir>/<stem><suffix>.<ext>` next to `path`.
pub fn sibling_path(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}{ext}"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Invariant(format!("json encoding: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn table(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let enc = |e: csv::Error| Error::Invariant(format!("csv encoding: {e}"));
    w.write_record(header).map_err(enc)?;
    for r in rows {
        w.write_record(&r).map_err(enc)?;
    }
    w.into_inner().map_err(|e| Error::Invariant(format!("csv encoding: {e}")))
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

fn opt(col: &Option<Vec<f64>>, i: usize) -> String {
    col.as_ref().map(|c| num(c[i])).unwrap_or_default()
}

/// Both-sided density table on the spectrum grid.
pub fn spectrum_csv(spectra: &BathSpectra) -> Result<Vec<u8>> {
    let (zz, perp) = (&spectra.zz, &spectra.perp);
    let freqs = zz.frequencies();
    table(
        &SPECTRUM_HEADER,
        freqs
            .iter()
            .enumerate()
            .map(|(j, f)| vec![num(*f), num(zz.density[j]), num(perp.density[j])]),
    )
}

pub fn curve_csv(curve: &VisibilityCurve) -> Result<Vec<u8>> {
    curve.check_invariants()?;
    table(
        &CURVE_HEADER,
        (0..curve.len()).map(|i| {
            vec![
                num(curve.times[i]),
                num(curve.visibility[i]),
                opt(&curve.stderr, i),
                opt(&curve.chi_linear, i),
                opt(&curve.chi_quad, i),
            ]
        }),
    )
}

pub fn breakdown_csv(b: &SpeciesBreakdown) -> Result<Vec<u8>> {
    let names: Vec<String> = BREAKDOWN_SPECIES.iter().map(|s| format!("chi_{s}")).collect();
    let mut header = vec!["T_ns"];
    header.extend(names.iter().map(String::as_str));
    table(
        &header,
        (0..b.times.len()).map(|i| {
            let mut row = vec![num(b.times[i])];
            // species absent from the bath contribute nothing
            row.extend(BREAKDOWN_SPECIES.iter().map(|s| num(b.of(*s).map_or(0.0, |c| c[i]))));
            row
        }),
    )
}

/// Reads a visibility table. `T_ns` and `visibility` are required; `stderr`,
/// `chi_linear` and `chi_quad` are optional and may be left empty. The
/// curve's field and sequence come from `meta`.
pub fn parse_curve_csv(bytes: &[u8], source: &str, meta: CurveMeta) -> Result<VisibilityCurve> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let bad = |m: String| Error::invalid(format!("{source}: {m}"));
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let mut cols = [None; 5];
    for (k, h) in header.iter().enumerate() {
        match CURVE_HEADER.iter().position(|c| *c == h) {
            Some(p) if cols[p].is_some() => return Err(bad(format!("column `{h}` appears twice"))),
            Some(p) => cols[p] = Some(k),
            None => {
                return Err(bad(format!(
                    "unknown column `{h}` (expected a subset of {})",
                    CURVE_HEADER.join(",")
                )))
            }
        }
    }
    if cols[0].is_none() || cols[1].is_none() {
        return Err(bad("the T_ns and visibility columns are required".into()));
    }
    let mut data: [Vec<Option<f64>>; 5] = Default::default();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        for (c, idx) in cols.iter().enumerate() {
            let Some(idx) = *idx else { continue };
            let field = rec.get(idx).unwrap_or("");
            let v = if field.is_empty() {
                None
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| bad(format!("row {}: `{field}` in {} is not a number", line + 1, CURVE_HEADER[c])))?;
                if !v.is_finite() {
                    return Err(bad(format!("row {}: {} is not finite", line + 1, CURVE_HEADER[c])));
                }
                Some(v)
            };
            data[c].push(v);
        }
    }
    let required = |c: usize| -> Result<Vec<f64>> {
        data[c]
            .iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| bad(format!("row {}: {} is empty", i + 1, CURVE_HEADER[c]))))
            .collect()
    };
    let optional = |c: usize| -> Result<Option<Vec<f64>>> {
        if data[c].iter().all(Option::is_none) {
            return Ok(None);
        }
        required(c).map(Some)
    };
    let times = required(0)?;
    if times.iter().any(|t| *t <= 0.0) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(bad("T_ns must be positive and strictly increasing".into()));
    }
    let curve = VisibilityCurve {
        times,
        visibility: required(1)?,
        stderr: optional(2)?,
        chi_linear: optional(3)?,
        chi_quad: optional(4)?,
        meta,
    };
    if curve.stderr.as_ref().is_some_and(|s| s.iter().any(|e| !(*e > 0.0))) {
        return Err(bad("stderr must be positive where given".into()));
    }
    Ok(curve)
}

/// Reads a curve and, when present, its JSON sidecar for field and sequence.
pub fn read_curve(path: &Path) -> Result<(VisibilityCurve, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let meta = if side.exists() {
        let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let v: serde_json::Value =
            serde_json::from_slice(&text).map_err(|e| Error::invalid(format!("{}: {e}", side.display())))?;
        CurveMeta {
            b_ext: v.get("b_ext").and_then(|x| x.as_f64()).unwrap_or(0.0),
            sequence: v.get("sequence").and_then(|x| x.as_str()).unwrap_or("").to_string(),
            engine: v.get("engine").and_then(|x| x.as_str()).unwrap_or("").to_string(),
            ..CurveMeta::default()
        }
    } else {
        CurveMeta::default()
    };
    let curve = parse_curve_csv(&bytes, &path.display().to_string(), meta)?;
    Ok((curve, sha256_hex(&bytes)))
}
