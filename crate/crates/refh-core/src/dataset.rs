//! Trajectory dataset files.
//!
//! Both formats are plain text with a `#`-prefixed key/value header followed
//! by CSV, written deterministically (fixed field order, `\n` endings,
//! 17-significant-digit floats), so regenerating a dataset from the same
//! seed and settings reproduces the file byte for byte.
//!
//! - Population-code counts: `trajectory,step,n0..n{K-1}` integer rows, with
//!   latent trajectories in a sibling file of
//!   `trajectory,step,position,velocity,gain` rows.
//! - Movie frames: run-length-encoded binary rows,
//!   `record,trajectory,step,data`, where each trajectory is announced by an
//!   `index` record and each frame's `data` holds space-separated run
//!   lengths alternating off/on pixels, starting with the (possibly zero)
//!   leading off-run.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};

use crate::checkpoint::fmt_f64;
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

pub const KIND_RING_COUNTS: &str = "ring-ppc-counts";
pub const KIND_RING_LATENTS: &str = "ring-ppc-latents";
pub const KIND_BOUNCE_FRAMES: &str = "bounce-frames";

/// Header metadata shared by the population-code files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LdsMeta {
    pub seed: u64,
    pub n_trajectories: usize,
    pub traj_length: usize,
    /// Single-line JSON echo of the generating configuration.
    pub config_json: String,
}

/// Header metadata for movie files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BounceMeta {
    pub seed: u64,
    pub n_trajectories: usize,
    pub traj_length: usize,
    pub frame_size: usize,
    pub config_json: String,
}

// ---------------------------------------------------------------------------
// Header plumbing
// ---------------------------------------------------------------------------

fn push_header(out: &mut String, kind: &str, pairs: &[(&str, String)]) {
    let _ = writeln!(out, "# kind: {kind}");
    let _ = writeln!(out, "# format_version: {DATASET_FORMAT_VERSION}");
    for (k, v) in pairs {
        let _ = writeln!(out, "# {k}: {v}");
    }
}

struct HeaderMap {
    pairs: Vec<(String, String)>,
}

impl HeaderMap {
    fn get(&self, key: &str, path: &str) -> Result<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(path, format!("missing header field '{key}'")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, path: &str) -> Result<T> {
        let raw = self.get(key, path)?;
        raw.parse()
            .map_err(|_| Error::format(path, format!("header field '{key}' has bad value '{raw}'")))
    }
}

/// Split off `#` header lines; returns the parsed header and the remaining
/// lines (the CSV part) as an iterator-ready Vec.
fn split_header<'a>(text: &'a str, path: &str, expected_kind: &str) -> Result<(HeaderMap, Vec<&'a str>)> {
    let mut pairs = Vec::new();
    let mut body = Vec::new();
    let mut in_header = true;
    for line in text.lines() {
        if in_header && line.starts_with('#') {
            let stripped = line.trim_start_matches('#').trim_start();
            let Some((k, v)) = stripped.split_once(": ") else {
                return Err(Error::format(path, format!("malformed header line '{line}'")));
            };
            pairs.push((k.to_string(), v.to_string()));
        } else {
            in_header = false;
            if !line.is_empty() {
                body.push(line);
            }
        }
    }
    let header = HeaderMap { pairs };
    let kind = header.get("kind", path)?;
    if kind != expected_kind {
        return Err(Error::format(path, format!("kind '{kind}', expected '{expected_kind}'")));
    }
    let version: u32 = header.parse("format_version", path)?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format_version {version}")));
    }
    Ok((header, body))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(Error::Io)
}

fn validate_set(
    label: &str,
    expected_n: usize,
    expected_len: usize,
    trajectories: &[Array2<f64>],
) -> Result<()> {
    if trajectories.len() != expected_n {
        return Err(Error::InvalidArgument(format!(
            "{label}: {} trajectories given, header says {expected_n}",
            trajectories.len()
        )));
    }
    for (j, tr) in trajectories.iter().enumerate() {
        if tr.nrows() != expected_len {
            return Err(Error::InvalidArgument(format!(
                "{label}: trajectory {j} has {} steps, header says {expected_len}",
                tr.nrows()
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Population-code counts
// ---------------------------------------------------------------------------

/// Render a counts dataset to its file text.
pub fn lds_counts_string(meta: &LdsMeta, counts: &[Array2<f64>]) -> Result<String> {
    validate_set("counts", meta.n_trajectories, meta.traj_length, counts)?;
    let n_units = counts.first().map(|c| c.ncols()).unwrap_or(0);
    let mut out = String::new();
    push_header(
        &mut out,
        KIND_RING_COUNTS,
        &[
            ("seed", meta.seed.to_string()),
            ("n_trajectories", meta.n_trajectories.to_string()),
            ("traj_length", meta.traj_length.to_string()),
            ("config", meta.config_json.clone()),
        ],
    );
    out.push_str("trajectory,step");
    for i in 0..n_units {
        let _ = write!(out, ",n{i}");
    }
    out.push('\n');
    for (j, tr) in counts.iter().enumerate() {
        if tr.ncols() != n_units {
            return Err(Error::dim("counts width", n_units, tr.ncols()));
        }
        for t in 0..tr.nrows() {
            let _ = write!(out, "{j},{t}");
            for &v in tr.row(t) {
                if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "count at trajectory {j} step {t} is not a whole number: {v}"
                    )));
                }
                let _ = write!(out, ",{}", v as u64);
            }
            out.push('\n');
        }
    }
    Ok(out)
}

fn parse_lds_meta(header: &HeaderMap, path: &str) -> Result<LdsMeta> {
    Ok(LdsMeta {
        seed: header.parse("seed", path)?,
        n_trajectories: header.parse("n_trajectories", path)?,
        traj_length: header.parse("traj_length", path)?,
        config_json: header.get("config", path)?.to_string(),
    })
}

/// Rows must arrive grouped by trajectory with steps counting up from zero.
fn parse_grouped_rows(
    body: &[&str],
    path: &str,
    n_trajectories: usize,
    traj_length: usize,
    n_fields: usize,
    mut parse_fields: impl FnMut(&[&str]) -> Result<Array1<f64>>,
) -> Result<Vec<Array2<f64>>> {
    let mut out: Vec<Array2<f64>> = Vec::with_capacity(n_trajectories);
    let mut current: Option<(usize, Array2<f64>, usize)> = None;
    for line in body {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_fields + 2 {
            return Err(Error::format(path, format!("row has {} fields, expected {}", fields.len(), n_fields + 2)));
        }
        let traj: usize = fields[0]
            .parse()
            .map_err(|_| Error::format(path, format!("bad trajectory id '{}'", fields[0])))?;
        let step: usize = fields[1]
            .parse()
            .map_err(|_| Error::format(path, format!("bad step '{}'", fields[1])))?;
        let row = parse_fields(&fields[2..])?;
        match current.as_mut() {
            Some((cur_traj, ref mut mat, ref mut next_step)) if *cur_traj == traj => {
                if step != *next_step {
                    return Err(Error::format(path, format!("trajectory {traj}: step {step} out of order")));
                }
                mat.row_mut(step).assign(&row);
                *next_step += 1;
            }
            _ => {
                if let Some((done_traj, mat, filled)) = current.take() {
                    if filled != traj_length {
                        return Err(Error::format(
                            path,
                            format!("trajectory {done_traj} has {filled} steps, header says {traj_length}"),
                        ));
                    }
                    out.push(mat);
                }
                if traj != out.len() {
                    return Err(Error::format(path, format!("trajectory ids must count up; got {traj}")));
                }
                if step != 0 {
                    return Err(Error::format(path, format!("trajectory {traj} must start at step 0")));
                }
                let mut mat = Array2::zeros((traj_length, n_fields));
                mat.row_mut(0).assign(&row);
                current = Some((traj, mat, 1));
            }
        }
    }
    if let Some((done_traj, mat, filled)) = current.take() {
        if filled != traj_length {
            return Err(Error::format(
                path,
                format!("trajectory {done_traj} has {filled} steps, header says {traj_length}"),
            ));
        }
        out.push(mat);
    }
    if out.len() != n_trajectories {
        return Err(Error::format(
            path,
            format!("{} trajectories in file, header says {n_trajectories}", out.len()),
        ));
    }
    Ok(out)
}

/// Parse a counts file from its text.
pub fn parse_lds_counts(text: &str, path_label: &str) -> Result<(LdsMeta, Vec<Array2<f64>>)> {
    let (header, body) = split_header(text, path_label, KIND_RING_COUNTS)?;
    let meta = parse_lds_meta(&header, path_label)?;
    if body.is_empty() {
        return Err(Error::format(path_label, "missing CSV header row"));
    }
    let cols: Vec<&str> = body[0].split(',').collect();
    if cols.len() < 3 || cols[0] != "trajectory" || cols[1] != "step" {
        return Err(Error::format(path_label, "bad CSV header row"));
    }
    let n_units = cols.len() - 2;
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("n{i}") {
            return Err(Error::format(path_label, format!("unexpected count column '{c}'")));
        }
    }
    let rows = parse_grouped_rows(
        &body[1..],
        path_label,
        meta.n_trajectories,
        meta.traj_length,
        n_units,
        |fields| {
            fields
                .iter()
                .map(|f| {
                    f.parse::<u64>()
                        .map(|v| v as f64)
                        .map_err(|_| Error::format(path_label, format!("bad count '{f}'")))
                })
                .collect()
        },
    )?;
    Ok((meta, rows))
}

pub fn write_lds_counts(path: &Path, meta: &LdsMeta, counts: &[Array2<f64>]) -> Result<()> {
    std::fs::write(path, lds_counts_string(meta, counts)?).map_err(Error::Io)
}

pub fn read_lds_counts(path: &Path) -> Result<(LdsMeta, Vec<Array2<f64>>)> {
    parse_lds_counts(&read_text(path)?, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Population-code latents
// ---------------------------------------------------------------------------

/// Render a latents dataset (columns position, velocity, gain).
pub fn lds_latents_string(meta: &LdsMeta, latents: &[Array2<f64>]) -> Result<String> {
    validate_set("latents", meta.n_trajectories, meta.traj_length, latents)?;
    let mut out = String::new();
    push_header(
        &mut out,
        KIND_RING_LATENTS,
        &[
            ("seed", meta.seed.to_string()),
            ("n_trajectories", meta.n_trajectories.to_string()),
            ("traj_length", meta.traj_length.to_string()),
            ("config", meta.config_json.clone()),
        ],
    );
    out.push_str("trajectory,step,position,velocity,gain\n");
    for (j, tr) in latents.iter().enumerate() {
        if tr.ncols() != 3 {
            return Err(Error::dim("latents width", 3usize, tr.ncols()));
        }
        for t in 0..tr.nrows() {
            let _ = writeln!(
                out,
                "{j},{t},{},{},{}",
                fmt_f64(tr[[t, 0]]),
                fmt_f64(tr[[t, 1]]),
                fmt_f64(tr[[t, 2]])
            );
        }
    }
    Ok(out)
}

pub fn parse_lds_latents(text: &str, path_label: &str) -> Result<(LdsMeta, Vec<Array2<f64>>)> {
    let (header, body) = split_header(text, path_label, KIND_RING_LATENTS)?;
    let meta = parse_lds_meta(&header, path_label)?;
    if body.is_empty() || body[0] != "trajectory,step,position,velocity,gain" {
        return Err(Error::format(path_label, "bad CSV header row"));
    }
    let rows = parse_grouped_rows(
        &body[1..],
        path_label,
        meta.n_trajectories,
        meta.traj_length,
        3,
        |fields| {
            fields
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::format(path_label, format!("bad float '{f}'")))
                })
                .collect()
        },
    )?;
    Ok((meta, rows))
}

pub fn write_lds_latents(path: &Path, meta: &LdsMeta, latents: &[Array2<f64>]) -> Result<()> {
    std::fs::write(path, lds_latents_string(meta, latents)?).map_err(Error::Io)
}

pub fn read_lds_latents(path: &Path) -> Result<(LdsMeta, Vec<Array2<f64>>)> {
    parse_lds_latents(&read_text(path)?, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// Run-length encoding for binary frames
// ---------------------------------------------------------------------------

/// Encode a flat binary pixel row as alternating off/on run lengths,
/// starting with the (possibly zero) leading off-run.
pub fn rle_encode(row: &ArrayView1<f64>) -> Result<String> {
    let mut runs: Vec<usize> = Vec::new();
    let mut want = 0.0; // current run counts pixels equal to `want`
    let mut run = 0usize;
    for &v in row {
        if v != 0.0 && v != 1.0 {
            return Err(Error::InvalidArgument(format!("pixel value {v} is not binary")));
        }
        if v == want {
            run += 1;
        } else {
            runs.push(run);
            want = v;
            run = 1;
        }
    }
    runs.push(run);
    Ok(runs.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" "))
}

/// Decode run lengths back to a flat binary row of length `len`.
pub fn rle_decode(data: &str, len: usize) -> Result<Array1<f64>> {
    let mut out = Array1::zeros(len);
    let mut pos = 0usize;
    let mut value = 0.0;
    for tok in data.split(' ') {
        let run: usize = tok
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad run length '{tok}'")))?;
        if pos + run > len {
            return Err(Error::InvalidArgument(format!(
                "run lengths overrun the frame: {} > {len}",
                pos + run
            )));
        }
        if value == 1.0 {
            out.slice_mut(ndarray::s![pos..pos + run]).fill(1.0);
        }
        pos += run;
        value = 1.0 - value;
    }
    if pos != len {
        return Err(Error::InvalidArgument(format!("run lengths cover {pos} of {len} pixels")));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Movie frames
// ---------------------------------------------------------------------------

/// Render a movie dataset: per trajectory an `index` record then one
/// `frame` record per step.
pub fn bounce_frames_string(meta: &BounceMeta, trajectories: &[Array2<f64>]) -> Result<String> {
    validate_set("frames", meta.n_trajectories, meta.traj_length, trajectories)?;
    let n_px = meta.frame_size * meta.frame_size;
    let mut out = String::new();
    push_header(
        &mut out,
        KIND_BOUNCE_FRAMES,
        &[
            ("seed", meta.seed.to_string()),
            ("n_trajectories", meta.n_trajectories.to_string()),
            ("traj_length", meta.traj_length.to_string()),
            ("frame_size", meta.frame_size.to_string()),
            ("config", meta.config_json.clone()),
        ],
    );
    out.push_str("record,trajectory,step,data\n");
    for (j, tr) in trajectories.iter().enumerate() {
        if tr.ncols() != n_px {
            return Err(Error::dim("frame width", n_px, tr.ncols()));
        }
        let _ = writeln!(out, "index,{j},{},{}", tr.nrows(), meta.frame_size);
        for t in 0..tr.nrows() {
            let _ = writeln!(out, "frame,{j},{t},{}", rle_encode(&tr.row(t))?);
        }
    }
    Ok(out)
}

pub fn parse_bounce_frames(text: &str, path_label: &str) -> Result<(BounceMeta, Vec<Array2<f64>>)> {
    let (header, body) = split_header(text, path_label, KIND_BOUNCE_FRAMES)?;
    let meta = BounceMeta {
        seed: header.parse("seed", path_label)?,
        n_trajectories: header.parse("n_trajectories", path_label)?,
        traj_length: header.parse("traj_length", path_label)?,
        frame_size: header.parse("frame_size", path_label)?,
        config_json: header.get("config", path_label)?.to_string(),
    };
    if body.is_empty() || body[0] != "record,trajectory,step,data" {
        return Err(Error::format(path_label, "bad CSV header row"));
    }
    let n_px = meta.frame_size * meta.frame_size;
    let mut out: Vec<Array2<f64>> = Vec::with_capacity(meta.n_trajectories);
    let mut current: Option<(usize, Array2<f64>, usize)> = None;
    for line in &body[1..] {
        let mut fields = line.splitn(4, ',');
        let record = fields.next().unwrap_or("");
        let traj: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::format(path_label, format!("bad trajectory id in '{line}'")))?;
        let third: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::format(path_label, format!("bad numeric field in '{line}'")))?;
        let data = fields.next().unwrap_or("");
        match record {
            "index" => {
                if let Some((done_traj, mat, filled)) = current.take() {
                    if filled != mat.nrows() {
                        return Err(Error::format(
                            path_label,
                            format!("trajectory {done_traj} has {filled} frames, index said {}", mat.nrows()),
                        ));
                    }
                    out.push(mat);
                }
                if traj != out.len() {
                    return Err(Error::format(path_label, format!("trajectory ids must count up; got {traj}")));
                }
                let frame_size: usize = data
                    .parse()
                    .map_err(|_| Error::format(path_label, format!("bad frame size '{data}'")))?;
                if frame_size != meta.frame_size {
                    return Err(Error::format(
                        path_label,
                        format!("index frame size {frame_size} does not match header {}", meta.frame_size),
                    ));
                }
                current = Some((traj, Array2::zeros((third, n_px)), 0));
            }
            "frame" => {
                let Some((cur_traj, ref mut mat, ref mut filled)) = current.as_mut() else {
                    return Err(Error::format(path_label, "frame record before any index record"));
                };
                if *cur_traj != traj || third != *filled {
                    return Err(Error::format(
                        path_label,
                        format!("frame {traj}/{third} out of order (expected {cur_traj}/{filled})"),
                    ));
                }
                if third >= mat.nrows() {
                    return Err(Error::format(
                        path_label,
                        format!("trajectory {traj} has more frames than its index declared"),
                    ));
                }
                let row = rle_decode(data, n_px)?;
                mat.row_mut(third).assign(&row);
                *filled += 1;
            }
            other => {
                return Err(Error::format(path_label, format!("unknown record type '{other}'")));
            }
        }
    }
    if let Some((done_traj, mat, filled)) = current.take() {
        if filled != mat.nrows() {
            return Err(Error::format(
                path_label,
                format!("trajectory {done_traj} has {filled} frames, index said {}", mat.nrows()),
            ));
        }
        out.push(mat);
    }
    if out.len() != meta.n_trajectories {
        return Err(Error::format(
            path_label,
            format!("{} trajectories in file, header says {}", out.len(), meta.n_trajectories),
        ));
    }
    for tr in &out {
        if tr.nrows() != meta.traj_length {
            return Err(Error::format(path_label, "trajectory length does not match header"));
        }
    }
    Ok((meta, out))
}

pub fn write_bounce_frames(path: &Path, meta: &BounceMeta, trajectories: &[Array2<f64>]) -> Result<()> {
    std::fs::write(path, bounce_frames_string(meta, trajectories)?).map_err(Error::Io)
}

pub fn read_bounce_frames(path: &Path) -> Result<(BounceMeta, Vec<Array2<f64>>)> {
    parse_bounce_frames(&read_text(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn sample_counts() -> (LdsMeta, Vec<Array2<f64>>) {
        let meta = LdsMeta {
            seed: 42,
            n_trajectories: 2,
            traj_length: 3,
            config_json: r#"{"n_units":4}"#.to_string(),
        };
        let a = ndarray::arr2(&[[0.0, 3.0, 1.0, 0.0], [2.0, 2.0, 0.0, 5.0], [1.0, 0.0, 0.0, 0.0]]);
        let b = ndarray::arr2(&[[9.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0], [4.0, 4.0, 4.0, 4.0]]);
        (meta, vec![a, b])
    }

    #[test]
    fn counts_file_has_the_documented_layout() {
        let (meta, counts) = sample_counts();
        let text = lds_counts_string(&meta, &counts).unwrap();
        let expected = "\
# kind: ring-ppc-counts
# format_version: 1
# seed: 42
# n_trajectories: 2
# traj_length: 3
# config: {\"n_units\":4}
trajectory,step,n0,n1,n2,n3
0,0,0,3,1,0
0,1,2,2,0,5
0,2,1,0,0,0
1,0,9,0,0,1
1,1,0,0,0,0
1,2,4,4,4,4
";
        assert_eq!(text, expected);
    }

    #[test]
    fn counts_round_trip_and_reject_tampering() {
        let (meta, counts) = sample_counts();
        let text = lds_counts_string(&meta, &counts).unwrap();
        let (meta2, counts2) = parse_lds_counts(&text, "mem").unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(counts, counts2);
        // Re-render is byte-identical.
        assert_eq!(lds_counts_string(&meta2, &counts2).unwrap(), text);

        let bad = text.replace("0,1,2,2,0,5", "0,9,2,2,0,5");
        assert!(parse_lds_counts(&bad, "mem").is_err(), "step out of order");
        let bad = text.replace("# seed: 42", "# seed: nope");
        assert!(parse_lds_counts(&bad, "mem").is_err());
        let bad = text.replace("0,1,2,2,0,5\n", "");
        assert!(parse_lds_counts(&bad, "mem").is_err(), "missing row");
    }

    #[test]
    fn fractional_counts_are_rejected_at_write_time() {
        let (meta, mut counts) = sample_counts();
        counts[0][[0, 0]] = 1.5;
        assert!(lds_counts_string(&meta, &counts).is_err());
    }

    #[test]
    fn latents_round_trip_bit_exactly() {
        let meta = LdsMeta {
            seed: 7,
            n_trajectories: 1,
            traj_length: 2,
            config_json: "{}".to_string(),
        };
        let latents = vec![ndarray::arr2(&[
            [0.123456789012345678, -1e-9, 6.5],
            [0.5, 3.25e-4, 9.599999999999999],
        ])];
        let text = lds_latents_string(&meta, &latents).unwrap();
        let (meta2, latents2) = parse_lds_latents(&text, "mem").unwrap();
        assert_eq!(meta, meta2);
        for (a, b) in latents[0].iter().zip(latents2[0].iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "latents must survive bit-exactly");
        }
    }

    #[test]
    fn rle_round_trips_edge_patterns() {
        let cases: Vec<Array1<f64>> = vec![
            arr1(&[0.0, 0.0, 0.0]),
            arr1(&[1.0, 1.0, 1.0]),
            arr1(&[1.0, 0.0, 1.0, 0.0]),
            arr1(&[0.0, 1.0, 1.0, 0.0, 0.0, 1.0]),
            arr1(&[1.0]),
            arr1(&[0.0]),
        ];
        for row in cases {
            let enc = rle_encode(&row.view()).unwrap();
            let dec = rle_decode(&enc, row.len()).unwrap();
            assert_eq!(row, dec, "failed on encoding '{enc}'");
        }
        assert_eq!(rle_encode(&arr1(&[1.0, 1.0, 0.0]).view()).unwrap(), "0 2 1");
        assert!(rle_decode("2 2", 3).is_err(), "overrun");
        assert!(rle_decode("1 1", 3).is_err(), "underrun");
        assert!(rle_encode(&arr1(&[0.5]).view()).is_err(), "non-binary pixel");
    }

    #[test]
    fn movie_files_round_trip_with_index_records() {
        let meta = BounceMeta {
            seed: 5,
            n_trajectories: 2,
            traj_length: 2,
            frame_size: 3,
            config_json: r#"{"n_balls":1}"#.to_string(),
        };
        let t0 = ndarray::arr2(&[
            [0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        ]);
        let t1 = ndarray::arr2(&[
            [0.0; 9],
            [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        ]);
        let trajs = vec![t0, t1];
        let text = bounce_frames_string(&meta, &trajs).unwrap();
        assert!(text.contains("record,trajectory,step,data\n"));
        assert!(text.contains("index,0,2,3\n"));
        assert!(text.contains("frame,0,0,1 2 5 1\n"));
        assert!(text.contains("frame,0,1,0 9\n"));
        assert!(text.contains("frame,1,0,9\n"));
        let (meta2, trajs2) = parse_bounce_frames(&text, "mem").unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(trajs, trajs2);
        assert_eq!(bounce_frames_string(&meta2, &trajs2).unwrap(), text);

        let bad = text.replace("frame,0,1,0 9\n", "");
        assert!(parse_bounce_frames(&bad, "mem").is_err(), "missing frame");
    }

    #[test]
    fn file_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (meta, counts) = sample_counts();
        let path = dir.path().join("counts.csv");
        write_lds_counts(&path, &meta, &counts).unwrap();
        let (meta2, counts2) = read_lds_counts(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(counts, counts2);
    }
}
