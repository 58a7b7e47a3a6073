//! Model checkpoints: a single structured-text (JSON) document holding the
//! layer specs and parameter matrices.
//!
//! Writing is hand-rolled so every float is emitted with exactly 17
//! significant decimal digits (`{:.16e}`), which round-trips any finite f64
//! bit-exactly; re-serializing a freshly read checkpoint reproduces the file
//! byte-for-byte. Reading goes through serde_json, which accepts the
//! exponent notation.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::exp_family::{LayerBlock, LayerSpec};
use crate::harmonium::{GradientSet, HarmoniumParams};

/// Version tag written into every checkpoint document.
pub const FORMAT_VERSION: u32 = 1;

/// Format one f64 with 17 significant decimal digits (bit-exact round-trip).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn push_vector(out: &mut String, v: &Array1<f64>) {
    out.push('[');
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{}", fmt_f64(*x));
    }
    out.push(']');
}

fn push_matrix(out: &mut String, m: &Array2<f64>) {
    out.push('[');
    for (i, row) in m.outer_iter().enumerate() {
        if i > 0 {
            out.push_str(",\n    ");
        }
        out.push('[');
        for (j, x) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", fmt_f64(*x));
        }
        out.push(']');
    }
    out.push(']');
}

fn push_spec(out: &mut String, spec: &LayerSpec) {
    out.push('[');
    for (i, b) in spec.blocks().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let fam = match b.family {
            crate::exp_family::UnitFamily::Bernoulli => "bernoulli",
            crate::exp_family::UnitFamily::Poisson => "poisson",
        };
        let _ = write!(out, "{{\"family\":\"{fam}\",\"count\":{}}}", b.count);
    }
    out.push(']');
}

fn push_param_fields(out: &mut String, indent: &str, params: &HarmoniumParams) {
    let _ = write!(out, "{indent}\"obs_spec\": ");
    push_spec(out, &params.obs_spec);
    out.push_str(",\n");
    let _ = write!(out, "{indent}\"rcrnt_spec\": ");
    push_spec(out, &params.rcrnt_spec);
    out.push_str(",\n");
    let _ = write!(out, "{indent}\"hid_spec\": ");
    push_spec(out, &params.hid_spec);
    out.push_str(",\n");
    let _ = write!(out, "{indent}\"w\": ");
    push_matrix(out, &params.w);
    out.push_str(",\n");
    let _ = write!(out, "{indent}\"u\": ");
    push_matrix(out, &params.u);
    out.push_str(",\n");
    let _ = write!(out, "{indent}\"b_hid\": ");
    push_vector(out, &params.b_hid);
    out.push_str(",\n");
    let _ = write!(out, "{indent}\"b_obs\": ");
    push_vector(out, &params.b_obs);
    out.push_str(",\n");
    let _ = write!(out, "{indent}\"b_rcrnt\": ");
    push_vector(out, &params.b_rcrnt);
}

/// Render a checkpoint document.
pub fn checkpoint_string(params: &HarmoniumParams) -> String {
    let mut out = String::new();
    out.push_str("{\n");
    let _ = write!(out, "  \"format_version\": {FORMAT_VERSION},\n");
    out.push_str("  \"kind\": \"harmonium-checkpoint\",\n");
    push_param_fields(&mut out, "  ", params);
    out.push_str("\n}\n");
    out
}

/// Write a checkpoint to a file.
pub fn write_checkpoint(path: &Path, params: &HarmoniumParams) -> Result<()> {
    params.validate()?;
    std::fs::write(path, checkpoint_string(params))?;
    Ok(())
}

#[derive(Deserialize)]
struct ParamsDoc {
    format_version: u32,
    #[serde(default)]
    kind: Option<String>,
    obs_spec: Vec<LayerBlock>,
    rcrnt_spec: Vec<LayerBlock>,
    hid_spec: Vec<LayerBlock>,
    w: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    b_hid: Vec<f64>,
    b_obs: Vec<f64>,
    b_rcrnt: Vec<f64>,
}

fn matrix_from_rows(path: &Path, name: &str, rows: Vec<Vec<f64>>, ncols_hint: Option<usize>) -> Result<Array2<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).or(ncols_hint).unwrap_or(0);
    let mut flat = Vec::with_capacity(nrows * ncols);
    for (i, row) in rows.into_iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::format(
                path.display(),
                format!("ragged matrix `{name}`: row {i} has {} entries, expected {ncols}", row.len()),
            ));
        }
        flat.extend(row);
    }
    Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| Error::format(path.display(), format!("matrix `{name}`: {e}")))
}

fn params_from_doc(path: &Path, doc: ParamsDoc) -> Result<HarmoniumParams> {
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::format(
            path.display(),
            format!("unsupported format_version {}", doc.format_version),
        ));
    }
    if let Some(kind) = &doc.kind {
        if kind != "harmonium-checkpoint" {
            return Err(Error::format(path.display(), format!("unexpected kind `{kind}`")));
        }
    }
    let obs_spec = LayerSpec::new(doc.obs_spec)?;
    let rcrnt_spec = LayerSpec::new(doc.rcrnt_spec)?;
    let hid_spec = LayerSpec::new(doc.hid_spec)?;
    let params = HarmoniumParams {
        w: matrix_from_rows(path, "w", doc.w, Some(obs_spec.len()))?,
        u: matrix_from_rows(path, "u", doc.u, Some(rcrnt_spec.len()))?,
        b_hid: Array1::from_vec(doc.b_hid),
        b_obs: Array1::from_vec(doc.b_obs),
        b_rcrnt: Array1::from_vec(doc.b_rcrnt),
        obs_spec,
        rcrnt_spec,
        hid_spec,
    };
    params
        .validate()
        .map_err(|e| Error::format(path.display(), format!("inconsistent checkpoint: {e}")))?;
    Ok(params)
}

/// Read a checkpoint from a file (shape- and domain-validated).
pub fn read_checkpoint(path: &Path) -> Result<HarmoniumParams> {
    let text = std::fs::read_to_string(path)?;
    let doc: ParamsDoc = serde_json::from_str(&text)
        .map_err(|e| Error::format(path.display(), e.to_string()))?;
    params_from_doc(path, doc)
}

// ---------------------------------------------------------------------------
// Resumable training state (params + optimizer velocity + position)
// ---------------------------------------------------------------------------

/// Snapshot of an in-flight training run, written at batch renewals so an
/// interrupted run can resume to an identical result.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed epochs.
    pub epochs_done: usize,
    pub params: HarmoniumParams,
    pub velocity: GradientSet,
}

/// Render a training-state document (same float discipline as checkpoints).
pub fn train_state_string(state: &TrainState) -> String {
    let mut out = String::new();
    out.push_str("{\n");
    let _ = write!(out, "  \"format_version\": {FORMAT_VERSION},\n");
    out.push_str("  \"kind\": \"train-state\",\n");
    let _ = write!(out, "  \"epochs_done\": {},\n", state.epochs_done);
    push_param_fields(&mut out, "  ", &state.params);
    out.push_str(",\n");
    let _ = write!(out, "  \"v_w\": ");
    push_matrix(&mut out, &state.velocity.dw);
    out.push_str(",\n  \"v_u\": ");
    push_matrix(&mut out, &state.velocity.du);
    out.push_str(",\n  \"v_b_hid\": ");
    push_vector(&mut out, &state.velocity.db_hid);
    out.push_str(",\n  \"v_b_obs\": ");
    push_vector(&mut out, &state.velocity.db_obs);
    out.push_str(",\n  \"v_b_rcrnt\": ");
    push_vector(&mut out, &state.velocity.db_rcrnt);
    out.push_str("\n}\n");
    out
}

pub fn write_train_state(path: &Path, state: &TrainState) -> Result<()> {
    state.params.validate()?;
    std::fs::write(path, train_state_string(state))?;
    Ok(())
}

#[derive(Deserialize)]
struct TrainStateDoc {
    format_version: u32,
    kind: String,
    epochs_done: usize,
    obs_spec: Vec<LayerBlock>,
    rcrnt_spec: Vec<LayerBlock>,
    hid_spec: Vec<LayerBlock>,
    w: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    b_hid: Vec<f64>,
    b_obs: Vec<f64>,
    b_rcrnt: Vec<f64>,
    v_w: Vec<Vec<f64>>,
    v_u: Vec<Vec<f64>>,
    v_b_hid: Vec<f64>,
    v_b_obs: Vec<f64>,
    v_b_rcrnt: Vec<f64>,
}

pub fn read_train_state(path: &Path) -> Result<TrainState> {
    let text = std::fs::read_to_string(path)?;
    let doc: TrainStateDoc = serde_json::from_str(&text)
        .map_err(|e| Error::format(path.display(), e.to_string()))?;
    if doc.kind != "train-state" {
        return Err(Error::format(path.display(), format!("unexpected kind `{}`", doc.kind)));
    }
    let params_doc = ParamsDoc {
        format_version: doc.format_version,
        kind: Some("harmonium-checkpoint".into()),
        obs_spec: doc.obs_spec,
        rcrnt_spec: doc.rcrnt_spec,
        hid_spec: doc.hid_spec,
        w: doc.w,
        u: doc.u,
        b_hid: doc.b_hid,
        b_obs: doc.b_obs,
        b_rcrnt: doc.b_rcrnt,
    };
    let params = params_from_doc(path, params_doc)?;
    let velocity = GradientSet {
        dw: matrix_from_rows(path, "v_w", doc.v_w, Some(params.n_obs()))?,
        du: matrix_from_rows(path, "v_u", doc.v_u, Some(params.n_rcrnt()))?,
        db_hid: Array1::from_vec(doc.v_b_hid),
        db_obs: Array1::from_vec(doc.v_b_obs),
        db_rcrnt: Array1::from_vec(doc.v_b_rcrnt),
    };
    if velocity.dw.dim() != params.w.dim()
        || velocity.du.dim() != params.u.dim()
        || velocity.db_hid.len() != params.b_hid.len()
        || velocity.db_obs.len() != params.b_obs.len()
        || velocity.db_rcrnt.len() != params.b_rcrnt.len()
    {
        return Err(Error::format(path.display(), "velocity/parameter shape mismatch"));
    }
    Ok(TrainState { epochs_done: doc.epochs_done, params, velocity })
}
