//! File formats: time-series CSV, label CSV, and policy JSON.
//!
//! Time-series CSV layout: header `seq_id,t,y1,...,yn` with an optional
//! `action` column (empty on each sequence's last row, since actions sit
//! between consecutive samples) and an optional `latent` column carrying
//! ground-truth state indices. Rows are grouped by `seq_id` with `t`
//! counting up from 0 inside each group.
//!
//! Label CSV layout: `seq_id,t,label` plus the same optional `action`
//! column, used to hand discrete state sequences to transition estimation.
//!
//! Policy JSON: `{"horizon": H, "root": node}` where a node is
//! `{"action": "<action id>", "children": {"<observation id>": node, ...}}`
//! and the root carries children only. Children maps are sorted by key, so
//! serialization is byte-stable.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, PolicyBranch, PolicyNode, PolicyTree, PomdpModel, TimeSeries};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("row {row}: {detail}")]
    Row { row: usize, detail: String },
    #[error("policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A discrete-label sequence, the decoded counterpart of a [`TimeSeries`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSeries {
    pub id: String,
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actions: Option<Vec<usize>>,
}

fn parse_header(header: &csv::StringRecord) -> Result<(usize, bool, bool), FormatError> {
    let cols: Vec<&str> = header.iter().collect();
    if cols.first() != Some(&"seq_id") || cols.get(1) != Some(&"t") {
        return Err(FormatError::Header(
            "expected columns to start with seq_id,t".into(),
        ));
    }
    let mut dim = 0;
    let mut idx = 2;
    while idx < cols.len() && cols[idx] == format!("y{}", dim + 1) {
        dim += 1;
        idx += 1;
    }
    if dim == 0 {
        return Err(FormatError::Header("no y1..yn value columns found".into()));
    }
    let has_action = idx < cols.len() && cols[idx] == "action";
    if has_action {
        idx += 1;
    }
    let has_latent = idx < cols.len() && cols[idx] == "latent";
    if has_latent {
        idx += 1;
    }
    if idx != cols.len() {
        return Err(FormatError::Header(format!(
            "unexpected column '{}'",
            cols[idx]
        )));
    }
    Ok((dim, has_action, has_latent))
}

/// Read all sequences from time-series CSV.
pub fn read_time_series_csv<R: Read>(reader: R) -> Result<Vec<TimeSeries>, FormatError> {
    let mut csv_reader = csv::Reader::from_reader(reader);
    let (dim, has_action, has_latent) = parse_header(csv_reader.headers()?)?;

    struct Partial {
        id: String,
        values: Vec<Vec<f64>>,
        actions: Vec<Option<usize>>,
        latents: Vec<usize>,
    }
    let mut sequences: Vec<Partial> = Vec::new();

    for (i, record) in csv_reader.records().enumerate() {
        let row = i + 2; // 1-based, counting the header line
        let record = record?;
        let bad = |detail: String| FormatError::Row { row, detail };
        let expected_fields = 2 + dim + has_action as usize + has_latent as usize;
        if record.len() != expected_fields {
            return Err(bad(format!(
                "{} fields, expected {expected_fields}",
                record.len()
            )));
        }

        let seq_id = record[0].to_string();
        let t: usize = record[1]
            .parse()
            .map_err(|_| bad(format!("t value '{}' is not an integer", &record[1])))?;

        let is_new = sequences.last().map(|p| p.id != seq_id).unwrap_or(true);
        if is_new {
            if sequences.iter().any(|p| p.id == seq_id) {
                return Err(bad(format!("sequence '{seq_id}' appears in two groups")));
            }
            if t != 0 {
                return Err(bad(format!("sequence '{seq_id}' starts at t = {t}, not 0")));
            }
            sequences.push(Partial {
                id: seq_id,
                values: Vec::new(),
                actions: Vec::new(),
                latents: Vec::new(),
            });
        }
        let part = sequences.last_mut().expect("just ensured non-empty");
        if !is_new && t != part.values.len() {
            return Err(bad(format!(
                "t = {t} out of order, expected {}",
                part.values.len()
            )));
        }

        let mut value = Vec::with_capacity(dim);
        for d in 0..dim {
            let field = &record[2 + d];
            let v: f64 = field
                .parse()
                .map_err(|_| bad(format!("y{} value '{field}' is not a number", d + 1)))?;
            if !v.is_finite() {
                return Err(bad(format!("y{} value '{field}' is not finite", d + 1)));
            }
            value.push(v);
        }
        part.values.push(value);

        if has_action {
            let field = &record[2 + dim];
            if field.is_empty() {
                part.actions.push(None);
            } else {
                let a: usize = field
                    .parse()
                    .map_err(|_| bad(format!("action '{field}' is not an index")))?;
                part.actions.push(Some(a));
            }
        }
        if has_latent {
            let field = &record[2 + dim + has_action as usize];
            let l: usize = field
                .parse()
                .map_err(|_| bad(format!("latent '{field}' is not an index")))?;
            part.latents.push(l);
        }
    }

    if sequences.is_empty() {
        return Err(FormatError::Header("file contains no data rows".into()));
    }

    let mut out = Vec::with_capacity(sequences.len());
    for part in sequences {
        let actions = if has_action {
            // Every row except the last must carry an action.
            let mut acts = Vec::with_capacity(part.actions.len().saturating_sub(1));
            for (t, a) in part.actions.iter().enumerate() {
                match (a, t + 1 == part.values.len()) {
                    (Some(a), false) => acts.push(*a),
                    (None, true) => {}
                    (None, false) => {
                        return Err(FormatError::Row {
                            row: 0,
                            detail: format!(
                                "sequence '{}' is missing the action at t = {t}",
                                part.id
                            ),
                        })
                    }
                    (Some(_), true) => {
                        return Err(FormatError::Row {
                            row: 0,
                            detail: format!(
                                "sequence '{}' has an action on its final row",
                                part.id
                            ),
                        })
                    }
                }
            }
            Some(acts)
        } else {
            None
        };
        let latents = has_latent.then_some(part.latents);
        out.push(TimeSeries::new(part.id, part.values, actions, latents)?);
    }
    Ok(out)
}

/// Write sequences as time-series CSV. The action/latent columns appear if
/// any sequence carries them; numeric values are written with full f64
/// round-trip precision.
pub fn write_time_series_csv<W: Write>(
    writer: W,
    sequences: &[TimeSeries],
) -> Result<(), FormatError> {
    if sequences.is_empty() {
        return Err(FormatError::Header("no sequences to write".into()));
    }
    for s in sequences {
        s.validate()?;
    }
    let dim = sequences[0].dim();
    if sequences.iter().any(|s| s.dim() != dim) {
        return Err(FormatError::Header(
            "sequences have mixed dimensions".into(),
        ));
    }
    let has_action = sequences.iter().any(|s| s.actions.is_some());
    let has_latent = sequences.iter().any(|s| s.latent_states.is_some());

    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["seq_id".to_string(), "t".to_string()];
    header.extend((1..=dim).map(|d| format!("y{d}")));
    if has_action {
        header.push("action".into());
    }
    if has_latent {
        header.push("latent".into());
    }
    w.write_record(&header)?;

    for s in sequences {
        for t in 0..s.len() {
            let mut record = vec![s.id.clone(), t.to_string()];
            record.extend(s.values[t].iter().map(|v| format_f64(*v)));
            if has_action {
                let cell = s
                    .actions
                    .as_ref()
                    .and_then(|a| a.get(t))
                    .map(|a| a.to_string())
                    .unwrap_or_default();
                record.push(cell);
            }
            if has_latent {
                let cell = s
                    .latent_states
                    .as_ref()
                    .map(|l| l[t].to_string())
                    .unwrap_or_default();
                record.push(cell);
            }
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Shortest decimal form that parses back to the identical f64.
fn format_f64(v: f64) -> String {
    let mut buf = ryu_like(v);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_like(v: f64) -> String {
    // Rust's Display for f64 already prints the shortest round-trip form.
    format!("{v}")
}

/// Read label sequences from label CSV (`seq_id,t,label[,action]`).
pub fn read_labels_csv<R: Read>(reader: R) -> Result<Vec<LabelSeries>, FormatError> {
    let mut csv_reader = csv::Reader::from_reader(reader);
    let cols: Vec<String> = csv_reader.headers()?.iter().map(String::from).collect();
    if cols.len() < 3 || cols[0] != "seq_id" || cols[1] != "t" || cols[2] != "label" {
        return Err(FormatError::Header(
            "expected columns seq_id,t,label[,action]".into(),
        ));
    }
    let has_action = match cols.len() {
        3 => false,
        4 if cols[3] == "action" => true,
        _ => {
            return Err(FormatError::Header(format!(
                "unexpected column '{}'",
                cols[3]
            )))
        }
    };

    struct Partial {
        id: String,
        labels: Vec<usize>,
        actions: Vec<Option<usize>>,
    }
    let mut sequences: Vec<Partial> = Vec::new();
    for (i, record) in csv_reader.records().enumerate() {
        let row = i + 2;
        let record = record?;
        let bad = |detail: String| FormatError::Row { row, detail };

        let seq_id = record
            .get(0)
            .ok_or_else(|| bad("missing seq_id".into()))?
            .to_string();
        let t: usize = record
            .get(1)
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad("t is not an integer".into()))?;
        let label: usize = record
            .get(2)
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad("label is not an index".into()))?;

        let is_new = sequences.last().map(|p| p.id != seq_id).unwrap_or(true);
        if is_new {
            if sequences.iter().any(|p| p.id == seq_id) {
                return Err(bad(format!("sequence '{seq_id}' appears in two groups")));
            }
            if t != 0 {
                return Err(bad(format!("sequence '{seq_id}' starts at t = {t}, not 0")));
            }
            sequences.push(Partial {
                id: seq_id,
                labels: Vec::new(),
                actions: Vec::new(),
            });
        }
        let part = sequences.last_mut().expect("just ensured non-empty");
        if !is_new && t != part.labels.len() {
            return Err(bad(format!(
                "t = {t} out of order, expected {}",
                part.labels.len()
            )));
        }
        part.labels.push(label);
        if has_action {
            let field = record.get(3).unwrap_or("");
            if field.is_empty() {
                part.actions.push(None);
            } else {
                let a: usize = field
                    .parse()
                    .map_err(|_| bad(format!("action '{field}' is not an index")))?;
                part.actions.push(Some(a));
            }
        }
    }
    if sequences.is_empty() {
        return Err(FormatError::Header("file contains no data rows".into()));
    }

    let mut out = Vec::with_capacity(sequences.len());
    for part in sequences {
        let actions = if has_action {
            let mut acts = Vec::new();
            for (t, a) in part.actions.iter().enumerate() {
                match (a, t + 1 == part.labels.len()) {
                    (Some(a), false) => acts.push(*a),
                    (None, true) => {}
                    _ => {
                        return Err(FormatError::Row {
                            row: 0,
                            detail: format!(
                                "sequence '{}' action column malformed at t = {t}",
                                part.id
                            ),
                        })
                    }
                }
            }
            Some(acts)
        } else {
            None
        };
        out.push(LabelSeries {
            id: part.id,
            labels: part.labels,
            actions,
        });
    }
    Ok(out)
}

/// Write label sequences as label CSV.
pub fn write_labels_csv<W: Write>(writer: W, sequences: &[LabelSeries]) -> Result<(), FormatError> {
    if sequences.is_empty() {
        return Err(FormatError::Header("no sequences to write".into()));
    }
    let has_action = sequences.iter().any(|s| s.actions.is_some());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["seq_id", "t", "label"];
    if has_action {
        header.push("action");
    }
    w.write_record(&header)?;
    for s in sequences {
        for (t, label) in s.labels.iter().enumerate() {
            let mut record = vec![s.id.clone(), t.to_string(), label.to_string()];
            if has_action {
                let cell = s
                    .actions
                    .as_ref()
                    .and_then(|a| a.get(t))
                    .map(|a| a.to_string())
                    .unwrap_or_default();
                record.push(cell);
            }
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PolicyJson {
    horizon: usize,
    root: PolicyNodeJson,
}

#[derive(Serialize, Deserialize, Default)]
struct PolicyNodeJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    children: BTreeMap<String, PolicyNodeJson>,
}

/// Serialize a policy tree to JSON, with actions and observations written
/// by their model identifiers.
pub fn policy_to_json(policy: &PolicyTree, model: &PomdpModel) -> Result<String, FormatError> {
    policy.validate(model.num_observations(), model.num_actions())?;

    fn convert(node: &PolicyNode, model: &PomdpModel) -> PolicyNodeJson {
        let children = node
            .branches
            .iter()
            .enumerate()
            .map(|(o, branch)| {
                let mut child = convert(&branch.child, model);
                child.action = Some(model.actions[branch.action].clone());
                (model.observations[o].clone(), child)
            })
            .collect();
        PolicyNodeJson {
            action: None,
            children,
        }
    }

    let mut root = convert(&policy.root, model);
    root.action = None;
    let doc = PolicyJson {
        horizon: policy.horizon,
        root,
    };
    Ok(serde_json::to_string_pretty(&doc).expect("policy serializes"))
}

/// Parse a policy tree from JSON, resolving action and observation ids
/// against the model and checking the tree is complete for the horizon.
pub fn policy_from_json(text: &str, model: &PomdpModel) -> Result<PolicyTree, FormatError> {
    let doc: PolicyJson = serde_json::from_str(text)?;

    fn convert(
        node: &PolicyNodeJson,
        model: &PomdpModel,
        depth: usize,
        horizon: usize,
    ) -> Result<PolicyNode, FormatError> {
        if depth == horizon {
            if !node.children.is_empty() {
                return Err(FormatError::Policy(format!(
                    "node at depth {depth} goes past the horizon"
                )));
            }
            return Ok(PolicyNode { branches: vec![] });
        }
        let mut branches = Vec::with_capacity(model.num_observations());
        for (o, obs_id) in model.observations.iter().enumerate() {
            let child_json = node.children.get(obs_id).ok_or_else(|| {
                FormatError::Policy(format!(
                    "node at depth {depth} is missing a branch for observation '{obs_id}'"
                ))
            })?;
            let action_id = child_json.action.as_ref().ok_or_else(|| {
                FormatError::Policy(format!(
                    "branch for observation '{obs_id}' at depth {depth} has no action"
                ))
            })?;
            let action = model
                .actions
                .iter()
                .position(|a| a == action_id)
                .ok_or_else(|| FormatError::Policy(format!("unknown action '{action_id}'")))?;
            let child = convert(child_json, model, depth + 1, horizon)?;
            debug_assert_eq!(branches.len(), o);
            branches.push(PolicyBranch { action, child });
        }
        if node.children.len() != model.num_observations() {
            return Err(FormatError::Policy(format!(
                "node at depth {depth} has {} branches, expected {}",
                node.children.len(),
                model.num_observations()
            )));
        }
        Ok(PolicyNode { branches })
    }

    let root = convert(&doc.root, model, 0, doc.horizon)?;
    let policy = PolicyTree {
        horizon: doc.horizon,
        root,
    };
    policy.validate(model.num_observations(), model.num_actions())?;
    Ok(policy)
}

/// Convenience path-based wrappers.
pub fn read_time_series_file(path: &Path) -> Result<Vec<TimeSeries>, FormatError> {
    read_time_series_csv(std::fs::File::open(path)?)
}

pub fn write_time_series_file(path: &Path, sequences: &[TimeSeries]) -> Result<(), FormatError> {
    write_time_series_csv(std::fs::File::create(path)?, sequences)
}

pub fn read_labels_file(path: &Path) -> Result<Vec<LabelSeries>, FormatError> {
    read_labels_csv(std::fs::File::open(path)?)
}

pub fn write_labels_file(path: &Path, sequences: &[LabelSeries]) -> Result<(), FormatError> {
    write_labels_csv(std::fs::File::create(path)?, sequences)
}
