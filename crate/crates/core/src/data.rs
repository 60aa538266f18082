//! Logged bandit feedback.
//!
//! A [`LoggedDataset`] holds `(x, a, e, r, pi0(a|x))` tuples plus the
//! embedding cardinalities. Embedding dimensions can be *hidden*: they stay
//! in the raw records (the environment used them to generate rewards) but
//! every estimator-facing view sees only [`LoggedDataset::visible_dims`].
//!
//! On disk a dataset is a headered CSV with columns
//! `x_0..x_{dx-1},action,e_0..e_{de-1},reward,pscore` and a JSON sidecar
//! (`<file>.meta.json`) carrying cardinalities, the hidden-dimension mask,
//! and the generating configuration when known.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Distribution, Policy, SUM_TOLERANCE};
use crate::synth::SyntheticConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedRecord {
    pub context: Vec<f64>,
    pub action: usize,
    pub embedding: Vec<usize>,
    pub reward: f64,
    pub logging_propensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedDataset {
    records: Vec<LoggedRecord>,
    num_actions: usize,
    context_dim: usize,
    embedding_cardinalities: Vec<usize>,
    hidden: Vec<bool>,
}

impl LoggedDataset {
    pub fn new(
        records: Vec<LoggedRecord>,
        num_actions: usize,
        embedding_cardinalities: Vec<usize>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidInput(
                "dataset needs at least one record".into(),
            ));
        }
        let context_dim = records[0].context.len();
        for (i, r) in records.iter().enumerate() {
            if r.context.len() != context_dim {
                return Err(Error::InvalidInput(format!(
                    "record {i}: context length {} != {context_dim}",
                    r.context.len()
                )));
            }
            if r.action >= num_actions {
                return Err(Error::InvalidInput(format!(
                    "record {i}: action {} outside [0, {num_actions})",
                    r.action
                )));
            }
            if r.embedding.len() != embedding_cardinalities.len() {
                return Err(Error::InvalidInput(format!(
                    "record {i}: embedding has {} dims, expected {}",
                    r.embedding.len(),
                    embedding_cardinalities.len()
                )));
            }
            if let Some(k) = r
                .embedding
                .iter()
                .zip(&embedding_cardinalities)
                .position(|(v, c)| v >= c)
            {
                return Err(Error::InvalidInput(format!(
                    "record {i}: embedding dim {k} value {} outside cardinality {}",
                    r.embedding[k], embedding_cardinalities[k]
                )));
            }
            if !(r.logging_propensity > 0.0 && r.logging_propensity <= 1.0) {
                return Err(Error::InvalidInput(format!(
                    "record {i}: logging propensity {} outside (0, 1]",
                    r.logging_propensity
                )));
            }
            if !r.reward.is_finite() || r.context.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("record {i}: non-finite value")));
            }
        }
        let hidden = vec![false; embedding_cardinalities.len()];
        Ok(Self {
            records,
            num_actions,
            context_dim,
            embedding_cardinalities,
            hidden,
        })
    }

    /// Marks the given embedding dimensions as hidden from estimators.
    pub fn with_hidden_dims(mut self, dims: &[usize]) -> Result<Self> {
        self.hidden = vec![false; self.embedding_cardinalities.len()];
        for &k in dims {
            if k >= self.hidden.len() {
                return Err(Error::InvalidInput(format!(
                    "hidden dim {k} outside [0, {})",
                    self.hidden.len()
                )));
            }
            self.hidden[k] = true;
        }
        Ok(self)
    }

    pub fn records(&self) -> &[LoggedRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn embedding_cardinalities(&self) -> &[usize] {
        &self.embedding_cardinalities
    }

    pub fn embed_dims(&self) -> usize {
        self.embedding_cardinalities.len()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        (0..self.hidden.len()).filter(|&k| self.hidden[k]).collect()
    }

    /// Embedding dimensions estimators are allowed to use.
    pub fn visible_dims(&self) -> Vec<usize> {
        (0..self.hidden.len())
            .filter(|&k| !self.hidden[k])
            .collect()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.reward).collect()
    }

    /// A new dataset made of the records at `indices` (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidInput("empty selection".into()));
        }
        Ok(Self {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            num_actions: self.num_actions,
            context_dim: self.context_dim,
            embedding_cardinalities: self.embedding_cardinalities.clone(),
            hidden: self.hidden.clone(),
        })
    }

    pub fn metadata(&self, config: Option<&SyntheticConfig>) -> DatasetMetadata {
        DatasetMetadata {
            num_records: self.len(),
            num_actions: self.num_actions,
            context_dim: self.context_dim,
            embedding_cardinalities: self.embedding_cardinalities.clone(),
            hidden_dims: self.hidden_dims(),
            config: config.cloned(),
        }
    }

    /// Writes the CSV and its JSON sidecar.
    pub fn write_csv(&self, path: &Path, config: Option<&SyntheticConfig>) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(file));
        let mut header: Vec<String> = (0..self.context_dim).map(|j| format!("x_{j}")).collect();
        header.push("action".into());
        header.extend((0..self.embed_dims()).map(|k| format!("e_{k}")));
        header.push("reward".into());
        header.push("pscore".into());
        writer
            .write_record(&header)
            .map_err(|e| Error::csv(path, e))?;
        for r in &self.records {
            let mut row: Vec<String> = r.context.iter().map(|x| x.to_string()).collect();
            row.push(r.action.to_string());
            row.extend(r.embedding.iter().map(|v| v.to_string()));
            row.push(r.reward.to_string());
            row.push(r.logging_propensity.to_string());
            writer.write_record(&row).map_err(|e| Error::csv(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;

        let meta_path = sidecar_path(path);
        let meta = serde_json::to_string_pretty(&self.metadata(config))
            .map_err(|e| Error::json(&meta_path, e))?;
        let mut f = File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        f.write_all(meta.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .map_err(|e| Error::io(&meta_path, e))?;
        Ok(())
    }

    /// Reads a CSV written by [`write_csv`](Self::write_csv), using the
    /// sidecar for cardinalities and the hidden-dimension mask.
    pub fn read_csv(path: &Path) -> Result<(Self, DatasetMetadata)> {
        let meta_path = sidecar_path(path);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMetadata =
            serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;

        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let dx = meta.context_dim;
        let de = meta.embedding_cardinalities.len();
        let expected = dx + de + 3;
        let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        if header.len() != expected {
            return Err(Error::malformed(
                path,
                format!("header has {} columns, expected {expected}", header.len()),
            ));
        }
        let mut records = Vec::new();
        for (line, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::csv(path, e))?;
            let field = |j: usize| -> Result<&str> {
                row.get(j).ok_or_else(|| {
                    Error::malformed(path, format!("row {line}: missing column {j}"))
                })
            };
            let parse_f = |j: usize| -> Result<f64> {
                field(j)?
                    .parse::<f64>()
                    .map_err(|e| Error::malformed(path, format!("row {line} col {j}: {e}")))
            };
            let parse_u = |j: usize| -> Result<usize> {
                field(j)?
                    .parse::<usize>()
                    .map_err(|e| Error::malformed(path, format!("row {line} col {j}: {e}")))
            };
            let context = (0..dx).map(parse_f).collect::<Result<Vec<_>>>()?;
            let action = parse_u(dx)?;
            let embedding = (0..de)
                .map(|k| parse_u(dx + 1 + k))
                .collect::<Result<Vec<_>>>()?;
            let reward = parse_f(dx + 1 + de)?;
            let logging_propensity = parse_f(dx + 2 + de)?;
            records.push(LoggedRecord {
                context,
                action,
                embedding,
                reward,
                logging_propensity,
            });
        }
        let data = LoggedDataset::new(
            records,
            meta.num_actions,
            meta.embedding_cardinalities.clone(),
        )?
        .with_hidden_dims(&meta.hidden_dims)?;
        Ok((data, meta))
    }
}

/// One policy's action distribution at every record's context, stored as a
/// dense row-major `n x |A|` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyProbs {
    num_actions: usize,
    probs: Vec<f64>,
}

impl PolicyProbs {
    pub fn new(num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_actions == 0 || probs.is_empty() || !probs.len().is_multiple_of(num_actions) {
            return Err(Error::InvalidInput(format!(
                "{} probabilities do not form rows of width {num_actions}",
                probs.len()
            )));
        }
        for (i, row) in probs.chunks_exact(num_actions).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0))
                || (total - 1.0).abs() > SUM_TOLERANCE
            {
                return Err(Error::InvalidDistribution(format!(
                    "row {i} sums to {total}"
                )));
            }
        }
        Ok(Self { num_actions, probs })
    }

    pub fn from_rows(rows: Vec<Distribution>) -> Result<Self> {
        let num_actions = rows.first().map_or(0, Distribution::len);
        if rows.iter().any(|r| r.len() != num_actions) {
            return Err(Error::InvalidInput("rows have different widths".into()));
        }
        let probs = rows
            .into_iter()
            .flat_map(Distribution::into_inner)
            .collect();
        Self::new(num_actions, probs)
    }

    /// Evaluates `policy` at every record's context.
    pub fn from_policy(policy: &dyn Policy, data: &LoggedDataset) -> Result<Self> {
        let rows = data
            .records()
            .iter()
            .map(|r| policy.distribution(&r.context))
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }

    pub fn len(&self) -> usize {
        self.probs.len() / self.num_actions
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_actions..(i + 1) * self.num_actions]
    }

    pub fn prob(&self, i: usize, action: usize) -> f64 {
        self.probs[i * self.num_actions + action]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.num_actions)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut probs = Vec::with_capacity(indices.len() * self.num_actions);
        for &i in indices {
            probs.extend_from_slice(self.row(i));
        }
        Self {
            num_actions: self.num_actions,
            probs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub num_records: usize,
    pub num_actions: usize,
    pub context_dim: usize,
    pub embedding_cardinalities: Vec<usize>,
    pub hidden_dims: Vec<usize>,
    pub config: Option<SyntheticConfig>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(action: usize, embedding: Vec<usize>) -> LoggedRecord {
        LoggedRecord {
            context: vec![0.5, -1.25],
            action,
            embedding,
            reward: 1.0,
            logging_propensity: 0.5,
        }
    }

    #[test]
    fn rejects_inconsistent_records() {
        assert!(LoggedDataset::new(vec![], 2, vec![2]).is_err());
        assert!(LoggedDataset::new(vec![record(2, vec![0])], 2, vec![2]).is_err());
        assert!(LoggedDataset::new(vec![record(0, vec![2])], 2, vec![2]).is_err());
        assert!(LoggedDataset::new(vec![record(0, vec![0, 0])], 2, vec![2]).is_err());
        let mut r = record(0, vec![1]);
        r.logging_propensity = 0.0;
        assert!(LoggedDataset::new(vec![r], 2, vec![2]).is_err());
        assert!(LoggedDataset::new(vec![record(1, vec![1])], 2, vec![2]).is_ok());
    }

    #[test]
    fn hidden_dims_mask_visible_view() {
        let d = LoggedDataset::new(vec![record(0, vec![0, 1, 2])], 2, vec![2, 2, 3])
            .unwrap()
            .with_hidden_dims(&[1])
            .unwrap();
        assert_eq!(d.visible_dims(), vec![0, 2]);
        assert_eq!(d.hidden_dims(), vec![1]);
        assert!(d.clone().with_hidden_dims(&[3]).is_err());
    }

    #[test]
    fn policy_probs_rows() {
        let p = PolicyProbs::new(2, vec![0.25, 0.75, 1.0, 0.0]).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.row(1), &[1.0, 0.0]);
        assert_eq!(p.prob(0, 1), 0.75);
        assert_eq!(p.select(&[1, 1, 0]).row(2), &[0.25, 0.75]);
        assert!(PolicyProbs::new(2, vec![0.5, 0.6]).is_err());
        assert!(PolicyProbs::new(2, vec![0.5, 0.5, 1.0]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let records = vec![
            LoggedRecord {
                context: vec![0.1, -2.0 / 3.0],
                action: 1,
                embedding: vec![0, 2],
                reward: -1.5e-7,
                logging_propensity: 1.0 / 3.0,
            },
            record(0, vec![1, 0]),
        ];
        let d = LoggedDataset::new(records, 3, vec![2, 3])
            .unwrap()
            .with_hidden_dims(&[1])
            .unwrap();
        d.write_csv(&path, None).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x_0,x_1,action,e_0,e_1,reward,pscore\n"));
        let (back, meta) = LoggedDataset::read_csv(&path).unwrap();
        assert_eq!(back, d);
        assert_eq!(meta.hidden_dims, vec![1]);
    }
}
