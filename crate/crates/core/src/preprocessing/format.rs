//! Text layouts of dataset archives.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::SelectionConfig;
use crate::collection::package::{read_zip, write_zip};
use crate::domain::{ArtifactId, FeatureFamily};
use crate::error::{Error, Result};

/// Escapes tab, newline, carriage return and backslash so any token fits in
/// one tab-separated field.
pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            _ => return Err(Error::Parse(format!("bad escape in {s:?}"))),
        }
    }
    Ok(out)
}

fn text(files: &BTreeMap<String, Vec<u8>>, name: &str) -> Result<String> {
    let bytes = files
        .get(name)
        .ok_or_else(|| Error::Parse(format!("{name} missing from dataset")))?;
    String::from_utf8(bytes.clone()).map_err(|_| Error::Parse(format!("{name}: not UTF-8")))
}

fn parse_labels(body: &str, file: &str) -> Result<Vec<(ArtifactId, String)>> {
    body.lines()
        .enumerate()
        .map(|(i, line)| {
            let (id, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("{file}:{}", i + 1)))?;
            Ok((id.parse()?, unescape(label)?))
        })
        .collect()
}

fn write_labels(ids: &[ArtifactId], labels: &[String]) -> String {
    ids.iter()
        .zip(labels)
        .map(|(id, l)| format!("{id}\t{}\n", escape(l)))
        .collect()
}

/// Token vocabulary and sparse rows of one family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyTable {
    pub vocabulary: Vec<String>,
    /// Ascending vocabulary indices, aligned with the dataset's labels.
    pub rows: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedDataset {
    pub config: SelectionConfig,
    pub labels: Vec<(ArtifactId, String)>,
    pub families: BTreeMap<FeatureFamily, FamilyTable>,
}

impl SelectedDataset {
    pub fn to_zip(&self) -> Result<Vec<u8>> {
        let mut files: Vec<(String, Vec<u8>)> = vec![
            ("config.json".into(), serde_json::to_vec_pretty(&self.config)?),
            (
                "labels.txt".into(),
                self.labels
                    .iter()
                    .map(|(id, l)| format!("{id}\t{}\n", escape(l)))
                    .collect::<String>()
                    .into_bytes(),
            ),
        ];
        for (family, table) in &self.families {
            let cols: String = table.vocabulary.iter().map(|t| format!("{}\n", escape(t))).collect();
            let rows: String = self
                .labels
                .iter()
                .zip(&table.rows)
                .map(|((id, _), idx)| {
                    let idx: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
                    format!("{id}\t{}\n", idx.join(" "))
                })
                .collect();
            files.push((format!("{family}.cols"), cols.into_bytes()));
            files.push((format!("{family}.rows"), rows.into_bytes()));
        }
        let entries: Vec<(&str, &[u8])> = files.iter().map(|(n, b)| (n.as_str(), b.as_slice())).collect();
        write_zip(&entries)
    }

    pub fn from_zip(bytes: &[u8]) -> Result<Self> {
        let files = read_zip(bytes)?;
        let config: SelectionConfig = serde_json::from_str(&text(&files, "config.json")?)?;
        let labels = parse_labels(&text(&files, "labels.txt")?, "labels.txt")?;
        let mut families = BTreeMap::new();
        for family in &config.families {
            let vocabulary = text(&files, &format!("{family}.cols"))?
                .lines()
                .map(unescape)
                .collect::<Result<Vec<_>>>()?;
            let file = format!("{family}.rows");
            let mut rows = Vec::with_capacity(labels.len());
            for (i, line) in text(&files, &file)?.lines().enumerate() {
                let (id, idx) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::Parse(format!("{file}:{}", i + 1)))?;
                if labels.get(i).map(|(l, _)| l.as_str()) != Some(id) {
                    return Err(Error::Parse(format!("{file}:{}: row order", i + 1)));
                }
                let idx = idx
                    .split_whitespace()
                    .map(|s| s.parse::<usize>().map_err(|_| Error::Parse(format!("{file}:{}", i + 1))))
                    .collect::<Result<Vec<_>>>()?;
                rows.push(idx);
            }
            families.insert(*family, FamilyTable { vocabulary, rows });
        }
        Ok(Self {
            config,
            labels,
            families,
        })
    }
}

/// Rows of one partition with their ids, labels and column ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMatrix {
    pub columns: Vec<String>,
    pub ids: Vec<ArtifactId>,
    pub labels: Vec<String>,
    pub data: DMatrix<f64>,
}

impl LabeledMatrix {
    fn mat_text(&self) -> String {
        let mut out = self.columns.iter().map(|c| escape(c)).collect::<Vec<_>>().join("\t");
        out.push('\n');
        for row in self.data.row_iter() {
            let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    fn parse(mat: &str, labels: &str, name: &str) -> Result<Self> {
        let mut lines = mat.lines();
        let header = lines.next().ok_or_else(|| Error::Parse(format!("{name}.mat: header")))?;
        let columns = if header.is_empty() {
            Vec::new()
        } else {
            header.split('\t').map(unescape).collect::<Result<Vec<_>>>()?
        };
        let mut values = Vec::new();
        let mut nrows = 0;
        for (i, line) in lines.enumerate() {
            let row = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Parse(format!("{name}.mat:{}", i + 2)))?;
            if row.len() != columns.len() {
                return Err(Error::Parse(format!("{name}.mat:{}: width", i + 2)));
            }
            values.extend(row);
            nrows += 1;
        }
        let (ids, labels): (Vec<_>, Vec<_>) = parse_labels(labels, &format!("{name}.labels"))?.into_iter().unzip();
        if ids.len() != nrows {
            return Err(Error::Parse(format!("{name}.labels: row count")));
        }
        Ok(Self {
            data: DMatrix::from_row_slice(nrows, columns.len(), &values),
            columns,
            ids,
            labels,
        })
    }
}

/// Train/test matrices plus a JSON description of how they were made.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub meta: serde_json::Value,
    pub train: LabeledMatrix,
    pub test: LabeledMatrix,
}

const META_FILE: &str = "config.json";

impl TabularDataset {
    pub fn to_zip(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec_pretty(&self.meta)?;
        let train = self.train.mat_text();
        let test = self.test.mat_text();
        let train_labels = write_labels(&self.train.ids, &self.train.labels);
        let test_labels = write_labels(&self.test.ids, &self.test.labels);
        write_zip(&[
            (META_FILE, meta.as_slice()),
            ("train.mat", train.as_bytes()),
            ("test.mat", test.as_bytes()),
            ("train.labels", train_labels.as_bytes()),
            ("test.labels", test_labels.as_bytes()),
        ])
    }

    pub fn from_zip(bytes: &[u8]) -> Result<Self> {
        let files = read_zip(bytes)?;
        let train = LabeledMatrix::parse(&text(&files, "train.mat")?, &text(&files, "train.labels")?, "train")?;
        let test = LabeledMatrix::parse(&text(&files, "test.mat")?, &text(&files, "test.labels")?, "test")?;
        if train.columns != test.columns {
            return Err(Error::Parse("test.mat: columns differ from train.mat".into()));
        }
        Ok(Self {
            meta: serde_json::from_str(&text(&files, META_FILE)?)?,
            train,
            test,
        })
    }

    /// Sorted distinct labels over both partitions.
    pub fn classes(&self) -> Vec<String> {
        let mut c: Vec<String> = self.train.labels.iter().chain(&self.test.labels).cloned().collect();
        c.sort();
        c.dedup();
        c
    }
}
