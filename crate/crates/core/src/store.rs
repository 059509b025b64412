//! Versioned text artifacts.
//!
//! Every artifact starts with one header line naming its schema, the schema
//! version and a digest of the configuration that produced it. JSON
//! artifacts follow with one record per line; CSV artifacts carry the header
//! as a `#` comment before the column row. Floating-point values are written
//! with 17 significant digits so that loading reproduces every bit.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{self, LabeledExample};
use crate::gbm::{Ensemble, NodeRecord, TreeNode};
use crate::radarnet::{Arch, NetworkWeights, Tensor};
use crate::synth::Scene;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    World,
    RadarWeights,
    Ensemble,
    TrainingSet,
    LossCurve,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 5] = [
        ArtifactKind::World,
        ArtifactKind::RadarWeights,
        ArtifactKind::Ensemble,
        ArtifactKind::TrainingSet,
        ArtifactKind::LossCurve,
    ];

    pub fn schema_name(self) -> &'static str {
        match self {
            ArtifactKind::World => "yodar.world",
            ArtifactKind::RadarWeights => "yodar.radar_weights",
            ArtifactKind::Ensemble => "yodar.ensemble",
            ArtifactKind::TrainingSet => "yodar.fusion_training_set",
            ArtifactKind::LossCurve => "yodar.radar_loss",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactHeader {
    pub schema_name: String,
    pub schema_version: u32,
    pub digest: String,
}

impl ArtifactHeader {
    pub fn new(kind: ArtifactKind, digest: &str) -> Self {
        Self {
            schema_name: kind.schema_name().to_string(),
            schema_version: SCHEMA_VERSION,
            digest: digest.to_string(),
        }
    }

    fn check(&self, kind: ArtifactKind, path: &Path) -> Result<()> {
        if !ArtifactKind::ALL
            .iter()
            .any(|k| k.schema_name() == self.schema_name)
        {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                msg: format!("unknown schema `{}`", self.schema_name),
            });
        }
        if self.schema_name != kind.schema_name() {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                msg: format!(
                    "expected `{}`, found `{}`",
                    kind.schema_name(),
                    self.schema_name
                ),
            });
        }
        if self.schema_version > SCHEMA_VERSION {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                msg: format!(
                    "schema version {} is newer than supported version {SCHEMA_VERSION}",
                    self.schema_version
                ),
            });
        }
        Ok(())
    }
}

/// Decimal text with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_f64(value).as_bytes())
    }
}

/// Compact single-line JSON with 17-digit floats.
pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SeventeenDigits);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Invalid(format!("serialization failed: {e}")))?;
    String::from_utf8(buf).map_err(|e| Error::Invalid(e.to_string()))
}

/// SHA-256 of the configuration's JSON text, as lowercase hex.
pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    let text = to_json_line(config)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    }
}

fn parse_line<T: DeserializeOwned>(path: &Path, line: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| parse_err(path, line, e))
}

/// Splits an artifact into its checked header and the remaining lines
/// paired with 1-based line numbers.
fn open_artifact<'a>(
    path: &Path,
    text: &'a str,
    kind: ArtifactKind,
    header_prefix: &str,
) -> Result<(ArtifactHeader, Vec<(usize, &'a str)>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let head = first
        .strip_prefix(header_prefix)
        .ok_or_else(|| parse_err(path, 1, "missing artifact header"))?;
    let header: ArtifactHeader = parse_line(path, 1, head)?;
    header.check(kind, path)?;
    Ok((header, lines.collect()))
}

fn validation(path: &Path, e: Error) -> Error {
    Error::Validation(format!("{}: {e}", path.display()))
}

pub fn save_world(path: &Path, scenes: &[Scene], digest: &str) -> Result<()> {
    let mut out = to_json_line(&ArtifactHeader::new(ArtifactKind::World, digest))?;
    out.push('\n');
    for s in scenes {
        s.validate()?;
        out.push_str(&to_json_line(s)?);
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn load_world(path: &Path) -> Result<(ArtifactHeader, Vec<Scene>)> {
    let text = read_text(path)?;
    let (header, lines) = open_artifact(path, &text, ArtifactKind::World, "")?;
    let mut scenes = Vec::with_capacity(lines.len());
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let s: Scene = parse_line(path, n, line)?;
        s.validate().map_err(|e| validation(path, e))?;
        scenes.push(s);
    }
    Ok((header, scenes))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsRecord {
    arch: Arch,
    tensors: Vec<Tensor>,
}

pub fn save_weights(path: &Path, w: &NetworkWeights, digest: &str) -> Result<()> {
    w.validate()?;
    let rec = WeightsRecord {
        arch: w.arch,
        tensors: w.tensors.clone(),
    };
    let text = format!(
        "{}\n{}\n",
        to_json_line(&ArtifactHeader::new(ArtifactKind::RadarWeights, digest))?,
        to_json_line(&rec)?
    );
    write_text(path, &text)
}

fn single_record<'a>(path: &Path, lines: &[(usize, &'a str)]) -> Result<(usize, &'a str)> {
    let body: Vec<_> = lines.iter().filter(|(_, l)| !l.trim().is_empty()).collect();
    match body.as_slice() {
        [one] => Ok(**one),
        [] => Err(parse_err(path, 2, "missing payload")),
        [_, extra, ..] => Err(parse_err(path, extra.0, "unexpected extra payload line")),
    }
}

pub fn load_weights(path: &Path) -> Result<(ArtifactHeader, NetworkWeights)> {
    let text = read_text(path)?;
    let (header, lines) = open_artifact(path, &text, ArtifactKind::RadarWeights, "")?;
    let (n, line) = single_record(path, &lines)?;
    let rec: WeightsRecord = parse_line(path, n, line)?;
    let w = NetworkWeights {
        arch: rec.arch,
        tensors: rec.tensors,
    };
    w.validate().map_err(|e| validation(path, e))?;
    Ok((header, w))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleRecord {
    n_features: usize,
    base_score: f64,
    shrinkage: f64,
    trees: Vec<Vec<NodeRecord>>,
}

pub fn save_ensemble(path: &Path, e: &Ensemble, digest: &str) -> Result<()> {
    e.validate()?;
    let rec = EnsembleRecord {
        n_features: e.n_features,
        base_score: e.base_score,
        shrinkage: e.shrinkage,
        trees: e.trees.iter().map(TreeNode::to_preorder).collect(),
    };
    let text = format!(
        "{}\n{}\n",
        to_json_line(&ArtifactHeader::new(ArtifactKind::Ensemble, digest))?,
        to_json_line(&rec)?
    );
    write_text(path, &text)
}

pub fn load_ensemble(path: &Path) -> Result<(ArtifactHeader, Ensemble)> {
    let text = read_text(path)?;
    let (header, lines) = open_artifact(path, &text, ArtifactKind::Ensemble, "")?;
    let (n, line) = single_record(path, &lines)?;
    let rec: EnsembleRecord = parse_line(path, n, line)?;
    let trees = rec
        .trees
        .iter()
        .map(|t| TreeNode::from_preorder(t))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| validation(path, e))?;
    let e = Ensemble {
        n_features: rec.n_features,
        base_score: rec.base_score,
        shrinkage: rec.shrinkage,
        trees,
    };
    e.validate().map_err(|err| validation(path, err))?;
    Ok((header, e))
}

fn csv_artifact(
    kind: ArtifactKind,
    digest: &str,
    columns: &str,
    rows: impl Iterator<Item = String>,
) -> Result<String> {
    let mut out = format!(
        "# {}\n{columns}\n",
        to_json_line(&ArtifactHeader::new(kind, digest))?
    );
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    Ok(out)
}

fn csv_body<'a>(
    path: &Path,
    lines: &[(usize, &'a str)],
    columns: &str,
) -> Result<Vec<(usize, &'a str)>> {
    let (n, head) = lines
        .first()
        .copied()
        .ok_or_else(|| parse_err(path, 2, "missing column header"))?;
    if head != columns {
        return Err(parse_err(
            path,
            n,
            format!("expected columns `{columns}`, found `{head}`"),
        ));
    }
    Ok(lines[1..]
        .iter()
        .copied()
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

pub fn save_training_set(path: &Path, rows: &[LabeledExample], digest: &str) -> Result<()> {
    for r in rows {
        fusion::check_metrics(&r.features)?;
    }
    let text = csv_artifact(
        ArtifactKind::TrainingSet,
        digest,
        &fusion::csv_header(),
        rows.iter().map(fusion::csv_row),
    )?;
    write_text(path, &text)
}

pub fn load_training_set(path: &Path) -> Result<(ArtifactHeader, Vec<LabeledExample>)> {
    let text = read_text(path)?;
    let (header, lines) = open_artifact(path, &text, ArtifactKind::TrainingSet, "# ")?;
    let mut rows = Vec::new();
    for (n, line) in csv_body(path, &lines, &fusion::csv_header())? {
        let r = fusion::parse_csv_row(line, n).map_err(|m| parse_err(path, n, m))?;
        fusion::check_metrics(&r.features).map_err(|e| validation(path, e))?;
        rows.push(r);
    }
    Ok((header, rows))
}

const LOSS_COLUMNS: &str = "epoch,phase,learning_rate,loss";

pub fn save_loss_curve(
    path: &Path,
    history: &[crate::radarnet::EpochStat],
    digest: &str,
) -> Result<()> {
    let rows = history.iter().map(|s| {
        format!(
            "{},{},{},{}",
            s.epoch,
            s.phase,
            fmt_f64(s.learning_rate),
            fmt_f64(s.loss)
        )
    });
    write_text(
        path,
        &csv_artifact(ArtifactKind::LossCurve, digest, LOSS_COLUMNS, rows)?,
    )
}

pub fn load_loss_curve(path: &Path) -> Result<(ArtifactHeader, Vec<crate::radarnet::EpochStat>)> {
    let text = read_text(path)?;
    let (header, lines) = open_artifact(path, &text, ArtifactKind::LossCurve, "# ")?;
    let mut out = Vec::new();
    for (n, line) in csv_body(path, &lines, LOSS_COLUMNS)? {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(parse_err(
                path,
                n,
                format!("expected 4 columns, found {}", f.len()),
            ));
        }
        let bad = |e: &dyn std::fmt::Display| parse_err(path, n, e);
        out.push(crate::radarnet::EpochStat {
            epoch: f[0].parse().map_err(|e| bad(&e))?,
            phase: f[1].parse().map_err(|e| bad(&e))?,
            learning_rate: f[2].parse().map_err(|e| bad(&e))?,
            loss: f[3].parse().map_err(|e| bad(&e))?,
        });
    }
    Ok((header, out))
}

/// Standard file names inside a run directory.
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn world(&self, split: &str) -> PathBuf {
        self.root.join(format!("world_{split}.jsonl"))
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn radar_weights(&self) -> PathBuf {
        self.root.join("radar_weights.json")
    }
    pub fn radar_loss(&self) -> PathBuf {
        self.root.join("radar_loss.csv")
    }
    pub fn fusion_train(&self) -> PathBuf {
        self.root.join("fusion_train.csv")
    }
    pub fn ensemble(&self) -> PathBuf {
        self.root.join("ensemble.json")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}
