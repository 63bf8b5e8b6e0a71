//! Run configuration: a JSON document `{"command": ..., "params": {...}}`.
//! Every field of [`Params`] is also a command-line flag of the same name;
//! flags given on the command line override the file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum CommandName {
    #[serde(rename = "capacity")]
    Capacity,
    #[serde(rename = "spectrum")]
    Spectrum,
    #[serde(rename = "converge")]
    Converge,
    #[serde(rename = "simulate")]
    Simulate,
    #[serde(rename = "audit")]
    Audit,
    #[serde(rename = "ml-demo")]
    #[value(name = "ml-demo")]
    MlDemo,
    #[serde(rename = "reproduce_all")]
    #[value(name = "reproduce_all")]
    ReproduceAll,
}

impl fmt::Display for CommandName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.to_possible_value().expect("no skipped variants");
        f.write_str(v.get_name())
    }
}

/// Integer grid axis: `5`, `2..4` (inclusive), `2,3,7`, or a mix `2..4,9`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntList(Vec<u64>);

/// Largest number of values one axis may expand to.
const MAX_AXIS: u64 = 10_000;

impl IntList {
    pub fn values(&self) -> &[u64] {
        &self.0
    }

    pub fn single(&self, name: &str) -> Result<u64, CliError> {
        match self.0[..] {
            [v] => Ok(v),
            _ => Err(CliError::Validation(format!(
                "--{name} takes a single value here, got {self}"
            ))),
        }
    }
}

impl FromStr for IntList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim) {
            let parse = |t: &str| {
                t.trim()
                    .parse::<u64>()
                    .map_err(|_| format!("`{t}` is not a non-negative integer"))
            };
            if let Some((a, b)) = part.split_once("..") {
                let (a, b) = (parse(a)?, parse(b.trim_start_matches('='))?);
                if a > b {
                    return Err(format!("empty range `{part}`"));
                }
                if b - a >= MAX_AXIS {
                    return Err(format!("range `{part}` longer than {MAX_AXIS}"));
                }
                out.extend(a..=b);
            } else {
                out.push(parse(part)?);
            }
        }
        if out.is_empty() {
            return Err("empty list".into());
        }
        Ok(Self(out))
    }
}

impl fmt::Display for IntList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // compress consecutive runs back into ranges
        let mut first = true;
        let mut i = 0;
        while i < self.0.len() {
            let mut j = i;
            while j + 1 < self.0.len() && self.0[j + 1] == self.0[j] + 1 {
                j += 1;
            }
            if !first {
                f.write_str(",")?;
            }
            first = false;
            if j > i {
                write!(f, "{}..{}", self.0[i], self.0[j])?;
            } else {
                write!(f, "{}", self.0[i])?;
            }
            i = j + 1;
        }
        Ok(())
    }
}

impl Serialize for IntList {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0[..] {
            [v] => s.serialize_u64(v),
            _ => s.serialize_str(&self.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for IntList {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Self(vec![v])),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AuditModeArg {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MlTask {
    Svm,
    Regression,
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Drop one column from the increment enumeration.
    DeltaOffByOne,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct Params {
    /// Field size(s)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<IntList>,
    /// Number of database files (grid allowed for `capacity` and `spectrum`)
    #[arg(long = "K")]
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<IntList>,
    /// Number of virtual files, decoupled from K
    #[arg(long = "T", conflicts_with = "k")]
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub t: Option<IntList>,
    /// Number of servers
    #[arg(long = "N")]
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub n: Option<IntList>,
    /// Number of requested inner products
    #[arg(long = "P")]
    #[serde(rename = "P", skip_serializing_if = "Option::is_none")]
    pub p: Option<IntList>,
    /// File length (finite-length correction; database length in `simulate`)
    #[arg(long = "L")]
    #[serde(rename = "L", skip_serializing_if = "Option::is_none")]
    pub l: Option<u64>,
    /// Longest file length traced by `converge`
    #[arg(long = "Lmax")]
    #[serde(rename = "Lmax", skip_serializing_if = "Option::is_none")]
    pub l_max: Option<usize>,
    /// Symbols per virtual file (database instances)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu: Option<usize>,
    /// Number of independent runs
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<usize>,
    /// Master seed
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Retrieval scheme: full_download, repeated_pir, repeated_pir_unrelabeled, plaintext
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    /// Audit mode
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<AuditModeArg>,
    /// Samples per request set in sampled audits
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// Dataset CSV for `ml-demo`
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Label column of the dataset
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Learning task
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<MlTask>,
    /// Obtain the Gram matrix through the retrieval simulator
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub private: Option<bool>,
    /// Compute the Gram matrix directly from the data
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direct: Option<bool>,
    /// Fixed-point scale for the private pipeline
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    /// Principal components to compute
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    /// Upper bound on SVM dual variables (soft margin)
    #[arg(long = "box")]
    #[serde(rename = "box", skip_serializing_if = "Option::is_none")]
    pub box_cap: Option<f64>,
    /// Append a constant feature for regression (default true)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augmented: Option<bool>,
    /// Report path; stdout when absent
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<OutputFormat>,
    /// Include wall-clock time in the report (breaks byte-for-byte reproducibility)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<bool>,
    /// Add diagnostic fields (capacity: the bounds with sides swapped and the raw root fraction)
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verbose: Option<bool>,
    /// Negative control for the harness
    #[arg(long, value_enum, hide = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inject_fault: Option<Fault>,
}

macro_rules! overlay {
    ($base:expr, $top:expr, $($field:ident),*) => {
        Params { $($field: $top.$field.or($base.$field)),* }
    };
}

impl Params {
    /// Fields set in `top` win.
    pub fn overlay(self, top: Params) -> Params {
        overlay!(
            self,
            top,
            q,
            k,
            t,
            n,
            p,
            l,
            l_max,
            nu,
            seeds,
            seed,
            scheme,
            mode,
            samples,
            dataset,
            label,
            task,
            private,
            direct,
            scale,
            components,
            box_cap,
            augmented,
            output,
            format,
            timing,
            verbose,
            inject_fault
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: CommandName,
    #[serde(default)]
    pub params: Params,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// File values overlaid with command-line flags. The file's command, if
    /// any, must agree with the one invoked.
    pub fn resolve(command: CommandName, file: Option<RunConfig>, flags: Params) -> Result<Self, CliError> {
        let base = match file {
            Some(cfg) if cfg.command != command => {
                return Err(CliError::Validation(format!(
                    "config file is for `{}`, not `{command}`",
                    cfg.command
                )))
            }
            Some(cfg) => cfg.params,
            None => Params::default(),
        };
        Ok(Self {
            command,
            params: base.overlay(flags),
        })
    }
}
