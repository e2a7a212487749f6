//! Declarative run configuration read from a TOML file.
//!
//! ```toml
//! task = "custom"
//! classes = ["north", "south"]
//!
//! [paths]
//! data = "names.csv"
//! vocab = "vocab.txt"
//!
//! [tokenizer]
//! max_vocab = 500
//! scheme = "case_marked"
//!
//! [model]
//! preset = "desk"
//! hidden_size = 32
//!
//! [train]
//! n_epochs = 2
//! learning_rate = 1e-3
//! ```

use std::path::{Path, PathBuf};

use nmc_core::bpe::{DEFAULT_MAX_LEN, DEFAULT_MAX_VOCAB};
use nmc_core::data::{ColumnMap, LabelSet, DEFAULT_SPLIT_SEED, DEFAULT_TEST_FRACTION};
use nmc_core::model::ModelConfig;
use nmc_core::normalize::Scheme;
use nmc_core::train::TrainConfig;
use nmc_core::Error;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Race5,
    Ethnicity13,
    Custom,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "race5" => Ok(Task::Race5),
            "ethnicity13" => Ok(Task::Ethnicity13),
            "custom" => Ok(Task::Custom),
            other => Err(format!("unknown task `{other}` (expected race5, ethnicity13 or custom)")),
        }
    }
}

pub fn label_set(task: Task, classes: Option<&[String]>) -> Result<LabelSet, Error> {
    match (task, classes) {
        (Task::Race5, _) => Ok(LabelSet::race5()),
        (Task::Ethnicity13, _) => Ok(LabelSet::ethnicity13()),
        (Task::Custom, Some(c)) if !c.is_empty() => {
            LabelSet::custom("custom", c).map_err(|e| Error::Config(e.to_string()))
        }
        (Task::Custom, _) => Err(Error::Config("task `custom` needs an explicit class list".into())),
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub init_lm: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    pub max_vocab: usize,
    pub scheme: String,
    pub max_len: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            max_vocab: DEFAULT_MAX_VOCAB,
            scheme: Scheme::CaseMarked.as_str().to_string(),
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub first_column: String,
    pub last_column: String,
    pub label_column: String,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let c = ColumnMap::default();
        Self {
            first_column: c.first,
            last_column: c.last,
            label_column: c.label,
            test_fraction: DEFAULT_TEST_FRACTION,
            split_seed: DEFAULT_SPLIT_SEED,
        }
    }
}

impl DataSection {
    pub fn columns(&self) -> ColumnMap {
        ColumnMap {
            first: self.first_column.clone(),
            last: self.last_column.clone(),
            label: self.label_column.clone(),
        }
    }
}

/// `preset` picks the base shape; any other field overrides it.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub hidden_size: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub ffn_size: Option<usize>,
    pub max_positions: Option<usize>,
    pub dropout_rate: Option<f32>,
}

impl ModelSection {
    pub fn build(&self, vocab_size: usize) -> Result<ModelConfig, Error> {
        let mut c = match self.preset.as_deref().unwrap_or("desk") {
            "desk" => ModelConfig::desk(vocab_size),
            "full" => ModelConfig::full(vocab_size),
            other => return Err(Error::Config(format!("unknown model preset `{other}` (expected desk or full)"))),
        };
        c.hidden_size = self.hidden_size.unwrap_or(c.hidden_size);
        c.n_layers = self.n_layers.unwrap_or(c.n_layers);
        c.n_heads = self.n_heads.unwrap_or(c.n_heads);
        c.ffn_size = self.ffn_size.unwrap_or(c.ffn_size);
        c.max_positions = self.max_positions.unwrap_or(c.max_positions);
        c.dropout_rate = self.dropout_rate.unwrap_or(c.dropout_rate);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub classes: Option<Vec<String>>,
    pub paths: Paths,
    pub tokenizer: TokenizerSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.scheme()?;
        Ok(config)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, Error> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn scheme(&self) -> Result<Scheme, Error> {
        self.tokenizer
            .scheme
            .parse()
            .map_err(|e: nmc_core::normalize::NormalizeError| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_settings() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.task, Task::Race5);
        assert_eq!(c.tokenizer.max_vocab, 500);
        assert_eq!(c.scheme().unwrap(), Scheme::CaseMarked);
        assert_eq!((c.train.n_epochs, c.train.batch_size), (4, 128));
        assert_eq!((c.train.learning_rate, c.train.weight_decay), (2e-5, 2e-5));
        let m = c.model.build(500).unwrap();
        assert_eq!(m, ModelConfig::desk(500));
    }

    #[test]
    fn sections_override() {
        let c = RunConfig::parse(
            r#"
            task = "custom"
            classes = ["north", "south"]
            [tokenizer]
            scheme = "underscore_lower"
            [model]
            preset = "full"
            hidden_size = 24
            [train]
            n_epochs = 2
            learning_rate = 1e-3
            "#,
        )
        .unwrap();
        assert_eq!(label_set(c.task, c.classes.as_deref()).unwrap().classes(), ["north", "south"]);
        assert_eq!(c.scheme().unwrap(), Scheme::UnderscoreLower);
        let m = c.model.build(100).unwrap();
        assert_eq!((m.hidden_size, m.n_heads, m.n_layers), (24, 12, 6));
        assert_eq!(c.train.n_epochs, 2);
        assert_eq!(c.train.batch_size, 128);
    }

    #[test]
    fn config_errors() {
        for text in [
            "task = \"custom\"",
            "bogus = 1",
            "[train]\nepochs = 3",
            "[tokenizer]\nscheme = \"camel\"",
        ] {
            let r = RunConfig::parse(text).and_then(|c| label_set(c.task, c.classes.as_deref()).map(|_| c));
            assert!(matches!(r, Err(Error::Config(_))), "{text}");
        }
        let c = RunConfig::parse("[model]\npreset = \"huge\"").unwrap();
        assert!(matches!(c.model.build(10), Err(Error::Config(_))));
        let c = RunConfig::parse("[model]\nn_heads = 3").unwrap();
        assert_eq!(c.model.build(10).unwrap_err().exit_code(), 3);
    }
}
